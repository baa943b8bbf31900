"""Run the component and suppression ablations on one manifest and tabulate mIoU.

    python scripts/run_ablations.py --config run.json --checkpoint w.safetensors \
        --classes voc21.bin --manifest voc21.json --limit 50 --out ablations.csv
"""

import argparse
import csv
import logging
import time

from rfclip.config import RunConfig
from rfclip.model_io import load_checkpoint, load_class_embeddings, load_manifest
from rfclip.pipeline import evaluate

VARIANTS = {
    "plain_clip": dict(mode="plain_clip"),
    "kk_proxy_baseline": dict(mode="kk_proxy_baseline"),
    "attention_only": dict(mode="refocus", embedding_redistribution=False),
    "embedding_only": dict(mode="refocus", attention_redistribution=False),
    "refocus": dict(mode="refocus"),
    "refocus_otsu": dict(mode="refocus", threshold_rule="otsu"),
    "budget_to_cls": dict(mode="refocus", budget_target="cls"),
    "budget_to_all_others": dict(mode="refocus", budget_target="non_distraction"),
    "neg_inf_mask": dict(mode="suppression:neg_inf_mask"),
    "low_pass": dict(mode="suppression:low_pass"),
    "mean_filter": dict(mode="suppression:mean_filter"),
    "median_filter": dict(mode="suppression:median_filter"),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--classes", required=True)
    ap.add_argument("--manifest", required=True)
    ap.add_argument("--limit", type=int)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--only", nargs="+", choices=sorted(VARIANTS))
    ap.add_argument("--out", default="ablations.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    run = RunConfig.load(args.config).replace(workers=args.workers)
    ckpt = load_checkpoint(args.checkpoint, run.model)
    classes = load_class_embeddings(args.classes, run.model.output_dim)
    manifest = load_manifest(args.manifest)
    rows = []
    for name in args.only or VARIANTS:
        t0 = time.perf_counter()
        report = evaluate(manifest, ckpt, classes, run.replace(**VARIANTS[name]), args.limit)
        rows.append({"variant": name, "miou": report.miou, "images": report.num_images,
                     "seconds": round(time.perf_counter() - t0, 1)})
        logging.info("%-22s mIoU %s", name, "n/a" if report.miou is None else f"{100 * report.miou:.2f}")
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(args.out)


if __name__ == "__main__":
    main()
