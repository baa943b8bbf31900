"""Build a dataset manifest from an image directory and a label directory.

Pairs files by stem, e.g. for PASCAL VOC::

    python scripts/build_manifest.py VOC2012/JPEGImages VOC2012/SegmentationClass \
        --split VOC2012/ImageSets/Segmentation/val.txt --classes names_voc21.txt -o voc21.json
"""

import argparse
from pathlib import Path

from rfclip.model_io import save_manifest


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("images", type=Path)
    ap.add_argument("labels", type=Path)
    ap.add_argument("--classes", type=Path, required=True, help="one class per line (first comma field used)")
    ap.add_argument("--split", type=Path, help="optional list of stems to keep")
    ap.add_argument("--ignore-index", type=int, default=255)
    ap.add_argument("--label-suffix", default=".png")
    ap.add_argument("-o", "--output", type=Path, required=True)
    args = ap.parse_args()

    names = [ln.split(",")[0].strip() for ln in args.classes.read_text().splitlines() if ln.strip()]
    images = {p.stem: p for p in args.images.iterdir() if p.suffix.lower() in (".jpg", ".jpeg", ".png", ".ppm")}
    stems = sorted(images)
    if args.split:
        keep = {s.strip() for s in args.split.read_text().split()}
        stems = [s for s in stems if s in keep]
    items = [(images[s], args.labels / (s + args.label_suffix)) for s in stems
             if (args.labels / (s + args.label_suffix)).exists()]
    save_manifest(args.output, items, names, args.ignore_index)
    print(f"{len(items)} pairs -> {args.output}")


if __name__ == "__main__":
    main()
