"""Encode class names with a CLIP text tower into an rfclip class-embedding file.

Each class is embedded with the 80 ImageNet prompt templates; the normalized
prompt embeddings are averaged and renormalized. A line in the names file may
list synonyms separated by commas; their ensembles are averaged as well and
the first name labels the class.

    python scripts/encode_classes.py names_voc21.txt voc21.bin --model openai/clip-vit-base-patch16

Needs ``torch`` and ``transformers`` (not package dependencies).
"""

import argparse
from pathlib import Path

import numpy as np

from rfclip.model_io import save_class_embeddings

TEMPLATES = [
    "a bad photo of a {}.", "a photo of many {}.", "a sculpture of a {}.", "a photo of the hard to see {}.",
    "a low resolution photo of the {}.", "a rendering of a {}.", "graffiti of a {}.", "a bad photo of the {}.",
    "a cropped photo of the {}.", "a tattoo of a {}.", "the embroidered {}.", "a photo of a hard to see {}.",
    "a bright photo of a {}.", "a photo of a clean {}.", "a photo of a dirty {}.", "a dark photo of the {}.",
    "a drawing of a {}.", "a photo of my {}.", "the plastic {}.", "a photo of the cool {}.",
    "a close-up photo of a {}.", "a black and white photo of the {}.", "a painting of the {}.",
    "a painting of a {}.", "a pixelated photo of the {}.", "a sculpture of the {}.", "a bright photo of the {}.",
    "a cropped photo of a {}.", "a plastic {}.", "a photo of the dirty {}.", "a jpeg corrupted photo of a {}.",
    "a blurry photo of the {}.", "a photo of the {}.", "a good photo of the {}.", "a rendering of the {}.",
    "a {} in a video game.", "a photo of one {}.", "a doodle of a {}.", "a close-up photo of the {}.",
    "a photo of a {}.", "the origami {}.", "the {} in a video game.", "a sketch of a {}.", "a doodle of the {}.",
    "a origami {}.", "a low resolution photo of a {}.", "the toy {}.", "a rendition of the {}.",
    "a photo of the clean {}.", "a photo of a large {}.", "a rendition of a {}.", "a photo of a nice {}.",
    "a photo of a weird {}.", "a blurry photo of a {}.", "a cartoon {}.", "art of a {}.", "a sketch of the {}.",
    "a embroidered {}.", "a pixelated photo of a {}.", "itap of the {}.", "a jpeg corrupted photo of the {}.",
    "a good photo of a {}.", "a plushie {}.", "a photo of the nice {}.", "a photo of the small {}.",
    "a photo of the weird {}.", "the cartoon {}.", "art of the {}.", "a drawing of the {}.",
    "a photo of the large {}.", "a black and white photo of a {}.", "the plushie {}.", "a dark photo of a {}.",
    "itap of a {}.", "graffiti of the {}.", "a toy {}.", "itap of my {}.", "a photo of a cool {}.",
    "a photo of a small {}.", "a tattoo of the {}.",
]


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", type=Path, help="one class per line; commas separate synonyms")
    ap.add_argument("output", type=Path, help=".bin (binary) or .csv")
    ap.add_argument("--model", default="openai/clip-vit-base-patch16")
    ap.add_argument("--batch", type=int, default=256)
    args = ap.parse_args()

    import torch
    from transformers import CLIPModel, CLIPTokenizer

    tok = CLIPTokenizer.from_pretrained(args.model)
    model = CLIPModel.from_pretrained(args.model).eval()
    lines = [ln.strip() for ln in args.names.read_text().splitlines() if ln.strip()]
    labels, rows = [], []
    for line in lines:
        synonyms = [s.strip() for s in line.split(",") if s.strip()]
        per_name = []
        for name in synonyms:
            prompts = [t.format(name) for t in TEMPLATES]
            feats = []
            for i in range(0, len(prompts), args.batch):
                batch = tok(prompts[i : i + args.batch], padding=True, return_tensors="pt")
                with torch.no_grad():
                    feats.append(model.get_text_features(**batch).numpy())
            per_name.append(unit(unit(np.concatenate(feats)).mean(axis=0)))
        labels.append(synonyms[0])
        rows.append(unit(np.mean(per_name, axis=0)))
    save_class_embeddings(args.output, labels, np.stack(rows), f"{args.model}, {len(TEMPLATES)} templates")
    print(f"{len(labels)} classes, width {rows[0].shape[0]} -> {args.output}")


if __name__ == "__main__":
    main()
