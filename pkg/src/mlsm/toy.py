"""Synthetic, trivially separable image set for smoke runs.

Every class is a distinct centred shape filled with a distinct solid colour
on a shared neutral background. Images differ by small jitter in shape
position and size plus pixel noise.

    python -m mlsm.toy OUT_DIR [--classes 10] [--per-class 60]
"""

import argparse
import math
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

COLORS = [
    (220, 40, 40), (40, 180, 60), (40, 70, 220), (230, 200, 30), (150, 40, 190),
    (30, 190, 200), (240, 130, 20), (250, 250, 250), (20, 20, 20), (130, 80, 30),
    (240, 120, 180), (120, 200, 120),
]
BACKGROUND = (128, 128, 128)
SHAPES = ["circle", "square", "triangle", "diamond", "cross", "ring", "hbar", "vbar",
          "star", "hexagon", "x", "ellipse"]


def _polygon(cx, cy, r, n, phase=0.0):
    return [(cx + r * math.cos(phase + 2 * math.pi * i / n),
             cy + r * math.sin(phase + 2 * math.pi * i / n)) for i in range(n)]


def draw_shape(draw, shape, cx, cy, r, fill):
    if shape == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fill)
    elif shape == "square":
        draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=fill)
    elif shape == "triangle":
        draw.polygon(_polygon(cx, cy, r, 3, -math.pi / 2), fill=fill)
    elif shape == "diamond":
        draw.polygon(_polygon(cx, cy, r, 4), fill=fill)
    elif shape == "cross":
        w = r / 3
        draw.rectangle([cx - r, cy - w, cx + r, cy + w], fill=fill)
        draw.rectangle([cx - w, cy - r, cx + w, cy + r], fill=fill)
    elif shape == "ring":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], outline=fill, width=max(2, int(r / 3)))
    elif shape == "hbar":
        draw.rectangle([cx - r, cy - r / 3, cx + r, cy + r / 3], fill=fill)
    elif shape == "vbar":
        draw.rectangle([cx - r / 3, cy - r, cx + r / 3, cy + r], fill=fill)
    elif shape == "star":
        pts = []
        for i in range(10):
            rad = r if i % 2 == 0 else r * 0.45
            a = -math.pi / 2 + math.pi * i / 5
            pts.append((cx + rad * math.cos(a), cy + rad * math.sin(a)))
        draw.polygon(pts, fill=fill)
    elif shape == "hexagon":
        draw.polygon(_polygon(cx, cy, r, 6), fill=fill)
    elif shape == "x":
        draw.line([cx - r, cy - r, cx + r, cy + r], fill=fill, width=max(2, int(r / 3)))
        draw.line([cx - r, cy + r, cx + r, cy - r], fill=fill, width=max(2, int(r / 3)))
    elif shape == "ellipse":
        draw.ellipse([cx - r, cy - r / 2, cx + r, cy + r / 2], fill=fill)
    else:
        raise ValueError(f"unknown shape {shape!r}")


def make_toy_dataset(root, n_classes=10, per_class=60, size=84, seed=0) -> Path:
    if n_classes > len(SHAPES):
        raise ValueError(f"at most {len(SHAPES)} toy classes")
    root = Path(root)
    rng = np.random.default_rng(seed)
    for c in range(n_classes):
        cdir = root / f"class_{c:02d}_{SHAPES[c]}"
        cdir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            img = Image.new("RGB", (size, size), BACKGROUND)
            r = size * rng.uniform(0.2, 0.28)
            cx = size / 2 + rng.uniform(-0.06, 0.06) * size
            cy = size / 2 + rng.uniform(-0.06, 0.06) * size
            draw_shape(ImageDraw.Draw(img), SHAPES[c], cx, cy, r, COLORS[c])
            arr = np.asarray(img, dtype=np.int16) + rng.integers(-16, 17, size=(size, size, 3))
            Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8)).save(cdir / f"{i:03d}.png")
    return root


def main(argv=None):
    ap = argparse.ArgumentParser(description="Generate the synthetic toy dataset.")
    ap.add_argument("out")
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--per-class", type=int, default=60)
    ap.add_argument("--size", type=int, default=84)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    make_toy_dataset(args.out, args.classes, args.per_class, args.size, args.seed)


if __name__ == "__main__":
    main()
