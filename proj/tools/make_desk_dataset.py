#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Builds the small 32x32 digits <-> street-numbers dataset used by the smoke runs.

Domain A: grayscale handwritten digits (white on black), MNIST-style.
Domain B: colour renderings of other digit samples on textured backgrounds, SVHN-style.

The digit glyphs come from scikit-learn's bundled 8x8 digits set, so no download is needed.
Output layout: <out>/{trainA,trainB,testA,testB}/NNNN.png
"""
import argparse
import os

import numpy as np
from PIL import Image
from sklearn.datasets import load_digits


def upscale(glyph, side):
    img = Image.fromarray((glyph / 16.0 * 255.0).astype(np.uint8), mode="L")
    return np.asarray(img.resize((side, side), Image.BILINEAR), dtype=np.float32) / 255.0


def mnist_like(glyph, rng):
    canvas = np.zeros((32, 32), dtype=np.float32)
    digit = upscale(glyph, 22)
    dy, dx = rng.integers(3, 8, size=2)
    canvas[dy:dy + 22, dx:dx + 22] = digit
    return Image.fromarray((np.clip(canvas, 0, 1) * 255).astype(np.uint8), mode="L")


def svhn_like(glyph, rng):
    bg = rng.uniform(0.0, 1.0, size=3)
    fg = 1.0 - bg + rng.uniform(-0.2, 0.2, size=3)
    yy, xx = np.mgrid[0:32, 0:32] / 31.0
    tilt = rng.uniform(-0.25, 0.25, size=3)
    base = bg[None, None, :] + tilt[None, None, :] * (yy[..., None] - 0.5 + xx[..., None] - 0.5)
    side = int(rng.integers(20, 27))
    digit = upscale(glyph, side)
    alpha = np.zeros((32, 32), dtype=np.float32)
    off = (32 - side) // 2
    jitter = rng.integers(-2, 3, size=2)
    y0 = int(np.clip(off + jitter[0], 0, 32 - side))
    x0 = int(np.clip(off + jitter[1], 0, 32 - side))
    alpha[y0:y0 + side, x0:x0 + side] = digit
    img = base * (1 - alpha[..., None]) + fg[None, None, :] * alpha[..., None]
    img += rng.normal(0.0, 0.04, size=img.shape)
    return Image.fromarray((np.clip(img, 0, 1) * 255).astype(np.uint8), mode="RGB")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="data/mnist_svhn_desk")
    parser.add_argument("--train", type=int, default=400)
    parser.add_argument("--test", type=int, default=100)
    parser.add_argument("--seed", type=int, default=2026)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    glyphs = load_digits().images
    order = rng.permutation(len(glyphs))
    per_domain = args.train + args.test
    if 2 * per_domain > len(order):
        raise SystemExit("not enough digit samples for two disjoint domains")
    pools = {"A": order[:per_domain], "B": order[per_domain:2 * per_domain]}
    render = {"A": mnist_like, "B": svhn_like}

    for domain, idx in pools.items():
        for split, chunk in (("train", idx[:args.train]), ("test", idx[args.train:])):
            folder = os.path.join(args.out, f"{split}{domain}")
            os.makedirs(folder, exist_ok=True)
            for k, i in enumerate(chunk):
                render[domain](glyphs[i], rng).save(os.path.join(folder, f"{k:04d}.png"))


if __name__ == "__main__":
    main()
