"""Synthetic class-labeled image folders for desk-scale experiments.

Each class is a glyph (shape) filled with a striped two-color texture,
placed at a random position and scale over a random low-frequency clutter
background. Class evidence is a localized part; backgrounds are nuisance.
Images are written as one directory per class of PNGs, so the folders work
with the standard loader.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from PIL import Image

GLYPHS = (
    "disc",
    "ring",
    "square",
    "diamond",
    "triangle",
    "plus",
    "xcross",
    "hbars",
    "vbars",
    "checker",
)

_STRIPE_ANGLES = (0.0, 45.0, 90.0, 135.0)


def _glyph_mask(name, yy, xx, cy, cx, r):
    u, v = (yy - cy) / r, (xx - cx) / r
    if name == "disc":
        return u * u + v * v <= 1.0
    if name == "ring":
        d = u * u + v * v
        return (d <= 1.0) & (d >= 0.45)
    if name == "square":
        return (np.abs(u) <= 0.9) & (np.abs(v) <= 0.9)
    if name == "diamond":
        return np.abs(u) + np.abs(v) <= 1.2
    if name == "triangle":
        return (u >= -0.9) & (u <= 0.9) & (np.abs(v) <= (u + 0.9) / 1.8)
    if name == "plus":
        return ((np.abs(u) <= 0.35) & (np.abs(v) <= 1.0)) | (
            (np.abs(v) <= 0.35) & (np.abs(u) <= 1.0)
        )
    if name == "xcross":
        return (np.abs(u - v) <= 0.45) | (np.abs(u + v) <= 0.45)
    if name == "hbars":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0) & (np.sin(u * 3 * math.pi) > 0)
    if name == "vbars":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0) & (np.sin(v * 3 * math.pi) > 0)
    if name == "checker":
        return (
            (np.abs(u) <= 1.0)
            & (np.abs(v) <= 1.0)
            & ((np.floor(u * 2) + np.floor(v * 2)) % 2 == 0)
        )
    raise ValueError(f"unknown glyph {name!r}")


def _hsv_color(h, s=0.85, v=0.9):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb, dtype=np.float32)


def _class_style(class_id: int, n_classes: int):
    glyph = GLYPHS[class_id % len(GLYPHS)]
    variant = (class_id // len(GLYPHS)) % len(_STRIPE_ANGLES)
    angle = math.radians(_STRIPE_ANGLES[variant])
    hue = (class_id * 0.61803398875) % 1.0  # golden-ratio spacing
    color_a = _hsv_color(hue)
    color_b = _hsv_color((hue + 0.45) % 1.0, s=0.7, v=0.95)
    freq = 2.5 + (class_id % 3)
    return glyph, angle, color_a, color_b, freq


_N_BACKGROUND_STYLES = 8


def _background(rng, side: int) -> np.ndarray:
    """Low-frequency clutter drawn from a small pool of shared styles.

    Backgrounds recur across images and classes (the clutter regime), so
    a background crop looks like many other images while the glyph does not.
    """
    import torch
    import torch.nn.functional as F

    style = int(rng.integers(0, _N_BACKGROUND_STYLES))
    style_rng = np.random.default_rng(1_000_003 + style)
    coarse = style_rng.uniform(0.15, 0.85, size=(3, 4, 4)).astype(np.float32)
    up = F.interpolate(
        torch.from_numpy(coarse)[None], size=(side, side), mode="bilinear", align_corners=False
    )[0].numpy()
    up = up * float(rng.uniform(0.85, 1.15))
    up += rng.normal(0.0, 0.02, size=up.shape).astype(np.float32)
    return np.clip(up, 0.0, 1.0)


def render_image(class_id: int, n_classes: int, side: int, rng) -> np.ndarray:
    """One (side, side, 3) float image of the class glyph over clutter."""
    glyph, angle, color_a, color_b, freq = _class_style(class_id, n_classes)
    img = _background(rng, side).transpose(1, 2, 0)

    r = 0.5 * side * rng.uniform(0.45, 0.65)
    margin = r + 1
    cy = rng.uniform(margin, side - margin)
    cx = rng.uniform(margin, side - margin)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32)
    mask = _glyph_mask(glyph, yy, xx, cy, cx, r)

    rot = (yy - cy) * math.cos(angle) + (xx - cx) * math.sin(angle)
    stripes = (np.sin(rot / r * freq * math.pi) > 0).astype(np.float32)[..., None]
    texture = stripes * color_a[None, None, :] + (1 - stripes) * color_b[None, None, :]
    img = np.where(mask[..., None], texture, img)
    return np.clip(img, 0.0, 1.0)


def make_toy_dataset(
    root,
    n_classes: int = 40,
    images_per_class: int = 40,
    side: int = 32,
    seed: int = 0,
) -> Path:
    """Write the dataset under root; returns root. Skips regeneration when a
    matching metadata file is already present."""
    root = Path(root)
    meta = {
        "version": 2,
        "n_classes": n_classes,
        "images_per_class": images_per_class,
        "side": side,
        "seed": seed,
    }
    meta_path = root / "toyset.json"
    if meta_path.is_file() and json.loads(meta_path.read_text()) == meta:
        return root
    root.mkdir(parents=True, exist_ok=True)
    for c in range(n_classes):
        cdir = root / f"class{c:03d}"
        cdir.mkdir(exist_ok=True)
        for i in range(images_per_class):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(c, i))
            )
            arr = (render_image(c, n_classes, side, rng) * 255).round().astype(np.uint8)
            Image.fromarray(arr).save(cdir / f"img{i:04d}.png")
    meta_path.write_text(json.dumps(meta, sort_keys=True) + "\n")
    return root
