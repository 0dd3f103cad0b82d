"""Dataset ingestion, class-disjoint splits, and stochastic view generation.

Input layout is one directory per class of PNG/JPEG images. Labels are loaded
but used only for splitting and evaluation; a hard guard makes any label read
raise while pretraining is active.

A view set for one image is a large "global" crop plus n small part crops,
each independently augmented (flip, color jitter, Gaussian blur) and resized
to the encoder input side. Generation is a pure function of
(image, config, seed): the same seed reproduces the set bit for bit.
"""

from __future__ import annotations

import json
import math
import warnings
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .config import AugConfig, DataConfig, RunConfig

SPLITS = ("base", "val", "novel")

_CROP_RETRIES = 10


class DatasetError(ValueError):
    pass


class LabelAccessError(RuntimeError):
    """Raised when labels are read while the pretraining guard is active."""


@dataclass
class ViewSet:
    """One global view plus n part views of a single image.

    crop_boxes holds normalized (left, top, right, bottom) source rectangles
    in original-image coordinates; entry 0 is the global view, entries 1..n
    the parts, matching the order of `parts`.
    """

    global_view: np.ndarray
    parts: list
    crop_boxes: list
    rng_seed: int


class DatasetHandle:
    """Images, labels, and the class -> split assignment.

    images: float32 array (N, 3, side, side) with pixels in [0, 1].
    Labels are indices into class_names; `labels` raises LabelAccessError
    inside a labels_forbidden() context.
    """

    def __init__(self, images, labels, class_names, class_split):
        self.images = images
        self._labels = np.asarray(labels, dtype=np.int64)
        self.class_names = list(class_names)
        self.class_split = dict(class_split)
        self._label_guard = 0
        missing = [c for c in self.class_names if c not in self.class_split]
        if missing:
            raise DatasetError(f"classes without split assignment: {missing}")
        for s in SPLITS:
            ids = self.class_ids(s)
            for other in SPLITS:
                if other != s and set(ids) & set(self.class_ids(other)):
                    raise DatasetError("split class sets are not disjoint")

    @property
    def labels(self) -> np.ndarray:
        if self._label_guard:
            raise LabelAccessError("label access is forbidden during pretraining")
        return self._labels

    @contextmanager
    def labels_forbidden(self):
        self._label_guard += 1
        try:
            yield self
        finally:
            self._label_guard -= 1

    def class_ids(self, split: str) -> list:
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        return [i for i, c in enumerate(self.class_names) if self.class_split[c] == split]

    def split_indices(self, split: str) -> np.ndarray:
        wanted = set(self.class_ids(split))
        return np.nonzero(np.isin(self._labels, list(wanted)))[0]

    def class_indices(self, class_id: int) -> np.ndarray:
        return np.nonzero(self._labels == class_id)[0]

    def __len__(self) -> int:
        return len(self.images)


def assign_splits(class_names, split_spec, seed: int) -> dict:
    """Deterministically assign classes to base/val/novel.

    split_spec is either a (base, val, novel) count triple or an explicit
    {split: [class names]} mapping.
    """
    names = sorted(class_names)
    if isinstance(split_spec, dict):
        assignment = {}
        for split, members in split_spec.items():
            if split not in SPLITS:
                raise DatasetError(f"unknown split {split!r} in explicit spec")
            for c in members:
                if c not in names:
                    raise DatasetError(f"unknown class {c!r} in explicit spec")
                if c in assignment:
                    raise DatasetError(f"class {c!r} assigned to two splits")
                assignment[c] = split
        return assignment
    counts = tuple(int(c) for c in split_spec)
    if len(counts) != 3 or any(c < 0 for c in counts):
        raise DatasetError("split spec must be a (base, val, novel) count triple")
    if sum(counts) > len(names):
        raise DatasetError(
            f"split counts {counts} exceed available classes ({len(names)})"
        )
    order = np.random.default_rng(seed).permutation(len(names))
    shuffled = [names[i] for i in order]
    assignment = {}
    offset = 0
    for split, count in zip(SPLITS, counts):
        for c in shuffled[offset : offset + count]:
            assignment[c] = split
        offset += count
    return assignment


def _decode_image(path: Path, side: int) -> np.ndarray:
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((side, side), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def load_dataset(
    path,
    split_spec,
    *,
    image_side: int = 32,
    split_seed: int = 0,
    on_undecodable: str = "abort",
    manifest_path=None,
) -> DatasetHandle:
    """Load a directory-per-class image folder and persist the split manifest."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"dataset path not found: {root}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DatasetError(f"no class directories under {root}")
    class_names = [d.name for d in class_dirs]
    assignment = assign_splits(class_names, split_spec, split_seed)

    kept_names = [c for c in class_names if c in assignment]
    images, labels = [], []
    for label, cdir in enumerate(sorted(kept_names)):
        for f in sorted((root / cdir).iterdir()):
            if not f.is_file():
                continue
            try:
                images.append(_decode_image(f, image_side))
            except (UnidentifiedImageError, OSError) as err:
                if on_undecodable == "skip":
                    warnings.warn(f"skipping undecodable image {f}: {err}")
                    continue
                raise DatasetError(f"undecodable image {f}: {err}") from err
            labels.append(label)
    if not images:
        raise DatasetError(f"no decodable images under {root}")

    manifest = {
        "classes": {c: assignment[c] for c in sorted(assignment)},
        "seed": int(split_seed),
        "spec": list(split_spec) if not isinstance(split_spec, dict) else split_spec,
    }
    out = Path(manifest_path) if manifest_path else root / "split_manifest.json"
    tmp = out.with_suffix(out.suffix + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(out)

    return DatasetHandle(
        np.stack(images).astype(np.float32),
        np.asarray(labels, dtype=np.int64),
        sorted(kept_names),
        assignment,
    )


def load_from_config(cfg: RunConfig) -> DatasetHandle:
    d = cfg.data
    return load_dataset(
        d.root,
        (d.split_base, d.split_val, d.split_novel),
        image_side=d.image_side,
        split_seed=d.split_seed,
        on_undecodable=d.on_undecodable,
    )


# ---------------------------------------------------------------------------
# view generation


def _sample_crop(rng, height: int, width: int, lo: float, hi: float):
    """Random box whose realized area fraction lies in [lo, hi].

    Area fraction uniform, aspect ratio log-uniform in [3/4, 4/3]; resampled
    on out-of-bounds or rounding drift, then center fallback at the minimum
    legal scale.
    """
    total = height * width
    for _ in range(_CROP_RETRIES):
        frac = rng.uniform(lo, hi)
        ratio = math.exp(rng.uniform(math.log(3.0 / 4.0), math.log(4.0 / 3.0)))
        cw = int(round(math.sqrt(frac * total * ratio)))
        ch = int(round(math.sqrt(frac * total / ratio)))
        if cw < 1 or ch < 1 or cw > width or ch > height:
            continue
        if not (lo <= (cw * ch) / total <= hi):
            continue
        top = int(rng.integers(0, height - ch + 1))
        left = int(rng.integers(0, width - cw + 1))
        return top, left, ch, cw
    side = int(math.ceil(math.sqrt(lo * total)))
    side = max(1, min(side, height, width))
    return (height - side) // 2, (width - side) // 2, side, side


def _resize(img: np.ndarray, side: int) -> np.ndarray:
    if img.shape[1] == side and img.shape[2] == side:
        return img.astype(np.float32)
    t = torch.from_numpy(np.ascontiguousarray(img))[None]
    out = F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False)
    return out[0].numpy()


def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[0], img[1], img[2]
    maxc = np.max(img, axis=0)
    minc = np.min(img, axis=0)
    v = maxc
    spread = maxc - minc
    s = np.where(maxc > 0, spread / np.maximum(maxc, 1e-12), 0.0)
    safe = np.maximum(spread, 1e-12)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(spread > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[0], hsv[1], hsv[2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def _gray(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def _augment(img: np.ndarray, rng, aug: AugConfig) -> np.ndarray:
    out = img
    if aug.flip and rng.random() < 0.5:
        out = out[:, :, ::-1].copy()
    if aug.jitter and rng.random() < aug.jitter_prob:
        fb = rng.uniform(max(0.0, 1.0 - aug.brightness), 1.0 + aug.brightness)
        fc = rng.uniform(max(0.0, 1.0 - aug.contrast), 1.0 + aug.contrast)
        fs = rng.uniform(max(0.0, 1.0 - aug.saturation), 1.0 + aug.saturation)
        fh = rng.uniform(-aug.hue, aug.hue)
        out = np.clip(out * fb, 0.0, 1.0)
        mean = _gray(out).mean()
        out = np.clip(fc * out + (1.0 - fc) * mean, 0.0, 1.0)
        gray = _gray(out)[None]
        out = np.clip(fs * out + (1.0 - fs) * gray, 0.0, 1.0)
        hsv = _rgb_to_hsv(out)
        hsv[0] = (hsv[0] + fh) % 1.0
        out = np.clip(_hsv_to_rgb(hsv), 0.0, 1.0)
    if aug.blur and rng.random() < aug.blur_prob:
        sigma = rng.uniform(aug.blur_sigma[0], aug.blur_sigma[1])
        out = gaussian_filter(out, sigma=(0.0, sigma, sigma), mode="reflect")
    return np.ascontiguousarray(out, dtype=np.float32)


def generate_views(
    image: np.ndarray,
    n: int,
    part_scale,
    global_scale,
    side: int,
    aug: AugConfig,
    seed: int,
) -> ViewSet:
    """Produce 1 global view and n part views, all (3, side, side) float32."""
    if n < 1:
        raise DatasetError("n must be >= 1")
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DatasetError(f"expected (3, H, W) image, got shape {img.shape}")
    height, width = img.shape[1], img.shape[2]
    rng = np.random.default_rng(seed)

    boxes = [_sample_crop(rng, height, width, global_scale[0], global_scale[1])]
    for _ in range(n):
        boxes.append(_sample_crop(rng, height, width, part_scale[0], part_scale[1]))

    views, norm_boxes = [], []
    for top, left, ch, cw in boxes:
        crop = img[:, top : top + ch, left : left + cw]
        views.append(_augment(_resize(crop, side), rng, aug))
        norm_boxes.append(
            (left / width, top / height, (left + cw) / width, (top + ch) / height)
        )
    return ViewSet(
        global_view=views[0], parts=views[1:], crop_boxes=norm_boxes, rng_seed=int(seed)
    )


def views_from_config(image: np.ndarray, cfg: DataConfig, seed: int) -> ViewSet:
    return generate_views(
        image,
        cfg.n_parts,
        cfg.part_scale,
        cfg.global_scale,
        cfg.image_side,
        cfg.aug,
        seed,
    )
