"""PNG renderers: crop panels ordered by negative-set distance, and
attention-map overlays for retrieved images.

The heat colormap is the classic piecewise "hot" ramp, fixed so artifacts
from different runs are comparable:
    r = min(1, 3t), g = min(1, max(0, 3t - 1)), b = min(1, max(0, 3t - 2)).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .augment import LinearClassifier, attention_weights, class_attention_map
from .config import RunConfig
from .data import DatasetHandle, views_from_config
from .encoder import Encoder, encode
from .discovery import NegativeQueue
from .seeding import substream_seed


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8)


def _upscale(img: np.ndarray, factor: int) -> np.ndarray:
    return np.kron(img, np.ones((factor, factor, 1), dtype=img.dtype))


def _outline(img: np.ndarray, color=(1.0, 0.0, 0.0), width: int = 2) -> np.ndarray:
    out = img.copy()
    c = np.asarray(color, dtype=out.dtype)
    out[:width, :, :] = c
    out[-width:, :, :] = c
    out[:, :width, :] = c
    out[:, -width:, :] = c
    return out


def heat_colormap(t: np.ndarray) -> np.ndarray:
    """Scalar array in [0, 1] -> (..., 3) RGB under the fixed hot ramp."""
    t = np.clip(t, 0.0, 1.0)
    r = np.clip(3 * t, 0, 1)
    g = np.clip(3 * t - 1, 0, 1)
    b = np.clip(3 * t - 2, 0, 1)
    return np.stack([r, g, b], axis=-1)


def fill_queue_from_base(encoder: Encoder, handle: DatasetHandle, capacity: int) -> NegativeQueue:
    """Fresh negative queue from embeddings of base-split images."""
    base = handle.split_indices("base")
    queue = NegativeQueue(capacity, encoder.embed_dim)
    take = base[: min(len(base), capacity)]
    for i in range(0, len(take), 256):
        batch = torch.from_numpy(handle.images[take[i : i + 256]])
        queue.enqueue(encode(encoder, batch))
    return queue


def render_crop_panel(
    encoder: Encoder,
    queue: NegativeQueue,
    image: np.ndarray,
    cfg: RunConfig,
    seed: int,
    scale: int = 4,
) -> np.ndarray:
    """Panel: global view, then parts by descending distance to the
    negatives; the selected (leftmost) part is outlined."""
    vs = views_from_config(image, cfg.data, seed)
    parts = torch.from_numpy(np.stack(vs.parts))
    emb = encode(encoder, parts)
    negs = queue.contents()
    distances = (-(emb @ negs.T).mean(dim=1)).numpy()
    order = np.argsort(-distances, kind="stable")

    tiles = [_upscale(vs.global_view.transpose(1, 2, 0), scale)]
    for rank, p in enumerate(order):
        tile = _upscale(vs.parts[p].transpose(1, 2, 0), scale)
        if rank == 0:
            tile = _outline(tile)
        tiles.append(tile)
    gap = np.ones((tiles[0].shape[0], 2 * scale, 3), dtype=np.float32)
    strip = [tiles[0]]
    for t in tiles[1:]:
        strip.extend([gap, t])
    return np.concatenate(strip, axis=1)


def render_crop_panels(
    encoder: Encoder,
    handle: DatasetHandle,
    cfg: RunConfig,
    out_dir,
    count: int = 8,
    queue: NegativeQueue | None = None,
) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if queue is None:
        queue = fill_queue_from_base(encoder, handle, min(cfg.pdn.queue_capacity, 1024))
    novel = handle.split_indices("novel")
    chosen = novel[:count] if len(novel) >= count else np.arange(min(count, len(handle)))
    paths = []
    for idx in chosen:
        seed = substream_seed(cfg.global_seed, "viz-crops", int(idx))
        panel = render_crop_panel(encoder, queue, handle.images[int(idx)], cfg, seed)
        path = out_dir / f"crops_{int(idx):05d}.png"
        Image.fromarray(_to_uint8(panel)).save(path)
        paths.append(str(path))
    return paths


def attention_overlay(
    image: np.ndarray, feature_map: torch.Tensor, clf: LinearClassifier, class_k: int, cam_mode: str = "c2am"
) -> np.ndarray:
    """Original image blended with the min-max normalized class attention."""
    scores = class_attention_map(feature_map, clf)
    alpha = attention_weights(scores, cam_mode)[..., class_k]
    lo, hi = float(alpha.min()), float(alpha.max())
    norm = (alpha - lo) / (hi - lo) if hi > lo else torch.zeros_like(alpha)
    side = image.shape[1]
    up = F.interpolate(
        norm[None, None].float(), size=(side, side), mode="bilinear", align_corners=False
    )[0, 0].numpy()
    heat = heat_colormap(up)
    return 0.5 * image.transpose(1, 2, 0) + 0.5 * heat


def render_attention_overlays(
    trace: dict,
    pool_maps: torch.Tensor,
    pool_ids,
    handle: DatasetHandle,
    out_dir,
    limit: int = 16,
    scale: int = 4,
) -> list:
    """One overlay PNG per trace record: retrieved image + its class map."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clf = LinearClassifier(
        torch.tensor(trace["classifier"]["W"], dtype=torch.float32),
        torch.tensor(trace["classifier"]["b"], dtype=torch.float32),
    )
    cam_mode = trace.get("cam_mode", "c2am")
    row_of = {int(g): i for i, g in enumerate(pool_ids)}
    paths = []
    for rec in trace["records"][:limit]:
        img_id = int(rec["image_id"])
        overlay = attention_overlay(
            handle.images[img_id], pool_maps[row_of[img_id]], clf, int(rec["class"]), cam_mode
        )
        original = handle.images[img_id].transpose(1, 2, 0)
        gap = np.ones((original.shape[0], 2, 3), dtype=np.float32)
        panel = _upscale(np.concatenate([original, gap, overlay], axis=1), scale)
        path = out_dir / f"attn_{img_id:05d}_k{rec['class']}.png"
        Image.fromarray(_to_uint8(panel)).save(path)
        paths.append(str(path))
    return paths


def load_trace(path) -> dict:
    return json.loads(Path(path).read_text())


def save_trace(path, trace: dict) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(trace, sort_keys=True) + "\n")
    return str(path)
