"""Support-set augmentation: linear classifier, pseudo-label retrieval,
class attention maps, attention-pooled features, and smoothed refinement.

The pipeline trains a linear classifier on support features, pseudo-labels
the base pool with it, keeps the highest-probability images per class,
pools each retrieved feature map under a per-class attention map, and
refines the classifier on support (hard labels) plus the pooled features
(label-smoothed targets).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import PanConfig
from .encoder import global_average_pool


@dataclass
class LinearClassifier:
    """Weights (way, D) and bias (way,) shared by retrieval, attention maps,
    and refinement."""

    W: torch.Tensor
    b: torch.Tensor

    @property
    def way(self) -> int:
        return self.W.shape[0]

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        return torch.atleast_2d(z) @ self.W.T + self.b

    def probs(self, z: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.logits(z), dim=-1)

    def predict(self, z: torch.Tensor) -> np.ndarray:
        # numpy argmax: first occurrence wins on ties
        return np.argmax(self.logits(z).detach().numpy(), axis=1)

    def clone(self) -> "LinearClassifier":
        return LinearClassifier(self.W.detach().clone(), self.b.detach().clone())


def init_classifier(way: int, dim: int, seed: int, dtype=torch.float32) -> LinearClassifier:
    g = torch.Generator().manual_seed(int(seed))
    W = 0.01 * torch.randn(way, dim, generator=g, dtype=dtype)
    b = torch.zeros(way, dtype=dtype)
    return LinearClassifier(W, b)


def train_initial_classifier(
    features: torch.Tensor,
    labels,
    way: int,
    cfg: PanConfig,
    seed: int = 0,
) -> LinearClassifier:
    """Fit a linear classifier to support features by cross-entropy; Adam,
    full batch, cfg.init_steps steps. Deterministic given the seed."""
    features = torch.as_tensor(features)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ValueError("features must be (S, D) aligned with labels")
    counts = torch.bincount(labels, minlength=way)
    if (counts == 0).any():
        empty = torch.nonzero(counts == 0).flatten().tolist()
        raise ValueError(f"support classes with zero samples: {empty}")
    clf = init_classifier(way, features.shape[1], seed, dtype=features.dtype)
    W = clf.W.clone().requires_grad_(True)
    b = clf.b.clone().requires_grad_(True)
    opt = torch.optim.Adam([W, b], lr=cfg.lr, weight_decay=cfg.weight_decay)
    for _ in range(cfg.init_steps):
        loss = F.cross_entropy(features @ W.T + b, labels)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return LinearClassifier(W.detach(), b.detach())


def classify_base_images(maps: torch.Tensor, clf: LinearClassifier):
    """Pseudo-label every pooled base map: (assigned class, its probability).

    maps: (N, D, H, W). Ties break to the lowest class index.
    """
    z = global_average_pool(torch.as_tensor(maps))
    if z.shape[1] != clf.W.shape[1]:
        raise ValueError(f"feature dim {z.shape[1]} does not match classifier {clf.W.shape[1]}")
    probs = clf.probs(z)
    pseudo = np.argmax(probs.numpy(), axis=1)
    top = probs[torch.arange(len(pseudo)), torch.from_numpy(pseudo)]
    return torch.from_numpy(pseudo.astype(np.int64)), top


def retrieve_top(pseudo, probs, class_k: int, n_a: int, image_ids=None) -> list:
    """Indices of the up-to-n_a pool images pseudo-labeled class_k, by
    descending probability; probability ties break by ascending image id."""
    pseudo = np.asarray(pseudo)
    probs = np.asarray(torch.as_tensor(probs).detach())
    ids = np.arange(len(pseudo)) if image_ids is None else np.asarray(image_ids)
    candidates = [i for i in range(len(pseudo)) if pseudo[i] == class_k]
    if not candidates:
        warnings.warn(f"no pool images assigned to class {class_k}; skipping augmentation")
        return []
    ranked = sorted(candidates, key=lambda i: (-float(probs[i]), int(ids[i])))
    return ranked[: max(0, int(n_a))]


def class_attention_map(feature_map: torch.Tensor, clf: LinearClassifier) -> torch.Tensor:
    """Per-location class scores: (H, W, way) with S[i, j, k] = W_k . M[i, j] + b_k."""
    m = torch.as_tensor(feature_map)
    if m.ndim != 3 or m.shape[0] != clf.W.shape[1]:
        raise ValueError(f"expected (D, H, W) map with D={clf.W.shape[1]}, got {tuple(m.shape)}")
    return torch.einsum("dhw,kd->hwk", m, clf.W) + clf.b


def competitive_attention(scores: torch.Tensor) -> torch.Tensor:
    """Softmax across classes at each location; rows sum to 1, shift invariant."""
    scores = torch.as_tensor(scores)
    if scores.shape[-1] < 2:
        raise ValueError("competitive attention needs at least 2 classes")
    return F.softmax(scores, dim=-1)


def plain_attention(scores: torch.Tensor) -> torch.Tensor:
    """Raw score maps shifted nonnegative per class (min over locations)."""
    scores = torch.as_tensor(scores)
    mins = scores.amin(dim=(0, 1), keepdim=True)
    return scores - mins


def pooled_part_feature(feature_map: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Attention-weighted spatial mean: sum_ij alpha[i,j] M[:,i,j] / sum_ij alpha."""
    m = torch.as_tensor(feature_map)
    a = torch.as_tensor(alpha)
    if a.shape != m.shape[1:]:
        raise ValueError(f"alpha shape {tuple(a.shape)} does not match map {tuple(m.shape)}")
    if (a < 0).any():
        raise ValueError("attention weights must be nonnegative")
    mass = a.sum()
    if float(mass) <= 0.0:
        raise ValueError("attention weights have zero total mass")
    return torch.einsum("dhw,hw->d", m, a) / mass


def smooth_label(y: int, epsilon: float, way: int, dtype=torch.float64) -> torch.Tensor:
    """Distribution with 1 - epsilon at y and epsilon/(way-1) elsewhere."""
    if not (0.0 < epsilon < 1.0):
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if way < 2:
        raise ValueError("way must be >= 2")
    if not (0 <= y < way):
        raise ValueError(f"class id {y} outside [0, {way})")
    p = torch.full((way,), epsilon / (way - 1), dtype=dtype)
    p[y] = 1.0 - epsilon
    return p


def _divergence_terms(logits: torch.Tensor, targets: torch.Tensor, direction: str) -> torch.Tensor:
    """Per-row divergence between predicted distribution and target.

    forward: KL(target || pred), the standard smoothed-target objective.
    reverse: KL(pred || target).
    Both are exactly 0 when pred equals target.
    """
    logp = F.log_softmax(logits, dim=-1)
    logt = torch.log(targets)
    if direction == "forward":
        return (targets * (logt - logp)).sum(dim=-1)
    if direction == "reverse":
        p = torch.exp(logp)
        return (p * (logp - logt)).sum(dim=-1)
    raise ValueError(f"unknown kl_direction {direction!r}")


def refinement_objective(
    W: torch.Tensor,
    b: torch.Tensor,
    support_z: torch.Tensor,
    support_y: torch.Tensor,
    aug_z: torch.Tensor,
    aug_targets: torch.Tensor,
    lam: float,
    kl_direction: str = "forward",
) -> torch.Tensor:
    """Summed refinement loss: support cross-entropy plus lam times the
    divergence of predictions from smoothed targets on augmented features."""
    logits = support_z @ W.T + b
    total = F.cross_entropy(logits, support_y, reduction="sum")
    if aug_z is not None and len(aug_z) > 0:
        aug_logits = aug_z @ W.T + b
        total = total + lam * _divergence_terms(aug_logits, aug_targets, kl_direction).sum()
    return total


def refine_classifier(
    clf: LinearClassifier,
    support_z: torch.Tensor,
    support_y,
    aug_z,
    aug_classes,
    *,
    lam: float,
    epsilon: float,
    cfg: PanConfig,
) -> LinearClassifier:
    """Continue training from the initial classifier's parameters on the
    combined objective; cfg.refine_steps full-batch Adam steps."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    support_z = torch.as_tensor(support_z)
    support_y = torch.as_tensor(support_y, dtype=torch.long)
    if len(support_z) == 0:
        raise ValueError("support set is empty")
    way = clf.way
    if aug_z is not None and len(aug_z) > 0:
        aug_z = torch.as_tensor(aug_z)
        aug_classes = torch.as_tensor(aug_classes, dtype=torch.long)
        targets = torch.stack(
            [smooth_label(int(k), epsilon, way, dtype=support_z.dtype) for k in aug_classes]
        )
    else:
        aug_z, targets = None, None
    W = clf.W.detach().clone().requires_grad_(True)
    b = clf.b.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([W, b], lr=cfg.lr, weight_decay=cfg.weight_decay)
    for _ in range(cfg.refine_steps):
        loss = refinement_objective(
            W, b, support_z, support_y, aug_z, targets, lam, cfg.kl_direction
        )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return LinearClassifier(W.detach(), b.detach())


def attention_weights(scores: torch.Tensor, cam_mode: str) -> torch.Tensor:
    """(H, W, way) scores -> pooling weights per cam_mode."""
    if cam_mode == "c2am":
        return competitive_attention(scores)
    if cam_mode == "plain":
        return plain_attention(scores)
    if cam_mode == "off":
        return torch.ones_like(scores)
    raise ValueError(f"unknown cam_mode {cam_mode!r}")


def _pool_retrieved(maps_sel: torch.Tensor, clf: LinearClassifier, class_k: int, cam_mode: str):
    """Vectorized attention pooling for a stack of retrieved maps."""
    scores = torch.einsum("rdhw,kd->rhwk", maps_sel, clf.W) + clf.b
    weights = attention_weights(scores, cam_mode)[..., class_k]
    mass = weights.sum(dim=(1, 2))
    flat_mass = mass <= 0
    if flat_mass.any():  # possible for plain mode on constant score maps
        weights = torch.where(
            flat_mass[:, None, None], torch.ones_like(weights), weights
        )
        mass = weights.sum(dim=(1, 2))
    return torch.einsum("rdhw,rhw->rd", maps_sel, weights) / mass[:, None]


@dataclass
class AugmentedFeature:
    vector: torch.Tensor
    class_id: int
    image_id: int
    probability: float


def build_augmented_set(
    clf: LinearClassifier,
    pool_maps: torch.Tensor,
    pool_ids,
    way: int,
    n_a: int,
    cam_mode: str,
) -> list:
    """Retrieve and attention-pool up to n_a features per class."""
    pool_maps = torch.as_tensor(pool_maps)
    pseudo, top_prob = classify_base_images(pool_maps, clf)
    ids = np.arange(len(pool_maps)) if pool_ids is None else np.asarray(pool_ids)
    out = []
    for k in range(way):
        idxs = retrieve_top(pseudo, top_prob, k, n_a, image_ids=ids)
        if not idxs:
            continue
        pooled = _pool_retrieved(pool_maps[idxs], clf, k, cam_mode)
        for j, i in enumerate(idxs):
            out.append(
                AugmentedFeature(pooled[j], k, int(ids[i]), float(top_prob[i]))
            )
    return out


def augment_and_refine(
    support_z: torch.Tensor,
    support_y,
    way: int,
    pool_maps,
    pool_ids,
    cfg: PanConfig,
    *,
    epsilon: float,
    seed: int = 0,
):
    """Full augmentation pipeline; returns (refined classifier, trace).

    With n_a = 0 the refinement step still runs, so the result equals
    continued support-only training.
    """
    support_z = torch.as_tensor(support_z)
    support_y = torch.as_tensor(support_y, dtype=torch.long)
    clf0 = train_initial_classifier(support_z, support_y, way, cfg, seed=seed)
    augmented = []
    if cfg.n_a > 0 and pool_maps is not None and len(pool_maps) > 0:
        augmented = build_augmented_set(clf0, pool_maps, pool_ids, way, cfg.n_a, cfg.cam_mode)
    if augmented:
        aug_z = torch.stack([a.vector for a in augmented])
        aug_classes = torch.tensor([a.class_id for a in augmented], dtype=torch.long)
    else:
        aug_z, aug_classes = None, None
    refined = refine_classifier(
        clf0, support_z, support_y, aug_z, aug_classes,
        lam=cfg.lam, epsilon=epsilon, cfg=cfg,
    )
    trace = {
        "cam_mode": cfg.cam_mode,
        "classifier": {"W": clf0.W.tolist(), "b": clf0.b.tolist()},
        "records": [
            {
                "image_id": a.image_id,
                "class": a.class_id,
                "probability": a.probability,
                "checksum": _feature_checksum(a.vector),
            }
            for a in augmented
        ],
    }
    return refined, trace


def _feature_checksum(vector: torch.Tensor) -> str:
    import hashlib

    data = np.ascontiguousarray(vector.detach().numpy().astype("<f4")).tobytes()
    return hashlib.sha256(data).hexdigest()[:16]
