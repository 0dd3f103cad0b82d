"""Episode sampling over novel classes, evaluation, and the ablation harness."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .augment import augment_and_refine, train_initial_classifier, init_classifier
from .config import RunConfig
from .data import DatasetHandle
from .encoder import Encoder, extract_feature_map, global_average_pool
from .seeding import substream, substream_seed
from . import store


class EpisodeError(ValueError):
    pass


@dataclass
class Episode:
    way: int
    shot: int
    query_per_class: int
    class_ids: list            # dataset class ids, one per episode label
    support_indices: np.ndarray
    support_labels: np.ndarray  # episode labels in [0, way)
    query_indices: np.ndarray
    query_labels: np.ndarray
    episode_seed: int


def sample_episode(
    handle: DatasetHandle, way: int, shot: int, query_per_class: int, seed: int
) -> Episode:
    """Uniformly sample way novel classes, then shot+query images per class
    without replacement. Deterministic given the seed."""
    novel = handle.class_ids("novel")
    if len(novel) < way:
        raise EpisodeError(f"novel split has {len(novel)} classes, need {way}")
    rng = np.random.default_rng(seed)
    chosen = sorted(int(c) for c in rng.choice(novel, size=way, replace=False))
    support_idx, support_lab, query_idx, query_lab = [], [], [], []
    for label, class_id in enumerate(chosen):
        pool = np.sort(handle.class_indices(class_id))
        need = shot + query_per_class
        if len(pool) < need:
            raise EpisodeError(
                f"class {class_id} has {len(pool)} images, need {need}"
            )
        picked = rng.choice(pool, size=need, replace=False)
        support_idx.extend(picked[:shot])
        support_lab.extend([label] * shot)
        query_idx.extend(picked[shot:])
        query_lab.extend([label] * query_per_class)
    return Episode(
        way=way,
        shot=shot,
        query_per_class=query_per_class,
        class_ids=chosen,
        support_indices=np.asarray(support_idx),
        support_labels=np.asarray(support_lab),
        query_indices=np.asarray(query_idx),
        query_labels=np.asarray(query_lab),
        episode_seed=int(seed),
    )


def confidence_interval(accuracies) -> tuple:
    """Mean and 1.96 * sample std / sqrt(n) over per-episode accuracies."""
    acc = np.asarray(list(accuracies), dtype=np.float64)
    if acc.size < 2:
        raise EpisodeError("confidence interval needs at least 2 values")
    mean = float(acc.mean())
    ci95 = float(1.96 * acc.std(ddof=1) / math.sqrt(acc.size))
    return mean, ci95


@dataclass
class EvalReport:
    way: int
    shot: int
    episodes: int
    pan: bool
    accuracies: list
    mean: float
    ci95: float
    config_hash: str
    ckpt_hash: str = ""
    runtime_sec: float = 0.0
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "way": self.way,
            "shot": self.shot,
            "episodes": self.episodes,
            "pan": self.pan,
            "mean": self.mean,
            "ci95": self.ci95,
            "config_hash": self.config_hash,
            "ckpt_hash": self.ckpt_hash,
            "runtime_sec": self.runtime_sec,
            "accuracies": [float(a) for a in self.accuracies],
            **self.extras,
        }


def episode_seed_for(global_seed: int, episode_index: int) -> int:
    return substream_seed(global_seed, "episodes", episode_index)


def _feature_table(encoder: Encoder, handle: DatasetHandle, indices: np.ndarray) -> torch.Tensor:
    images = torch.from_numpy(handle.images[indices])
    return global_average_pool(extract_feature_map(encoder, images))


def evaluate(
    encoder: Encoder,
    handle: DatasetHandle,
    cfg: RunConfig,
    *,
    pool_maps=None,
    pool_ids=None,
    ckpt_hash: str = "",
    trace_sink=None,
) -> EvalReport:
    """Episode loop: support features -> classifier (augmented or plain) ->
    query accuracy; aggregated with a 95% CI.

    When cfg.eval.pan is set, pool_maps (the base-pool feature cache) is
    required. trace_sink, if given, receives the first episode's
    augmentation trace.
    """
    ev = cfg.eval
    if ev.pan and (pool_maps is None or len(pool_maps) == 0):
        raise EpisodeError("augmented evaluation requires the base-pool feature cache")
    start = time.monotonic()
    novel_indices = handle.split_indices("novel")
    table = _feature_table(encoder, handle, novel_indices)
    row_of = {int(g): i for i, g in enumerate(novel_indices)}

    epsilon = cfg.pan.epsilon_1shot if ev.shot == 1 else cfg.pan.epsilon_5shot
    accuracies = []
    for e in range(ev.episodes):
        seed = episode_seed_for(cfg.global_seed, e)
        ep = sample_episode(handle, ev.way, ev.shot, ev.query_per_class, seed)
        support_z = table[[row_of[int(i)] for i in ep.support_indices]]
        query_z = table[[row_of[int(i)] for i in ep.query_indices]]
        support_y = torch.from_numpy(ep.support_labels)
        if ev.pan:
            clf, trace = augment_and_refine(
                support_z, support_y, ev.way, pool_maps, pool_ids, cfg.pan,
                epsilon=epsilon, seed=seed,
            )
            if e == 0 and trace_sink is not None:
                trace["episode_seed"] = seed
                trace["class_ids"] = ep.class_ids
                trace_sink(trace)
        elif cfg.pan.init_steps <= 0:
            clf = init_classifier(ev.way, table.shape[1], seed)
        else:
            clf = train_initial_classifier(
                support_z, support_y, ev.way, cfg.pan, seed=seed
            )
        pred = clf.predict(query_z)
        accuracies.append(float((pred == ep.query_labels).mean()))

    mean, ci95 = confidence_interval(accuracies)
    return EvalReport(
        way=ev.way,
        shot=ev.shot,
        episodes=ev.episodes,
        pan=ev.pan,
        accuracies=accuracies,
        mean=mean,
        ci95=ci95,
        config_hash=store.run_config_hash(cfg),
        ckpt_hash=ckpt_hash,
        runtime_sec=time.monotonic() - start,
    )


# ---------------------------------------------------------------------------
# ablation harness


@dataclass
class Variant:
    name: str
    ckpt_path: str
    overrides: dict = field(default_factory=dict)


def run_ablation(variants, handle: DatasetHandle, base_cfg: RunConfig) -> dict:
    """Evaluate each named variant and emit a comparison table.

    Each variant names a pretrained checkpoint plus config overrides (pan
    on/off, pan.n_a, ...). Base-pool maps are computed per checkpoint when
    augmentation is enabled. Pairwise deltas carry an overlapping-CI flag.
    """
    from .config import apply_overrides, clone_config

    reports = {}
    for v in variants:
        encoder, header = store.load_checkpoint(v.ckpt_path)  # raises if missing
        cfg = clone_config(base_cfg)
        apply_overrides(cfg, v.overrides)
        pool_maps = pool_ids = None
        if cfg.eval.pan:
            base_idx = handle.split_indices("base")
            pool_maps = extract_feature_map(
                encoder, torch.from_numpy(handle.images[base_idx])
            )
            pool_ids = base_idx
        reports[v.name] = evaluate(
            encoder,
            handle,
            cfg,
            pool_maps=pool_maps,
            pool_ids=pool_ids,
            ckpt_hash=store.file_sha256(v.ckpt_path),
        )
    names = [v.name for v in variants]
    deltas = []
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            a, b = reports[names[i]], reports[names[j]]
            deltas.append(
                {
                    "a": names[i],
                    "b": names[j],
                    "delta": b.mean - a.mean,
                    "ci_overlap": abs(b.mean - a.mean) <= a.ci95 + b.ci95,
                }
            )
    return {
        "variants": {n: reports[n].to_dict() for n in names},
        "deltas": deltas,
    }
