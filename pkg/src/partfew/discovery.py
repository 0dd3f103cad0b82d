"""Self-supervised pretraining: negative queue, discriminative part selection,
contrastive loss, and the training loop.

Per image: crop n parts and one global view, embed parts with the online
encoder, pick the part with the largest mean distance to the queued
negatives, and pull it toward the global view against the queue with an
InfoNCE loss. The momentum twin supplies the positive (by default) and the
embeddings that refill the queue.

The negative set is exclusive of the input image: queue rows remember their
source image id and the trainer masks same-id rows out of both the
selection distances and the loss denominator. With a queue no smaller than
the dataset this matters a lot; stale copies of the image itself would
otherwise cancel the positive term and invert part selection.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig
from .data import DatasetHandle, views_from_config
from .encoder import Encoder, build_encoder, clone_as_momentum, momentum_update
from .seeding import substream, substream_seed
from . import store


class EmptyQueueError(RuntimeError):
    """The negative queue must be warmed up before distances or losses."""


class PretrainDiverged(RuntimeError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class NegativeQueue:
    """Fixed-capacity FIFO ring of unit-norm embeddings.

    Enqueueing B rows at full capacity evicts exactly the B oldest rows.
    Stored rows are detached and renormalized, so queue contents never
    receive gradients. Rows optionally carry the source image id, which
    lets the trainer keep the negative set exclusive of the current input
    even when the queue spans the whole dataset.
    """

    def __init__(self, capacity: int, dim: int, dtype=torch.float32):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._buffer = torch.zeros(self.capacity, self.dim, dtype=dtype)
        self._ids = torch.full((self.capacity,), -1, dtype=torch.long)
        self._head = 0
        self.filled = 0

    def __len__(self) -> int:
        return self.filled

    def enqueue(self, batch: torch.Tensor, ids=None) -> "NegativeQueue":
        batch = torch.atleast_2d(batch).detach()
        if batch.shape[1] != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {batch.shape[1]}")
        if batch.shape[0] > self.capacity:
            raise ValueError(
                f"batch of {batch.shape[0]} exceeds queue capacity {self.capacity}"
            )
        if ids is None:
            ids = torch.full((batch.shape[0],), -1, dtype=torch.long)
        else:
            ids = torch.as_tensor(ids, dtype=torch.long)
            if ids.shape != (batch.shape[0],):
                raise ValueError("ids must align with the batch")
        batch = F.normalize(batch.to(self._buffer.dtype), dim=1)
        for row, rid in zip(batch, ids):
            self._buffer[self._head] = row
            self._ids[self._head] = rid
            self._head = (self._head + 1) % self.capacity
        self.filled = min(self.capacity, self.filled + batch.shape[0])
        return self

    def _order(self) -> torch.Tensor:
        if self.filled < self.capacity:
            return torch.arange(self.filled)
        return torch.cat(
            [torch.arange(self._head, self.capacity), torch.arange(self._head)]
        )

    def contents(self) -> torch.Tensor:
        """Stored rows, oldest first; (filled, dim)."""
        return self._buffer[self._order()]

    def contents_with_ids(self):
        order = self._order()
        return self._buffer[order], self._ids[order]


def _negatives_tensor(negatives) -> torch.Tensor:
    if isinstance(negatives, NegativeQueue):
        if len(negatives) == 0:
            raise EmptyQueueError("negative queue is empty; warm it up first")
        return negatives.contents()
    t = torch.atleast_2d(torch.as_tensor(negatives))
    if t.shape[0] == 0:
        raise EmptyQueueError("negative set is empty")
    return t


def sample_set_distance(part: torch.Tensor, negatives) -> float:
    """Mean of -cos(part, negative) over the stored negatives; in [-1, 1]."""
    negs = _negatives_tensor(negatives)
    part = torch.as_tensor(part)
    return float(-(negs @ part).mean())


def select_discriminative_part(parts, negatives):
    """Index and embedding of the part farthest (on average) from the
    negatives; ties go to the lowest index."""
    stack = torch.stack(list(parts)) if isinstance(parts, (list, tuple)) else torch.atleast_2d(parts)
    if stack.shape[0] < 1:
        raise ValueError("need at least one part")
    negs = _negatives_tensor(negatives)
    with torch.no_grad():
        distances = -(stack.detach() @ negs.T).mean(dim=1)
    idx = int(np.argmax(distances.numpy()))  # first occurrence on ties
    return idx, stack[idx]


def contrastive_loss_batch(
    queries: torch.Tensor,
    positives: torch.Tensor,
    negatives: torch.Tensor,
    temperature: float,
    neg_mask=None,
) -> torch.Tensor:
    """Per-row InfoNCE losses for (B, D) queries/positives against shared
    (N, D) negatives. Stabilized via logsumexp; negatives are detached.

    neg_mask, (B, N) bool, marks which negatives each row may use; False
    entries are dropped from the denominator (the negative set must stay
    exclusive of the row's own source image).
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    negatives = negatives.detach()
    s_pos = (queries * positives).sum(dim=1, keepdim=True)
    s_neg = queries @ negatives.T
    if neg_mask is not None:
        s_neg = s_neg.masked_fill(~neg_mask, float("-inf"))
    logits = torch.cat([s_pos, s_neg], dim=1) / temperature
    return torch.logsumexp(logits, dim=1) - logits[:, 0]


def contrastive_loss(query, positive, negatives, temperature: float) -> torch.Tensor:
    """InfoNCE for one (query, positive) pair against the queue; differentiable
    w.r.t. query and positive, never w.r.t. stored negatives."""
    negs = _negatives_tensor(negatives)
    q = torch.as_tensor(query)
    p = torch.as_tensor(positive)
    return contrastive_loss_batch(q[None], p[None], negs, temperature)[0]


@dataclass
class PretrainResult:
    encoder: Encoder
    momentum_encoder: Encoder
    queue: NegativeQueue
    log: list = field(default_factory=list)
    checkpoint_path: str = ""


def _batch_views(handle: DatasetHandle, indices, cfg: RunConfig, stream: str, epoch: int):
    """Stacked part and global tensors for a batch of image indices."""
    d = cfg.data
    parts, globs = [], []
    for idx in indices:
        seed = substream_seed(cfg.global_seed, stream, epoch, int(idx))
        vs = views_from_config(handle.images[int(idx)], d, seed)
        parts.extend(vs.parts)
        globs.append(vs.global_view)
    part_t = torch.from_numpy(np.stack(parts))
    glob_t = torch.from_numpy(np.stack(globs))
    return part_t, glob_t


def _first_argmax_rows(matrix: torch.Tensor) -> np.ndarray:
    return np.argmax(matrix.numpy(), axis=1)


def pretrain(handle: DatasetHandle, cfg: RunConfig, out_dir=None) -> PretrainResult:
    """Run the pretraining stage on the base split; labels stay inaccessible.

    Returns the trained encoder, its momentum twin, the final queue, and the
    per-step log (step, loss, lr, queue_fill, selected-part histogram).
    Writes checkpoints and a JSON-lines log under out_dir when given.
    """
    pdn, data = cfg.pdn, cfg.data
    encoder = build_encoder(
        cfg.encoder, data.image_side, seed=substream_seed(cfg.global_seed, "init")
    )
    momentum_enc = clone_as_momentum(encoder)
    if pdn.key_batch_stats:
        # key forwards run with batch statistics, but the EMA rule stays the
        # only writer of the twin's running stats
        for mod in momentum_enc.modules():
            if isinstance(mod, torch.nn.modules.batchnorm._BatchNorm):
                mod.momentum = 0.0
        momentum_enc.train()
    queue = NegativeQueue(pdn.queue_capacity, cfg.encoder.embed_dim)
    log: list = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    cfg_hash = store.run_config_hash(cfg)
    ckpt_path = ""

    with handle.labels_forbidden():
        base_indices = handle.split_indices("base")
        if len(base_indices) == 0:
            raise ValueError("base split is empty")
        batch = min(pdn.batch_size, len(base_indices))
        steps_per_epoch = max(1, len(base_indices) // batch)
        total_steps = pdn.epochs * steps_per_epoch

        if pdn.epochs > 0:
            _warm_up_queue(handle, cfg, momentum_enc, queue, base_indices, batch)

            opt = torch.optim.SGD(
                encoder.parameters(),
                lr=pdn.lr,
                momentum=pdn.sgd_momentum,
                weight_decay=pdn.weight_decay,
            )
            step = 0
            n = data.n_parts
            for epoch in range(pdn.epochs):
                order = substream(cfg.global_seed, "data", epoch).permutation(base_indices)
                for b in range(steps_per_epoch):
                    idxs = order[b * batch : (b + 1) * batch]
                    lr_t = 0.5 * pdn.lr * (1.0 + math.cos(math.pi * step / total_steps))
                    for group in opt.param_groups:
                        group["lr"] = lr_t

                    part_t, glob_t = _batch_views(handle, idxs, cfg, "views", epoch)
                    encoder.train()
                    part_emb = encoder.embed(part_t).view(len(idxs), n, -1)
                    with torch.no_grad():
                        key_emb = momentum_enc.embed(glob_t)
                    if pdn.positive_source == "online":
                        positive = encoder.embed(glob_t)
                    else:
                        positive = key_emb
                    negs, neg_ids = queue.contents_with_ids()
                    batch_ids = torch.as_tensor(np.asarray(idxs), dtype=torch.long)
                    # the negative set excludes the input image itself
                    neg_mask = neg_ids[None, :] != batch_ids[:, None]

                    hist = None
                    if pdn.selection_mode == "select_best":
                        with torch.no_grad():
                            sims = part_emb.detach() @ negs.T
                            allowed = neg_mask[:, None, :]
                            counts = allowed.sum(dim=2).clamp(min=1)
                            dists = -(sims * allowed).sum(dim=2) / counts
                        selected = _first_argmax_rows(dists)
                        queries = part_emb[torch.arange(len(idxs)), selected]
                        losses = contrastive_loss_batch(
                            queries, positive, negs, pdn.temperature, neg_mask=neg_mask
                        )
                        hist = np.bincount(selected, minlength=n).tolist()
                    else:  # use_all_parts
                        queries = part_emb.reshape(len(idxs) * n, -1)
                        per_part = contrastive_loss_batch(
                            queries,
                            positive.repeat_interleave(n, dim=0),
                            negs,
                            pdn.temperature,
                            neg_mask=neg_mask.repeat_interleave(n, dim=0),
                        )
                        losses = per_part.view(len(idxs), n).mean(dim=1)

                    loss = losses.mean()
                    if not torch.isfinite(loss):
                        diag = {
                            "step": step,
                            "epoch": epoch,
                            "lr": lr_t,
                            "queue_fill": len(queue),
                            "loss_values": losses.detach().tolist(),
                            "part_emb_stats": _tensor_stats(part_emb),
                            "positive_stats": _tensor_stats(positive),
                        }
                        if out_dir is not None:
                            (out_dir / "divergence_dump.json").write_text(
                                json.dumps(diag, indent=2)
                            )
                        raise PretrainDiverged(f"non-finite loss at step {step}", diag)

                    opt.zero_grad(set_to_none=True)
                    loss.backward()
                    opt.step()
                    momentum_update(encoder, momentum_enc, pdn.momentum)
                    queue.enqueue(key_emb, ids=batch_ids)

                    log.append(
                        {
                            "step": step,
                            "epoch": epoch,
                            "loss": float(loss.detach()),
                            "lr": lr_t,
                            "queue_fill": len(queue),
                            "selected_hist": hist,
                        }
                    )
                    step += 1
                if (
                    out_dir is not None
                    and pdn.checkpoint_every > 0
                    and (epoch + 1) % pdn.checkpoint_every == 0
                    and epoch + 1 < pdn.epochs
                ):
                    store.save_checkpoint(
                        out_dir / f"ckpt_epoch{epoch + 1:04d}.pt", encoder, step=step, config_hash=cfg_hash
                    )

        if out_dir is not None:
            ckpt_path = str(out_dir / "ckpt_final.pt")
            store.save_checkpoint(ckpt_path, encoder, step=len(log), config_hash=cfg_hash)
            store.write_jsonl(out_dir / "train_log.jsonl", log)

    return PretrainResult(encoder, momentum_enc, queue, log, ckpt_path)


def _warm_up_queue(handle, cfg, momentum_enc, queue, base_indices, batch):
    """Fill the queue from momentum global embeddings before any loss step."""
    warm_batches = math.ceil(queue.capacity / batch)
    rng = substream(cfg.global_seed, "warmup")
    order = rng.permutation(base_indices)
    pos = 0
    for wb in range(warm_batches):
        if pos + batch > len(order):
            order = rng.permutation(base_indices)
            pos = 0
        idxs = order[pos : pos + batch]
        pos += batch
        _, glob_t = _batch_views(handle, idxs, cfg, "warmup-views", wb)
        with torch.no_grad():
            queue.enqueue(
                momentum_enc.embed(glob_t),
                ids=torch.as_tensor(np.asarray(idxs), dtype=torch.long),
            )


def _tensor_stats(t: torch.Tensor) -> dict:
    t = t.detach()
    return {
        "min": float(t.min()),
        "max": float(t.max()),
        "mean": float(t.mean()),
        "finite": bool(torch.isfinite(t).all()),
    }
