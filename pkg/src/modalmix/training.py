"""Alternating two-stream training with plain SGD.

Even steps update the trainable stream, odd steps the frozen stream's
editor head (per-epoch alternation is available as a config option).
Whichever stream is active sees the other only through a constant teacher
probability matrix.  Metrics are appended to a JSON-lines file, one record
per (epoch, stream); the final parameters go to a manifest + blob
checkpoint.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint, losses
from .errors import NumericsError, ParameterError
from .model import TwoStreamModel

CHECKPOINT_PREFIX = "params"
METRICS_NAME = "metrics.jsonl"
TRAINABLE = "trainable"
FROZEN = "frozen"


@dataclass
class TrainConfig:
    lam: float = 0.8
    tau: float = 1.0
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_size: int = 32
    gem_p: float = 3.0
    dim: int = 32
    model_seed: int = 0
    shuffle_seed: int = 0
    no_emd: bool = False
    no_ssg: bool = False
    no_distill: bool = False
    single_stream: bool = False
    soft_label_kernel: str = "dot"
    alternation: str = "step"  # "step" | "epoch"

    def validate(self):
        if not 0.0 < self.lam <= 1.0:
            raise ParameterError(f"lam must be in (0, 1], got {self.lam}")
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.gem_p > 0:
            raise ParameterError(f"gem_p must be positive, got {self.gem_p}")
        if self.dim < 1:
            raise ParameterError(f"dim must be >= 1, got {self.dim}")
        if self.soft_label_kernel not in losses.KERNELS:
            raise ParameterError(f"soft_label_kernel must be one of {losses.KERNELS}")
        if self.alternation not in ("step", "epoch"):
            raise ParameterError(f"alternation must be 'step' or 'epoch', got {self.alternation}")
        return self


@dataclass
class StepMetrics:
    stream: str
    l_mmc: float
    l_distill: float
    l_total: float
    mean_alpha: float
    seconds: float = 0.0


class SGD:
    """Plain gradient descent on a named parameter group."""

    def __init__(self, named_params, learning_rate):
        self.params = dict(named_params)
        self.learning_rate = learning_rate

    def step(self):
        for p in self.params.values():
            if p.grad is not None:
                p.data = p.data - self.learning_rate * p.grad

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class _FrozenCache:
    """Frozen-stream embeddings are constant, so compute each input once."""

    def __init__(self, model, dataset):
        self.model = model
        self.dataset = dataset
        self.image_vecs = {}
        self.text_vecs = {}

    def images(self, item_ids):
        out = []
        for i in item_ids:
            if i not in self.image_vecs:
                self.image_vecs[i] = self.model.frozen.encode_image(self.dataset.image(i)).data
            out.append(self.image_vecs[i])
        return np.stack(out)

    def texts(self, token_lists):
        out = []
        for toks in token_lists:
            if toks not in self.text_vecs:
                self.text_vecs[toks] = self.model.frozen.encode_text(toks).data
            out.append(self.text_vecs[toks])
        return np.stack(out)


def build_model(dataset, config):
    return TwoStreamModel(
        dataset.schema,
        dim=config.dim,
        gem_p=config.gem_p,
        seed=config.model_seed,
        no_emd=config.no_emd,
        single_stream=config.single_stream,
    )


def _batch_arrays(dataset, batch):
    q = dataset.images([t.query_id for t in batch])
    tg = dataset.images([t.target_id for t in batch])
    tokens = [t.tokens for t in batch]
    return q, tg, tokens


def _stream_probs(forward, config):
    return losses.similarity_probs(forward.combined, forward.targets, config.tau)


def train_step(model, dataset, batch, config, stream, cache):
    """One SGD update of the given stream; the other stream only teaches."""
    q_imgs, t_imgs, tokens = _batch_arrays(dataset, batch)
    distill = not (config.no_distill or config.single_stream)

    mean_alpha = 0.5  # neutral value when the combiner is ablated away
    if stream == TRAINABLE:
        active = model.forward_trainable(q_imgs, tokens, t_imgs)
        if active.alpha is not None:
            mean_alpha = float(active.alpha.data.mean())
        teacher_probs = None
        if distill:
            with ad.no_grad():
                teacher = model.forward_frozen(
                    cache.images([t.query_id for t in batch]),
                    cache.texts(tokens),
                    cache.images([t.target_id for t in batch]),
                )
                teacher_probs = _stream_probs(teacher, config).data
        params = model.trainable_stream_parameters()
    else:
        active = model.forward_frozen(
            cache.images([t.query_id for t in batch]),
            cache.texts(tokens),
            cache.images([t.target_id for t in batch]),
        )
        teacher_probs = None
        if distill:
            with ad.no_grad():
                teacher = model.forward_trainable(q_imgs, tokens, t_imgs)
                if teacher.alpha is not None:
                    mean_alpha = float(teacher.alpha.data.mean())
                teacher_probs = _stream_probs(teacher, config).data
        params = model.frozen_head_parameters()

    labels = losses.soft_label_matrix(active.targets.data, config.tau, config.soft_label_kernel)
    probs = _stream_probs(active, config)
    lam = 1.0 if config.no_ssg else config.lam
    l_mmc = losses.contrastive_loss(probs, labels, lam)
    if teacher_probs is not None:
        l_distill = losses.distillation_loss(teacher_probs, probs)
        l_total = losses.total_loss(l_mmc, l_distill)
        l_distill_value = l_distill.item()
    else:
        l_total = l_mmc
        l_distill_value = 0.0

    total_value = l_total.item()
    if not np.isfinite(total_value):
        raise NumericsError(f"non-finite loss {total_value} on stream {stream}")

    opt = SGD(params, config.learning_rate)
    opt.zero_grad()
    ad.backward(l_total)
    opt.step()
    opt.zero_grad()
    return StepMetrics(stream, l_mmc.item(), l_distill_value, total_value, mean_alpha)


def _dump_bad_batch(out_dir, epoch, step, stream, batch, err):
    path = os.path.join(out_dir, "bad_batch.json")
    payload = {
        "epoch": epoch,
        "step": step,
        "stream": stream,
        "error": str(err),
        "batch": [
            {"query_id": t.query_id, "target_id": t.target_id, "dominance": t.dominance, "tokens": list(t.tokens)}
            for t in batch
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
    return path


def train(dataset, config, out_dir):
    """Run the full loop; writes metrics.jsonl and a final checkpoint.

    Returns (model, list of per-epoch metric records).
    """
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    model = build_model(dataset, config)
    cache = None if model.frozen is None else _FrozenCache(model, dataset)
    rng = np.random.default_rng([config.shuffle_seed])
    records = []
    global_step = 0

    metrics_path = os.path.join(out_dir, METRICS_NAME)
    with open(metrics_path, "w", encoding="utf-8") as metrics_fh:
        for epoch in range(config.epochs):
            sums = {}
            for_stream = {}
            perm = rng.permutation(len(dataset.train))
            n_batches = len(perm) // config.batch_size  # remainder dropped
            for b in range(n_batches):
                chunk = perm[b * config.batch_size : (b + 1) * config.batch_size]
                batch = [dataset.train[i] for i in chunk]
                if config.single_stream:
                    stream = TRAINABLE
                elif config.alternation == "step":
                    stream = TRAINABLE if global_step % 2 == 0 else FROZEN
                else:
                    stream = TRAINABLE if epoch % 2 == 0 else FROZEN
                started = time.perf_counter()
                try:
                    metrics = train_step(model, dataset, batch, config, stream, cache)
                except NumericsError as err:
                    dump = _dump_bad_batch(out_dir, epoch, global_step, stream, batch, err)
                    raise NumericsError(str(err), dump_path=dump) from err
                metrics.seconds = time.perf_counter() - started
                agg = sums.setdefault(stream, [0.0, 0.0, 0.0, 0.0, 0.0, 0])
                agg[0] += metrics.l_mmc
                agg[1] += metrics.l_distill
                agg[2] += metrics.l_total
                agg[3] += metrics.mean_alpha
                agg[4] += metrics.seconds
                agg[5] += 1
                for_stream[stream] = True
                global_step += 1
            for stream in (TRAINABLE, FROZEN):
                if stream not in for_stream:
                    continue
                l_mmc, l_d, l_tot, alpha, secs, count = sums[stream]
                record = {
                    "epoch": epoch,
                    "stream": stream,
                    "l_mmc": l_mmc / count,
                    "l_distill": l_d / count,
                    "l_total": l_tot / count,
                    "mean_alpha": alpha / count,
                    "seconds": secs,
                }
                records.append(record)
                metrics_fh.write(json.dumps(record) + "\n")
            metrics_fh.flush()

    save_checkpoint(model, out_dir)
    return model, records


def save_checkpoint(model, out_dir):
    checkpoint.save_tensors(model.named_parameters(), os.path.join(out_dir, CHECKPOINT_PREFIX))


def load_checkpoint(model, out_dir):
    """Fill a freshly built model from a run directory; all-or-nothing."""
    checkpoint.load_tensors(model.named_parameters(), os.path.join(out_dir, CHECKPOINT_PREFIX))
    return model
