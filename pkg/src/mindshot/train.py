"""Two-stage training: multi-subject pretraining and few-shot adaptation."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .models import (AdapterParams, Batch, EncoderParams, LossSpec, ModelParams, grad,
                     params_checksum, save_checkpoint)
from .spectral import adaptive_max_pool

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "lr", "total", "softclip", "prior", "amp", "pha", "mse")


def cyclical_lr(step: int, total_steps: int, max_lr: float) -> float:
    """One-cycle triangular schedule.

    Linear warmup from ``max_lr/25`` to ``max_lr`` over the first 30% of steps,
    then linear decay to ``max_lr/100`` at the last step.
    """
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    start, end = max_lr / 25.0, max_lr / 100.0
    peak = max(1, int(0.3 * total_steps))
    last = total_steps - 1
    if step <= peak:
        return start + (max_lr - start) * step / peak
    return max_lr + (end - max_lr) * (step - peak) / (last - peak)


@dataclass
class OptState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: OptState, lr: float, hyper: TrainConfig):
    """Adam step with decoupled weight decay. Returns new params and state; inputs untouched."""
    t = state.step + 1
    b1, b2 = hyper.beta1, hyper.beta2
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_p[name] = p
            continue
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        q = p * (1 - lr * hyper.weight_decay) if hyper.weight_decay else p
        new_p[name] = q - lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
        new_m[name], new_v[name] = m, v
    return new_p, OptState(t, new_m, new_v)


def _pool_rows(samples, L):
    # pool per subject: raw lengths differ between subjects
    out = np.empty((len(samples), L))
    by_len = {}
    for i, s in enumerate(samples):
        by_len.setdefault(len(s.values), []).append(i)
    for idx in by_len.values():
        out[idx] = adaptive_max_pool(np.stack([samples[i].values for i in idx]), L)
    return out


def _log_row(step, lr, report):
    row = {"step": step, "lr": lr, "total": report.total}
    for k in LOG_COLUMNS[3:]:
        row[k] = report.components.get(k, "")
    return row


def write_log(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


@dataclass
class TrainResult:
    params: dict
    log: list
    checkpoints: list = field(default_factory=list)

    def epoch_means(self, steps_per_epoch):
        tot = np.array([r["total"] for r in self.log])
        n = len(tot) // steps_per_epoch
        return tot[: n * steps_per_epoch].reshape(n, steps_per_epoch).mean(axis=1)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if out and len(out[-1]) < 2:
        log.warning("dropping a trailing batch of size %d (softclip needs >= 2)", len(out[-1]))
        out.pop()
    return out


def pretrain(dataset, subjects, encoder: EncoderParams, cfg: TrainConfig, *,
             checkpoint_dir=None, meta=None) -> TrainResult:
    """Train the shared encoder on pooled voxels of several subjects.

    ``encoder`` is the initial parameter set; a trained copy is returned.
    """
    if len(subjects) < 2:
        raise ValueError("pretraining needs at least two subjects")
    L = encoder.tensors["in.W"].shape[1]
    samples = [s for sid in subjects for s in dataset.select(sid, "train")]
    X = _pool_rows(samples, L)
    Y = dataset.targets(samples)
    weights = copy.copy(cfg.weights)
    if not cfg.use_prior:
        weights.w_prior = 0.0
    spec = LossSpec("semantic", frozenset({"encoder"}), weights, cfg.tau,
                    bidirectional=cfg.bidirectional)
    tensors = {k: v.copy() for k, v in encoder.tensors.items()}
    epochs = [_batches(len(samples), cfg.batch_size, np.random.default_rng([cfg.seed, 20, e]))
              for e in range(cfg.epochs)]
    total_steps = sum(len(b) for b in epochs)
    if total_steps == 0:
        raise ValueError("no batch with at least two samples")
    state = OptState()
    rows, ckpts, step = [], [], 0
    for epoch, batches in enumerate(epochs):
        for idx in batches:
            lr = cyclical_lr(step, total_steps, cfg.max_lr)
            params = ModelParams(EncoderParams(tensors, encoder.n_blocks))
            report, g = grad(params, Batch(X[idx], Y[idx]), spec)
            tensors, state = optimizer_step(tensors, g["encoder"], state, lr, cfg)
            rows.append(_log_row(step, lr, report))
            step += 1
        if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            rec = save_checkpoint(Path(checkpoint_dir) / f"epoch{epoch + 1:04d}", tensors,
                                  {**(meta or {}), "phase": "pretrain", "epoch": epoch + 1,
                                   "step": step, "loss": rows[-1]["total"]})
            ckpts.append(rec)
    return TrainResult(tensors, rows, ckpts)


class PairingError(ValueError):
    pass


@dataclass
class PairingPlan:
    """Same-class partner candidates (rows of the pooled partner pool) per anchor."""
    candidates: list
    pool: np.ndarray
    pool_classes: np.ndarray

    @classmethod
    def build(cls, dataset, anchors, pretrained_subjects, L):
        partners = [s for sid in pretrained_subjects for s in dataset.select(sid, "train")]
        pool = _pool_rows(partners, L)
        classes = np.array([s.class_id for s in partners], dtype=int)
        cands = []
        for a in anchors:
            idx = np.flatnonzero(classes == a.class_id)
            if idx.size == 0:
                raise PairingError(f"class {a.class_id} has no samples in any pretrained subject")
            cands.append(idx)
        return cls(cands, pool, classes)

    def draw(self, rng):
        return np.array([c[rng.integers(c.size)] for c in self.candidates], dtype=int)


def adapt(dataset, new_subject, pretrained_subjects, encoder: EncoderParams,
          adapter: AdapterParams, cfg: TrainConfig, *, checkpoint_dir=None,
          meta=None) -> TrainResult:
    """Train only the adapter of ``new_subject`` against the frozen encoder."""
    L = encoder.tensors["in.W"].shape[1]
    anchors = dataset.select(new_subject, "train")
    if len(anchors) < 2:
        raise ValueError("adaptation needs at least two training samples")
    X = _pool_rows(anchors, L)
    Y = dataset.targets(anchors)
    plan = PairingPlan.build(dataset, anchors, pretrained_subjects, L)
    weights = copy.copy(cfg.weights)
    if not cfg.use_prior:
        weights.w_prior = 0.0
    spec = LossSpec("total", frozenset({"adapter"}), weights, cfg.tau, cfg.supervision,
                    cfg.wrap_phase_diff, cfg.bidirectional)
    tensors = {k: v.copy() for k, v in adapter.tensors.items()}
    frozen = EncoderParams(encoder.tensors, encoder.n_blocks)
    enc_sum = params_checksum(encoder.tensors)
    plans = []
    for e in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 30, e])
        plans.append((_batches(len(anchors), cfg.batch_size, rng), plan.draw(rng)))
    total_steps = sum(len(b) for b, _ in plans)
    state = OptState()
    rows, ckpts, step = [], [], 0
    for epoch, (batches, partner_idx) in enumerate(plans):
        for idx in batches:
            lr = cyclical_lr(step, total_steps, cfg.max_lr)
            params = ModelParams(frozen, AdapterParams(tensors, adapter.depth, adapter.residual))
            batch = Batch(X[idx], Y[idx], plan.pool[partner_idx[idx]])
            report, g = grad(params, batch, spec)
            tensors, state = optimizer_step(tensors, g["adapter"], state, lr, cfg)
            rows.append(_log_row(step, lr, report))
            step += 1
        if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            ckpts.append(save_checkpoint(
                Path(checkpoint_dir) / f"epoch{epoch + 1:04d}", tensors,
                {**(meta or {}), "phase": "adapt", "epoch": epoch + 1, "step": step,
                 "loss": rows[-1]["total"]}))
    if params_checksum(encoder.tensors) != enc_sum:
        raise RuntimeError("encoder parameters changed during adaptation")
    return TrainResult(tensors, rows, ckpts)
