"""Residual HRF adapter and shared brain encoder, with manual backprop.

All tensors are float64 numpy arrays kept in plain ``name -> array`` dicts.
Affine layers store ``W`` as (out, in) and act on row batches as
``X @ W.T + b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from . import io
from .losses import semantic_grad, total_grad


class NumericError(FloatingPointError):
    """Raised when a loss or gradient becomes non-finite."""


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass(frozen=True)
class ModelDims:
    canonical_len: int = 96
    hidden: int = 128
    n_blocks: int = 2
    embed_dim: int = 64
    proj_hidden: int = 128
    adapter_depth: int = 1
    adapter_residual: bool = True

    def __post_init__(self):
        if self.adapter_depth not in (1, 2, 3):
            raise ValueError("adapter depth must be 1, 2 or 3")
        if not self.adapter_residual and self.adapter_depth != 1:
            raise ValueError("the non-residual adapter variant is single-layer only")

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.data.canonical_len, cfg.model.hidden, cfg.model.n_blocks,
                   cfg.data.embed_dim, cfg.model.proj_hidden, cfg.model.adapter_depth,
                   cfg.model.adapter_residual)

    def as_dict(self):
        return dict(self.__dict__)


@dataclass
class AdapterParams:
    tensors: dict
    depth: int = 1
    residual: bool = True

    @property
    def weight(self):
        return self.tensors[f"W{self.depth - 1}"]

    @property
    def bias(self):
        return self.tensors[f"b{self.depth - 1}"]


@dataclass
class EncoderParams:
    tensors: dict
    n_blocks: int = 2


@dataclass
class ModelParams:
    encoder: EncoderParams
    adapter: AdapterParams | None = None

    def groups(self):
        out = {"encoder": self.encoder.tensors}
        if self.adapter is not None:
            out["adapter"] = self.adapter.tensors
        return out


# -- initialization ----------------------------------------------------------

def _uniform(rng, out_dim, in_dim):
    bound = 1.0 / math.sqrt(in_dim)
    W = rng.uniform(-bound, bound, (out_dim, in_dim))
    b = rng.uniform(-bound, bound, out_dim)
    return W, b


def init_adapter(seed, dims: ModelDims) -> AdapterParams:
    L = dims.canonical_len
    if not dims.adapter_residual:
        return AdapterParams({"W0": np.eye(L), "b0": np.zeros(L)}, 1, False)
    rng = np.random.default_rng([seed, 10])
    t = {}
    for i in range(dims.adapter_depth - 1):
        t[f"W{i}"], _ = _uniform(rng, L, L)
        t[f"b{i}"] = np.zeros(L)
    last = dims.adapter_depth - 1
    # zero output layer: the adapter starts as the identity map
    t[f"W{last}"] = np.zeros((L, L))
    t[f"b{last}"] = np.zeros(L)
    return AdapterParams(t, dims.adapter_depth, True)


def init_encoder(seed, dims: ModelDims) -> EncoderParams:
    rng = np.random.default_rng([seed, 11])
    L, H, E, Hp = dims.canonical_len, dims.hidden, dims.embed_dim, dims.proj_hidden
    t = {}
    t["in.W"], t["in.b"] = _uniform(rng, H, L)
    for i in range(dims.n_blocks):
        t[f"blk{i}.W1"], t[f"blk{i}.b1"] = _uniform(rng, H, H)
        t[f"blk{i}.W2"], t[f"blk{i}.b2"] = _uniform(rng, H, H)
    t["out.W"], t["out.b"] = _uniform(rng, E, H)
    t["proj0.W"], t["proj0.b"] = _uniform(rng, Hp, E)
    t["proj1.W"], t["proj1.b"] = _uniform(rng, Hp, Hp)
    t["proj2.W"], t["proj2.b"] = _uniform(rng, E, Hp)
    t["prior0.W"], t["prior0.b"] = _uniform(rng, E, E)
    t["prior1.W"], t["prior1.b"] = _uniform(rng, E, E)
    return EncoderParams(t, dims.n_blocks)


def init_params(seed, dims: ModelDims):
    return init_adapter(seed, dims), init_encoder(seed, dims)


def count_params(params: ModelParams, trainable_filter=("adapter", "encoder")) -> int:
    groups = params.groups()
    return int(sum(a.size for g in trainable_filter if g in groups for a in groups[g].values()))


# -- forward / backward ------------------------------------------------------

def _rows(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _adapter_run(X, p: AdapterParams):
    t = p.tensors
    L = X.shape[1]
    if t["W0"].shape[1] != L:
        raise ValueError(f"adapter expects length {t['W0'].shape[1]}, got {L}")
    cache = []
    h = X
    for i in range(p.depth):
        a = h @ t[f"W{i}"].T + t[f"b{i}"]
        cache.append((h, a))
        h = gelu(a) if i < p.depth - 1 else a
    out = X + h if p.residual else h
    return out, cache


def adapter_forward(x, p: AdapterParams):
    X, squeeze = _rows(x)
    out, _ = _adapter_run(X, p)
    return out[0] if squeeze else out


def _adapter_backward(p: AdapterParams, cache, g_out, need_input=False):
    t = p.tensors
    grads = {}
    g = g_out
    g_in = g_out.copy() if p.residual else np.zeros_like(g_out)
    for i in reversed(range(p.depth)):
        h, a = cache[i]
        if i < p.depth - 1:
            g = g * gelu_grad(a)
        grads[f"W{i}"] = g.T @ h
        grads[f"b{i}"] = g.sum(axis=0)
        if i > 0 or need_input:
            g = g @ t[f"W{i}"]
    if need_input:
        g_in = g_in + g
    return grads, g_in


def _encoder_run(X, p: EncoderParams):
    t = p.tensors
    if t["in.W"].shape[1] != X.shape[1]:
        raise ValueError(f"encoder expects length {t['in.W'].shape[1]}, got {X.shape[1]}")
    c = {"X": X}
    c["a0"] = X @ t["in.W"].T + t["in.b"]
    h = gelu(c["a0"])
    for i in range(p.n_blocks):
        c[f"h{i}"] = h
        c[f"c{i}"] = h @ t[f"blk{i}.W1"].T + t[f"blk{i}.b1"]
        c[f"d{i}"] = gelu(c[f"c{i}"])
        h = h + c[f"d{i}"] @ t[f"blk{i}.W2"].T + t[f"blk{i}.b2"]
    c["hN"] = h
    y = h @ t["out.W"].T + t["out.b"]
    c["y"] = y
    c["q0"] = y @ t["proj0.W"].T + t["proj0.b"]
    c["p0"] = gelu(c["q0"])
    c["q1"] = c["p0"] @ t["proj1.W"].T + t["proj1.b"]
    c["p1"] = gelu(c["q1"])
    e_b = c["p1"] @ t["proj2.W"].T + t["proj2.b"]
    c["e_b"] = e_b
    c["r0"] = e_b @ t["prior0.W"].T + t["prior0.b"]
    c["s0"] = gelu(c["r0"])
    e_ref = c["s0"] @ t["prior1.W"].T + t["prior1.b"]
    return e_b, e_ref, c


def encoder_forward(x_hat, p: EncoderParams):
    """Map pooled (adapted) voxels to ``(e_b, e_refined)``."""
    X, squeeze = _rows(x_hat)
    e_b, e_ref, _ = _encoder_run(X, p)
    return (e_b[0], e_ref[0]) if squeeze else (e_b, e_ref)


def _lin_back(grads, name, g, inp, W, want_param):
    if want_param:
        grads[f"{name}.W"] = g.T @ inp
        grads[f"{name}.b"] = g.sum(axis=0)
    return g @ W


def _encoder_backward(p: EncoderParams, c, g_eb, g_ref, want_param=True):
    t = p.tensors
    grads = {}
    g = _lin_back(grads, "prior1", g_ref, c["s0"], t["prior1.W"], want_param)
    g = g * gelu_grad(c["r0"])
    g = _lin_back(grads, "prior0", g, c["e_b"], t["prior0.W"], want_param)
    g = g + g_eb
    g = _lin_back(grads, "proj2", g, c["p1"], t["proj2.W"], want_param)
    g = g * gelu_grad(c["q1"])
    g = _lin_back(grads, "proj1", g, c["p0"], t["proj1.W"], want_param)
    g = g * gelu_grad(c["q0"])
    g = _lin_back(grads, "proj0", g, c["y"], t["proj0.W"], want_param)
    g = _lin_back(grads, "out", g, c["hN"], t["out.W"], want_param)
    for i in reversed(range(p.n_blocks)):
        gd = g @ t[f"blk{i}.W2"]
        if want_param:
            grads[f"blk{i}.W2"] = g.T @ c[f"d{i}"]
            grads[f"blk{i}.b2"] = g.sum(axis=0)
        gc = gd * gelu_grad(c[f"c{i}"])
        g = g + _lin_back(grads, f"blk{i}", gc, c[f"h{i}"], t[f"blk{i}.W1"], False)
        if want_param:
            grads[f"blk{i}.W1"] = gc.T @ c[f"h{i}"]
            grads[f"blk{i}.b1"] = gc.sum(axis=0)
    g = g * gelu_grad(c["a0"])
    g_x = _lin_back(grads, "in", g, c["X"], t["in.W"], want_param)
    return grads, g_x


@dataclass
class Batch:
    x: np.ndarray            # pooled voxels of the subject being trained, (B, L)
    targets: np.ndarray      # target embeddings, (B, D)
    partner: np.ndarray | None = None  # pooled same-class voxels of pretrained subjects


@dataclass
class LossSpec:
    kind: str = "total"                  # "semantic" or "total"
    trainable: frozenset = field(default_factory=lambda: frozenset({"adapter"}))
    weights: object = None
    tau: float = 0.1
    supervision: str = "fourier"
    wrap_phase_diff: bool = False
    bidirectional: bool = False


def forward(params: ModelParams, x):
    """Full pipeline: adapter (if present) then encoder. Returns (x_hat, e_b, e_refined)."""
    X, squeeze = _rows(x)
    x_hat = X if params.adapter is None else _adapter_run(X, params.adapter)[0]
    e_b, e_ref, _ = _encoder_run(x_hat, params.encoder)
    if squeeze:
        return x_hat[0], e_b[0], e_ref[0]
    return x_hat, e_b, e_ref


def grad(params: ModelParams, batch: Batch, spec: LossSpec):
    """Loss report and gradients for the trainable parameter groups.

    The returned dict has one entry per trainable group present in
    ``params``; frozen groups get no entry at all.
    """
    X, _ = _rows(batch.x)
    if params.adapter is not None:
        x_hat, a_cache = _adapter_run(X, params.adapter)
    else:
        x_hat, a_cache = X, None
    e_b, e_ref, e_cache = _encoder_run(x_hat, params.encoder)
    if spec.kind == "semantic":
        report, g_b, g_r, _ = semantic_grad(e_b, e_ref, batch.targets, spec.tau, spec.weights,
                                            spec.bidirectional)
        g_xhat_direct = None
    elif spec.kind == "total":
        if batch.partner is None and spec.supervision != "none":
            raise ValueError("cross-subject supervision needs partner voxels")
        partner = batch.partner if batch.partner is not None else x_hat
        report, g = total_grad(e_b, e_ref, batch.targets, x_hat, partner, spec.tau,
                               spec.weights, spec.supervision, spec.wrap_phase_diff,
                               spec.bidirectional)
        g_b, g_r, g_xhat_direct = g["e_b"], g["e_refined"], g["x_i_hat"]
    else:
        raise ValueError(f"unknown loss kind {spec.kind!r}")
    if not math.isfinite(report.total):
        raise NumericError(f"non-finite loss: {report.components}")

    groups = params.groups()
    trainable = [g for g in ("adapter", "encoder") if g in spec.trainable and g in groups]
    out = {}
    if not trainable:
        return report, out
    need_adapter = "adapter" in trainable
    enc_grads, g_xhat = _encoder_backward(params.encoder, e_cache, g_b, g_r,
                                          want_param="encoder" in trainable)
    if "encoder" in trainable:
        out["encoder"] = enc_grads
    if need_adapter:
        if g_xhat_direct is not None:
            g_xhat = g_xhat + g_xhat_direct
        out["adapter"], _ = _adapter_backward(params.adapter, a_cache, g_xhat)
    for group in out.values():
        for name, arr in group.items():
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite gradient for {name}")
    return report, out


# -- checkpoints -------------------------------------------------------------

def params_checksum(tensors: dict) -> str:
    return io.array_dict_checksum(tensors)


def save_checkpoint(directory, tensors: dict, meta: dict) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    sums = {}
    for name in sorted(tensors):
        blob = io.encode_array(tensors[name])
        io.atomic_write_bytes(d / f"{name}.msarr", blob)
        sums[name] = io.sha256_bytes(blob)
    record = {**meta, "weights": sums, "checksum": params_checksum(tensors)}
    io.write_json(d / "checkpoint.json", record)
    return record


def load_checkpoint(directory):
    d = Path(directory)
    record = io.read_json(d / "checkpoint.json")
    tensors = {}
    for name, digest in record["weights"].items():
        path = d / f"{name}.msarr"
        if not path.exists():
            raise io.ArtifactError(f"checkpoint tensor {name} is missing in {d}")
        if io.sha256_file(path) != digest:
            raise io.ArtifactError(f"checksum mismatch for checkpoint tensor {name} in {d}")
        tensors[name] = io.read_array(path)
    return tensors, record
