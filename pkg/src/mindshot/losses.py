"""Training objectives and their analytic gradients.

Spectral and signal losses accept a single vector or a batch of row vectors;
batches are averaged over rows. Every ``*_grad`` function returns the loss
value followed by gradients with respect to each array argument.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import LossWeights
from .spectral import PHASE_EPS, amplitude_phase, full_fft, spectrum_backward

COMPONENTS = ("softclip", "prior", "amp", "pha", "mse")


@dataclass
class LossReport:
    total: float
    components: dict = field(default_factory=dict)


def _pair(x_i, x_j):
    x_i = np.atleast_2d(np.asarray(x_i, dtype=np.float64))
    x_j = np.atleast_2d(np.asarray(x_j, dtype=np.float64))
    if x_i.shape != x_j.shape:
        raise ValueError(f"length mismatch: {x_i.shape} vs {x_j.shape}")
    return x_i, x_j


def _spec(x):
    F = full_fft(x)
    real, imag = F.real + 0.0, F.imag + 0.0
    A, P = amplitude_phase(real, imag)
    return real, imag, A, P


def _wrap(d):
    # map to (-pi, pi]
    w = np.mod(d + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def l_amp_grad(x_i, x_j):
    x_i, x_j = _pair(x_i, x_j)
    B, N = x_i.shape
    Ri, Ii, Ai, _ = _spec(x_i)
    Rj, Ij, Aj, _ = _spec(x_j)
    diff = Ai - Aj
    value = float(np.sum(diff * diff) / (B * N))
    gA = 2.0 * diff / (B * N)
    gx = []
    for R, I, A, sign in ((Ri, Ii, Ai, 1.0), (Rj, Ij, Aj, -1.0)):
        safe = np.where(A < PHASE_EPS, 1.0, A)
        scale = np.where(A < PHASE_EPS, 0.0, sign * gA / safe)
        gx.append(spectrum_backward(scale * R, scale * I))
    return value, gx[0], gx[1]


def l_pha_grad(x_i, x_j, wrap=False):
    x_i, x_j = _pair(x_i, x_j)
    B, N = x_i.shape
    Ri, Ii, Ai, Pi = _spec(x_i)
    Rj, Ij, Aj, Pj = _spec(x_j)
    diff = Pi - Pj
    if wrap:
        diff = _wrap(diff)
    value = float(np.sum(diff * diff) / (B * N))
    gP = 2.0 * diff / (B * N)
    gx = []
    for R, I, A, sign in ((Ri, Ii, Ai, 1.0), (Rj, Ij, Aj, -1.0)):
        A2 = np.where(A < PHASE_EPS, 1.0, A * A)
        scale = np.where(A < PHASE_EPS, 0.0, sign * gP / A2)
        # dP/dR = -I/A^2, dP/dI = R/A^2
        gx.append(spectrum_backward(-scale * I, scale * R))
    return value, gx[0], gx[1]


def l_mse_signal_grad(x_i, x_j):
    x_i, x_j = _pair(x_i, x_j)
    diff = x_i - x_j
    value = float(np.mean(diff * diff))
    g = 2.0 * diff / diff.size
    return value, g, -g


def l_amp(x_i, x_j) -> float:
    return l_amp_grad(x_i, x_j)[0]


def l_pha(x_i, x_j, wrap=False) -> float:
    return l_pha_grad(x_i, x_j, wrap)[0]


def l_fourier(x_i, x_j, wrap=False) -> float:
    return l_amp(x_i, x_j) + l_pha(x_i, x_j, wrap)


def l_mse_signal(x_i, x_j) -> float:
    return l_mse_signal_grad(x_i, x_j)[0]


def _normalize(e):
    n = np.linalg.norm(e, axis=1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cannot normalize a zero-norm embedding row")
    return e / n, n


def _normalize_backward(u, n, gu):
    return (gu - u * np.sum(u * gu, axis=1, keepdims=True)) / n


def _softmax(s):
    s = s - s.max(axis=1, keepdims=True)
    p = np.exp(s)
    return p / p.sum(axis=1, keepdims=True)


def _log_softmax(s):
    s = s - s.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _soft_ce(query, keys, T, tau):
    """Cross-entropy of softmax(query @ keys.T / tau) against soft targets T.

    Returns the value and gradients w.r.t. query, keys and the targets.
    """
    B = query.shape[0]
    logits = query @ keys.T / tau
    logP = _log_softmax(logits)
    value = -np.sum(T * logP) / B
    G = (np.exp(logP) - T) / B
    gq = G @ keys / tau
    gk = G.T @ query / tau
    gT = -logP / B
    return value, gq, gk, gT


def softclip_loss_grad(e_b, e_I, tau, bidirectional=False):
    e_b = np.asarray(e_b, dtype=np.float64)
    e_I = np.asarray(e_I, dtype=np.float64)
    if e_b.shape != e_I.shape or e_b.ndim != 2:
        raise ValueError(f"embedding shapes differ: {e_b.shape} vs {e_I.shape}")
    if e_b.shape[0] < 2:
        raise ValueError("softclip needs a batch of at least 2")
    if not tau > 0:
        raise ValueError("tau must be positive")
    u, nu = _normalize(e_b)
    v, nv = _normalize(e_I)
    T = _softmax(v @ v.T / tau)
    value, gu, gv, gT = _soft_ce(u, v, T, tau)
    if bidirectional:
        value2, gv2, gu2, gT2 = _soft_ce(v, u, T, tau)
        value = 0.5 * (value + value2)
        gu, gv, gT = 0.5 * (gu + gu2), 0.5 * (gv + gv2), 0.5 * (gT + gT2)
    # targets depend on e_I through softmax(v v^T / tau)
    gS = T * (gT - np.sum(T * gT, axis=1, keepdims=True))
    gv = gv + (gS + gS.T) @ v / tau
    return float(value), _normalize_backward(u, nu, gu), _normalize_backward(v, nv, gv)


def softclip_loss(e_b, e_I, tau, bidirectional=False) -> float:
    return softclip_loss_grad(e_b, e_I, tau, bidirectional)[0]


def soft_targets(e_I, tau):
    v, _ = _normalize(np.asarray(e_I, dtype=np.float64))
    return _softmax(v @ v.T / tau)


def target_entropy(e_I, tau) -> float:
    """Row-averaged entropy of the soft targets: the floor of ``softclip_loss``."""
    T = soft_targets(e_I, tau)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(T > 0, T * np.log(T), 0.0)
    return float(h.sum() / T.shape[0])


def prior_loss_grad(e_refined, e_I):
    e_refined = np.atleast_2d(np.asarray(e_refined, dtype=np.float64))
    e_I = np.atleast_2d(np.asarray(e_I, dtype=np.float64))
    if e_refined.shape != e_I.shape:
        raise ValueError(f"shape mismatch: {e_refined.shape} vs {e_I.shape}")
    diff = e_refined - e_I
    g = 2.0 * diff / diff.size
    return float(np.mean(diff * diff)), g, -g


def prior_loss(e_refined, e_I) -> float:
    return prior_loss_grad(e_refined, e_I)[0]


def _report(parts):
    comps = {name: float(val) for name, (val, _) in parts.items()}
    total = 0.0
    for name in COMPONENTS:
        if name in parts:
            total += parts[name][1] * comps[name]
    return LossReport(float(total), comps)


def l_semantic(e_b, e_refined, e_I, tau, weights: LossWeights, bidirectional=False) -> LossReport:
    return semantic_grad(e_b, e_refined, e_I, tau, weights, bidirectional)[0]


def semantic_grad(e_b, e_refined, e_I, tau, weights: LossWeights, bidirectional=False):
    """Weighted softclip + prior. Returns (report, g_e_b, g_e_refined, g_e_I)."""
    sc, g_b, g_I = softclip_loss_grad(e_b, e_I, tau, bidirectional)
    pr, g_r, g_I2 = prior_loss_grad(e_refined, e_I)
    report = _report({"softclip": (sc, weights.w_softclip), "prior": (pr, weights.w_prior)})
    return (report, weights.w_softclip * g_b, weights.w_prior * g_r,
            weights.w_softclip * g_I + weights.w_prior * g_I2)


def supervision_terms(supervision):
    return {"none": (), "mse": ("mse",), "amp": ("amp",), "fourier": ("amp", "pha")}[supervision]


def total_grad(e_b, e_refined, e_I, x_i_hat, x_j_hat, tau, weights: LossWeights,
               supervision="fourier", wrap_phase_diff=False, bidirectional=False):
    """Semantic loss plus the active cross-subject terms.

    Returns ``(report, grads)`` with ``grads`` keyed by argument name.
    """
    sc, g_b, g_I = softclip_loss_grad(e_b, e_I, tau, bidirectional)
    pr, g_r, g_I2 = prior_loss_grad(e_refined, e_I)
    parts = {"softclip": (sc, weights.w_softclip), "prior": (pr, weights.w_prior)}
    grads = {
        "e_b": weights.w_softclip * g_b,
        "e_refined": weights.w_prior * g_r,
        "e_I": weights.w_softclip * g_I + weights.w_prior * g_I2,
        "x_i_hat": np.zeros(np.shape(np.atleast_2d(x_i_hat))),
        "x_j_hat": np.zeros(np.shape(np.atleast_2d(x_j_hat))),
    }
    fns = {
        "amp": (l_amp_grad, weights.w_amp),
        "pha": (lambda a, b: l_pha_grad(a, b, wrap_phase_diff), weights.w_pha),
        "mse": (l_mse_signal_grad, weights.w_mse),
    }
    for name in supervision_terms(supervision):
        fn, w = fns[name]
        val, gi, gj = fn(x_i_hat, x_j_hat)
        parts[name] = (val, w)
        grads["x_i_hat"] += w * gi
        grads["x_j_hat"] += w * gj
    return _report(parts), grads


def l_total(e_b, e_refined, e_I, x_i_hat, x_j_hat, tau, weights: LossWeights,
            supervision="fourier", wrap_phase_diff=False, bidirectional=False) -> LossReport:
    return total_grad(e_b, e_refined, e_I, x_i_hat, x_j_hat, tau, weights, supervision,
                      wrap_phase_diff, bidirectional)[0]
