"""Scale normalization and Fourier analysis of voxel vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PHASE_EPS = 1e-12


@dataclass
class PooledVoxels:
    values: np.ndarray
    subject_id: str = ""
    stimulus_id: str = ""
    class_id: int = -1


@dataclass
class Spectrum:
    real: np.ndarray
    imag: np.ndarray
    amplitude: np.ndarray
    phase: np.ndarray


def pool_bounds(V: int, L: int):
    """Inclusive-exclusive segment bounds ``[floor(i*V/L), ceil((i+1)*V/L))``."""
    i = np.arange(L)
    starts = (i * V) // L
    ends = -((-(i + 1) * V) // L)
    return starts, ends


def adaptive_max_pool(x, L: int) -> np.ndarray:
    """Adaptive 1-D max pooling of the last axis down to length ``L``."""
    x = np.asarray(x, dtype=np.float64)
    V = x.shape[-1]
    if L < 1:
        raise ValueError("target length must be >= 1")
    if V < L:
        raise ValueError(f"cannot pool length {V} up to {L}")
    if V % L == 0:
        return x.reshape(*x.shape[:-1], L, V // L).max(axis=-1)
    starts, ends = pool_bounds(V, L)
    out = np.empty(x.shape[:-1] + (L,))
    for i in range(L):
        out[..., i] = x[..., starts[i]:ends[i]].max(axis=-1)
    return out


def pool_series(series, L: int) -> PooledVoxels:
    return PooledVoxels(adaptive_max_pool(series.values, L), series.subject_id,
                        series.stimulus_id, series.class_id)


def full_fft(x):
    """Two-sided DFT of real rows, built from the real-input transform.

    Mirroring the half spectrum keeps the DC and Nyquist bins exactly real and
    the spectrum exactly Hermitian, so phases are reproducible.
    """
    x = np.asarray(x, dtype=np.float64)
    N = x.shape[-1]
    half = np.fft.rfft(x, axis=-1)
    mirror = np.conj(half[..., 1:(N + 1) // 2][..., ::-1])
    F = np.concatenate([half, mirror], axis=-1)
    # rfft leaves tiny round-off in the imaginary part of real bins; drop it
    F[..., 0] = F[..., 0].real
    if N % 2 == 0:
        F[..., N // 2] = F[..., N // 2].real
    return F


def amplitude_phase(real, imag):
    real = np.asarray(real, dtype=np.float64)
    imag = np.asarray(imag, dtype=np.float64) + 0.0  # -0.0 -> +0.0
    A = np.hypot(real, imag)
    P = np.arctan2(imag, real)
    P = np.where(P <= -np.pi, np.pi, P)
    P = np.where(A < PHASE_EPS, 0.0, P)
    return A, P


def dft(x) -> Spectrum:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 1:
        raise ValueError("dft needs at least one sample")
    if not np.all(np.isfinite(x)):
        raise ValueError("dft input must be finite")
    F = full_fft(x)
    real, imag = F.real + 0.0, F.imag + 0.0
    A, P = amplitude_phase(real, imag)
    return Spectrum(real, imag, A, P)


def spectrum_backward(g_real, g_imag):
    """Map gradients w.r.t. the real/imag spectrum back to the real signal."""
    N = g_real.shape[-1]
    return (N * np.fft.ifft(g_real + 1j * g_imag, axis=-1)).real
