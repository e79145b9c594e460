"""One-shot stimulus selection from a 1-D Gaussian density of each class's voxels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spectral import adaptive_max_pool

EPS_STD = 1e-9
STRATEGIES = ("kda_max", "kda_min", "random")


@dataclass
class ClassDensityModel:
    class_id: int
    method: str
    coordinates: np.ndarray
    mean: float
    std: float

    def pdf(self, x):
        z = (np.asarray(x) - self.mean) / self.std
        return np.exp(-0.5 * z * z) / (self.std * np.sqrt(2 * np.pi))


def _pca_1d(X):
    Xc = X - X.mean(axis=0)
    # leading right singular vector; sign fixed so its first nonzero loading is positive
    _, _, Vt = np.linalg.svd(Xc, full_matrices=False)
    v = Vt[0]
    nz = np.flatnonzero(np.abs(v) > 0)
    if nz.size and v[nz[0]] < 0:
        v = -v
    return Xc @ v


def tsne_perplexity(n):
    return min(30.0, max(1.0, (n - 1) / 3.0))


def project_1d(samples, method="pca", seed=0) -> np.ndarray:
    """Project a class's pooled voxel vectors (rows) to one coordinate each."""
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n = X.shape[0]
    if n == 0 or X.size == 0:
        raise ValueError("cannot project an empty sample list")
    if n == 1:
        return np.zeros(1)
    if method == "pca" or n <= 3:
        return _pca_1d(X)
    if method != "tsne":
        raise ValueError(f"unknown projection method {method!r}")
    from sklearn.manifold import TSNE

    emb = TSNE(n_components=1, perplexity=tsne_perplexity(n), random_state=seed,
               init="pca", method="exact").fit_transform(X)
    return emb[:, 0].astype(np.float64)


def fit_gaussian(coordinates, class_id=-1, method="pca") -> ClassDensityModel:
    c = np.asarray(coordinates, dtype=np.float64)
    if c.size == 0 or not np.all(np.isfinite(c)):
        raise ValueError("coordinates must be a nonempty finite vector")
    return ClassDensityModel(class_id, method, c, float(c.mean()), max(float(c.std()), EPS_STD))


def select_stimulus(model: ClassDensityModel, stimulus_ids, strategy="kda_max", seed=0) -> str:
    """Pick one stimulus of the class; ``stimulus_ids`` align with the model coordinates."""
    ids = list(stimulus_ids)
    if not ids:
        raise ValueError("empty class")
    if len(ids) != model.coordinates.size:
        raise ValueError("coordinates and stimulus ids differ in length")
    if strategy == "random":
        return ids[int(np.random.default_rng([seed, model.class_id + 1]).integers(len(ids)))]
    dist = np.abs(model.coordinates - model.mean)
    if strategy == "kda_max":
        best = dist.min()
    elif strategy == "kda_min":
        best = dist.max()
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return min(i for i, d in zip(ids, dist) if d == best)


def select_for_subject(dataset, subject_id, L, method="pca", strategy="kda_max", seed=0):
    """Run selection for every class of one subject's train split.

    Returns a list of per-class records (the ``selection.json`` payload).
    """
    train = dataset.select(subject_id, "train")
    by_class = {}
    for s in train:
        by_class.setdefault(s.class_id, []).append(s)
    out = []
    for c in sorted(by_class):
        members = sorted(by_class[c], key=lambda s: s.stimulus_id)
        X = adaptive_max_pool(np.stack([s.values for s in members]), L)
        coords = project_1d(X, method, seed)
        model = fit_gaussian(coords, c, method)
        ids = [s.stimulus_id for s in members]
        out.append({
            "class_id": int(c),
            "method": method,
            "strategy": strategy,
            "stimulus_id": select_stimulus(model, ids, strategy, seed),
            "mean": model.mean,
            "std": model.std,
            "coordinates": {i: float(x) for i, x in zip(ids, coords)},
        })
    return out
