"""Synthetic multi-subject fMRI generator.

Every subject sees the same stimuli. A shared tuning matrix maps a stimulus
embedding ``z`` to a canonical voxel response ``r = T @ z`` of length ``L``;
each subject then applies its own affine distortion

    x[v] = gain * (1 + gain_profile[v]) * r[v] + bias[v]

where ``gain`` is the peak BOLD response of the subject's double-gamma HRF to a
1 s boxcar. The raw series repeats every canonical position ``raw_multiple``
times and adds i.i.d. Gaussian noise, so adaptive max pooling recovers ``x``
exactly when the noise is zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io
from .config import DataConfig, ExperimentConfig, config_to_dict

CANONICAL_HRF = (6.0, 16.0, 1.0, 1.0, 1.0 / 6.0)
HRF_DT = 0.1
HRF_SPAN = 40.0


@dataclass(frozen=True)
class HRFParams:
    peak_delay: float = 6.0
    undershoot_delay: float = 16.0
    peak_dispersion: float = 1.0
    undershoot_dispersion: float = 1.0
    undershoot_ratio: float = 1.0 / 6.0

    def __post_init__(self):
        vals = (self.peak_delay, self.undershoot_delay, self.peak_dispersion,
                self.undershoot_dispersion)
        if not all(math.isfinite(v) and v > 0 for v in vals):
            raise ValueError(f"HRF delays and dispersions must be positive: {self}")
        if not self.peak_delay < self.undershoot_delay:
            raise ValueError("peak_delay must precede undershoot_delay")
        if not 0 <= self.undershoot_ratio < 1:
            raise ValueError("undershoot_ratio must lie in [0, 1)")

    def as_array(self):
        return np.array([self.peak_delay, self.undershoot_delay, self.peak_dispersion,
                         self.undershoot_dispersion, self.undershoot_ratio])


def _gamma_lobe(t, delay, dispersion):
    # gamma-shaped bump with its mode at ``delay`` and unit height there
    shape = delay / dispersion
    with np.errstate(divide="ignore"):
        logv = shape * np.log(t / delay) - (t - delay) / dispersion
    return np.where(t > 0, np.exp(logv), 0.0)


def double_gamma_hrf(t, p: HRFParams = HRFParams()):
    """Evaluate the double-gamma HRF at time(s) ``t`` (seconds).

    The positive lobe peaks at ``p.peak_delay`` with unit height; the undershoot
    lobe is scaled by ``p.undershoot_ratio``. Scalars in, float out.
    """
    arr = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("HRF time must be finite")
    if np.any(arr < 0):
        raise ValueError("HRF time must be nonnegative")
    h = (_gamma_lobe(arr, p.peak_delay, p.peak_dispersion)
         - p.undershoot_ratio * _gamma_lobe(arr, p.undershoot_delay, p.undershoot_dispersion))
    return float(h) if np.ndim(t) == 0 else h


def bold_gain(p: HRFParams, stimulus_duration: float) -> float:
    """Peak of a boxcar stimulus of the given duration convolved with the HRF."""
    if not (math.isfinite(stimulus_duration) and stimulus_duration > 0):
        raise ValueError("stimulus_duration must be positive")
    n = int(round(HRF_SPAN / HRF_DT)) + 1
    t = np.arange(n) * HRF_DT
    h = double_gamma_hrf(t, p)
    s = (t < stimulus_duration).astype(np.float64)
    y = np.convolve(s, h)[:n] * HRF_DT
    return float(y.max())


@dataclass
class SubjectProfile:
    subject_id: str
    raw_len: int
    gain: float
    gain_profile: np.ndarray
    bias: np.ndarray
    hrf: HRFParams
    noise_sigma: float = 0.0

    def __post_init__(self):
        L = len(self.gain_profile)
        if len(self.bias) != L:
            raise ValueError("gain_profile and bias must share the canonical length")
        if L == 0 or self.raw_len % L:
            raise ValueError(f"raw_len {self.raw_len} is not a multiple of {L}")
        if not self.gain > 0:
            raise ValueError("gain must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")

    @property
    def canonical_len(self):
        return len(self.gain_profile)

    @property
    def raw_multiple(self):
        return self.raw_len // self.canonical_len


def _rng(*key):
    return np.random.default_rng([int(k) for k in key])


def sample_hrf(rng) -> HRFParams:
    peak = float(np.clip(rng.normal(6.0, 0.5), 4.5, 7.5))
    under = float(max(rng.normal(16.0, 1.0), peak + 1.0))
    ratio = float(np.clip(rng.normal(1.0 / 6.0, 0.02), 1e-3, 0.999))
    return HRFParams(peak, under, 1.0, 1.0, ratio)


def make_subject(seed: int, canonical_len: int, raw_multiple: int, *,
                 subject_id: str | None = None, noise_sigma: float = 0.0) -> SubjectProfile:
    if canonical_len < 1:
        raise ValueError("canonical_len must be positive")
    if not 2 <= raw_multiple <= 8:
        raise ValueError("raw_multiple must lie in [2, 8]")
    rng = _rng(seed)
    hrf = sample_hrf(rng)
    gain_profile = np.clip(rng.normal(0.0, 0.1, canonical_len), -0.2, 0.2)
    bias = rng.normal(0.0, 0.3, canonical_len)
    return SubjectProfile(
        subject_id=subject_id if subject_id is not None else f"seed{seed}",
        raw_len=raw_multiple * canonical_len,
        gain=bold_gain(hrf, 1.0),
        gain_profile=gain_profile,
        bias=bias,
        hrf=hrf,
        noise_sigma=float(noise_sigma),
    )


@dataclass
class Stimulus:
    stimulus_id: str
    class_id: int
    embedding: np.ndarray


@dataclass
class StimulusSet:
    n_classes: int
    prototypes: np.ndarray
    stimuli: list

    def __post_init__(self):
        self._index = {s.stimulus_id: i for i, s in enumerate(self.stimuli)}
        if len(self._index) != len(self.stimuli):
            raise ValueError("stimulus ids must be unique")

    def __getitem__(self, stimulus_id) -> Stimulus:
        return self.stimuli[self._index[stimulus_id]]

    def index(self, stimulus_id) -> int:
        return self._index[stimulus_id]

    @property
    def embeddings(self):
        return np.stack([s.embedding for s in self.stimuli])

    @property
    def ids(self):
        return [s.stimulus_id for s in self.stimuli]


@dataclass
class VoxelSeries:
    subject_id: str
    stimulus_id: str
    class_id: int
    values: np.ndarray
    split: str = "train"


def canonical_response(tuning, z):
    tuning = np.asarray(tuning, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if tuning.ndim != 2 or z.ndim != 1 or tuning.shape[1] != z.shape[0]:
        raise ValueError(f"tuning {tuning.shape} does not match embedding {z.shape}")
    return tuning @ z


def subject_response(subject: SubjectProfile, r, nonlinearity=False):
    x = subject.gain * (1.0 + subject.gain_profile) * r + subject.bias
    if nonlinearity:
        x = 2.0 * np.tanh(x / 2.0)
    return x


def synthesize_sample(subject: SubjectProfile, stimulus, tuning, noise_seed: int, *,
                      nonlinearity=False, split="train") -> VoxelSeries:
    """Raw voxel series of one subject viewing one stimulus.

    ``stimulus`` is a ``Stimulus`` or an ``(id, class, embedding)`` tuple.
    """
    if not isinstance(stimulus, Stimulus):
        stimulus = Stimulus(*stimulus)
    r = canonical_response(tuning, stimulus.embedding)
    if r.shape[0] != subject.canonical_len:
        raise ValueError("tuning rows must equal the subject's canonical length")
    x = subject_response(subject, r, nonlinearity)
    raw = np.repeat(x, subject.raw_multiple)
    if subject.noise_sigma > 0:
        raw = raw + subject.noise_sigma * _rng(noise_seed).standard_normal(raw.shape[0])
    return VoxelSeries(subject.subject_id, stimulus.stimulus_id, stimulus.class_id, raw, split)


@dataclass
class Dataset:
    subjects: list
    stimulus_set: StimulusSet
    tuning: np.ndarray
    samples: list
    config: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def subject(self, subject_id) -> SubjectProfile:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(f"unknown subject {subject_id!r}")

    @property
    def subject_ids(self):
        return [s.subject_id for s in self.subjects]

    def select(self, subject_id=None, split=None):
        return [s for s in self.samples
                if (subject_id is None or s.subject_id == subject_id)
                and (split is None or s.split == split)]

    def targets(self, samples):
        return np.stack([self.stimulus_set[s.stimulus_id].embedding for s in samples])


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def make_tuning(seed, canonical_len, embed_dim):
    return _rng(seed, 2).standard_normal((canonical_len, embed_dim))


def make_stimuli(seed, n_classes, per_class, embed_dim, sigma_stim) -> StimulusSet:
    rng = _rng(seed, 1)
    prototypes = _unit(rng.standard_normal((n_classes, embed_dim)))
    stimuli = []
    for c in range(n_classes):
        jitter = rng.standard_normal((per_class, embed_dim))
        for k in range(per_class):
            z = _unit(prototypes[c] + sigma_stim * jitter[k])
            stimuli.append(Stimulus(f"c{c:03d}_s{k:03d}", c, z))
    return StimulusSet(n_classes, prototypes, stimuli)


def build_dataset(cfg) -> Dataset:
    """Generate the full multi-subject dataset for a config (deterministic in its seed)."""
    if isinstance(cfg, ExperimentConfig):
        seed, dcfg = cfg.seed, cfg.data
    else:
        seed, dcfg = 0, cfg
    dcfg.validate()
    per_class = dcfg.train_per_class + dcfg.test_per_class
    stimulus_set = make_stimuli(seed, dcfg.n_classes, per_class, dcfg.embed_dim, dcfg.sigma_stim)
    tuning = make_tuning(seed, dcfg.canonical_len, dcfg.embed_dim)
    multiples = _rng(seed, 3).integers(2, dcfg.raw_multiple + 1, size=dcfg.n_subjects)
    subjects = [
        make_subject(int(_rng(seed, 4, i).integers(2**31)), dcfg.canonical_len, int(multiples[i]),
                     subject_id=f"sub{i + 1:02d}", noise_sigma=dcfg.noise_sigma)
        for i in range(dcfg.n_subjects)
    ]
    samples = []
    for i, subj in enumerate(subjects):
        for j, stim in enumerate(stimulus_set.stimuli):
            k = j % per_class
            split = "train" if k < dcfg.train_per_class else "test"
            noise_seed = int(_rng(seed, 5, i, j).integers(2**31))
            samples.append(synthesize_sample(subj, stim, tuning, noise_seed,
                                             nonlinearity=dcfg.subject_nonlinearity, split=split))
    return Dataset(subjects, stimulus_set, tuning, samples, dcfg, seed)


def subset_by_ids(dataset: Dataset, subject_id, keep_ids) -> Dataset:
    """Keep only ``keep_ids`` in the named subject's train split."""
    dataset.subject(subject_id)
    keep = set(keep_ids)
    samples = [s for s in dataset.samples
               if s.subject_id != subject_id or s.split != "train" or s.stimulus_id in keep]
    return replace(dataset, samples=samples)


def few_shot_subset(dataset: Dataset, subject_id, k: int) -> Dataset:
    """Per class, keep the first ``k`` train stimuli (by id) of one subject."""
    train = dataset.select(subject_id, "train")
    by_class = {}
    for s in train:
        by_class.setdefault(s.class_id, []).append(s.stimulus_id)
    if not by_class:
        raise ValueError(f"subject {subject_id!r} has no train samples")
    smallest = min(len(v) for v in by_class.values())
    if not 1 <= k <= smallest:
        raise ValueError(f"k={k} outside [1, {smallest}] for subject {subject_id!r}")
    keep = [sid for c in sorted(by_class) for sid in sorted(by_class[c])[:k]]
    return subset_by_ids(dataset, subject_id, keep)


# -- serialization -----------------------------------------------------------

def save_dataset(dataset: Dataset, directory) -> dict:
    """Write arrays plus ``manifest.json``; returns the manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {
        "prototypes": dataset.stimulus_set.prototypes,
        "stimuli": dataset.stimulus_set.embeddings,
        "tuning": dataset.tuning,
    }
    subjects = []
    for subj in dataset.subjects:
        rows = dataset.select(subj.subject_id)
        arrays[f"voxels_{subj.subject_id}"] = (np.stack([s.values for s in rows])
                                               if rows else np.zeros((0, subj.raw_len)))
        arrays[f"profile_{subj.subject_id}"] = np.stack([subj.gain_profile, subj.bias])
        subjects.append({
            "subject_id": subj.subject_id,
            "raw_len": subj.raw_len,
            "gain": subj.gain,
            "hrf": subj.hrf.as_array().tolist(),
            "noise_sigma": subj.noise_sigma,
            "samples": [[s.stimulus_id, s.split] for s in rows],
        })
    checksums = {}
    for name, arr in arrays.items():
        blob = io.encode_array(arr)
        io.atomic_write_bytes(d / f"{name}.msarr", blob)
        checksums[f"{name}.msarr"] = io.sha256_bytes(blob)
    manifest = {
        "kind": "dataset",
        "seed": dataset.seed,
        "config": config_to_dict(dataset.config),
        "counts": {
            "subjects": len(dataset.subjects),
            "classes": dataset.stimulus_set.n_classes,
            "stimuli": len(dataset.stimulus_set.stimuli),
            "samples": len(dataset.samples),
            "train": sum(s.split == "train" for s in dataset.samples),
            "test": sum(s.split == "test" for s in dataset.samples),
        },
        "stimuli": [[s.stimulus_id, s.class_id] for s in dataset.stimulus_set.stimuli],
        "subjects": subjects,
        "checksums": checksums,
    }
    io.write_json(d / "manifest.json", manifest)
    return manifest


def load_dataset(directory, verify=True) -> Dataset:
    d = Path(directory)
    manifest = io.read_json(d / "manifest.json")
    if verify:
        for fname, digest in manifest["checksums"].items():
            if not (d / fname).exists():
                raise io.ArtifactError(f"dataset file {fname} is missing")
            if io.sha256_file(d / fname) != digest:
                raise io.ArtifactError(f"checksum mismatch for dataset file {fname}")
    emb = io.read_array(d / "stimuli.msarr")
    stimuli = [Stimulus(sid, int(c), emb[i]) for i, (sid, c) in enumerate(manifest["stimuli"])]
    stimulus_set = StimulusSet(int(manifest["counts"]["classes"]),
                               io.read_array(d / "prototypes.msarr"), stimuli)
    subjects, samples = [], []
    for entry in manifest["subjects"]:
        sid = entry["subject_id"]
        prof = io.read_array(d / f"profile_{sid}.msarr")
        subj = SubjectProfile(sid, int(entry["raw_len"]), float(entry["gain"]), prof[0], prof[1],
                              HRFParams(*entry["hrf"]), float(entry["noise_sigma"]))
        subjects.append(subj)
        vox = io.read_array(d / f"voxels_{sid}.msarr")
        for row, (stim_id, split) in zip(vox, entry["samples"]):
            samples.append(VoxelSeries(sid, stim_id, stimulus_set[stim_id].class_id, row, split))
    data_cfg = DataConfig(**manifest["config"])
    return Dataset(subjects, stimulus_set, io.read_array(d / "tuning.msarr"), samples,
                   data_cfg, int(manifest["seed"]))
