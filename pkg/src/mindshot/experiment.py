"""In-memory experiment runners shared by the CLI, scripts and acceptance tests."""

from __future__ import annotations

import copy
import dataclasses

from .config import ExperimentConfig
from .metrics import EvalReport, evaluate
from .models import (AdapterParams, EncoderParams, ModelDims, ModelParams, forward,
                     init_adapter, init_encoder)
from .select import select_for_subject
from .synthgen import Dataset, few_shot_subset, subset_by_ids
from .train import _pool_rows, adapt, pretrain


def subject_ids(cfg: ExperimentConfig, dataset: Dataset):
    ids = dataset.subject_ids
    return [ids[i] for i in cfg.pretrain_subjects], ids[cfg.new_subject]


def run_pretrain(cfg: ExperimentConfig, dataset: Dataset, **kw):
    dims = ModelDims.from_config(cfg)
    pre_ids, _ = subject_ids(cfg, dataset)
    enc0 = init_encoder(cfg.seed, dims)
    tcfg = dataclasses.replace(cfg.pretrain, seed=cfg.pretrain.seed + cfg.seed)
    res = pretrain(dataset, pre_ids, enc0, tcfg, **kw)
    return EncoderParams(res.params, dims.n_blocks), res


def fewshot_dataset(cfg: ExperimentConfig, dataset: Dataset, strategy=None, shots=None):
    """Few-shot subset for the new subject: first-k or density-based selection."""
    _, new_id = subject_ids(cfg, dataset)
    strategy = strategy or cfg.select.strategy
    shots = shots or cfg.shots
    if strategy == "first":
        return few_shot_subset(dataset, new_id, shots), None
    if shots != 1:
        raise ValueError("density-based selection is one-shot only")
    L = cfg.data.canonical_len
    chosen = select_for_subject(dataset, new_id, L, cfg.select.method, strategy, cfg.seed)
    return subset_by_ids(dataset, new_id, [c["stimulus_id"] for c in chosen]), chosen


def run_adapt(cfg: ExperimentConfig, fewshot: Dataset, encoder: EncoderParams,
              supervision=None, **kw):
    dims = ModelDims.from_config(cfg)
    pre_ids, new_id = subject_ids(cfg, fewshot)
    adapter0 = init_adapter(cfg.seed, dims)
    tcfg = dataclasses.replace(cfg.adapt, seed=cfg.adapt.seed + cfg.seed)
    if supervision is not None:
        tcfg = dataclasses.replace(tcfg, supervision=supervision)
    res = adapt(fewshot, new_id, pre_ids, encoder, adapter0, tcfg, **kw)
    return AdapterParams(res.params, adapter0.depth, adapter0.residual), res


def predict(dataset: Dataset, subject_id, encoder: EncoderParams, adapter=None, split="test"):
    samples = dataset.select(subject_id, split)
    L = encoder.tensors["in.W"].shape[1]
    X = _pool_rows(samples, L)
    _, e_b, e_ref = forward(ModelParams(encoder, adapter), X)
    return samples, e_b, e_ref


def run_eval(cfg: ExperimentConfig, dataset: Dataset, encoder, adapter=None,
             subject_id=None) -> EvalReport:
    if subject_id is None:
        subject_id = subject_ids(cfg, dataset)[1]
    samples, e_b, _ = predict(dataset, subject_id, encoder, adapter)
    return evaluate(e_b, dataset.targets(samples), [s.class_id for s in samples],
                    dataset.stimulus_set, cfg.eval.topk)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    c = copy.deepcopy(cfg)
    c.seed = seed
    return c
