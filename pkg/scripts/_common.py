"""Shared helpers for the experiment scripts (run from the repo root)."""

import argparse
import csv
import sys
from functools import lru_cache
from pathlib import Path

from mindshot.config import load_config
from mindshot.experiment import fewshot_dataset, run_adapt, run_eval, run_pretrain, with_seed
from mindshot.synthgen import build_dataset

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"


def parser(doc, seeds=3):
    p = argparse.ArgumentParser(description=doc)
    p.add_argument("-c", "--config", default=str(DESK))
    p.add_argument("--seeds", type=int, default=seeds)
    p.add_argument("--noise", type=float, help="override data.noise_sigma")
    p.add_argument("--csv", help="write per-seed rows here (default stdout)")
    return p


def base_config(args):
    cfg = load_config(args.config)
    if args.noise is not None:
        cfg.data.noise_sigma = args.noise
    return cfg


@lru_cache(maxsize=None)
def _pretrained(cfg_key, seed):
    cfg = with_seed(_CFGS[cfg_key], seed)
    ds = build_dataset(cfg)
    enc, _ = run_pretrain(cfg, ds)
    return cfg, ds, enc


_CFGS = {}


def two_way(cfg, seed, supervision, shots=1, strategy="first"):
    """Two-way accuracy on the new subject; ``supervision='zero-shot'`` skips adaptation."""
    _CFGS.setdefault(id(cfg), cfg)
    c, ds, enc = _pretrained(id(cfg), seed)
    if supervision == "zero-shot":
        return run_eval(c, ds, enc).two_way_accuracy
    fs, _ = fewshot_dataset(c, ds, strategy, shots)
    adapter, _ = run_adapt(c, fs, enc, supervision)
    return run_eval(c, ds, enc, adapter).two_way_accuracy


def emit(rows, header, path=None):
    fh = open(path, "w", newline="") if path else sys.stdout
    w = csv.writer(fh)
    w.writerow(header)
    w.writerows(rows)
    if path:
        fh.close()


def summarize(rows, key_idx, val_idx):
    groups = {}
    for r in rows:
        groups.setdefault(r[key_idx], []).append(r[val_idx])
    for k, v in groups.items():
        print(f"# {k:>10s}  mean two-way {sum(v) / len(v):.4f}  (n={len(v)})", file=sys.stderr)
