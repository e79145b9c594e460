"""Pipeline stages with on-disk artifacts and checksum-chained run manifests.

Layout under ``output_dir``::

    data/                       dataset arrays + manifest.json
    pretrain/                   encoder checkpoint, train_log.csv, run_manifest.json
    select/<strategy>/          selection.json
    adapt/<tag>/                adapter checkpoint, train_log.csv
    eval/<tag>/                 eval_report.json, predictions.msarr
    report/tables/*.csv         comparison tables (+ plots/*.csv)
    sweeps/<axis>/              ablation sweeps, each with its own adapt/ and eval/

Every stage finishes by atomically writing ``run_manifest.json`` with the
config echo, input and output checksums and final metrics. Wall-clock time
goes into a ``timing.json`` sidecar so that manifests stay byte-identical
between reruns.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import time
from pathlib import Path


from . import __version__, io
from .config import ExperimentConfig, config_to_dict
from .experiment import predict, subject_ids
from .metrics import evaluate, report_row, rows_to_csv
from .models import (AdapterParams, EncoderParams, ModelDims, init_adapter, init_encoder,
                     load_checkpoint, save_checkpoint)
from .select import select_for_subject
from .synthgen import build_dataset, few_shot_subset, load_dataset, save_dataset, subset_by_ids
from .train import adapt, pretrain, write_log

log = logging.getLogger(__name__)

MANIFEST = "run_manifest.json"
TIMING = "timing.json"


class StageError(io.ArtifactError):
    """An upstream stage's artifacts are missing or inconsistent."""


# -- manifest helpers --------------------------------------------------------

def config_echo(cfg: ExperimentConfig) -> dict:
    d = config_to_dict(cfg)
    d.pop("output_dir", None)
    return d


def _rel(root: Path, path: Path) -> str:
    return path.relative_to(root).as_posix()


def write_manifest(root: Path, stage_dir: Path, stage: str, cfg, inputs: dict, outputs: list,
                   metrics=None, extra=None, started=None) -> dict:
    """Checksum ``outputs`` (paths) and write the stage manifest."""
    out_sums = {_rel(root, p): io.sha256_file(p) for p in sorted(outputs)}
    manifest = {
        "stage": stage,
        "tool_version": __version__,
        "config": config_echo(cfg),
        "inputs": dict(sorted(inputs.items())),
        "outputs": out_sums,
        "metrics": metrics or {},
        "sidecars": [_rel(root, stage_dir / TIMING)],
    }
    if extra:
        manifest.update(extra)
    if started is not None:
        io.write_json(stage_dir / TIMING, {"wall_seconds": time.time() - started})
    else:
        io.write_json(stage_dir / TIMING, {"wall_seconds": 0.0})
    io.write_json(stage_dir / MANIFEST, manifest)
    return manifest


def check_stage(root: Path, stage_dir: Path, stage: str, force=False) -> dict:
    """Load a stage manifest and verify its outputs; returns ``{manifest_relpath: sha}``."""
    mpath = stage_dir / MANIFEST
    if not mpath.exists():
        raise StageError(f"missing upstream stage '{stage}': {mpath} not found")
    manifest = io.read_json(mpath)
    for rel, digest in manifest["outputs"].items():
        p = root / rel
        if not p.exists():
            raise StageError(f"stage '{stage}' artifact {rel} is missing")
        if io.sha256_file(p) != digest:
            if force:
                log.warning("checksum mismatch for %s ignored (--force)", rel)
            else:
                raise StageError(f"checksum mismatch for stage '{stage}' artifact {rel}; "
                                 "rerun the stage or pass --force")
    return {_rel(root, mpath): io.sha256_file(mpath)}


def _timed_log(stage, t0):
    log.info("%s finished in %.1fs", stage, time.time() - t0)


# -- stages ------------------------------------------------------------------

def data_dir(root):
    return Path(root) / "data"


def stage_gen_data(cfg: ExperimentConfig, root) -> dict:
    t0 = time.time()
    root = Path(root)
    d = data_dir(root)
    ds = build_dataset(cfg)
    manifest = save_dataset(ds, d)
    outputs = [d / f for f in manifest["checksums"]] + [d / "manifest.json"]
    m = write_manifest(root, d, "gen-data", cfg, {}, outputs,
                       metrics={"counts": manifest["counts"],
                                "dataset_checksum": io.sha256_file(d / "manifest.json")},
                       started=t0)
    _timed_log("gen-data", t0)
    return m


def _load_data(cfg, root, force):
    inputs = check_stage(root, data_dir(root), "gen-data", force)
    return load_dataset(data_dir(root), verify=not force), inputs


def pretrain_dir(root):
    return Path(root) / "pretrain"


def stage_pretrain(cfg: ExperimentConfig, root, force=False) -> dict:
    t0 = time.time()
    root = Path(root)
    ds, inputs = _load_data(cfg, root, force)
    dims = ModelDims.from_config(cfg)
    pre_ids, _ = subject_ids(cfg, ds)
    d = pretrain_dir(root)
    tcfg = dataclasses.replace(cfg.pretrain, seed=cfg.pretrain.seed + cfg.seed)
    meta = {"dims": dims.as_dict(), "seed": cfg.seed, "subjects": pre_ids}
    res = pretrain(ds, pre_ids, init_encoder(cfg.seed, dims), tcfg,
                   checkpoint_dir=d / "ckpt", meta=meta)
    rec = save_checkpoint(d / "checkpoint", res.params,
                          {**meta, "phase": "pretrain", "step": len(res.log),
                           "loss": res.log[-1]["total"]})
    write_log(d / "train_log.csv", res.log)
    outputs = list((d / "checkpoint").glob("*")) + [d / "train_log.csv"]
    outputs += [p for p in (d / "ckpt").rglob("*") if p.is_file()]
    m = write_manifest(root, d, "pretrain", cfg, inputs, outputs,
                       metrics={"final_loss": res.log[-1]["total"], "steps": len(res.log),
                                "encoder_checksum": rec["checksum"]},
                       started=t0)
    _timed_log("pretrain", t0)
    return m


def _load_encoder(cfg, root, force):
    d = pretrain_dir(root)
    inputs = check_stage(root, d, "pretrain", force)
    tensors, rec = load_checkpoint(d / "checkpoint")
    return EncoderParams(tensors, cfg.model.n_blocks), inputs, rec


def select_dir(root, strategy):
    return Path(root) / "select" / strategy


def stage_select(cfg: ExperimentConfig, root, strategy=None, method=None, force=False) -> dict:
    t0 = time.time()
    root = Path(root)
    strategy = strategy or cfg.select.strategy
    if strategy == "first":
        strategy = "kda_max"
    method = method or cfg.select.method
    ds, inputs = _load_data(cfg, root, force)
    _, new_id = subject_ids(cfg, ds)
    chosen = select_for_subject(ds, new_id, cfg.data.canonical_len, method, strategy, cfg.seed)
    d = select_dir(root, strategy)
    io.write_json(d / "selection.json", {"subject_id": new_id, "method": method,
                                         "strategy": strategy, "classes": chosen})
    m = write_manifest(root, d, "select", cfg, inputs, [d / "selection.json"],
                       metrics={"selected": [c["stimulus_id"] for c in chosen]},
                       extra={"variant": {"strategy": strategy, "method": method}},
                       started=t0)
    _timed_log("select", t0)
    return m


def run_tag(supervision, shots, strategy, depth, residual):
    return f"{supervision}_k{shots}_{strategy}_d{depth}{'' if residual else 'n'}"


@dataclasses.dataclass
class Variant:
    supervision: str
    shots: int = 1
    strategy: str = "first"
    depth: int = 1
    residual: bool = True

    @property
    def tag(self):
        return run_tag(self.supervision, self.shots, self.strategy, self.depth, self.residual)

    def apply(self, cfg: ExperimentConfig) -> ExperimentConfig:
        c = copy.deepcopy(cfg)
        c.adapt.supervision = self.supervision
        c.shots = self.shots
        c.select.strategy = self.strategy
        c.model.adapter_depth = self.depth
        c.model.adapter_residual = self.residual
        return c.validate()


def default_variant(cfg) -> Variant:
    return Variant(cfg.adapt.supervision, cfg.shots, cfg.select.strategy,
                   cfg.model.adapter_depth, cfg.model.adapter_residual)


def stage_adapt(cfg: ExperimentConfig, root, variant: Variant = None, base=None,
                force=False) -> dict:
    """Adapt the new subject; ``base`` is where adapt/ and eval/ live (default: root)."""
    t0 = time.time()
    root = Path(root)
    variant = variant or default_variant(cfg)
    vcfg = variant.apply(cfg)
    ds, inputs = _load_data(vcfg, root, force)
    encoder, enc_inputs, _ = _load_encoder(vcfg, root, force)
    inputs.update(enc_inputs)
    pre_ids, new_id = subject_ids(vcfg, ds)
    if variant.strategy == "first":
        fewshot = few_shot_subset(ds, new_id, variant.shots)
    else:
        if variant.shots != 1:
            raise ValueError("density-based selection is one-shot only")
        sdir = select_dir(root, variant.strategy)
        inputs.update(check_stage(root, sdir, "select", force))
        sel = io.read_json(sdir / "selection.json")
        fewshot = subset_by_ids(ds, new_id, [c["stimulus_id"] for c in sel["classes"]])
    dims = ModelDims.from_config(vcfg)
    d = Path(base or root) / "adapt" / variant.tag
    tcfg = dataclasses.replace(vcfg.adapt, seed=vcfg.adapt.seed + vcfg.seed)
    meta = {"dims": dims.as_dict(), "seed": vcfg.seed, "subject": new_id,
            "variant": dataclasses.asdict(variant)}
    res = adapt(fewshot, new_id, pre_ids, encoder, init_adapter(vcfg.seed, dims), tcfg,
                checkpoint_dir=d / "ckpt", meta=meta)
    rec = save_checkpoint(d / "checkpoint", res.params,
                          {**meta, "phase": "adapt", "step": len(res.log),
                           "loss": res.log[-1]["total"]})
    write_log(d / "train_log.csv", res.log)
    outputs = list((d / "checkpoint").glob("*")) + [d / "train_log.csv"]
    outputs += [p for p in (d / "ckpt").rglob("*") if p.is_file()]
    m = write_manifest(root, d, "adapt", vcfg, inputs, outputs,
                       metrics={"initial_loss": res.log[0]["total"],
                                "final_loss": res.log[-1]["total"], "steps": len(res.log),
                                "adapter_checksum": rec["checksum"],
                                "train_samples": len(fewshot.select(new_id, "train"))},
                       extra={"variant": dataclasses.asdict(variant)}, started=t0)
    _timed_log(f"adapt {variant.tag}", t0)
    return m


def stage_eval(cfg: ExperimentConfig, root, variant: Variant = None, base=None,
               force=False) -> dict:
    t0 = time.time()
    root = Path(root)
    base = Path(base or root)
    variant = variant or default_variant(cfg)
    vcfg = variant.apply(cfg)
    ds, inputs = _load_data(vcfg, root, force)
    encoder, enc_inputs, _ = _load_encoder(vcfg, root, force)
    inputs.update(enc_inputs)
    adir = base / "adapt" / variant.tag
    inputs.update(check_stage(root, adir, "adapt", force))
    tensors, _ = load_checkpoint(adir / "checkpoint")
    adapter = AdapterParams(tensors, variant.depth, variant.residual)
    _, new_id = subject_ids(vcfg, ds)
    samples, e_b, e_ref = predict(ds, new_id, encoder, adapter)
    d = base / "eval" / variant.tag
    io.write_array(d / "predictions.msarr", e_b)
    io.write_json(d / "predictions.json", {"subject_id": new_id,
                                           "stimulus_ids": [s.stimulus_id for s in samples]})
    report = evaluate(e_b, ds.targets(samples), [s.class_id for s in samples],
                      ds.stimulus_set, vcfg.eval.topk)
    labels = {**dataclasses.asdict(variant), "subject": new_id}
    io.write_json(d / "eval_report.json", {"labels": labels, "report": report.as_dict()})
    m = write_manifest(root, d, "eval", vcfg, inputs,
                       [d / "predictions.msarr", d / "predictions.json", d / "eval_report.json"],
                       metrics=report_row(labels, report),
                       extra={"variant": dataclasses.asdict(variant)}, started=t0)
    _timed_log(f"eval {variant.tag}", t0)
    return m


def report_from_predictions(root, eval_dir, topk=(1, 5)):
    """Recompute an eval report from persisted predictions (round-trip check)."""
    ds = load_dataset(data_dir(root))
    meta = io.read_json(Path(eval_dir) / "predictions.json")
    pred = io.read_array(Path(eval_dir) / "predictions.msarr")
    samples = [next(s for s in ds.select(meta["subject_id"], "test") if s.stimulus_id == sid)
               for sid in meta["stimulus_ids"]]
    return evaluate(pred, ds.targets(samples), [s.class_id for s in samples], ds.stimulus_set,
                    topk)


TABLE_COLUMNS = ("supervision", "shots", "strategy", "depth", "residual")


def collect_rows(base):
    rows = []
    for p in sorted(Path(base).glob("eval/*/eval_report.json")):
        rec = io.read_json(p)
        lab, rep = rec["labels"], rec["report"]
        row = {k: lab[k] for k in TABLE_COLUMNS}
        row["two_way"] = float(rep["two_way_accuracy"])
        for k, v in sorted(rep["topk"].items(), key=lambda kv: int(kv[0])):
            row[f"top{k}"] = float(v)
        row["mean_cosine"] = float(rep["mean_cosine"])
        row["class_retrieval"] = float(rep["retrieval_class_accuracy"])
        row["n_test"] = int(rep["n_test"])
        rows.append(row)
    return rows


_SUP_ORDER = {"none": 0, "mse": 1, "amp": 2, "fourier": 3}
_STRAT_ORDER = {"first": 0, "kda_max": 1, "kda_min": 2, "random": 3}


def _sort_key(r):
    return (_SUP_ORDER.get(r["supervision"], 9), r["shots"], _STRAT_ORDER.get(r["strategy"], 9),
            r["depth"], not r["residual"])


def build_tables(rows, reference_supervision="fourier"):
    """Table-1/3/4-shaped slices of the collected eval rows."""
    rows = sorted(rows, key=_sort_key)
    first = [r for r in rows if r["strategy"] == "first" and r["depth"] == 1 and r["residual"]]
    return {
        "table1_fewshot": [r for r in first if r["supervision"] == reference_supervision],
        "table3_selection": [r for r in rows if r["shots"] == 1 and r["depth"] == 1
                             and r["residual"] and r["strategy"] != "first"
                             and r["supervision"] == reference_supervision],
        "table4_supervision": [r for r in first if r["shots"] == 1],
        "all_runs": rows,
    }


def stage_report(cfg: ExperimentConfig, root, force=False) -> dict:
    t0 = time.time()
    root = Path(root)
    inputs = {}
    for mp in sorted(root.glob("eval/*/" + MANIFEST)):
        inputs.update(check_stage(root, mp.parent, "eval", force))
    rows = collect_rows(root)
    if not rows:
        raise StageError("missing upstream stage 'eval': no evaluation reports found")
    d = root / "report"
    outputs = []
    for name, trows in build_tables(rows).items():
        p = d / "tables" / f"{name}.csv"
        io.atomic_write_bytes(p, rows_to_csv(trows).encode())
        outputs.append(p)
    shots_rows = build_tables(rows)["table1_fewshot"]
    plot = [{"x": r["shots"], "y": r["two_way"]} for r in shots_rows]
    p = d / "plots" / "fewshot_two_way.csv"
    io.atomic_write_bytes(p, rows_to_csv(plot).encode())
    outputs.append(p)
    m = write_manifest(root, d, "report", cfg, inputs, outputs,
                       metrics={"rows": len(rows)}, started=t0)
    _timed_log("report", t0)
    return m


# -- sweeps ------------------------------------------------------------------

def sweep_variants(cfg: ExperimentConfig, axis: str):
    base = default_variant(cfg)
    if axis == "supervision":
        return [dataclasses.replace(base, supervision=s)
                for s in ("none", "mse", "amp", "fourier")]
    if axis == "adapter_depth":
        return [dataclasses.replace(base, depth=1, residual=False),
                dataclasses.replace(base, depth=1, residual=True),
                dataclasses.replace(base, depth=2, residual=True),
                dataclasses.replace(base, depth=3, residual=True)]
    if axis == "shots":
        return [dataclasses.replace(base, shots=k, strategy="first") for k in (1, 2, 3)]
    if axis == "selection":
        return [dataclasses.replace(base, shots=1, strategy=s)
                for s in ("kda_max", "kda_min", "random")]
    raise ValueError(f"unknown sweep axis {axis!r}")


SWEEP_AXES = ("supervision", "adapter_depth", "shots", "selection")


def _stage_done(root, stage_dir, stage):
    try:
        check_stage(root, stage_dir, stage)
        return True
    except io.ArtifactError:
        return False


def stage_ablate(cfg: ExperimentConfig, root, axis: str, force=False):
    """Run one sweep axis; completed variants are skipped. Returns (manifest, skipped tags)."""
    t0 = time.time()
    root = Path(root)
    base = root / "sweeps" / axis
    variants = sweep_variants(cfg, axis)
    skipped = []
    inputs = {}
    for v in variants:
        if v.strategy not in ("first",) and not _stage_done(root, select_dir(root, v.strategy),
                                                           "select"):
            stage_select(cfg, root, v.strategy, force=force)
        adir, edir = base / "adapt" / v.tag, base / "eval" / v.tag
        if _stage_done(root, adir, "adapt") and _stage_done(root, edir, "eval"):
            skipped.append(v.tag)
        else:
            stage_adapt(cfg, root, v, base=base, force=force)
            stage_eval(cfg, root, v, base=base, force=force)
        inputs.update(check_stage(root, edir, "eval"))
    tags = {v.tag for v in variants}
    rows = [r for r in collect_rows(base) if run_tag(r["supervision"], r["shots"],
                                                      r["strategy"], r["depth"],
                                                      r["residual"]) in tags]
    rows = sorted(rows, key=_sort_key)
    table = base / "table.csv"
    io.atomic_write_bytes(table, rows_to_csv(rows).encode())
    m = write_manifest(root, base, "ablate", cfg, inputs, [table],
                       metrics={"rows": len(rows)}, extra={"axis": axis}, started=t0)
    _timed_log(f"ablate {axis}", t0)
    return m, skipped


# -- whole pipeline and verification -----------------------------------------

def pipeline_variants(cfg: ExperimentConfig):
    base = dataclasses.replace(default_variant(cfg), strategy="first")
    out = [dataclasses.replace(base, supervision=s, shots=cfg.shots)
           for s in ("none", "mse", "amp", "fourier")]
    for k in (1, 2, 3):
        v = dataclasses.replace(base, supervision="fourier", shots=k)
        if k <= cfg.data.train_per_class and v not in out:
            out.append(v)
    for s in ("kda_max", "kda_min", "random"):
        out.append(dataclasses.replace(base, supervision="fourier", shots=1, strategy=s))
    return out


def run_pipeline(cfg: ExperimentConfig, root, force=False):
    root = Path(root)
    stage_gen_data(cfg, root)
    stage_pretrain(cfg, root, force)
    for s in ("kda_max", "kda_min", "random"):
        stage_select(cfg, root, s, force=force)
    for v in pipeline_variants(cfg):
        stage_adapt(cfg, root, v, force=force)
        stage_eval(cfg, root, v, force=force)
    return stage_report(cfg, root, force)


def verify_tree(root):
    """Check every manifest's outputs and report files no manifest accounts for.

    Returns a list of problems (empty when the tree is consistent).
    """
    root = Path(root)
    problems = []
    covered = set()
    manifests = sorted(root.rglob(MANIFEST))
    for mp in manifests:
        covered.add(mp.resolve())
        m = io.read_json(mp)
        for rel, digest in m["outputs"].items():
            p = root / rel
            covered.add(p.resolve())
            if not p.exists():
                problems.append(f"missing: {rel} (listed in {_rel(root, mp)})")
            elif io.sha256_file(p) != digest:
                problems.append(f"checksum mismatch: {rel} (listed in {_rel(root, mp)})")
        for rel in m.get("sidecars", []):
            covered.add((root / rel).resolve())
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.resolve() not in covered:
            problems.append(f"dangling: {_rel(root, p)}")
    return problems
