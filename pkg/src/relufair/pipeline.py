"""Experiment orchestration: train -> linearize -> finetune/mitigate -> audit.

Each stage reads its inputs from the run directory and writes checkpoints,
histories and reports through atomic renames, so a rerun with the same
config and seeds reproduces every artifact byte for byte.  Seeds are
independent and can run as parallel jobs; the manifest ties the artifacts
to a config hash and checkpoint hashes.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import hashlib
import json
import os
import tempfile
from datetime import datetime, timezone

import numpy as np

from . import __version__, svgplot
from .audit import build_report
from .config import ExperimentConfig, to_toml
from .data import GroupedDataset, SplitSpec, make_gaussian_mixture, \
    make_toy_boundary, load_csv, split
from .model import GatedNetwork, ReluBudget, linearize_alternating, \
    linearize_dr, linearize_snl, load_checkpoint, save_checkpoint
from .trainer import finetune_fair, finetune_kd, train_base

MANIFEST_SCHEMA = "manifest/1"


class PipelineError(RuntimeError):
    pass


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(to_toml(cfg).encode("utf-8")).hexdigest()


# -- data ------------------------------------------------------------------------

def build_dataset(cfg: ExperimentConfig) -> GroupedDataset:
    kind, args = cfg.dataset.kind, dict(cfg.dataset.args)
    if kind == "toy_boundary":
        return make_toy_boundary(**args)
    if kind == "gaussian_mixture":
        return make_gaussian_mixture(**args)
    return load_csv(args["path"], args["feature_cols"], args["label_col"],
                    args["group_col"])


def split_dataset(cfg: ExperimentConfig, ds: GroupedDataset):
    # split seed comes from the dataset, not the run seed: every training
    # seed sees the same train/eval partition
    seed = int(cfg.dataset.args.get("seed", 0))
    return split(ds, SplitSpec(train_fraction=cfg.train_fraction, seed=seed,
                               stratify_by="group"))


# -- per-seed stages ---------------------------------------------------------------

def seed_dir(cfg: ExperimentConfig, seed: int) -> str:
    return os.path.join(cfg.out_dir, f"seed{seed}")


def base_path(cfg: ExperimentConfig, seed: int) -> str:
    return os.path.join(seed_dir(cfg, seed), "base.json")


def candidate_name(cfg: ExperimentConfig, budget: float) -> str:
    scheme = cfg.linearize.scheme
    return f"{scheme}_b{budget:g}" if scheme == "snl" else scheme


def _candidate_budgets(cfg: ExperimentConfig) -> list[float]:
    # only the learned-mask scheme sweeps budgets; the other schemes define
    # their own fixed gate pattern
    return list(cfg.linearize.budgets) if cfg.linearize.scheme == "snl" else [0.5]


def _history_csv(history, path: str) -> None:
    # route History.to_csv through the atomic writer
    tmp = path + ".hist"
    history.to_csv(tmp)
    with open(tmp, "r", encoding="utf-8") as fh:
        atomic_write_text(path, fh.read())
    os.unlink(tmp)


def stage_train(cfg: ExperimentConfig, seed: int) -> list[str]:
    data = build_dataset(cfg)
    train_ds, _ = split_dataset(cfg, data)
    net = GatedNetwork.init(cfg.shape, seed=seed)
    tc = dataclasses.replace(cfg.train, seed=seed)
    net, history = train_base(net, train_ds, tc)
    ck = base_path(cfg, seed)
    save_checkpoint(net, ck, metadata={"seed": seed, "stage": "base"})
    hist_path = os.path.join(seed_dir(cfg, seed), "history_base.csv")
    _history_csv(history, hist_path)
    return [ck, hist_path]


def stage_linearize(cfg: ExperimentConfig, seed: int,
                    no_finetune: bool = False,
                    base_checkpoint: str | None = None) -> list[str]:
    ck = base_checkpoint or base_path(cfg, seed)
    if not os.path.exists(ck):
        raise FileNotFoundError(f"base checkpoint not found: {ck}")
    base, _ = load_checkpoint(ck)
    data = build_dataset(cfg)
    train_ds, _ = split_dataset(cfg, data)
    lz = cfg.linearize
    out = []
    for budget in _candidate_budgets(cfg):
        name = candidate_name(cfg, budget)
        if lz.scheme == "snl":
            rb = ReluBudget.from_fraction(budget, base.shape.total_hidden_units)
            raw = linearize_snl(base, rb, gate_l1_weight=lz.gate_l1_weight,
                                epochs=lz.snl_epochs, data=train_ds, seed=seed,
                                learning_rate=cfg.train.learning_rate,
                                batch_size=cfg.train.batch_size)
        elif lz.scheme == "alternating":
            raw = linearize_alternating(base)
        else:
            raw = linearize_dr(base, set(lz.dr_layers))
        raw_path = os.path.join(seed_dir(cfg, seed), f"raw_{name}.json")
        save_checkpoint(raw, raw_path, metadata={"seed": seed, "stage": "raw",
                                                 "budget": budget})
        out.append(raw_path)
        if not no_finetune and lz.finetune_epochs > 0:
            ftc = dataclasses.replace(cfg.train, epochs=lz.finetune_epochs, seed=seed,
                                      learning_rate=lz.finetune_learning_rate)
            tuned = finetune_kd(raw, base, train_ds, ftc, cfg.kd)
            kd_path = os.path.join(seed_dir(cfg, seed), f"kd_{name}.json")
            save_checkpoint(tuned, kd_path, metadata={"seed": seed, "stage": "kd",
                                                      "budget": budget})
            out.append(kd_path)
    return out


def stage_mitigate(cfg: ExperimentConfig, seed: int,
                   linearized_checkpoint: str | None = None) -> list[str]:
    if not cfg.mitigation.enabled:
        raise PipelineError("mitigation.enabled is false in the config")
    base, _ = load_checkpoint(base_path(cfg, seed))
    data = build_dataset(cfg)
    train_ds, _ = split_dataset(cfg, data)
    out = []
    for budget in _candidate_budgets(cfg):
        name = candidate_name(cfg, budget)
        raw_path = linearized_checkpoint or os.path.join(seed_dir(cfg, seed),
                                                         f"raw_{name}.json")
        if not os.path.exists(raw_path):
            raise FileNotFoundError(f"linearized checkpoint not found: {raw_path}")
        raw, _ = load_checkpoint(raw_path)
        ftc = dataclasses.replace(cfg.train, epochs=cfg.linearize.finetune_epochs,
                                  seed=seed,
                                  learning_rate=cfg.linearize.finetune_learning_rate)
        tuned, lambdas = finetune_fair(raw, base, train_ds, ftc, cfg.kd,
                                       mu=cfg.mitigation.mu)
        fair_path = os.path.join(seed_dir(cfg, seed), f"fair_{name}.json")
        save_checkpoint(tuned, fair_path, metadata={"seed": seed, "stage": "fair",
                                                    "budget": budget})
        rows = ["epoch," + ",".join(f"lambda_{g}" for g in train_ds.group_names)]
        for epoch in range(1, lambdas.shape[0]):
            rows.append(",".join([str(epoch)] + [repr(v) for v in lambdas[epoch]]))
        lam_path = os.path.join(seed_dir(cfg, seed), f"lambda_{name}.csv")
        atomic_write_text(lam_path, "\n".join(rows) + "\n")
        out.extend([fair_path, lam_path])
        if linearized_checkpoint:
            break
    return out


def _discover_candidates(cfg: ExperimentConfig, seed: int) -> list[tuple[str, str]]:
    found = []
    for budget in _candidate_budgets(cfg):
        name = candidate_name(cfg, budget)
        for prefix in ("raw", "kd", "fair"):
            path = os.path.join(seed_dir(cfg, seed), f"{prefix}_{name}.json")
            if os.path.exists(path):
                found.append((f"{prefix}_{name}", path))
    return found


def stage_audit(cfg: ExperimentConfig, seed: int,
                base_checkpoint: str | None = None,
                candidate_paths: list[str] | None = None) -> list[str]:
    ck = base_checkpoint or base_path(cfg, seed)
    if not os.path.exists(ck):
        raise FileNotFoundError(f"base checkpoint not found: {ck}")
    if candidate_paths is None:
        pairs = _discover_candidates(cfg, seed)
        if not pairs:
            raise FileNotFoundError(f"no linearized checkpoints under {seed_dir(cfg, seed)}")
    else:
        for p in candidate_paths:
            if not os.path.exists(p):
                raise FileNotFoundError(f"candidate checkpoint not found: {p}")
        pairs = [(os.path.splitext(os.path.basename(p))[0], p) for p in candidate_paths]
    base, _ = load_checkpoint(ck)
    candidates = [(name, load_checkpoint(p)[0]) for name, p in pairs]
    data = build_dataset(cfg)
    train_ds, eval_ds = split_dataset(cfg, data)
    report = build_report(base, candidates, eval_ds, train_ds)
    json_path = os.path.join(seed_dir(cfg, seed), "audit.json")
    report.save(json_path)
    csv_path = os.path.join(seed_dir(cfg, seed), "audit.csv")
    report.save_csv(csv_path)
    return [json_path, csv_path]


# -- aggregation and figures --------------------------------------------------------

def _load_audit(cfg: ExperimentConfig, seed: int) -> dict:
    path = os.path.join(seed_dir(cfg, seed), "audit.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"audit report not found: {path} (run audit first)")
    with open(path, "rb") as fh:
        return json.load(fh)


def stage_report(cfg: ExperimentConfig, seeds: list[int]) -> list[str]:
    docs = {seed: _load_audit(cfg, seed) for seed in seeds}
    first = docs[seeds[0]]
    group_names = [g["group"] for g in first["baseline"]["groups"]]
    cand_names = [c["name"] for c in first["candidates"]]

    # mean over seeds of per-group accuracy and relative drop, per candidate
    def collect(field, source="groups"):
        table = {}
        for cname in cand_names:
            per_group = {g: [] for g in group_names}
            for doc in docs.values():
                cand = next(c for c in doc["candidates"] if c["name"] == cname)
                for row in cand["groups"]:
                    value = row[field]
                    if value is not None:
                        per_group[row["group"]].append(value)
            table[cname] = {g: (float(np.mean(v)) if v else None)
                            for g, v in per_group.items()}
        return table

    acc = collect("accuracy")
    drops = collect("relative_drop_pct")
    gnorm = collect("grad_norm")
    bdist = collect("mean_boundary_distance")

    base_acc = {g: [] for g in group_names}
    for doc in docs.values():
        for row in doc["baseline"]["groups"]:
            base_acc[row["group"]].append(row["accuracy"])

    summary = {
        "schema": "summary/1",
        "seeds": list(seeds),
        "baseline_accuracy": {g: float(np.mean(v)) for g, v in base_acc.items()},
        "candidates": {c: {"accuracy": acc[c], "relative_drop_pct": drops[c],
                           "grad_norm": gnorm[c],
                           "mean_boundary_distance": bdist[c]}
                       for c in cand_names},
    }
    out = []
    summary_path = os.path.join(cfg.out_dir, "summary.json")
    atomic_write_text(summary_path, json.dumps(summary, sort_keys=True, indent=2) + "\n")
    out.append(summary_path)

    lines = ["candidate,group,accuracy,relative_drop_pct,grad_norm,mean_boundary_distance"]
    for c in cand_names:
        for g in group_names:
            lines.append(",".join([c, g] + [
                "" if table[c][g] is None else repr(table[c][g])
                for table in (acc, drops, gnorm, bdist)]))
    csv_path = os.path.join(cfg.out_dir, "summary.csv")
    atomic_write_text(csv_path, "\n".join(lines) + "\n")
    out.append(csv_path)
    out.extend(_write_figures(cfg, group_names, cand_names, acc, drops, gnorm, bdist))
    return out


def _write_figures(cfg, group_names, cand_names, acc, drops, gnorm, bdist) -> list[str]:
    plots = os.path.join(cfg.out_dir, "plots")
    out = []

    def emit(name: str, svg: str):
        path = os.path.join(plots, name)
        atomic_write_text(path, svg)
        out.append(path)

    emit("accuracy_by_candidate.svg", svgplot.grouped_bars(
        cand_names, [(g, [acc[c][g] for c in cand_names]) for g in group_names],
        "Accuracy by candidate and group", "accuracy"))
    emit("grad_norms.svg", svgplot.grouped_bars(
        cand_names, [(g, [gnorm[c][g] for c in cand_names]) for g in group_names],
        "Group gradient norms", "||g_a||"))
    emit("relative_drop.svg", svgplot.line_plot(
        [(g, list(range(len(cand_names))),
          [0.0 if drops[c][g] is None else drops[c][g] for c in cand_names])
         for g in group_names],
        "Relative accuracy drop vs candidate", "candidate index", "drop (%)"))
    emit("accuracy_vs_gradnorm.svg", svgplot.scatter_plot(
        [(g, [gnorm[c][g] for c in cand_names], [acc[c][g] for c in cand_names])
         for g in group_names],
        "Accuracy vs gradient norm", "||g_a||", "accuracy"))
    emit("accuracy_vs_distance.svg", svgplot.scatter_plot(
        [(g, [bdist[c][g] for c in cand_names], [acc[c][g] for c in cand_names])
         for g in group_names],
        "Accuracy vs boundary distance", "mean signed distance", "accuracy"))
    return out


# -- manifest -------------------------------------------------------------------------

def _manifest_content_hash(doc: dict) -> str:
    core = {k: v for k, v in doc.items() if k not in ("created", "content_hash")}
    blob = json.dumps(core, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def update_manifest(cfg: ExperimentConfig, stage: str, paths: list[str]) -> dict:
    """Merge stage artifacts into out_dir/manifest.json and finalize it.

    Paths are stored relative to the run directory.  The content hash covers
    everything except the wall-clock timestamp, so reruns agree on it.
    """
    man_path = os.path.join(cfg.out_dir, "manifest.json")
    doc = {"schema": MANIFEST_SCHEMA, "config_sha256": config_hash(cfg),
           "tool_version": __version__, "stages": {}}
    if os.path.exists(man_path):
        with open(man_path, "rb") as fh:
            doc = json.load(fh)
        if doc.get("config_sha256") != config_hash(cfg):
            doc = {"schema": MANIFEST_SCHEMA, "config_sha256": config_hash(cfg),
                   "tool_version": __version__, "stages": {}}
    rel = sorted(os.path.relpath(p, cfg.out_dir) for p in paths)
    existing = set(doc["stages"].get(stage, []))
    doc["stages"][stage] = sorted(existing | set(rel))
    for stage_paths in doc["stages"].values():
        for p in stage_paths:
            full = os.path.join(cfg.out_dir, p)
            if not os.path.exists(full):
                raise PipelineError(f"manifest references missing artifact: {full}")
    doc["created"] = datetime.now(timezone.utc).isoformat()
    doc["content_hash"] = _manifest_content_hash(doc)
    atomic_write_text(man_path, json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return doc


# -- drivers -----------------------------------------------------------------------

_STAGE_FUNCS = {
    "train": stage_train,
    "linearize": stage_linearize,
    "mitigate": stage_mitigate,
    "audit": stage_audit,
}


def _run_one(cfg: ExperimentConfig, seed: int, stage: str, kwargs: dict) -> list[str]:
    return _STAGE_FUNCS[stage](cfg, seed, **kwargs)


def run_stage(cfg: ExperimentConfig, stage: str, seeds: list[int],
              jobs: int = 1, **kwargs) -> list[str]:
    """Run one stage across seeds (parallel when jobs > 1), update the manifest."""
    produced: list[str] = []
    if jobs > 1 and len(seeds) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_run_one, cfg, s, stage, kwargs): s for s in seeds}
            for fut in concurrent.futures.as_completed(futures):
                produced.extend(fut.result())
    else:
        for s in seeds:
            produced.extend(_run_one(cfg, s, stage, kwargs))
    # persist the exact experiment definition alongside the artifacts
    atomic_write_text(os.path.join(cfg.out_dir, "config.toml"), to_toml(cfg))
    update_manifest(cfg, stage, produced)
    return produced
