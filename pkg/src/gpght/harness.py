"""Experiment orchestration: on-time evaluation, OD x budget x variant sweeps and report files."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .network import (
    SIOUX_FALLS_OD,
    NetworkError,
    StochasticNetwork,
    build_sioux_falls,
    build_synthetic,
    let_path,
    load_network,
    sample_times,
)
from .policy import Policy
from .tensor import CheckpointError, read_header
from .trainer import CurvePoint, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

EXPERIMENT_VARIANTS = ("full", "no_history", "linear", "vanilla_pg")
CURVE_HEADER = ["iteration", "J_mean", "J_std", "wallclock_s"]
REPORT_HEADER = ["origin", "destination", "multiplier", "budget", "variant", "seed", "J", "stderr", "t_let"]

# SFN benchmark pairs as node ids (the published labels are 1-based)
SFN_OD_IDS = [(a - 1, b - 1) for a, b in SIOUX_FALLS_OD]


class ConfigError(ValueError):
    pass


# --- evaluation -------------------------------------------------------------------------

def sota_probability(policy: Policy, net: StochasticNetwork, od, budget: float, num_eval: int, seed: int,
                     max_steps: int | None = None, greedy: bool = False) -> tuple[float, float]:
    """(J, stderr): on-time fraction of ``num_eval`` sampled rollouts, deterministic in ``seed``."""
    if num_eval < 1:
        raise ConfigError("num_eval must be >= 1")
    rng = np.random.default_rng(seed)
    times = sample_times(net, num_eval, rng)
    j, _, _ = evaluate(policy, net, od[0], od[1], budget, times, int(rng.integers(2 ** 31)),
                       max_steps if max_steps is not None else 4 * net.num_nodes, greedy=greedy)
    return j, math.sqrt(j * (1.0 - j) / num_eval)


# --- configuration ----------------------------------------------------------------------

def resolve_network(source: str, seed: int = 0) -> tuple[StochasticNetwork, str]:
    """Network and a label saying where it came from."""
    if source == "synthetic":
        return build_synthetic(), "synthetic"
    if source == "sfn":
        return build_sioux_falls(seed), f"sfn generated (seed={seed})"
    return load_network(source), f"file {source}"


@dataclass(frozen=True)
class ExperimentConfig:
    network: str = "synthetic"            # "synthetic", "sfn" or a network JSON path
    network_seed: int = 0                 # parameter seed for a generated SFN
    od_pairs: tuple = ((0, 4),)
    budget_multipliers: tuple = (1.0,)
    train: TrainConfig = field(default_factory=TrainConfig)
    policy: dict = field(default_factory=dict)   # PolicyConfig overrides (embed_dim, ...)
    eval_samples: int = 10000
    seeds: tuple = (0,)
    variants: tuple = ("full",)
    # train once per (OD, variant, seed) at this multiplier and evaluate every multiplier
    train_budget_multiplier: float | None = None
    eval_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "od_pairs", tuple(tuple(int(x) for x in od) for od in self.od_pairs))
        object.__setattr__(self, "budget_multipliers", tuple(float(m) for m in self.budget_multipliers))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "variants", tuple(self.variants))
        if self.train_budget_multiplier is not None:
            object.__setattr__(self, "train_budget_multiplier", float(self.train_budget_multiplier))
        if not self.od_pairs or not self.budget_multipliers or not self.seeds or not self.variants:
            raise ConfigError("od_pairs, budget_multipliers, seeds and variants must be non-empty")
        if any(len(od) != 2 for od in self.od_pairs):
            raise ConfigError("each OD pair needs exactly two node ids")
        if any(not m > 0 for m in self.budget_multipliers):
            raise ConfigError("budget multipliers must be > 0")
        if self.train_budget_multiplier is not None and not self.train_budget_multiplier > 0:
            raise ConfigError("train_budget_multiplier must be > 0")
        if self.eval_samples < 1:
            raise ConfigError("eval_samples must be >= 1")
        bad = [v for v in self.variants if v not in EXPERIMENT_VARIANTS]
        if bad:
            raise ConfigError(f"unknown variants {bad}; choose from {EXPERIMENT_VARIANTS}")
        if "variant" in self.policy:
            raise ConfigError("set the policy variant through 'variants', not 'policy'")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["od_pairs"] = [list(od) for od in self.od_pairs]
        for key in ("budget_multipliers", "seeds", "variants"):
            doc[key] = list(doc[key])
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        doc = dict(doc)
        try:
            doc["train"] = train_config_from(doc.get("train", {}))
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"malformed experiment config: {exc}") from exc

    def hash(self) -> str:
        """Digest of the canonical JSON form; key order and int/float spelling do not matter."""
        canonical = json.dumps(_canonical(self.to_dict()), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _canonical(x):
    if isinstance(x, dict):
        return {k: _canonical(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_canonical(v) for v in x]
    if isinstance(x, bool) or x is None or isinstance(x, str):
        return x
    if isinstance(x, (int, float, np.integer, np.floating)):
        return float(x)
    return x


def train_config_from(doc: dict) -> TrainConfig:
    if isinstance(doc, TrainConfig):
        return doc
    if not isinstance(doc, dict):
        raise ConfigError("train config must be an object")
    unknown = set(doc) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    try:
        return TrainConfig(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_experiment_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read experiment config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(doc)


def check_od(net: StochasticNetwork, od) -> float:
    """Validate an OD pair and return its t_LET."""
    o, d = od
    if not (0 <= o < net.num_nodes and 0 <= d < net.num_nodes):
        raise ConfigError(f"OD {o}-{d} outside node ids 0..{net.num_nodes - 1}")
    if o == d:
        raise ConfigError("origin and destination must differ")
    try:
        return let_path(net, o, d)[1]
    except NetworkError as exc:
        raise ConfigError(f"destination {d} unreachable from {o}") from exc


# --- reports ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    origin: int
    destination: int
    multiplier: float
    budget: float
    variant: str
    seed: int
    J: float
    stderr: float
    t_let: float

    def __post_init__(self):
        if not 0.0 <= self.J <= 1.0:
            raise ValueError(f"J out of range: {self.J}")


@dataclass
class EvalReport:
    rows: list[ReportRow]
    metadata: dict

    def key_rows(self):
        return sorted(self.rows, key=lambda r: (r.origin, r.destination, r.multiplier, r.variant, r.seed))


def _fmt(x) -> str:
    # repr of a Python float is locale independent and round-trips exactly
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def emit_curve(curve: list[CurvePoint], path, config: dict | None = None) -> None:
    """CSV ``iteration,J_mean,J_std,wallclock_s`` plus a JSON sidecar holding ``config``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for p in curve:
            w.writerow([p.iteration, _fmt(p.J_mean), _fmt(p.J_std), _fmt(p.wallclock_s)])
    path.with_suffix(".json").write_text(json.dumps({"config": config or {}, "points": len(curve)}, indent=2))


def read_curve(path) -> list[CurvePoint]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CURVE_HEADER:
            raise ValueError(f"{path}: unexpected curve header {reader.fieldnames}")
        return [CurvePoint(int(r["iteration"]), float(r["J_mean"]), float(r["J_std"]), float(r["wallclock_s"]))
                for r in reader]


def emit_report(report: EvalReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in report.key_rows():
            w.writerow([_fmt(getattr(r, k)) for k in REPORT_HEADER])
    path.with_suffix(".json").write_text(json.dumps(report.metadata, indent=2, sort_keys=True))


def parse_report(path) -> EvalReport:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPORT_HEADER:
            raise ValueError(f"{path}: unexpected report header {reader.fieldnames}")
        rows = [ReportRow(int(r["origin"]), int(r["destination"]), float(r["multiplier"]), float(r["budget"]),
                          r["variant"], int(r["seed"]), float(r["J"]), float(r["stderr"]), float(r["t_let"]))
                for r in reader]
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return EvalReport(rows, meta)


# --- sweeps ------------------------------------------------------------------------------

def cell_seed(seed: int, od) -> int:
    """Training / initialisation seed shared by all variants of one (seed, OD) cell."""
    return int(np.random.SeedSequence([int(seed), int(od[0]), int(od[1])]).generate_state(1)[0])


def eval_set(net: StochasticNetwork, config: ExperimentConfig, od):
    """Held-out realisations and action seed for an OD, shared by every budget and variant."""
    rng = np.random.default_rng(np.random.SeedSequence([config.eval_seed, int(od[0]), int(od[1]), 7]))
    return sample_times(net, config.eval_samples, rng), int(rng.integers(2 ** 31))


def build_policy(net: StochasticNetwork, config: ExperimentConfig, variant: str, t_let: float, seed: int) -> Policy:
    arch = "full" if variant == "vanilla_pg" else variant
    return Policy.for_network(net, t_let, seed=seed, variant=arch, **config.policy)


def _train_config(config: ExperimentConfig, variant: str, seed: int) -> TrainConfig:
    estimator = "vanilla_pg" if variant == "vanilla_pg" else "gpg"
    return replace(config.train, seed=seed, estimator=estimator)


def _cell_name(od, variant, seed, multiplier=None) -> str:
    name = f"od{od[0]}-{od[1]}_{variant}_s{seed}"
    return name if multiplier is None else f"{name}_m{multiplier:g}"


def _resume(path, policy, net, od, budget, tcfg):
    """Training state from an interrupted cell, or None when there is nothing compatible."""
    if path is None or not path.exists():
        return None
    try:
        info = read_header(path).get("train", {})
        same = (info.get("config") == asdict(tcfg) and info.get("origin") == od[0]
                and info.get("destination") == od[1] and info.get("budget") == budget
                and info.get("network") == net.to_dict())
        if not same:
            return None
        return load_checkpoint(path, policy)[0]
    except CheckpointError:
        return None


def run_experiment(config: ExperimentConfig, out_dir=None, progress=None) -> EvalReport:
    """Train and evaluate every (OD, multiplier, variant, seed) cell.

    With ``out_dir`` each finished cell is stored as JSON (plus its checkpoint
    and curve) and skipped on a rerun with the same config hash; the combined
    report is rewritten after every cell so a failure leaves a partial report.
    """
    net, source = resolve_network(config.network, config.network_seed)
    lets = {od: check_od(net, od) for od in config.od_pairs}
    digest = config.hash()
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "cells").mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
    rows: list[ReportRow] = []

    def metadata(finished: bool) -> dict:
        return {"config_hash": digest, "config": config.to_dict(), "network_source": source,
                "started": started, "finished": time.strftime("%Y-%m-%dT%H:%M:%S") if finished else None}

    def flush(finished=False):
        if out is not None:
            emit_report(EvalReport(rows, metadata(finished)), out / "report.csv")

    # training jobs: (od, variant, seed, train multiplier, evaluated multipliers)
    jobs = []
    for od in config.od_pairs:
        for variant in config.variants:
            for seed in config.seeds:
                if config.train_budget_multiplier is not None:
                    jobs.append((od, variant, seed, config.train_budget_multiplier, config.budget_multipliers))
                else:
                    jobs.extend((od, variant, seed, m, (m,)) for m in config.budget_multipliers)
    eval_sets = {}
    for od, variant, seed, train_mult, eval_mults in jobs:
        per_budget = config.train_budget_multiplier is None
        name = _cell_name(od, variant, seed, train_mult if per_budget else None)
        cell_file = out / "cells" / f"{name}.json" if out is not None else None
        if cell_file is not None and cell_file.exists():
            doc = json.loads(cell_file.read_text())
            if doc.get("config_hash") == digest:
                rows.extend(ReportRow(**r) for r in doc["rows"])
                continue
        t_let = lets[od]
        s = cell_seed(seed, od)
        policy = build_policy(net, config, variant, t_let, s)
        tcfg = _train_config(config, variant, s)
        budget = train_mult * t_let
        ckpt = out / "cells" / f"{name}.npz" if out is not None else None
        state = _resume(ckpt, policy, net, od, budget, tcfg)
        state = train(policy, net, od[0], od[1], budget, tcfg, state=state, checkpoint_path=ckpt)
        if od not in eval_sets:
            eval_sets[od] = eval_set(net, config, od)
        times, action_seed = eval_sets[od]
        cell_rows = []
        for m in eval_mults:
            j, _, _ = evaluate(policy, net, od[0], od[1], m * t_let, times, action_seed, tcfg.steps_for(net))
            cell_rows.append(ReportRow(od[0], od[1], m, m * t_let, variant, seed, j,
                                       math.sqrt(j * (1.0 - j) / config.eval_samples), t_let))
        rows.extend(cell_rows)
        if out is not None:
            save_checkpoint(ckpt, state, net, od[0], od[1], budget, tcfg)
            emit_curve(state.curve, out / "cells" / f"{name}_curve.csv", asdict(tcfg))
            cell_file.write_text(json.dumps({"config_hash": digest, "rows": [asdict(r) for r in cell_rows]}))
        flush()
        if progress is not None:
            progress(name, cell_rows)
    flush(finished=True)
    return EvalReport(rows, metadata(True))


def collect_cells(in_dir) -> EvalReport:
    """Rebuild a report from the per-cell files of an experiment directory."""
    in_dir = Path(in_dir)
    cells = sorted((in_dir / "cells").glob("*.json")) if (in_dir / "cells").is_dir() else []
    cells = [c for c in cells if not c.name.endswith("_curve.json")]
    if not cells:
        raise ConfigError(f"no experiment cells under {in_dir}")
    rows, hashes = [], set()
    for c in cells:
        doc = json.loads(c.read_text())
        hashes.add(doc.get("config_hash"))
        rows.extend(ReportRow(**r) for r in doc["rows"])
    meta = {"config_hash": sorted(h for h in hashes if h), "cells": len(cells)}
    cfg = in_dir / "config.json"
    if cfg.exists():
        meta["config"] = json.loads(cfg.read_text())
    return EvalReport(rows, meta)


def summarize(report: EvalReport) -> list[dict]:
    """Mean J and its standard error over seeds per (OD, multiplier, variant)."""
    groups: dict[tuple, list[ReportRow]] = {}
    for r in report.rows:
        groups.setdefault((r.origin, r.destination, r.multiplier, r.variant), []).append(r)
    out = []
    for (o, d, m, v), rs in sorted(groups.items()):
        js = np.array([r.J for r in rs])
        out.append({"origin": o, "destination": d, "multiplier": m, "variant": v, "seeds": len(rs),
                    "J_mean": float(js.mean()),
                    "J_sem": float(js.std(ddof=1) / math.sqrt(len(js))) if len(js) > 1 else 0.0})
    return out
