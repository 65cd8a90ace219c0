"""Experiment configuration, multi-seed orchestration and result files.

Output layout of ``run_experiment`` under the output directory::

    config.toml                     resolved configuration
    runs/<policy>__seed<seed>.csv   one row per round
    runs/<policy>__seed<seed>.json  run summary
    summary.json                    all run summaries

CSV columns: round, policy, seed, effective_count, cep, success_ratio,
accuracy, loss, regret, bound. ``cep``, ``success_ratio`` and ``regret``
are cumulative up to the row's round. ``accuracy``/``loss`` are empty in
numerical mode; ``bound`` is empty for policies other than E3CS.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import tomli_w
from scipy import stats

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import metrics, rng as rngs
from .datagen import PartitionSpec, gen_synthetic, partition
from .flcore import INIT_SCHEMES, Federation, UpdateConfig, evaluate, init_params, local_update, run_round
from .selection import E3CS, PolicyKind
from .volatility import PopulationSpec, gen_population, success_rates

log = logging.getLogger(__name__)

MODES = ("numerical", "training")
DEFAULT_ROUNDS = {"numerical": 2500, "training": 400}
CSV_COLUMNS = ("round", "policy", "seed", "effective_count", "cep", "success_ratio", "accuracy", "loss", "regret", "bound")
# rounds-to-accuracy thresholds as fractions of the centralized reference accuracy
THRESHOLD_FRACTIONS = (0.8, 0.9, 0.95)
REFERENCE_EPOCHS = 20


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    n_classes: int = 10
    n_features: int = 32
    n_samples: int = 20000
    separation: float = 3.0


@dataclass
class ExperimentConfig:
    mode: str = "numerical"
    k: int = 20
    rounds: Optional[int] = None
    seeds: list = field(default_factory=lambda: [0])
    policies: list = field(default_factory=lambda: ["E3CS-0", "E3CS-0.5", "E3CS-0.8", "E3CS-inc", "Random", "FedCS"])
    eta: object = 0.5
    pow_d: Optional[int] = None
    sampler: str = "exact"
    out: str = "results"
    thresholds: object = "auto"
    init: str = "glorot"
    population: PopulationSpec = field(default_factory=PopulationSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    update: UpdateConfig = field(default_factory=UpdateConfig)

    @property
    def T(self) -> int:
        return self.rounds if self.rounds is not None else DEFAULT_ROUNDS[self.mode]

    @property
    def K(self) -> int:
        return self.population.K

    def policy_kinds(self) -> list:
        return [PolicyKind.parse(p, eta=self.eta, d=self.pow_d) for p in self.policies]

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        try:
            self.population.validate()
            if self.mode == "training":
                self.partition.validate()
                self.update.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 1 <= self.k <= self.K:
            raise ConfigError(f"need 1 <= k <= K, got k={self.k}, K={self.K}")
        if self.T < 1:
            raise ConfigError("rounds must be positive")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a nonempty list without duplicates")
        if not self.policies:
            raise ConfigError("no policies configured")
        if self.eta != "tuned" and not (isinstance(self.eta, (int, float)) and 0 < self.eta < 1):
            raise ConfigError(f"eta must be in (0, 1) or 'tuned', got {self.eta!r}")
        if self.sampler not in ("exact", "sequential"):
            raise ConfigError(f"unknown sampler {self.sampler!r}")
        try:
            kinds = self.policy_kinds()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        names = [p.name for p in kinds]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate policy names")
        for p in kinds:
            if p.kind == "pow-d" and self.mode != "training":
                raise ConfigError("pow-d needs local losses and only runs in training mode")
            if p.kind == "E3CS" and p.quota != "inc" and not 0 <= float(p.quota) <= 1:
                raise ConfigError(f"{p.name}: quota factor must be in [0, 1]")
        if self.mode == "training":
            d = self.dataset
            if d.n_classes < 2 or d.n_features < d.n_classes or d.n_samples < d.n_classes:
                raise ConfigError("dataset needs n_classes >= 2 and n_features, n_samples >= n_classes")
            if self.init not in INIT_SCHEMES:
                raise ConfigError(f"init must be one of {INIT_SCHEMES}, got {self.init!r}")
            if self.thresholds != "auto" and not all(0 < float(x) <= 1 for x in self.thresholds):
                raise ConfigError("thresholds must be 'auto' or accuracies in (0, 1]")

    # -- (de)serialization ------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "k": self.k,
            "rounds": self.rounds,
            "seeds": list(self.seeds),
            "policies": list(self.policies),
            "eta": self.eta,
            "pow_d": self.pow_d,
            "sampler": self.sampler,
            "out": self.out,
            "thresholds": self.thresholds if self.thresholds == "auto" else list(self.thresholds),
            "init": self.init,
            "population": {
                "K": self.population.K,
                "classes": [[float(f), float(r)] for f, r in self.population.classes],
                "epoch_choices": [int(e) for e in self.population.epoch_choices],
                "data_size": self.population.data_size,
            },
            "dataset": dataclasses.asdict(self.dataset),
            "partition": dataclasses.asdict(self.partition),
            "update": dataclasses.asdict(self.update),
        }
        return {key: v for key, v in d.items() if v is not None}

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            pop = dict(raw.pop("population", {}))
            if "classes" in pop:
                pop["classes"] = tuple((float(f), float(r)) for f, r in pop["classes"])
            if "epoch_choices" in pop:
                pop["epoch_choices"] = tuple(int(e) for e in pop["epoch_choices"])
            cfg = cls(
                population=PopulationSpec(**pop),
                dataset=DatasetSpec(**raw.pop("dataset", {})),
                partition=PartitionSpec(**raw.pop("partition", {})),
                update=UpdateConfig(**raw.pop("update", {})),
                **raw,
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.seeds = [int(s) for s in cfg.seeds]
        cfg.policies = [str(p) for p in cfg.policies]
        return cfg

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.loads(text)


# ---------------------------------------------------------------------------
# Environment and single runs


@dataclass
class Environment:
    """Everything shared by all policies on one seed."""

    seed: int
    profiles: list
    shards: Optional[list] = None
    n_classes: Optional[int] = None
    theta0: Optional[np.ndarray] = None
    reference_accuracy: Optional[float] = None
    thresholds: Optional[list] = None
    # names under which rounds-to-threshold are reported; identical across seeds
    threshold_labels: Optional[list] = None


def build_environment(cfg: ExperimentConfig, seed: int) -> Environment:
    profiles = gen_population(cfg.population, rngs.stream(seed, rngs.POPULATION))
    env = Environment(seed=seed, profiles=profiles)
    if cfg.mode == "training":
        d = cfg.dataset
        data = gen_synthetic(d.n_classes, d.n_features, d.n_samples, d.separation, rngs.stream(seed, rngs.DATA))
        env.shards = partition(data, cfg.K, cfg.partition, rngs.stream(seed, rngs.PARTITION))
        env.n_classes = d.n_classes
        env.theta0 = init_params(d.n_classes, d.n_features, rngs.stream(seed, rngs.INIT), cfg.init)
        env.reference_accuracy = centralized_accuracy(env.shards, env.theta0, cfg.update, seed)
        if cfg.thresholds == "auto":
            env.thresholds = [round(f * env.reference_accuracy, 4) for f in THRESHOLD_FRACTIONS]
            env.threshold_labels = [f"{f:g}xref" for f in THRESHOLD_FRACTIONS]
        else:
            env.thresholds = [float(x) for x in cfg.thresholds]
            env.threshold_labels = [f"{x:g}" for x in env.thresholds]
    return env


def centralized_accuracy(shards, theta0: np.ndarray, update: UpdateConfig, seed: int, epochs: int = REFERENCE_EPOCHS) -> float:
    """Test accuracy of one model trained on the union of all training shards.

    Serves as the reference point for rounds-to-accuracy thresholds.
    """
    X = np.concatenate([s.train_x for s in shards])
    y = np.concatenate([s.train_y for s in shards])
    tx = np.concatenate([s.test_x for s in shards])
    ty = np.concatenate([s.test_y for s in shards])
    cfg = dataclasses.replace(update, gamma=0.0)
    theta = local_update(theta0, X, y, cfg, epochs, rngs.stream(seed, rngs.LOCAL, 0, 0))
    return evaluate(theta, tx, ty)[0]


@dataclass
class RunResult:
    policy: str
    seed: int
    rows: list
    summary: dict


def run_single(cfg: ExperimentConfig, kind: PolicyKind, env: Environment) -> RunResult:
    """Run T rounds of one policy on one environment."""
    T, k, K = cfg.T, cfg.k, cfg.K
    policy = kind.build(k, K, T, success_rates=success_rates(env.profiles), sampler=cfg.sampler)
    fed = Federation(
        profiles=env.profiles,
        k=k,
        seed=env.seed,
        shards=env.shards,
        update=cfg.update,
        n_classes=env.n_classes,
        theta=None if env.theta0 is None else env.theta0.copy(),
    )
    ledger = metrics.RegretLedger()
    records = []
    rows = []
    cep = 0
    residual = 0.0
    for t in range(1, T + 1):
        rec = run_round(fed, policy, t, ledger)
        records.append(rec)
        cep += rec.effective_count
        residual += k - K * rec.sigma
        bound = None
        if isinstance(policy, E3CS):
            bound = policy.eta * residual + K * math.log(K) / policy.eta
        rows.append(
            {
                "round": t,
                "policy": kind.name,
                "seed": env.seed,
                "effective_count": rec.effective_count,
                "cep": cep,
                "success_ratio": cep / (t * k),
                "accuracy": rec.global_accuracy,
                "loss": rec.global_loss,
                "regret": ledger.regret,
                "bound": bound,
            }
        )

    groups = [c.group for c in env.profiles]
    summary = metrics.summarize(records, k, K, groups)
    summary.update(
        {
            "policy": kind.name,
            "seed": env.seed,
            "regret": ledger.regret,
            "bound": rows[-1]["bound"],
        }
    )
    if isinstance(policy, E3CS):
        summary["eta"] = policy.eta
        summary["exponent_violations"] = policy.exponent_violations
    if env.shards is not None:
        acc = [r["accuracy"] for r in rows]
        summary["final_accuracy"] = acc[-1]
        summary["final_loss"] = rows[-1]["loss"]
        summary["reference_accuracy"] = env.reference_accuracy
        summary["thresholds"] = env.thresholds
        summary["rounds_to_threshold"] = {
            label: rounds_to_threshold(acc, th) for label, th in zip(env.threshold_labels, env.thresholds)
        }
    return RunResult(policy=kind.name, seed=env.seed, rows=rows, summary=summary)


def rounds_to_threshold(accuracy: Sequence[float], threshold: float) -> Optional[int]:
    """First (1-based) round whose accuracy reaches ``threshold``; None if never."""
    for t, a in enumerate(accuracy, start=1):
        if a >= threshold:
            return t
    return None


# ---------------------------------------------------------------------------
# Files


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".part")
    try:
        tmp.write_text(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def run_name(policy: str, seed: int) -> str:
    return f"{policy}__seed{seed}"


def run_experiment(cfg: ExperimentConfig, out: Optional[os.PathLike] = None) -> dict:
    """Run every (policy, seed) pair and write CSV/JSON results.

    Returns the summary dict also written to ``summary.json``.
    """
    cfg.validate()
    out = Path(out if out is not None else cfg.out)
    runs_dir = out / "runs"
    try:
        runs_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {runs_dir}: {exc}") from exc
    _atomic_write(out / "config.toml", cfg.dumps())

    kinds = cfg.policy_kinds()
    summaries = []
    for seed in cfg.seeds:
        env = build_environment(cfg, seed)
        for kind in kinds:
            log.info("running %s seed=%d (%s, T=%d)", kind.name, seed, cfg.mode, cfg.T)
            res = run_single(cfg, kind, env)
            name = run_name(res.policy, seed)
            _atomic_write(runs_dir / f"{name}.csv", rows_to_csv(res.rows))
            _atomic_write(runs_dir / f"{name}.json", _json(res.summary))
            summaries.append(res.summary)
    summary = build_summary(summaries, cfg.mode)
    _atomic_write(out / "summary.json", _json(summary))
    return summary


def build_summary(run_summaries: list, mode: str) -> dict:
    runs = sorted(run_summaries, key=lambda s: (s["policy"], s["seed"]))
    by_policy = {}
    for s in runs:
        by_policy.setdefault(s["policy"], []).append(s)
    policies = {}
    for name, group in by_policy.items():
        entry = {
            "seeds": [s["seed"] for s in group],
            "mean_success_ratio": float(np.mean([s["success_ratio"] for s in group])),
            "mean_cep": float(np.mean([s["cep"] for s in group])),
            "mean_regret": float(np.mean([s["regret"] for s in group])),
        }
        if mode == "training":
            entry["mean_final_accuracy"] = float(np.mean([s["final_accuracy"] for s in group]))
        policies[name] = entry
    return {"mode": mode, "policies": policies, "runs": runs}


def load_runs(directory) -> list:
    """Read every run summary under ``directory/runs``."""
    runs_dir = Path(directory) / "runs"
    if not runs_dir.is_dir():
        raise FileNotFoundError(f"no runs directory under {directory}")
    out = []
    for path in sorted(runs_dir.glob("*.json")):
        try:
            out.append(json.loads(path.read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"unreadable run summary {path}: {exc}") from exc
    if not out:
        raise ValueError(f"no run summaries under {runs_dir}")
    return out


def summarize_dir(directory) -> dict:
    runs = load_runs(directory)
    mode = "training" if "final_accuracy" in runs[0] else "numerical"
    summary = build_summary(runs, mode)
    _atomic_write(Path(directory) / "summary.json", _json(summary))
    return summary


# ---------------------------------------------------------------------------
# Paired comparisons


def _by_policy_seed(runs) -> dict:
    table = {}
    for s in runs:
        table.setdefault(s["policy"], {})[s["seed"]] = s
    return table


def _paired_metric(a: dict, b: dict, metric: str) -> dict:
    """Per-seed differences of ``metric`` (a minus b); rounds use None as 'never'."""
    seeds = sorted(a)
    diffs = {}
    wins = losses = ties = 0
    for seed in seeds:
        va, vb = _metric_value(a[seed], metric), _metric_value(b[seed], metric)
        lower_better = metric.startswith("rounds@") or metric == "regret"
        if va == vb:
            ties += 1
            diffs[seed] = 0.0
            continue
        diffs[seed] = None if math.isinf(va) or math.isinf(vb) else va - vb
        better = va < vb if lower_better else va > vb
        wins += better
        losses += not better
    n = wins + losses
    pvalue = float(stats.binomtest(wins, n, 0.5).pvalue) if n else 1.0
    return {"wins": wins, "losses": losses, "ties": ties, "sign_test_p": pvalue, "diffs": {str(s): d for s, d in diffs.items()}}


def _metric_value(run: dict, metric: str) -> float:
    if metric == "final_accuracy":
        return float(run["final_accuracy"])
    if metric.startswith("rounds@"):
        r = run["rounds_to_threshold"][metric[len("rounds@") :]]
        return math.inf if r is None else float(r)
    return float(run[metric])


def compare_policies(runs, policies: Optional[Sequence[str]] = None) -> dict:
    """Paired, per-seed comparison of every policy pair.

    For each pair ``(a, b)`` and metric, ``wins`` counts seeds where ``a``
    is better (higher accuracy or success ratio, fewer rounds to a
    threshold, lower regret). Rounds that
    never reach a threshold count as infinitely many.
    """
    table = _by_policy_seed(runs)
    names = sorted(table) if policies is None else list(policies)
    missing = [p for p in names if p not in table]
    if missing:
        raise ValueError(f"no results for policies {missing}")
    if len(names) < 2:
        raise ValueError("need at least two policies to compare")
    seeds = set(table[names[0]])
    for p in names[1:]:
        if set(table[p]) != seeds:
            raise ValueError(f"policy {p} was run on seeds {sorted(table[p])}, expected {sorted(seeds)}")
    sample = table[names[0]][min(seeds)]
    training = "final_accuracy" in sample
    metric_names = ["success_ratio", "regret"]
    if training:
        metric_names = ["final_accuracy"] + [f"rounds@{th}" for th in sample["rounds_to_threshold"]] + metric_names

    pairs = {}
    for a, b in combinations(names, 2):
        pairs[f"{a} vs {b}"] = {m: _paired_metric(table[a], table[b], m) for m in metric_names}
    key = "final_accuracy" if training else "success_ratio"
    ranking = sorted(names, key=lambda p: -np.mean([_metric_value(table[p][s], key) for s in seeds]))
    return {"seeds": sorted(seeds), "ranked_by": key, "ranking": ranking, "pairs": pairs}
