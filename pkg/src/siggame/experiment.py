"""Experiment configuration, presets, single runs, sweeps, and corpus analysis.

Precedence for configuration values: preset defaults, then a JSON config
file, then command-line overrides.  Output goes under ``output_dir`` when set,
else under ``$SIGGAME_OUTPUT_ROOT``, else ``./runs``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .agents import Agents
from .game import GameConfig, ObjectDistribution, read_corpus, write_corpus
from .metrics import DEFAULT_THRESHOLD, MetricsReport, analyze_corpus
from .objectives import BetaSchedule, ObjectiveSpec
from .training import Trainer, greedy_accuracy, greedy_language, write_log

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "SIGGAME_OUTPUT_ROOT"
REPORT_COLUMNS = ("seed", "n_att", "n_val", "objective", "c_topsim", "w_topsim", "delta_wc", "n_bou", "n_seg")
SUMMARY_FIELDS = ("c_topsim", "w_topsim", "delta_wc", "n_bou", "n_seg", "accuracy", "zla_spearman")


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64
    emb: int = 16
    baseline_hidden: int | None = None
    dropout: float = 0.001
    object_head: str = "factorized"


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    batch_size: int = 256
    n_updates: int = 3000


@dataclass(frozen=True)
class ObjectsConfig:
    kind: str = "uniform"
    exponent: float = 1.0


@dataclass(frozen=True)
class MetricsConfig:
    threshold: float = DEFAULT_THRESHOLD
    strip_eos: bool = False
    add_k: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    game: GameConfig
    objective: ObjectiveSpec
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    objects: ObjectsConfig = field(default_factory=ObjectsConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    seeds: tuple[int, ...] = (0,)
    output_dir: str | None = None

    def validate(self) -> "ExperimentConfig":
        if self.model.hidden < 1 or self.model.emb < 1:
            raise ValueError("model sizes must be positive")
        if self.model.dropout < 0:
            raise ValueError("dropout scale must be non-negative")
        if self.model.object_head not in ("factorized", "joint"):
            raise ValueError(f"unknown object head {self.model.object_head!r}")
        if self.optim.lr <= 0 or self.optim.batch_size < 1 or self.optim.n_updates < 0:
            raise ValueError("invalid optimizer settings")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        self.distribution()
        return self

    def distribution(self) -> ObjectDistribution:
        return ObjectDistribution(self.game.n_att, self.game.n_val, self.objects.kind, self.objects.exponent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        version = data.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {version!r} (expected {SCHEMA_VERSION})")
        return cls(
            name=data["name"],
            game=GameConfig(**data["game"]),
            objective=ObjectiveSpec.from_dict(data["objective"]),
            model=ModelConfig(**data.get("model", {})),
            optim=OptimConfig(**data.get("optim", {})),
            objects=ObjectsConfig(**data.get("objects", {})),
            metrics=MetricsConfig(**data.get("metrics", {})),
            seeds=tuple(data.get("seeds", (0,))),
            output_dir=data.get("output_dir"),
        ).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @property
    def config_hash(self) -> str:
        """Content hash of everything that affects a run's outputs (not seeds or paths)."""
        d = self.to_dict()
        d.pop("seeds")
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Apply dotted-key overrides such as ``{"optim.lr": 0.01, "game.max_len": 6}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise KeyError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise KeyError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(d)


def objective_preset(name: str, alphabet_size: int) -> ObjectiveSpec:
    """``ours`` (learned prior, REWO), ``bl1`` (conventional, λ=1), ``bl2`` (ELBO with P_α, α=log|A|, REWO)."""
    if name == "ours":
        return ObjectiveSpec.ours(BetaSchedule.rewo(kappa=0.3))
    if name == "bl1":
        return ObjectiveSpec.conv(entreg=1.0)
    if name == "bl2":
        return ObjectiveSpec.elbo_alpha(math.log(alphabet_size), BetaSchedule.rewo(kappa=0.3))
    raise ValueError(f"unknown objective preset {name!r}")


def _preset(name, game, objective="ours", model=None, optim=None, objects=None) -> ExperimentConfig:
    return ExperimentConfig(
        name=name,
        game=game,
        objective=objective_preset(objective, game.alphabet_size),
        model=model or ModelConfig(),
        optim=optim or OptimConfig(),
        objects=objects or ObjectsConfig(),
    )


def _presets() -> dict:
    out = {}
    for na, nv in [(2, 8), (3, 4)]:
        out[f"desk-{na}x{nv}"] = lambda obj="ours", na=na, nv=nv: _preset(
            f"desk-{na}x{nv}", GameConfig(na, nv, 5, 8), obj
        )
    out["zla-desk"] = lambda obj="ours": _preset(
        "zla-desk",
        GameConfig(1, 100, 5, 10),
        obj,
        optim=OptimConfig(n_updates=2000),
        objects=ObjectsConfig("power-law", 1.0),
    )
    full_model = ModelConfig(hidden=512, emb=32)
    full_optim = OptimConfig(lr=1e-4, batch_size=8192, n_updates=20000)
    for na, nv in [(2, 64), (3, 16), (4, 8), (6, 4), (12, 2)]:
        out[f"full-{na}x{nv}"] = lambda obj="ours", na=na, nv=nv: _preset(
            f"full-{na}x{nv}", GameConfig(na, nv, 9, 32), obj, full_model, full_optim
        )
    for a in (5, 10, 20, 30, 40):
        out[f"zla-full-{a}"] = lambda obj="ours", a=a: _preset(
            f"zla-full-{a}",
            GameConfig(1, 1000, a, 30),
            obj,
            full_model,
            full_optim,
            ObjectsConfig("power-law", 1.0),
        )
    return out


PRESETS = _presets()


def preset(name: str, objective: str = "ours") -> ExperimentConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name](objective).validate()


def output_root(config: ExperimentConfig | None = None) -> Path:
    if config is not None and config.output_dir:
        return Path(config.output_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    name: str
    objective: str
    n_att: int
    n_val: int
    log_path: str
    checkpoint_path: str
    corpus_path: str
    metrics: dict
    accuracy: float

    def report_row(self) -> dict:
        row = {"seed": self.seed, "n_att": self.n_att, "n_val": self.n_val, "objective": self.objective}
        row.update({k: self.metrics.get(k) for k in REPORT_COLUMNS[4:]})
        return row


def run_dir(config: ExperimentConfig, seed: int) -> Path:
    return output_root(config) / f"{config.name}-{config.config_hash}" / f"seed-{seed}"


def build_agents(config: ExperimentConfig, seed: int) -> Agents:
    m = config.model
    return Agents(config.game, m.hidden, m.emb, m.baseline_hidden, m.dropout, m.object_head, seed=seed)


def corpus_metrics(config: ExperimentConfig, objects, messages) -> MetricsReport:
    dist = config.distribution()
    freqs = dist.probs if dist.kind == "power-law" else None
    mc = config.metrics
    alphabet = range(config.game.alphabet_size)
    return analyze_corpus(objects, messages, mc.threshold, mc.strip_eos, mc.add_k, alphabet, freqs)


def train(config: ExperimentConfig, seed: int, progress=None) -> RunRecord:
    """One full training run; writes config, log, checkpoint, corpus and metrics into the run directory."""
    config.validate()
    out = run_dir(config, seed)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    init_seed, train_seed = np.random.SeedSequence(seed).spawn(2)
    agents = build_agents(config, np.random.default_rng(init_seed))
    trainer = Trainer(agents, config.objective, config.distribution(), config.optim.batch_size, config.optim.lr,
                      np.random.default_rng(train_seed))
    try:
        trainer.fit(config.optim.n_updates, log_every=progress and 100, callback=progress)
    finally:
        write_log(out / "log.csv", trainer.history)

    objects = config.distribution().objects()
    messages = greedy_language(agents, objects)
    write_corpus(out / "corpus.jsonl", objects, messages)
    # the output path is left out so identical runs give identical checkpoints anywhere
    meta = {"config": replace(config, output_dir=None).to_dict(), "seed": seed, "step": trainer.state.step, "beta": trainer.state.beta}
    nn.save_checkpoint(out / "checkpoint.bin", agents.state_dict(), meta)
    report = corpus_metrics(config, objects, messages)
    acc = greedy_accuracy(agents, objects)
    record = RunRecord(
        config_hash=config.config_hash,
        seed=seed,
        name=config.name,
        objective=config.objective.kind,
        n_att=config.game.n_att,
        n_val=config.game.n_val,
        log_path=str(out / "log.csv"),
        checkpoint_path=str(out / "checkpoint.bin"),
        corpus_path=str(out / "corpus.jsonl"),
        metrics=report.row(),
        accuracy=acc,
    )
    (out / "record.json").write_text(json.dumps(asdict(record), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return record


def load_agents(checkpoint_path) -> tuple[Agents, ExperimentConfig]:
    tensors, meta = nn.load_checkpoint(checkpoint_path)
    config = ExperimentConfig.from_dict(meta["config"])
    agents = build_agents(config, 0)
    agents.load_state_dict(tensors)
    return agents, config


def dump_language(checkpoint_path, corpus_path) -> int:
    agents, config = load_agents(checkpoint_path)
    objects = config.distribution().objects()
    messages = greedy_language(agents, objects)
    write_corpus(corpus_path, objects, messages)
    return len(messages)


def mean_sem(values) -> tuple[float | None, float | None]:
    """Mean and standard error ``std(ddof=1) / sqrt(k)``; SEM is None for a single value."""
    vals = [float(v) for v in values if v is not None]
    if not vals:
        return None, None
    mean = float(np.mean(vals))
    if len(vals) < 2:
        return mean, None
    return mean, float(np.std(vals, ddof=1) / math.sqrt(len(vals)))


@dataclass
class SweepResult:
    records: list[RunRecord]
    failures: list[dict]
    summary: list[dict]


def _train_job(args):
    config_dict, seed = args
    config = ExperimentConfig.from_dict(config_dict)
    try:
        return train(config, seed), None
    except Exception as exc:
        return None, {
            "config_hash": config.config_hash,
            "name": config.name,
            "seed": seed,
            "error": f"{type(exc).__name__}: {exc}",
            "traceback": traceback.format_exc(),
        }


def summarize(records: list[RunRecord]) -> list[dict]:
    groups: dict[str, list[RunRecord]] = {}
    for r in sorted(records, key=lambda r: (r.config_hash, r.seed)):
        groups.setdefault(r.config_hash, []).append(r)
    rows = []
    for h, recs in sorted(groups.items()):
        first = recs[0]
        row = {"config_hash": h, "name": first.name, "objective": first.objective, "n_att": first.n_att,
               "n_val": first.n_val, "n_runs": len(recs)}
        for f in SUMMARY_FIELDS:
            vals = [r.accuracy if f == "accuracy" else r.metrics.get(f) for r in recs]
            row[f"{f}_mean"], row[f"{f}_sem"] = mean_sem(vals)
        rows.append(row)
    return rows


def sweep(configs: list[ExperimentConfig], seeds=None, parallelism: int = 1, out_dir=None) -> SweepResult:
    """Train every config for every seed; failures are recorded and the sweep continues."""
    if not configs:
        raise ValueError("sweep needs at least one config")
    jobs = []
    for cfg in configs:
        cfg.validate()
        for s in seeds if seeds is not None else cfg.seeds:
            jobs.append((cfg.to_dict(), int(s)))
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_train_job, jobs))
    else:
        results = [_train_job(j) for j in jobs]
    records = sorted((r for r, _ in results if r is not None), key=lambda r: (r.config_hash, r.seed))
    failures = [f for _, f in results if f is not None]
    result = SweepResult(records, failures, summarize(records))
    if out_dir is not None:
        write_sweep(result, Path(out_dir))
    return result


def _write_csv(path: Path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})


def write_sweep(result: SweepResult, out_dir: Path) -> None:
    """``runs.csv``, ``summary.csv``, ``failures.json`` and one ``panel_<metric>.csv`` per metric.

    Each panel lists (n_att, n_val) configurations along its x axis with one
    series per objective, the layout used for comparing objectives.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "runs.csv", [r.report_row() | {"accuracy": r.accuracy} for r in result.records],
               REPORT_COLUMNS + ("accuracy",))
    if result.summary:
        _write_csv(out_dir / "summary.csv", result.summary, list(result.summary[0]))
    (out_dir / "failures.json").write_text(json.dumps(result.failures, indent=2) + "\n", encoding="utf-8")
    for metric in ("c_topsim", "w_topsim", "delta_wc", "n_bou", "n_seg"):
        rows = [{"config": f"({r['n_att']},{r['n_val']})", "objective": r["objective"],
                 "mean": r[f"{metric}_mean"], "sem": r[f"{metric}_sem"]} for r in result.summary]
        rows.sort(key=lambda r: (r["objective"], r["config"]))
        _write_csv(out_dir / f"panel_{metric}.csv", rows, ("config", "objective", "mean", "sem"))


def analyze(corpus_path, out_dir, metrics: MetricsConfig | None = None, frequencies=None, alphabet_size=None,
            svg: bool = False) -> MetricsReport:
    """Metrics for an existing corpus, written as CSV (plus optional SVG of the ZLA curve)."""
    metrics = metrics or MetricsConfig()
    objects, messages = read_corpus(corpus_path)
    alphabet = None
    if metrics.add_k > 0:
        size = alphabet_size or 1 + max(s for m in messages for s in m)
        alphabet = range(size)
    report = analyze_corpus(objects, messages, metrics.threshold, metrics.strip_eos, metrics.add_k, alphabet,
                            frequencies)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    row = report.row()
    _write_csv(out / "metrics.csv", [row], list(row))
    with open(out / "boundaries.jsonl", "w", encoding="utf-8") as fh:
        for msg, b in zip(messages, report.boundaries):
            fh.write(json.dumps({"message": list(msg), "boundaries": b}) + "\n")
    curve = report.zla_curve
    if curve is not None:
        _write_csv(out / "zla_raw.csv", [{"rank": int(r), "length": float(v)} for r, v in zip(curve.ranks, curve.lengths)],
                   ("rank", "length"))
        _write_csv(out / "zla_smoothed.csv",
                   [{"rank": float(r), "mean_length": float(v)} for r, v in zip(curve.centers, curve.smoothed)],
                   ("rank", "mean_length"))
        if svg:
            _zla_svg(curve, out / "zla.svg")
    return report


def _zla_svg(curve, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(curve.centers, curve.smoothed)
    ax.set_xlabel("object frequency rank")
    ax.set_ylabel("mean message length")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
