"""Config-driven experiment runner.

A TOML config declares datasets, a backbone, fusion strategies, horizons
and training settings; `run_experiment` executes the full grid (with the
10-point learning-rate sweep unless disabled), computes diagnostics on
the winning models, and writes a self-describing result bundle:

    results.csv        one row per trained run
    runs.json          full per-run records (losses, epochs, wall time)
    diagnostics.json   similarity / effective rank / attribution /
                       contribution ratios / efficiency / irrelevant-text
    manifest.json      config digest, tool version, timestamps
    tables/*.csv       aggregated comparisons (win rate, normalized MSE, ...)
    plots/*.svg        sweep curves, loss curves, attribution profiles

Everything numeric is reproducible bit-for-bit from (config, seed).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import multiprocessing
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, rng as _rng, svgplot
from .analysis import (
    collect_contribution_ratios,
    contribution_summary,
    effective_rank,
    efficiency_report,
    representation_similarity,
    temporal_attribution,
)
from .backbone import BACKBONES, DLinearBackbone, ForecastModel, MlpBackbone
from .data import (
    DataError,
    DatasetSchema,
    MultimodalDataset,
    SplitSpec,
    Splits,
    default_window_policy,
    generate_toy_dataset,
    load_dataset,
    prepare_splits,
    substitute_irrelevant_text,
)
from .fusion import ConfigurationError, FusionSpec
from .layers import restore, snapshot
from .training import (
    LR_MULTIPLIERS,
    RunRecord,
    TrainConfig,
    TrainingDiverged,
    divergence_flag,
    evaluate,
    lr_sweep,
    per_label_mse,
    train_run,
)

ANALYSES = (
    "similarity",
    "effective_rank",
    "attribution",
    "contribution_ratio",
    "efficiency",
    "irrelevant_text",
)

ATTRIBUTION_WINDOWS = 16


class ConfigError(ValueError):
    """Config validation failure with a field-level path."""

    def __init__(self, fld: str, message: str):
        self.field = fld
        super().__init__(f"{fld}: {message}")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class DatasetConfig:
    name: str
    series: Optional[str] = None  # None -> built-in toy generator
    embeddings: Optional[str] = None
    frequency: str = "toy"

    @property
    def is_toy(self) -> bool:
        return self.series is None


@dataclass
class BackboneConfig:
    kind: str = "mlp"
    hidden_dim: int = 32
    encoder_layers: int = 2
    kernel: int = 25
    window_centering: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "results"
    datasets: List[DatasetConfig] = field(default_factory=lambda: [DatasetConfig("toy")])
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    lookback: Optional[int] = None
    horizons: Optional[List[int]] = None
    stride: int = 1
    fusions: List[FusionSpec] = field(default_factory=lambda: [FusionSpec("none")])
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: List[int] = field(default_factory=lambda: [0])
    sweep: bool = True
    analyses: List[str] = field(default_factory=lambda: list(ANALYSES))
    toy_n: int = 1000
    toy_text_dim: int = 32
    raw_bytes: bytes = b""

    def digest(self) -> str:
        return hashlib.sha256(self.raw_bytes).hexdigest()


def _expect(table: dict, fld: str, types, default, path: str):
    if fld not in table:
        if default is _REQUIRED:
            raise ConfigError(f"{path}{fld}", "required field is missing")
        return default
    value = table[fld]
    if types is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, types):
        raise ConfigError(f"{path}{fld}", f"expected {types}, got {type(value).__name__}")
    return value


_REQUIRED = object()


def parse_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a TOML experiment config."""
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"file not found: {path}")
    raw_bytes = path.read_bytes()
    try:
        raw = tomllib.loads(raw_bytes.decode())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"TOML parse error: {exc}") from None

    cfg = ExperimentConfig(raw_bytes=raw_bytes)
    cfg.seed = _expect(raw, "seed", int, 0, "")
    cfg.out_dir = _expect(raw, "out_dir", str, "results", "")

    datasets = raw.get("datasets", [{"name": "toy"}])
    if not isinstance(datasets, list) or not datasets:
        raise ConfigError("datasets", "need a non-empty array of tables")
    cfg.datasets = []
    for i, entry in enumerate(datasets):
        prefix = f"datasets[{i}]."
        if not isinstance(entry, dict):
            raise ConfigError(f"datasets[{i}]", "expected a table")
        name = _expect(entry, "name", str, _REQUIRED, prefix)
        series = _expect(entry, "series", str, None, prefix)
        embeddings = _expect(entry, "embeddings", str, None, prefix)
        frequency = _expect(entry, "frequency", str, "toy" if series is None else _REQUIRED, prefix)
        if series is not None:
            if embeddings is None:
                raise ConfigError(prefix + "embeddings", "required for file datasets")
            for fld, p in (("series", series), ("embeddings", embeddings)):
                resolved = (path.parent / p) if not Path(p).is_absolute() else Path(p)
                if not resolved.exists():
                    raise ConfigError(prefix + fld, f"file not found: {resolved}")
            series = str((path.parent / series) if not Path(series).is_absolute() else series)
            embeddings = str(
                (path.parent / embeddings) if not Path(embeddings).is_absolute() else embeddings
            )
        if frequency not in ("daily", "weekly", "monthly", "toy"):
            raise ConfigError(prefix + "frequency", f"unknown frequency {frequency!r}")
        cfg.datasets.append(
            DatasetConfig(name=name, series=series, embeddings=embeddings, frequency=frequency)
        )

    bb = raw.get("backbone", {})
    cfg.backbone = BackboneConfig(
        kind=_expect(bb, "kind", str, "mlp", "backbone."),
        hidden_dim=_expect(bb, "hidden_dim", int, 32, "backbone."),
        encoder_layers=_expect(bb, "encoder_layers", int, 2, "backbone."),
        kernel=_expect(bb, "kernel", int, 25, "backbone."),
        window_centering=_expect(bb, "window_centering", bool, True, "backbone."),
    )
    if cfg.backbone.kind not in BACKBONES:
        raise ConfigError("backbone.kind", f"unknown backbone {cfg.backbone.kind!r}")

    win = raw.get("windows", {})
    cfg.lookback = _expect(win, "lookback", int, None, "windows.")
    horizons = _expect(win, "horizons", list, None, "windows.")
    if horizons is not None:
        if not horizons or not all(isinstance(h, int) and h > 0 for h in horizons):
            raise ConfigError("windows.horizons", "need a non-empty list of positive ints")
    cfg.horizons = horizons
    cfg.stride = _expect(win, "stride", int, 1, "windows.")
    if cfg.stride < 1:
        raise ConfigError("windows.stride", "must be >= 1")

    fusions = raw.get("fusion", [{"strategy": "none"}])
    if not isinstance(fusions, list) or not fusions:
        raise ConfigError("fusion", "need a non-empty array of tables")
    cfg.fusions = []
    for i, entry in enumerate(fusions):
        prefix = f"fusion[{i}]."
        if not isinstance(entry, dict):
            raise ConfigError(f"fusion[{i}]", "expected a table")
        strategy = _expect(entry, "strategy", str, _REQUIRED, prefix)
        positions = tuple(_expect(entry, "positions", list, ["middle"], prefix))
        reduction = _expect(entry, "reduction", int, 8, prefix)
        try:
            cfg.fusions.append(
                FusionSpec(strategy=strategy, positions=positions, reduction=reduction)
            )
        except ConfigurationError as exc:
            raise ConfigError(prefix + "strategy", str(exc)) from None

    tr = raw.get("training", {})
    try:
        cfg.train = TrainConfig(
            lr_backbone=_expect(tr, "lr_backbone", float, 1e-4, "training."),
            lr_text_mlp=_expect(tr, "lr_text_mlp", float, 1e-2, "training."),
            lr_projection=_expect(tr, "lr_projection", float, 1e-3, "training."),
            batch=_expect(tr, "batch", int, 32, "training."),
            max_epochs=_expect(tr, "max_epochs", int, 10, "training."),
            patience=_expect(tr, "patience", int, 5, "training."),
            shuffle=_expect(tr, "shuffle", bool, True, "training."),
        )
    except ValueError as exc:
        raise ConfigError("training", str(exc)) from None
    seeds = _expect(tr, "seeds", list, [0], "training.")
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("training.seeds", "need a non-empty list of ints")
    cfg.seeds = seeds
    cfg.sweep = _expect(tr, "sweep", bool, True, "training.")

    an = raw.get("analyses", {})
    run_list = _expect(an, "run", list, list(ANALYSES), "analyses.")
    for name in run_list:
        if name not in ANALYSES:
            raise ConfigError("analyses.run", f"unknown analysis {name!r}")
    cfg.analyses = list(run_list)

    toy = raw.get("toy", {})
    cfg.toy_n = _expect(toy, "n", int, 1000, "toy.")
    cfg.toy_text_dim = _expect(toy, "text_dim", int, 32, "toy.")
    if cfg.toy_n < 30:
        raise ConfigError("toy.n", "need n >= 30")
    return cfg


# ---------------------------------------------------------------------------
# model/data construction (kept reproducible from plain job fields)
# ---------------------------------------------------------------------------


def build_backbone(bb: BackboneConfig, lookback: int, horizon: int, channels: int, seed: int):
    if bb.kind == "mlp":
        return MlpBackbone(
            lookback,
            horizon,
            channels,
            hidden_dim=bb.hidden_dim,
            encoder_layers=bb.encoder_layers,
            window_centering=bb.window_centering,
            rng=_rng.stream(seed, "init", "backbone"),
        )
    return DLinearBackbone(
        lookback, horizon, channels, kernel=bb.kernel, rng=_rng.stream(seed, "init", "backbone")
    )


def build_model(
    bb: BackboneConfig, spec: FusionSpec, lookback: int, horizon: int,
    channels: int, text_dim: int, seed: int,
) -> ForecastModel:
    backbone = build_backbone(bb, lookback, horizon, channels, seed)
    if spec.strategy == "none":
        return ForecastModel(backbone)
    return ForecastModel.build(
        backbone, spec, text_dim=text_dim, rng=_rng.stream(seed, "init", "fusion")
    )


def load_config_dataset(dc: DatasetConfig, seed: int, cfg: ExperimentConfig) -> MultimodalDataset:
    if dc.is_toy:
        return generate_toy_dataset(seed=seed, n=cfg.toy_n, text_dim=cfg.toy_text_dim)
    return load_dataset(
        dc.series, DatasetSchema(frequency=dc.frequency, embeddings=dc.embeddings, name=dc.name)
    )


def _window_settings(cfg: ExperimentConfig, dc: DatasetConfig) -> Tuple[int, List[int]]:
    policy_l, policy_h = default_window_policy(dc.frequency)
    lookback = cfg.lookback if cfg.lookback is not None else policy_l
    horizons = cfg.horizons if cfg.horizons is not None else list(policy_h)
    return lookback, horizons


# ---------------------------------------------------------------------------
# jobs
# ---------------------------------------------------------------------------


@dataclass
class JobSpec:
    dataset_index: int
    setting: str  # "<dataset>-H<horizon>"
    horizon: int
    lookback: int
    fusion_index: int
    seed: int  # effective seed (config.seed + run seed)
    multipliers: Tuple[float, ...]


@dataclass
class JobResult:
    job: JobSpec
    records: List[RunRecord]
    best_multiplier: Optional[float]
    best_params: Optional[Dict[str, np.ndarray]]
    error: Optional[str] = None


_WORKER_CFG: Optional[ExperimentConfig] = None


def _init_worker(cfg: ExperimentConfig) -> None:
    global _WORKER_CFG
    _WORKER_CFG = cfg


def _job_splits(cfg: ExperimentConfig, job: JobSpec) -> Splits:
    dc = cfg.datasets[job.dataset_index]
    dataset = load_config_dataset(dc, job.seed, cfg)
    return prepare_splits(dataset, job.lookback, job.horizon, SplitSpec(), cfg.stride)


def _run_job(job: JobSpec, cfg: Optional[ExperimentConfig] = None) -> JobResult:
    cfg = cfg or _WORKER_CFG
    dc = cfg.datasets[job.dataset_index]
    spec = cfg.fusions[job.fusion_index]
    try:
        splits = _job_splits(cfg, job)
    except DataError as exc:
        return JobResult(job, [], None, None, error=str(exc))
    text_dim = splits.train.z_text_raw.shape[-1]

    def factory() -> ForecastModel:
        return build_model(
            cfg.backbone, spec, job.lookback, job.horizon,
            splits.train.channels, text_dim, job.seed,
        )

    train_cfg = replace(cfg.train, seed=job.seed)
    try:
        if len(job.multipliers) > 1:
            result = lr_sweep(factory, splits, train_cfg, job.multipliers)
            records, best, model = result.records, result.best, result.best_model
        else:
            cfg_single = replace(train_cfg, lr_multiplier=job.multipliers[0])
            model = factory()
            best = train_run(model, splits, cfg_single)
            records = [best]
    except TrainingDiverged as exc:
        failed = [RunRecord(seed=job.seed, lr_multiplier=m, failed=str(exc)) for m in job.multipliers]
        return JobResult(job, failed, None, None, error=str(exc))
    return JobResult(job, records, best.lr_multiplier, snapshot(model.params()))


def _rebuild(cfg: ExperimentConfig, job: JobSpec, params: Dict[str, np.ndarray]) -> ForecastModel:
    spec = cfg.fusions[job.fusion_index]
    splits = _job_splits(cfg, job)
    text_dim = splits.train.z_text_raw.shape[-1]
    model = build_model(
        cfg.backbone, spec, job.lookback, job.horizon, splits.train.channels, text_dim, job.seed
    )
    restore(model.params(), params)
    return model


# ---------------------------------------------------------------------------
# diagnostics on winning models
# ---------------------------------------------------------------------------


def _hidden_states(model: ForecastModel, splits: Splits, limit: int = 256):
    count = min(splits.test.count, limit)
    result = model.forward(splits.test.x[:count], splits.test.z_text_raw[:count])
    return [h.data for h in result.hiddens]


def _diagnostics_for_setting(
    cfg: ExperimentConfig,
    jobs: Dict[Tuple[int, int], JobResult],
    setting_jobs: List[JobSpec],
    donors: Dict[int, MultimodalDataset],
) -> dict:
    """Diagnostics for one (dataset, horizon, seed) cell."""
    out: Dict[str, dict] = {}
    models: Dict[int, ForecastModel] = {}
    splits_cache: Optional[Splits] = None
    for job in setting_jobs:
        res = jobs[(job.fusion_index, job.seed)]
        if res.best_params is None:
            continue
        if splits_cache is None:
            splits_cache = _job_splits(cfg, job)
        models[job.fusion_index] = _rebuild(cfg, job, res.best_params)
    if splits_cache is None:
        return out

    unimodal_index = next(
        (i for i, f in enumerate(cfg.fusions) if f.strategy == "none"), None
    )
    unimodal_hiddens = None
    if unimodal_index in models and "similarity" in cfg.analyses:
        unimodal_hiddens = _hidden_states(models[unimodal_index], splits_cache)

    for fusion_index, model in sorted(models.items()):
        spec = cfg.fusions[fusion_index]
        label = spec.label()
        entry: dict = {}
        hiddens = _hidden_states(model, splits_cache)
        if "similarity" in cfg.analyses and unimodal_hiddens is not None:
            if spec.strategy != "none" and len(hiddens) == len(unimodal_hiddens):
                report = representation_similarity(unimodal_hiddens, hiddens)
                entry["similarity"] = {
                    "average": report.similarity,
                    "per_layer": report.per_layer,
                    "degenerate_layers": report.degenerate_layers,
                }
        if "effective_rank" in cfg.analyses:
            eranks = [
                effective_rank(h.reshape(-1, h.shape[-1])) for h in hiddens if np.any(h)
            ]
            entry["effective_rank"] = {
                "per_layer": eranks,
                "average": float(np.mean(eranks)) if eranks else None,
            }
        if "attribution" in cfg.analyses:
            count = min(ATTRIBUTION_WINDOWS, splits_cache.test.count)
            profiles = []
            for i in range(count):
                _, normalized = temporal_attribution(
                    model,
                    splits_cache.test.x[i],
                    splits_cache.test.y[i],
                    splits_cache.test.z_text_raw[i],
                )
                profiles.append(normalized)
            entry["attribution"] = {
                "mean_normalized": np.mean(profiles, axis=0).tolist(),
                "windows": count,
            }
        if "contribution_ratio" in cfg.analyses and spec.strategy == "cfa":
            samples, skipped = collect_contribution_ratios(model, splits_cache.test)
            entry["contribution"] = contribution_summary(samples, skipped).to_dict()
            entry["contribution_samples"] = {k: v for k, v in sorted(samples.items())}
        if "irrelevant_text" in cfg.analyses and spec.strategy != "none":
            job = next(j for j in setting_jobs if j.fusion_index == fusion_index)
            donor = donors.get(job.dataset_index)
            if donor is not None:
                original_mse, _ = evaluate(model, splits_cache.test)
                dc = cfg.datasets[job.dataset_index]
                target = load_config_dataset(dc, job.seed, cfg)
                substituted = substitute_irrelevant_text(target, [donor], seed=job.seed)
                sub_splits = prepare_splits(
                    substituted, job.lookback, job.horizon, SplitSpec(), cfg.stride
                )
                substituted_mse, _ = evaluate(model, sub_splits.test)
                entry["irrelevant_text"] = {
                    "original_mse": original_mse,
                    "substituted_mse": substituted_mse,
                    "degradation": substituted_mse - original_mse,
                }
        out[label] = entry
    return out


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------


@dataclass
class ResultBundle:
    out_dir: Path
    rows: List[dict]
    runs: dict
    diagnostics: dict
    manifest: dict
    failed_jobs: int
    total_jobs: int


def _atomic_write(path: Path, data: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(data)
    os.replace(tmp, path)


def _results_csv(rows: List[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["setting", "strategy", "position", "r", "multiplier", "seed", "mse", "mae", "diverged"]
    )
    for row in rows:
        writer.writerow(
            [
                row["setting"],
                row["strategy"],
                row["position"],
                row["r"],
                repr(float(row["multiplier"])),
                row["seed"],
                repr(float(row["mse"])),
                repr(float(row["mae"])),
                int(row["diverged"]),
            ]
        )
    return buf.getvalue()


def _position_label(spec: FusionSpec) -> str:
    if spec.strategy == "none":
        return ""
    if spec.is_constrained:
        return "per-layer"
    return "+".join(spec.positions)


def run_experiment(
    config: ExperimentConfig | str | Path,
    out_dir: Optional[str | Path] = None,
    workers: int = 1,
    seed_override: Optional[int] = None,
    no_sweep: bool = False,
    echo=lambda msg: None,
) -> ResultBundle:
    """Execute the config grid and write the result bundle."""
    cfg = parse_config(config) if not isinstance(config, ExperimentConfig) else config
    if seed_override is not None:
        cfg.seed = seed_override
    if no_sweep:
        cfg.sweep = False
    out = Path(out_dir) if out_dir is not None else Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "tables").mkdir(exist_ok=True)
    (out / "plots").mkdir(exist_ok=True)

    multipliers = LR_MULTIPLIERS if cfg.sweep else (1.0,)
    started = time.time()

    jobs: List[JobSpec] = []
    for di, dc in enumerate(cfg.datasets):
        lookback, horizons = _window_settings(cfg, dc)
        for horizon in horizons:
            for fi in range(len(cfg.fusions)):
                for s in cfg.seeds:
                    jobs.append(
                        JobSpec(
                            dataset_index=di,
                            setting=f"{dc.name}-H{horizon}",
                            horizon=horizon,
                            lookback=lookback,
                            fusion_index=fi,
                            seed=cfg.seed + s,
                            multipliers=multipliers,
                        )
                    )

    echo(f"running {len(jobs)} jobs ({len(multipliers)} learning rates each)")
    if workers > 1:
        with multiprocessing.Pool(workers, initializer=_init_worker, initargs=(cfg,)) as pool:
            results = pool.map(_run_job, jobs)
    else:
        results = [_run_job(job, cfg) for job in jobs]
    for job, res in zip(jobs, results):
        status = f"failed: {res.error}" if res.error else (
            f"best mult {res.best_multiplier} val "
            f"{min((r.best_val_mse for r in res.records if r.failed is None), default=float('nan')):.5f}"
        )
        echo(f"  {job.setting} {cfg.fusions[job.fusion_index].label()} seed {job.seed}: {status}")

    # index results and compute divergence flags against the unimodal baseline
    by_key: Dict[Tuple[str, int, int], JobResult] = {}
    for job, res in zip(jobs, results):
        by_key[(job.setting, job.fusion_index, job.seed)] = res
    unimodal_index = next((i for i, f in enumerate(cfg.fusions) if f.strategy == "none"), None)

    rows: List[dict] = []
    runs_json: Dict[str, dict] = {}
    for job, res in zip(jobs, results):
        spec = cfg.fusions[job.fusion_index]
        baseline_val = None
        if unimodal_index is not None:
            base = by_key.get((job.setting, unimodal_index, job.seed))
            if base is not None and base.best_multiplier is not None:
                baseline_val = min(
                    r.best_val_mse for r in base.records if r.failed is None
                )
        for record in res.records:
            diverged = divergence_flag(record, baseline_val)
            rows.append(
                {
                    "setting": job.setting,
                    "strategy": spec.strategy,
                    "position": _position_label(spec),
                    "r": spec.reduction if spec.strategy == "cfa" else "",
                    "multiplier": record.lr_multiplier,
                    "seed": record.seed,
                    "mse": record.test_mse,
                    "mae": record.test_mae,
                    "diverged": diverged,
                }
            )
        key = f"{job.setting}/{spec.label()}/seed{job.seed}"
        runs_json[key] = {
            "config_digest": cfg.digest(),
            "records": [r.to_dict() for r in res.records],
            "best_multiplier": res.best_multiplier,
            "error": res.error,
        }

    # diagnostics per (setting, seed)
    echo("computing diagnostics")
    diagnostics: Dict[str, dict] = {}
    donors = _donor_pool(cfg)
    efficiency_by_setting: Dict[str, list] = {}
    for di, dc in enumerate(cfg.datasets):
        lookback, horizons = _window_settings(cfg, dc)
        for horizon in horizons:
            setting = f"{dc.name}-H{horizon}"
            setting_entry: dict = {"seeds": {}}
            if "efficiency" in cfg.analyses:
                setting_entry["efficiency"] = efficiency_by_setting.setdefault(
                    setting, _efficiency_rows(cfg, di, lookback, horizon)
                )
            for s in cfg.seeds:
                eff_seed = cfg.seed + s
                setting_jobs = [
                    j for j in jobs
                    if j.setting == setting and j.seed == eff_seed
                ]
                job_map = {
                    (j.fusion_index, j.seed): by_key[(setting, j.fusion_index, j.seed)]
                    for j in setting_jobs
                }
                cell = _diagnostics_for_setting(cfg, job_map, setting_jobs, donors)
                for j in setting_jobs:
                    res = job_map[(j.fusion_index, j.seed)]
                    label = cfg.fusions[j.fusion_index].label()
                    if label in cell and res.best_multiplier is not None:
                        best = min(
                            (r for r in res.records if r.failed is None),
                            key=lambda r: (r.best_val_mse, r.lr_multiplier),
                        )
                        cell[label]["best_multiplier"] = res.best_multiplier
                        cell[label]["test_mse"] = best.test_mse
                        cell[label]["test_mae"] = best.test_mae
                        cell[label]["per_label_mse"] = best.per_label_mse
                setting_entry["seeds"][str(eff_seed)] = cell
            diagnostics[setting] = setting_entry

    failed = sum(1 for r in results if r.error is not None)
    manifest = {
        "config_digest": cfg.digest(),
        "tool_version": __version__,
        "started_unix": started,
        "finished_unix": time.time(),
        "jobs": len(jobs),
        "failed_jobs": failed,
        "python": sys.version.split()[0],
    }

    _atomic_write(out / "results.csv", _results_csv(rows))
    _atomic_write(out / "runs.json", json.dumps(runs_json, indent=1, sort_keys=True))
    _atomic_write(out / "diagnostics.json", json.dumps(diagnostics, indent=1, sort_keys=True))
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    bundle = ResultBundle(
        out_dir=out,
        rows=rows,
        runs=runs_json,
        diagnostics=diagnostics,
        manifest=manifest,
        failed_jobs=failed,
        total_jobs=len(jobs),
    )
    aggregate(bundle, echo=echo)
    return bundle


def _donor_pool(cfg: ExperimentConfig) -> Dict[int, MultimodalDataset]:
    """Donor dataset per target for the irrelevant-text analysis.

    Text comes from the other configured datasets; a single-dataset config
    falls back to donating its own pool (a pure resampling).
    """
    if "irrelevant_text" not in cfg.analyses:
        return {}
    loaded = [
        load_config_dataset(dc, cfg.seed + cfg.seeds[0], cfg) for dc in cfg.datasets
    ]
    donors: Dict[int, MultimodalDataset] = {}
    for i in range(len(cfg.datasets)):
        others = [d for j, d in enumerate(loaded) if j != i and d.text_dim == loaded[i].text_dim]
        if others:
            pool = np.concatenate([d.text_embeddings for d in others])
            donors[i] = MultimodalDataset(
                name="donor-pool",
                frequency=loaded[i].frequency,
                series=np.zeros((pool.shape[0], 1)),
                text_embeddings=pool,
            )
        else:
            donors[i] = loaded[i]
    return donors


def _efficiency_rows(cfg: ExperimentConfig, dataset_index: int, lookback: int, horizon: int):
    dc = cfg.datasets[dataset_index]
    sample = load_config_dataset(dc, cfg.seed + cfg.seeds[0], cfg)
    channels, text_dim = sample.channels, sample.text_dim
    models = {}
    for fi, spec in enumerate(cfg.fusions):
        label = spec.label()
        models[label] = build_model(
            cfg.backbone, spec, lookback, horizon, channels, text_dim, cfg.seed
        )
    if "unimodal" not in models:
        models["unimodal"] = build_model(
            cfg.backbone, FusionSpec("none"), lookback, horizon, channels, text_dim, cfg.seed
        )
    rows = efficiency_report(models, unimodal_key="unimodal")
    return [
        {
            "name": r.name,
            "parameter_count": r.parameter_count,
            "flops_per_forward": r.flops_per_forward,
            "fusion_parameter_count": r.fusion_parameter_count,
            "param_overhead_pct": r.param_overhead_pct,
            "flops_overhead_pct": r.flops_overhead_pct,
        }
        for r in rows
    ]


# ---------------------------------------------------------------------------
# aggregation: tables and plots from a bundle
# ---------------------------------------------------------------------------


def load_bundle(out_dir: str | Path) -> ResultBundle:
    out = Path(out_dir)
    rows = []
    with open(out / "results.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(
                {
                    "setting": row["setting"],
                    "strategy": row["strategy"],
                    "position": row["position"],
                    "r": row["r"],
                    "multiplier": float(row["multiplier"]),
                    "seed": int(row["seed"]),
                    "mse": float(row["mse"]),
                    "mae": float(row["mae"]),
                    "diverged": bool(int(row["diverged"])),
                }
            )
    runs = json.loads((out / "runs.json").read_text())
    diagnostics = json.loads((out / "diagnostics.json").read_text())
    manifest = json.loads((out / "manifest.json").read_text())
    return ResultBundle(
        out_dir=out,
        rows=rows,
        runs=runs,
        diagnostics=diagnostics,
        manifest=manifest,
        failed_jobs=manifest.get("failed_jobs", 0),
        total_jobs=manifest.get("jobs", 0),
    )


def _best_runs(bundle: ResultBundle) -> Dict[Tuple[str, str, int], dict]:
    """(setting, strategy-label, seed) -> winning record dict from runs.json."""
    best = {}
    for key, entry in bundle.runs.items():
        setting, label, seed_part = key.rsplit("/", 2)
        seed = int(seed_part.removeprefix("seed"))
        usable = [r for r in entry["records"] if r["failed"] is None]
        if not usable:
            continue
        best[(setting, label, seed)] = min(
            usable, key=lambda r: (r["best_val_mse"], r["lr_multiplier"])
        )
    return best


def _csv_table(header: List[str], rows: List[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def aggregate(bundle: ResultBundle | str | Path, echo=lambda msg: None) -> None:
    """Emit comparison tables and plots from a bundle (no recomputation)."""
    if not isinstance(bundle, ResultBundle):
        bundle = load_bundle(bundle)
    out = bundle.out_dir
    (out / "tables").mkdir(exist_ok=True)
    (out / "plots").mkdir(exist_ok=True)
    best = _best_runs(bundle)
    settings = sorted({k[0] for k in best})
    labels = sorted({k[1] for k in best})
    seeds = sorted({k[2] for k in best})

    # mean test MSE per (setting, label), averaged over seeds
    mean_mse: Dict[Tuple[str, str], float] = {}
    for setting in settings:
        for label in labels:
            values = [
                best[(setting, label, s)]["test_mse"]
                for s in seeds
                if (setting, label, s) in best
            ]
            if values:
                mean_mse[(setting, label)] = float(np.mean(values))

    summary_rows = []
    for setting in settings:
        for label in labels:
            if (setting, label) not in mean_mse:
                continue
            value = mean_mse[(setting, label)]
            flag = ""
            if label != "unimodal" and (setting, "unimodal") in mean_mse:
                baseline = mean_mse[(setting, "unimodal")]
                flag = "+" if value < baseline else ("-" if value > baseline else "=")
            summary_rows.append([setting, label, repr(value), flag])
    _atomic_write(
        out / "tables" / "mse_summary.csv",
        _csv_table(["setting", "strategy", "mean_test_mse", "vs_unimodal"], summary_rows),
    )

    # win rate vs unimodal across settings
    if "unimodal" in labels and len(settings) >= 1:
        from .analysis import win_rate

        win_rows = []
        for label in labels:
            if label == "unimodal":
                continue
            pairs = [
                (mean_mse[(s, label)], mean_mse[(s, "unimodal")])
                for s in settings
                if (s, label) in mean_mse and (s, "unimodal") in mean_mse
            ]
            if pairs:
                rate = win_rate([p[0] for p in pairs], [p[1] for p in pairs])
                win_rows.append([label, repr(rate), len(pairs)])
        _atomic_write(
            out / "tables" / "win_rate.csv",
            _csv_table(["strategy", "win_rate_pct", "settings"], win_rows),
        )

    # normalized MSE across settings (needs >= 2 methods)
    if len(labels) >= 2 and settings:
        from .analysis import normalized_mse

        table = []
        used_labels = [
            lab for lab in labels if all((s, lab) in mean_mse for s in settings)
        ]
        if len(used_labels) >= 2:
            matrix = np.array(
                [[mean_mse[(s, lab)] for s in settings] for lab in used_labels]
            )
            warnings: List[str] = []
            try:
                averages = normalized_mse(matrix, warnings)
                table = [
                    [lab, repr(float(avg))] for lab, avg in zip(used_labels, averages)
                ]
            except ValueError:
                table = []
        if table:
            _atomic_write(
                out / "tables" / "normalized_mse.csv",
                _csv_table(["strategy", "normalized_mse"], table),
            )

    # per-text-type MSE (toy datasets)
    per_type_rows = []
    type_names = ("matching", "contradicting", "irrelevant")
    for setting in settings:
        per_label: Dict[str, Dict[str, List[float]]] = {}
        for label in labels:
            for s in seeds:
                rec = best.get((setting, label, s))
                if rec and rec.get("per_label_mse"):
                    for t, v in rec["per_label_mse"].items():
                        per_label.setdefault(label, {}).setdefault(t, []).append(v)
        for label, groups in sorted(per_label.items()):
            for t in type_names:
                if t in groups:
                    per_type_rows.append([setting, label, t, repr(float(np.mean(groups[t])))])
    if per_type_rows:
        _atomic_write(
            out / "tables" / "per_type_mse.csv",
            _csv_table(["setting", "strategy", "text_type", "mean_test_mse"], per_type_rows),
        )

    # efficiency table
    eff_rows = []
    for setting, entry in sorted(bundle.diagnostics.items()):
        for row in entry.get("efficiency", []):
            eff_rows.append(
                [
                    setting,
                    row["name"],
                    row["parameter_count"],
                    row["flops_per_forward"],
                    row["fusion_parameter_count"],
                    repr(row["param_overhead_pct"]),
                    repr(row["flops_overhead_pct"]),
                ]
            )
    if eff_rows:
        _atomic_write(
            out / "tables" / "efficiency.csv",
            _csv_table(
                ["setting", "strategy", "params", "flops", "fusion_params",
                 "param_overhead_pct", "flops_overhead_pct"],
                eff_rows,
            ),
        )

    emit_plots(bundle)
    echo(f"aggregate: wrote tables and plots under {out}")


def emit_plots(bundle: ResultBundle | str | Path) -> None:
    """Sweep curves, loss curves and attribution profiles as SVG."""
    if not isinstance(bundle, ResultBundle):
        bundle = load_bundle(bundle)
    out = bundle.out_dir / "plots"
    out.mkdir(exist_ok=True)

    # sweep curves: val MSE vs multiplier per strategy (first seed per setting)
    by_setting: Dict[str, Dict[str, dict]] = {}
    for key, entry in bundle.runs.items():
        setting, label, seed_part = key.rsplit("/", 2)
        by_setting.setdefault(setting, {}).setdefault(label, entry)
    for setting, strategies in sorted(by_setting.items()):
        series = []
        for label, entry in sorted(strategies.items()):
            points = [
                (r["lr_multiplier"], r["best_val_mse"])
                for r in entry["records"]
                if r["failed"] is None and np.isfinite(r["best_val_mse"])
            ]
            if points:
                series.append((label, [p[0] for p in points], [p[1] for p in points]))
        if series:
            svg = svgplot.line_plot(
                series, f"{setting}: validation MSE by learning-rate multiplier",
                "lr multiplier", "best val MSE", logx=True, logy=True,
            )
            _atomic_write(out / f"sweep_{setting}.svg", svg)

        loss_series = []
        for label, entry in sorted(strategies.items()):
            usable = [r for r in entry["records"] if r["failed"] is None]
            if not usable:
                continue
            best = min(usable, key=lambda r: (r["best_val_mse"], r["lr_multiplier"]))
            epochs = list(range(1, len(best["val_losses"]) + 1))
            loss_series.append((f"{label} val", epochs, best["val_losses"]))
        if loss_series:
            svg = svgplot.line_plot(
                loss_series, f"{setting}: validation loss by epoch (best runs)",
                "epoch", "val MSE", logy=True,
            )
            _atomic_write(out / f"loss_{setting}.svg", svg)

    # attribution profiles from diagnostics
    for setting, entry in sorted(bundle.diagnostics.items()):
        seeds = entry.get("seeds", {})
        if not seeds:
            continue
        first_seed = sorted(seeds)[0]
        series = []
        for label, cell in sorted(seeds[first_seed].items()):
            profile = cell.get("attribution", {}).get("mean_normalized")
            if profile:
                series.append((label, list(range(1, len(profile) + 1)), profile))
        if series:
            svg = svgplot.line_plot(
                series, f"{setting}: temporal attribution (seed {first_seed})",
                "lookback step", "normalized importance",
            )
            _atomic_write(out / f"attribution_{setting}.svg", svg)

        scatter = []
        for label, cell in sorted(seeds[first_seed].items()):
            sim = cell.get("similarity", {}).get("average")
            mse_v = cell.get("test_mse")
            if sim is not None and mse_v is not None:
                scatter.append((label, [sim], [mse_v]))
        if scatter:
            svg = svgplot.scatter_plot(
                scatter, f"{setting}: representation shift vs test MSE (seed {first_seed})",
                "cosine similarity to unimodal", "test MSE",
            )
            _atomic_write(out / f"similarity_{setting}.svg", svg)
