"""Run orchestration shared by the CLI and the demos: datasets, runs, sweeps, manifests."""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import ConfigValidationError, ExperimentConfig, config_from_dict
from .data import DataError, GaitDataset, dataset_to_bytes, generate_synthetic_dataset, read_dataset
from .evaluation import EvalReport, ProtocolError, evaluate_model
from .models import ConfigError, GaitModel, checkpoint_bytes, load_checkpoint, param_count
from .scaling import FitError, ScalingFit, ScalingPoint, fit_power_law, write_fit_outputs, write_points_csv
from .tensor import NonFiniteError, ShapeError
from .train import TrainingError, TrainLog, coordinate_check, coordinate_ratios, pretrain

MANIFEST_VERSION = 1


class PipelineError(RuntimeError):
    """Carries a machine-readable category and the pipeline stage that failed."""

    def __init__(self, category: str, stage: str, message: str):
        super().__init__(message)
        self.category = category
        self.stage = stage

    def one_line(self) -> str:
        msg = " ".join(str(self).split())
        return f"error category={self.category} stage={self.stage} message={json.dumps(msg)}"


_CATEGORIES = (
    ((ConfigValidationError, ConfigError), "config"),
    ((DataError,), "data"),
    ((TrainingError, NonFiniteError), "training"),
    ((ProtocolError,), "evaluation"),
    ((FitError,), "fit"),
    ((ShapeError,), "shape"),
    ((OSError,), "io"),
)


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        category = "internal"
        for types, cat in _CATEGORIES:
            if isinstance(exc, types):
                category = cat
                break
        raise PipelineError(category, name, f"{type(exc).__name__}: {exc}") from exc


@contextlib.contextmanager
def single_thread(enabled: bool = True):
    """Pin BLAS/OpenMP pools to one thread so float reductions run in a fixed order."""
    if not enabled:
        yield
        return
    with threadpool_limits(limits=1):
        yield


def sha256_bytes(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- manifests ---------------------------------------------------------------------
@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    started: str = ""
    finished: str = ""
    single_thread: bool = True
    inputs: dict[str, str] = field(default_factory=dict)
    artifacts: dict[str, dict] = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    version: str = __version__
    manifest_version: int = MANIFEST_VERSION

    def add_artifact(self, name: str, path: str | Path, root: str | Path) -> None:
        path = Path(path)
        self.artifacts[name] = {"path": os.path.relpath(path, root), "sha256": sha256_file(path)}

    def hashes(self) -> dict[str, str]:
        return {k: v["sha256"] for k, v in self.artifacts.items()}

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True))

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        raw = json.loads(Path(path).read_text())
        if raw.get("manifest_version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {raw.get('manifest_version')!r}")
        return cls(**raw)

    def resolved_config(self) -> ExperimentConfig:
        return config_from_dict(self.config)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def new_manifest(command: str, cfg: ExperimentConfig, single: bool, **params) -> RunManifest:
    return RunManifest(command, cfg.to_dict(), cfg.seed, started=_now(), single_thread=single, params=params)


# -- datasets -----------------------------------------------------------------------
def train_dataset(cfg: ExperimentConfig) -> GaitDataset:
    d = cfg.data
    if d.train_path:
        return read_dataset(d.train_path)
    return generate_synthetic_dataset(
        d.n_ids, d.seqs_per_id, d.train_seed, (d.frames_min, d.frames_max), heading_sweep_deg=d.heading_sweep_deg
    )


def eval_dataset(cfg: ExperimentConfig) -> GaitDataset:
    d = cfg.data
    if d.eval_path:
        return read_dataset(d.eval_path)
    # evaluation identities are disjoint from training ones: a separate seed draws new walkers
    return generate_synthetic_dataset(d.eval_n_ids, d.eval_seqs_per_id, d.eval_seed, (d.frames_min, d.frames_max))


def dataset_hash(ds: GaitDataset) -> str:
    return sha256_bytes(dataset_to_bytes(ds))


# -- single runs ---------------------------------------------------------------------
@dataclass
class PretrainResult:
    model: GaitModel
    log: TrainLog
    manifest: RunManifest
    n_sequences: int


def run_pretrain(
    cfg: ExperimentConfig,
    out_dir: str | Path,
    subset_fraction: float = 1.0,
    width: int | None = None,
    single: bool = True,
    dataset: GaitDataset | None = None,
    progress=None,
) -> PretrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.model if width is None else cfg.model.with_width(width)
    man = new_manifest("pretrain", cfg, single, subset_fraction=subset_fraction, width=mcfg.width_multiplier)
    with single_thread(single):
        with stage("load-data"):
            ds = dataset if dataset is not None else train_dataset(cfg)
            man.inputs["train_dataset"] = dataset_hash(ds)
        with stage("pretrain"):
            model, log = pretrain(
                ds, mcfg, cfg.train, cfg.augmentation, subset_fraction, cfg.parametrization, callback=progress
            )
        with stage("write-artifacts"):
            ckpt = out / "checkpoint.gck"
            ckpt.write_bytes(checkpoint_bytes(model))
            log_path = out / "train_log.csv"
            log.to_csv(log_path)
            man.add_artifact("checkpoint", ckpt, out)
            man.add_artifact("train_log", log_path, out)
    n_used = int(np.ceil(subset_fraction * len(ds) - 1e-9))
    man.params["n_sequences"] = n_used
    man.params["n_parameters"] = param_count(mcfg, include_head=False)
    man.finished = _now()
    man.write(out / "pretrain.manifest.json")
    return PretrainResult(model, log, man, n_used)


def run_eval(
    cfg: ExperimentConfig,
    model: GaitModel,
    out_dir: str | Path,
    single: bool = True,
    checkpoint_path: str | Path | None = None,
    dataset: GaitDataset | None = None,
) -> tuple[EvalReport, RunManifest]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = new_manifest("eval", cfg, single)
    if checkpoint_path is not None:
        man.inputs["checkpoint"] = sha256_file(checkpoint_path)
        man.params["checkpoint_path"] = os.path.abspath(checkpoint_path)
    with single_thread(single):
        with stage("load-data"):
            ds = dataset if dataset is not None else eval_dataset(cfg)
            man.inputs["eval_dataset"] = dataset_hash(ds)
        with stage("evaluate"):
            report = evaluate_model(model, ds, cfg.evaluation.per_id_gallery)
        with stage("write-artifacts"):
            report.to_json(out / "report.json")
            report.to_csv(out / "report.csv")
            man.add_artifact("report_json", out / "report.json", out)
            man.add_artifact("report_csv", out / "report.csv", out)
    man.finished = _now()
    man.write(out / "eval.manifest.json")
    return report, man


def load_model(path: str | Path) -> GaitModel:
    with stage("load-checkpoint"):
        return load_checkpoint(path)


# -- sweep ----------------------------------------------------------------------------
@dataclass
class SweepCell:
    fraction: float
    width: int
    n_sequences: int
    n_parameters: int
    controlled: float
    wild: float
    out_dir: str

    def metric(self, name: str) -> float:
        return self.controlled if name == "controlled" else self.wild


def _cell_dir(root: Path, fraction: float, width: int) -> Path:
    return root / f"frac{fraction:g}_c{width}"


def _run_cell(args) -> SweepCell:
    cfg_dict, root, fraction, width, single = args
    cfg = config_from_dict(cfg_dict)
    d = _cell_dir(Path(root), fraction, width)
    res = run_pretrain(cfg, d, fraction, width, single)
    report, _ = run_eval(cfg, res.model, d, single, checkpoint_path=d / "checkpoint.gck")
    return SweepCell(
        fraction, width, res.n_sequences, res.manifest.params["n_parameters"],
        report.aggregate_controlled, report.aggregate_wild, str(d),
    )


@dataclass
class SweepResult:
    cells: list[SweepCell]
    data_fits: dict[int, ScalingFit]
    model_fits: dict[float, ScalingFit]
    manifest: RunManifest


def run_sweep(cfg: ExperimentConfig, out_dir: str | Path, single: bool = True, log=print) -> SweepResult:
    """Every (fraction, width) cell trains and evaluates in its own directory with its own manifest.

    Data-axis fits use one curve per width (x = sequences seen); model-axis fits
    use one curve per fraction (x = backbone parameters). Curves with fewer than
    three points are skipped.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    man = new_manifest("sweep", cfg, single)
    jobs = [(cfg.to_dict(), str(root), f, c, single) for c in cfg.sweep.widths for f in cfg.sweep.fractions]
    t0 = time.perf_counter()
    if single or (os.cpu_count() or 1) == 1:
        cells = []
        for job in jobs:
            cells.append(_run_cell(job))
            cell = cells[-1]
            log(f"cell frac={cell.fraction:g} c={cell.width}: D={cell.n_sequences} N={cell.n_parameters} "
                f"controlled={cell.controlled:.4f} wild={cell.wild:.4f} ({time.perf_counter() - t0:.0f}s)")
    else:
        with ProcessPoolExecutor() as pool:
            cells = list(pool.map(_run_cell, jobs))
    metric = cfg.sweep.metric
    data_fits, model_fits = {}, {}
    with stage("fit"):
        for c in cfg.sweep.widths:
            pts = [ScalingPoint(float(x.n_sequences), x.metric(metric), f"c{c}") for x in cells if x.width == c]
            if len({p.x for p in pts}) >= 3:
                data_fits[c] = fit_power_law(pts, cfg.sweep.form)
                write_points_csv(pts, root / f"points_data_c{c}.csv")
                write_fit_outputs(data_fits[c], pts, root, f"fit_data_c{c}")
        for f in cfg.sweep.fractions:
            pts = [ScalingPoint(float(x.n_parameters), x.metric(metric), f"frac{f:g}") for x in cells if x.fraction == f]
            if len({p.x for p in pts}) >= 3:
                model_fits[f] = fit_power_law(pts, cfg.sweep.form)
                write_points_csv(pts, root / f"points_model_frac{f:g}.csv")
                write_fit_outputs(model_fits[f], pts, root, f"fit_model_frac{f:g}")
    with stage("write-artifacts"):
        summary = root / "sweep_summary.csv"
        with open(summary, "w") as fh:
            fh.write("fraction,width,n_sequences,n_parameters,controlled,wild,dir\n")
            for x in cells:
                fh.write(f"{x.fraction!r},{x.width},{x.n_sequences},{x.n_parameters},"
                         f"{x.controlled!r},{x.wild!r},{os.path.relpath(x.out_dir, root)}\n")
        man.add_artifact("summary", summary, root)
        for p in sorted(root.glob("fit_*")) + sorted(root.glob("points_*")):
            man.add_artifact(p.stem + p.suffix.replace(".", "_"), p, root)
        man.params["runs"] = [os.path.relpath(x.out_dir, root) for x in cells]
    man.finished = _now()
    man.write(root / "sweep.manifest.json")
    return SweepResult(cells, data_fits, model_fits, man)


# -- muP check --------------------------------------------------------------------------
def is_readout_layer(name: str) -> bool:
    """Outputs of fixed-size (emb_size) projections, as opposed to width-indexed activations."""
    return "readout" in name or name == "final"


@dataclass
class MupCheckResult:
    ratios: dict[str, dict[int, dict[str, float]]]
    passed: bool
    violations: dict[str, list[tuple[int, str, float]]]


def run_mup_check(
    cfg: ExperimentConfig,
    widths=None,
    steps: int | None = None,
    bounds: tuple[float, float] = (0.5, 2.0),
) -> MupCheckResult:
    mc = cfg.mup_check
    widths = tuple(widths or mc.widths)
    steps = mc.steps if steps is None else steps
    with stage("load-data"):
        ds = generate_synthetic_dataset(mc.n_ids, mc.seqs_per_id, cfg.data.train_seed)
    ratios, violations = {}, {}
    with stage("mup-check"):
        for par in ("mup", "sp"):
            rec = coordinate_check(ds, cfg.model, widths, steps, mc.lr, par, mc.batch_size, cfg.seed, cfg.augmentation)
            ratios[par] = coordinate_ratios(rec)
            violations[par] = [
                (c, k, v)
                for c, layer in ratios[par].items()
                for k, v in layer.items()
                if not is_readout_layer(k) and not bounds[0] <= v <= bounds[1]
            ]
    top = max(widths)
    passed = not violations["mup"] and any(c == top for c, _, _ in violations["sp"])
    return MupCheckResult(ratios, passed, violations)
