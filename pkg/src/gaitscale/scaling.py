"""Power-law fits of performance against scale, analytic FLOPs, iso-compute tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy.optimize import least_squares, minimize_scalar

from .data import N_JOINTS
from .models import ModelConfig, param_count

Form = Literal["additive", "saturating"]
E_GRID_STEP = 1e-4


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class ScalingPoint:
    x: float
    performance: float
    label: str = ""


@dataclass
class ScalingFit:
    """additive: P = a * x**exponent + E;  saturating: P = E - a * x**(-exponent)."""

    form: str
    amplitude: float
    exponent: float
    irreducible: float
    rss: float
    n_points: int
    x_min: float
    x_max: float

    def to_dict(self) -> dict:
        return asdict(self)


def _loglinear(logx: np.ndarray, logy: np.ndarray) -> tuple[float, float, float]:
    """Least-squares line logy = c + s * logx; returns (c, s, rss)."""
    A = np.stack([np.ones_like(logx), logx], axis=1)
    coef, *_ = np.linalg.lstsq(A, logy, rcond=None)
    resid = logy - A @ coef
    return float(coef[0]), float(coef[1]), float(resid @ resid)


def _transform(p: np.ndarray, e: float, form: str) -> np.ndarray | None:
    gap = (p - e) if form == "additive" else (e - p)
    if np.any(gap <= 0):
        return None
    return np.log(gap)


def fit_power_law(
    points: Sequence[ScalingPoint],
    form: Form = "saturating",
    e_bounds: tuple[float, float] | None = None,
    objective: Literal["log", "linear"] = "log",
) -> ScalingFit:
    """Log-log least squares with the irreducible term chosen by grid search plus refinement.

    For each candidate E the inner problem is a closed-form linear regression of
    log|P - E| on log x; E minimizes the log-space residual sum of squares over
    a 1e-4 grid, then a bounded scalar search refines it inside the best cell.
    Default E ranges: additive [0, min P), saturating (max P, 1] (or up to
    2 * max P when performances exceed 1).

    Log-space residuals weight the small gaps |P - E| heavily, which biases the
    exponent low under multiplicative noise on P. ``objective="linear"`` keeps
    the log-space solution as a starting point and then minimizes squared
    residuals in P itself. ``rss`` is always reported in log space.
    """
    if form not in ("additive", "saturating"):
        raise ValueError(f"unknown form {form!r}")
    if len(points) < 3:
        raise FitError("need at least 3 points")
    x = np.array([pt.x for pt in points], dtype=np.float64)
    p = np.array([pt.performance for pt in points], dtype=np.float64)
    if np.any(x <= 0) or not np.all(np.isfinite(x)) or not np.all(np.isfinite(p)):
        raise FitError("x must be positive and all values finite")
    if len(np.unique(x)) != len(x):
        raise FitError("x values must be distinct")
    order = np.argsort(x, kind="stable")
    x, p = x[order], p[order]
    logx = np.log(x)

    if e_bounds is None:
        if form == "additive":
            e_bounds = (0.0, float(p.min()))
        else:
            top = float(p.max())
            e_bounds = (top, 1.0 if top < 1.0 else 2.0 * top)
    lo, hi = e_bounds

    def rss_at(e: float) -> float:
        y = _transform(p, e, form)
        if y is None:
            return math.inf
        return _loglinear(logx, y)[2]

    if form == "additive":
        grid = np.arange(lo, hi, E_GRID_STEP)
    else:
        grid = hi - np.arange(0.0, hi - lo, E_GRID_STEP)
    grid = grid[(grid != p.min()) & (grid != p.max())] if grid.size else grid
    scores = np.array([rss_at(float(e)) for e in grid])
    if not grid.size or not np.any(np.isfinite(scores)):
        raise FitError(f"no admissible irreducible term in [{lo}, {hi}] for the {form} form")
    # flat data makes many E exact; prefer the candidate closest to the data
    tied = np.flatnonzero(scores <= scores.min() + max(1e-12 * scores.min(), 1e-24))
    edge = p.min() if form == "additive" else p.max()
    best = int(tied[np.argmin(np.abs(grid[tied] - edge))])
    e_best = float(grid[best])

    # refine inside the neighbouring grid cells, staying strictly admissible
    left = max(lo, e_best - E_GRID_STEP)
    right = min(hi, e_best + E_GRID_STEP)
    if form == "additive":
        right = min(right, float(p.min()) - 1e-15)
    else:
        left = max(left, float(p.max()) + 1e-15)
    if right > left and scores[best] > 0.0:
        res = minimize_scalar(rss_at, bounds=(left, right), method="bounded", options={"xatol": 1e-14})
        if np.isfinite(res.fun) and res.fun <= scores[best]:
            e_best = float(res.x)

    y = _transform(p, e_best, form)
    c, s, rss = _loglinear(logx, y)
    if objective == "linear":
        c, s, e_best = _refine_linear(logx, p, c, s, e_best, form, (lo, hi))
        y = _transform(p, e_best, form)
        resid = y - (c + s * logx)
        rss = float(resid @ resid)
    elif objective != "log":
        raise ValueError(f"unknown objective {objective!r}")
    exponent = s if form == "additive" else -s
    return ScalingFit(form, math.exp(c), exponent, e_best, rss, len(points), float(x[0]), float(x[-1]))


def _refine_linear(logx, p, c, s, e, form, e_range):
    sign = 1.0 if form == "additive" else -1.0
    lo = max(e_range[0], float(p.max()) + 1e-12) if form == "saturating" else e_range[0]
    hi = min(e_range[1], float(p.min()) - 1e-12) if form == "additive" else e_range[1]
    if not hi > lo:
        return c, s, e
    e0 = min(max(e, lo), hi)

    def resid(th):
        return th[2] + sign * np.exp(th[0] + th[1] * logx) - p

    sol = least_squares(resid, [c, s, e0], bounds=([-np.inf, -np.inf, lo], [np.inf, np.inf, hi]), xtol=1e-15, ftol=1e-15, gtol=1e-15)
    if not sol.success:
        return c, s, e
    return float(sol.x[0]), float(sol.x[1]), float(sol.x[2])


def predict(fit: ScalingFit, x) -> tuple[np.ndarray | float, np.ndarray | bool]:
    """Evaluate the fitted law; second value flags x outside the fitted range."""
    xa = np.asarray(x, dtype=np.float64)
    if np.any(xa <= 0):
        raise ValueError("x must be positive")
    if fit.form == "additive":
        val = fit.amplitude * xa**fit.exponent + fit.irreducible
    else:
        val = fit.irreducible - fit.amplitude * xa ** (-fit.exponent)
    extrap = (xa < fit.x_min) | (xa > fit.x_max)
    if np.ndim(x) == 0:
        return float(val), bool(extrap)
    return val, extrap


def read_points_csv(path: str | Path) -> list[ScalingPoint]:
    """Columns x, performance and optional label; lines starting with '#' are comments."""
    with open(path) as fh:
        rows = csv.DictReader(line for line in fh if not line.lstrip().startswith("#"))
        missing = {"x", "performance"} - set(rows.fieldnames or ())
        if missing:
            raise FitError(f"{path}: missing column(s) {sorted(missing)}")
        try:
            return [ScalingPoint(float(r["x"]), float(r["performance"]), r.get("label") or "") for r in rows]
        except (TypeError, ValueError) as exc:
            raise FitError(f"{path}: line {rows.line_num}: {exc}") from None


def write_points_csv(points: Sequence[ScalingPoint], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "performance", "label"])
        for pt in points:
            w.writerow([repr(float(pt.x)), repr(float(pt.performance)), pt.label])


def write_fit_outputs(fit: ScalingFit, points: Sequence[ScalingPoint], out_dir: str | Path, stem: str = "fit") -> None:
    """``<stem>.json`` with the parameters and ``<stem>_curve.csv`` with log10 columns."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(json.dumps(fit.to_dict(), indent=2, sort_keys=True))
    with open(out_dir / f"{stem}_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["log10_x", "log10_observed", "log10_fitted", "label"])
        for pt in sorted(points, key=lambda q: q.x):
            fitted, _ = predict(fit, pt.x)
            w.writerow([
                math.log10(pt.x),
                math.log10(pt.performance) if pt.performance > 0 else "",
                math.log10(fitted) if fitted > 0 else "",
                pt.label,
            ])


# -- FLOPs -----------------------------------------------------------------------
@dataclass
class FlopsReport:
    """Forward FLOPs for one crop of T frames (2 FLOPs per multiply-accumulate).

    Elementwise work (norms, softmax, rotary, activations) is not counted.
    """

    components: dict[str, int]
    frames: int
    params: int
    tokens_per_frame: int

    @property
    def forward_total(self) -> int:
        return int(sum(self.components.values()))

    def training_total(self, dataset_size: int, epochs: int, views_per_sequence: int = 2) -> int:
        # backward costs twice the forward pass
        return 3 * self.forward_total * views_per_sequence * dataset_size * epochs

    def heuristic_training(self, dataset_size: int, epochs: int, views_per_sequence: int = 2) -> int:
        tokens = self.frames * self.tokens_per_frame * views_per_sequence * dataset_size * epochs
        return 6 * self.params * tokens

    def to_dict(self) -> dict:
        return {
            "components": dict(self.components),
            "forward_total": self.forward_total,
            "frames": self.frames,
            "params": self.params,
        }


def linear_flops(tokens: int, d_in: int, d_out: int) -> int:
    return 2 * tokens * d_in * d_out


def block_flops(n_groups: int, tokens: int, d: int, hidden: int) -> dict[str, int]:
    """One parallel block applied to ``n_groups`` independent sequences of ``tokens`` tokens."""
    t = n_groups * tokens
    return {
        "attention_proj": 4 * linear_flops(t, d, d),
        # q.k logits and attention-weighted values, summed over heads
        "attention_mix": n_groups * 2 * (2 * tokens * tokens * d),
        "mlp": 3 * linear_flops(t, d, hidden),
    }


def flops_forward(cfg: ModelConfig, frames: int | None = None) -> FlopsReport:
    T = cfg.crop_length if frames is None else int(frames)
    comp = {"attention_proj": 0, "attention_mix": 0, "mlp": 0, "projections": 0, "merges": 0}

    def add(d: dict[str, int]) -> None:
        for k, v in d.items():
            comp[k] += v

    emb = cfg.emb_size
    if cfg.family == "gaitformer":
        d = cfg.flat_width
        comp["projections"] += linear_flops(T, N_JOINTS * 3, d) + linear_flops(1, d, emb)
        for _ in range(cfg.flat_depth):
            add(block_flops(1, T, d, cfg.mlp_ratio * d))
        tokens_per_frame = 1
    else:
        widths, tokens = cfg.stage_widths, cfg.stage_tokens
        comp["projections"] += linear_flops(T * N_JOINTS, 3, widths[0])
        for s in range(4):
            d, S = widths[s], tokens[s]
            for _ in range(cfg.stage_depths[s]):
                add(block_flops(T, S, d, cfg.mlp_ratio * d))  # spatial: one group per frame
                add(block_flops(S, T, d, cfg.mlp_ratio * d))  # temporal: one group per token
            comp["projections"] += linear_flops(1, d, emb)
            if s < 3:
                comp["merges"] += linear_flops(T, S * d, widths[s + 1])
        comp["projections"] += linear_flops(1, 4 * emb, emb)
        tokens_per_frame = N_JOINTS
    return FlopsReport(comp, T, param_count(cfg, include_head=False), tokens_per_frame)


@dataclass
class BudgetRow:
    name: str
    params: int
    forward_flops: int
    training_flops: int
    heuristic_flops: int
    allocations: list[tuple[int, int, int]] = field(default_factory=list)  # (D, epochs, flops)


def compute_budget_table(
    cfgs: Sequence[ModelConfig] | dict[str, ModelConfig],
    dataset_size: int,
    epochs: int,
    budget: float,
    epoch_grid: Sequence[int] | None = None,
    views_per_sequence: int = 2,
    tolerance: float = 0.01,
) -> list[BudgetRow]:
    """Training cost of each config at (D, epochs) plus the (D', epochs') pairs that hit ``budget``."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    named = cfgs if isinstance(cfgs, dict) else {f"{c.family}-c{c.width_multiplier}": c for c in cfgs}
    grid = list(epoch_grid) if epoch_grid is not None else list(range(1, max(epochs, 1) + 1))
    rows = []
    affordable = False
    for name, cfg in named.items():
        rep = flops_forward(cfg)
        per_seq_epoch = rep.training_total(1, 1, views_per_sequence)
        if per_seq_epoch <= budget:
            affordable = True
        row = BudgetRow(
            name,
            rep.params,
            rep.forward_total,
            rep.training_total(dataset_size, epochs, views_per_sequence),
            rep.heuristic_training(dataset_size, epochs, views_per_sequence),
        )
        for e in grid:
            d = int(round(budget / (per_seq_epoch * e)))
            if d < 1:
                continue
            cost = rep.training_total(d, e, views_per_sequence)
            if abs(cost - budget) <= tolerance * budget:
                row.allocations.append((d, e, cost))
        rows.append(row)
    if not affordable:
        raise ValueError("budget is smaller than one training sequence-epoch for every config")
    return rows


def budget_table_csv(rows: Sequence[BudgetRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "params", "forward_flops", "training_flops", "heuristic_6ND", "alloc_D", "alloc_epochs", "alloc_flops"])
        for r in rows:
            if not r.allocations:
                w.writerow([r.name, r.params, r.forward_flops, r.training_flops, r.heuristic_flops, "", "", ""])
            for d, e, f in r.allocations:
                w.writerow([r.name, r.params, r.forward_flops, r.training_flops, r.heuristic_flops, d, e, f])
