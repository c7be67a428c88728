"""Contrastive pretraining: NT-Xent + KoLeo, warmup-cosine schedule, AdamW with muP lr scaling."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tc
from .data import AugmentationConfig, GaitDataset, make_views, nested_subset_indices
from .models import GROUP_GAIN, GaitModel, ModelConfig, build_model
from .tensor import Tensor

PAPER_EPOCHS = 25
PAPER_BATCH_VIEWS = 256
PAPER_COMPUTE_BATCH_VIEWS = 2048
PAPER_BASE_LR = 0.0016
PAPER_WARMUP_STEPS = 1024
PAPER_LAMBDA_KOLEO = 0.01


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # batch_size counts sequences; the loss sees 2 * batch_size views
    batch_size: int = PAPER_BATCH_VIEWS // 2
    epochs: int = PAPER_EPOCHS
    base_lr: float = PAPER_BASE_LR
    warmup_steps: int = PAPER_WARMUP_STEPS
    lambda_koleo: float = PAPER_LAMBDA_KOLEO
    temperature: float = 0.07
    weight_decay: float = 0.01
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    koleo_eps: float = 1e-8
    grad_clip: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.lambda_koleo < 0:
            raise ValueError("lambda_koleo must be >= 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


# -- losses ------------------------------------------------------------------------
def ntxent_loss(z: Tensor, temperature: float) -> Tensor:
    """NT-Xent over 2B rows where rows 2i and 2i+1 are the two views of sample i."""
    n = z.shape[0]
    if n % 2 or n < 4:
        raise ValueError(f"NT-Xent needs an even number of rows with B >= 2 pairs, got {n} rows")
    zn = tc.l2_normalize(z)
    sim = (zn @ tc.swapaxes(zn, 0, 1)) * (1.0 / temperature)
    mask = np.zeros((n, n), dtype=z.dtype)
    np.fill_diagonal(mask, -1e9)
    logits = sim + mask
    shift = np.max(logits.data, axis=1, keepdims=True)
    lse = tc.log(tc.exp(logits - shift).sum(axis=1)) + shift[:, 0]
    pos = (np.arange(n) ^ 1)[:, None]
    return (lse - tc.take_along(sim, pos, axis=1)[:, 0]).mean()


def koleo_loss(z: Tensor, eps: float = 1e-8) -> Tensor:
    """-mean(log(nearest-neighbour distance)) on L2-normalized rows; distances clamped at eps."""
    n = z.shape[0]
    if n < 2:
        raise ValueError("KoLeo needs at least 2 rows")
    zn = tc.l2_normalize(z)
    diff = zn.reshape(n, 1, -1) - zn.reshape(1, n, -1)
    d2 = (diff * diff).sum(axis=-1)
    mask = np.zeros((n, n), dtype=z.dtype)
    np.fill_diagonal(mask, 1e9)
    nearest = tc.clamp_min(tc.min_lastdim(d2 + mask), eps * eps)
    return tc.log(nearest).mean() * -0.5


@dataclass
class LossTerms:
    total: Tensor
    simclr: Tensor
    koleo: Tensor


def loss_terms(z: Tensor, cfg: TrainConfig) -> LossTerms:
    l_sim = ntxent_loss(z, cfg.temperature)
    l_ko = koleo_loss(z, cfg.koleo_eps)
    total = l_sim if cfg.lambda_koleo == 0 else l_sim + l_ko * cfg.lambda_koleo
    return LossTerms(total, l_sim, l_ko)


def total_loss(z: Tensor, cfg: TrainConfig) -> Tensor:
    return loss_terms(z, cfg).total


# -- schedule and optimizer ----------------------------------------------------------
def lr_schedule(step: int, cfg: TrainConfig, mup_multiplier: float = 1.0, total_steps: int | None = None) -> float:
    """Linear warmup from 0 then cosine decay to exactly 0 at total_steps."""
    peak = cfg.base_lr * mup_multiplier
    if total_steps is None:
        raise ValueError("total_steps is required")
    step = min(max(step, 0), total_steps)
    if step < cfg.warmup_steps:
        return peak * step / cfg.warmup_steps
    span = total_steps - cfg.warmup_steps
    if span <= 0:
        return peak
    progress = (step - cfg.warmup_steps) / span
    if progress >= 1.0:
        return 0.0
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lrs: dict[str, float] | float,
    cfg: TrainConfig,
    no_decay: set[str] = frozenset(),
) -> AdamWState:
    """In-place AdamW update with bias correction and decoupled weight decay."""
    b1, b2 = cfg.adam_betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name} at optimizer step {t}")
        lr = lrs if isinstance(lrs, float) else lrs[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if cfg.weight_decay and name not in no_decay:
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype)
    return state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return norm


# -- training loop --------------------------------------------------------------------
@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    COLUMNS = ("step", "lr", "l_simclr", "l_koleo", "l_total", "grad_norm", "wall_ms")

    def append(self, **rec) -> None:
        if self.records and rec["step"] <= self.records[-1]["step"]:
            raise TrainingError("log steps must increase")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for r in self.records:
                w.writerow({k: r[k] for k in self.COLUMNS})

    @classmethod
    def from_csv(cls, path: str | Path) -> "TrainLog":
        log = cls()
        with open(path) as fh:
            for row in csv.DictReader(fh):
                log.records.append({k: (int(v) if k == "step" else float(v)) for k, v in row.items()})
        return log


def steps_per_epoch(n_sequences: int, batch_size: int) -> int:
    return -(-n_sequences // batch_size)


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches[-1]) < 2:
        # a single leftover sequence has no negatives; borrow from the front
        need = 2 - len(batches[-1])
        batches[-1] = np.concatenate([batches[-1], perm[:need]])
    return batches


def build_view_batch(
    dataset: GaitDataset, indices, aug: AugmentationConfig, seed: int, step: int, dtype
) -> np.ndarray:
    """(2B, T, 17, 3) with rows 2i and 2i+1 holding the views of sequence indices[i]."""
    views = []
    for i in indices:
        rng = np.random.default_rng([seed, step, int(i)])
        a, b = make_views(dataset.sequences[int(i)], aug, rng)
        views.append(a.frames)
        views.append(b.frames)
    return np.stack(views).astype(dtype)


def pretrain(
    dataset: GaitDataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    aug_cfg: AugmentationConfig | None = None,
    subset_fraction: float = 1.0,
    parametrization: str = "mup",
    callback: Callable[[int, dict], None] | None = None,
    max_steps: int | None = None,
) -> tuple[GaitModel, TrainLog]:
    """Run epochs x ceil(|subset| / batch_size) AdamW steps; returns the trained model and log."""
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    idx = nested_subset_indices(len(dataset), subset_fraction, train_cfg.seed)
    data = dataset.subset(idx)
    if len(data) < 2:
        raise TrainingError("subset has fewer than 2 sequences")
    aug = replace(aug_cfg or AugmentationConfig(), crop_length=model_cfg.crop_length)
    dtype = np.float32 if train_cfg.dtype == "float32" else np.float64

    model = build_model(model_cfg, train_cfg.seed, parametrization, dtype=dtype)
    no_decay = {n for n, g in model.scales.groups.items() if g == GROUP_GAIN}
    lr_mult = {n: model.scales.lr_multiplier(n) for n in model.params}
    bs = min(train_cfg.batch_size, len(data))
    total = train_cfg.epochs * steps_per_epoch(len(data), bs)
    if max_steps is not None:
        total = min(total, max_steps)
    state = AdamWState()
    log = TrainLog()

    step = 0
    for epoch in range(train_cfg.epochs):
        rng = np.random.default_rng([train_cfg.seed, epoch, 0xBA7C4])
        for batch in _epoch_batches(len(data), bs, rng):
            if step >= total:
                break
            t0 = time.perf_counter()
            x = build_view_batch(data, batch, aug, train_cfg.seed, step, dtype)
            model.zero_grad()
            z = model.project(model.embed(x))
            terms = loss_terms(z, train_cfg)
            if not np.isfinite(terms.total.data):
                raise TrainingError(f"non-finite loss at step {step}")
            terms.total.backward()
            grads = {n: p.grad for n, p in model.params.items() if p.grad is not None}
            gnorm = clip_grad_norm(grads, train_cfg.grad_clip)
            base = lr_schedule(step + 1, train_cfg, 1.0, total)
            adamw_step(model.params, grads, state, {n: base * lr_mult[n] for n in model.params}, train_cfg, no_decay)
            step += 1
            model.step = step
            rec = dict(
                step=step,
                lr=base,
                l_simclr=float(terms.simclr.data),
                l_koleo=float(terms.koleo.data),
                l_total=float(terms.total.data),
                grad_norm=gnorm,
                wall_ms=(time.perf_counter() - t0) * 1e3,
            )
            log.append(**rec)
            if callback is not None:
                callback(step, rec)
    model.zero_grad()
    return model, log


# -- muP coordinate check -----------------------------------------------------------
def coordinate_check(
    dataset: GaitDataset,
    base_cfg: ModelConfig,
    widths=(1, 2, 4),
    steps: int = 10,
    lr: float = 0.01,
    parametrization: str = "mup",
    batch_size: int = 8,
    seed: int = 0,
    aug_cfg: AugmentationConfig | None = None,
) -> dict[int, dict[str, float]]:
    """Per-layer activation RMS after ``steps`` constant-lr AdamW steps, for each width.

    Every width sees the same view batches and is probed on the same fixed batch,
    so differences across widths come from the parametrization alone.
    """
    if len(dataset) < batch_size:
        raise TrainingError("dataset smaller than one batch")
    aug = replace(aug_cfg or AugmentationConfig(), crop_length=base_cfg.crop_length)
    tcfg = TrainConfig(batch_size=batch_size, base_lr=lr, seed=seed, dtype="float64", warmup_steps=0)
    rng = np.random.default_rng([seed, 0xC00D])
    batches = [rng.choice(len(dataset), batch_size, replace=False) for _ in range(steps)]
    probe = build_view_batch(dataset, np.arange(batch_size), aug, seed, steps, np.float64)
    out = {}
    for c in widths:
        model = build_model(base_cfg.with_width(c), seed, parametrization)
        no_decay = {n for n, g in model.scales.groups.items() if g == GROUP_GAIN}
        lrs = {n: lr * model.scales.lr_multiplier(n) for n in model.params}
        state = AdamWState()
        for step, idx in enumerate(batches):
            x = build_view_batch(dataset, idx, aug, seed, step, np.float64)
            model.zero_grad()
            loss = total_loss(model.project(model.embed(x)), tcfg)
            loss.backward()
            grads = {n: p.grad for n, p in model.params.items() if p.grad is not None}
            adamw_step(model.params, grads, state, lrs, tcfg, no_decay)
        rec: dict[str, float] = {}
        model.embed(probe, record=rec)
        out[int(c)] = rec
    return out


def coordinate_ratios(records: dict[int, dict[str, float]]) -> dict[int, dict[str, float]]:
    """RMS of each layer at every width divided by the RMS at the smallest width."""
    base = records[min(records)]
    return {c: {k: v / base[k] for k, v in rec.items()} for c, rec in records.items()}
