import json

import numpy as np
import pytest

from gaitscale import tensor as tc
from gaitscale.models import ModelConfig, build_model, parallel_block
from gaitscale.scaling import (
    FitError,
    ScalingPoint,
    block_flops,
    budget_table_csv,
    compute_budget_table,
    fit_power_law,
    flops_forward,
    linear_flops,
    predict,
    read_points_csv,
    write_fit_outputs,
    write_points_csv,
)
from gaitscale.tensor import Tensor

from conftest import small_config

XS = np.logspace(2, 6, 9)


def saturating(x, e=0.9, a=2.0, b=0.3):
    return e - a * x ** (-b)


def points(xs, ps):
    return [ScalingPoint(float(x), float(p)) for x, p in zip(xs, ps)]


# -- fits --------------------------------------------------------------------------
def test_noiseless_saturating_recovery():
    fit = fit_power_law(points(XS, saturating(XS)))
    assert fit.irreducible == pytest.approx(0.9, abs=1e-6)
    assert fit.amplitude == pytest.approx(2.0, abs=1e-6)
    assert fit.exponent == pytest.approx(0.3, abs=1e-6)
    assert fit.rss < 1e-12


def test_noiseless_additive_recovery():
    xs = np.logspace(3, 7, 8)
    ps = 0.05 * xs**0.2 + 0.1
    fit = fit_power_law(points(xs, ps), form="additive")
    assert (fit.amplitude, fit.exponent, fit.irreducible) == pytest.approx((0.05, 0.2, 0.1), abs=1e-6)


def test_model_axis_range_recovery():
    # parameter counts span a different range than dataset sizes
    xs = np.array([1.2e4, 4.7e4, 1.9e5, 7.5e5, 3.0e6])
    fit = fit_power_law(points(xs, saturating(xs, 0.7, 3.0, 0.25)))
    assert (fit.irreducible, fit.amplitude, fit.exponent) == pytest.approx((0.7, 3.0, 0.25), abs=1e-6)


def test_linear_objective_noiseless():
    fit = fit_power_law(points(XS, saturating(XS)), objective="linear")
    assert (fit.irreducible, fit.amplitude, fit.exponent) == pytest.approx((0.9, 2.0, 0.3), abs=1e-6)


def test_constant_performance():
    fit = fit_power_law(points(XS, np.full(9, 0.4)))
    assert fit.exponent == pytest.approx(0.0, abs=1e-9)
    assert fit.rss == pytest.approx(0.0, abs=1e-20)
    assert predict(fit, 1e9)[0] == pytest.approx(0.4, abs=1e-9)


def test_fit_permutation_invariant(rng):
    pts = points(XS, saturating(XS) * (1 + 0.01 * rng.normal(size=9)))
    a = fit_power_law(pts)
    b = fit_power_law([pts[i] for i in rng.permutation(9)])
    assert a == b


def test_fit_x_rescaling(rng):
    ps = saturating(XS) * (1 + 0.01 * rng.normal(size=9))
    a = fit_power_law(points(XS, ps))
    b = fit_power_law(points(XS * 10.0, ps))
    assert b.exponent == pytest.approx(a.exponent, abs=1e-9)
    assert b.irreducible == pytest.approx(a.irreducible, abs=1e-9)
    assert b.amplitude == pytest.approx(a.amplitude * 10.0**a.exponent, rel=1e-7)


def test_fit_errors():
    with pytest.raises(FitError):
        fit_power_law(points([1, 2], [0.1, 0.2]))
    with pytest.raises(FitError):
        fit_power_law(points([1, 1, 2], [0.1, 0.2, 0.3]))
    with pytest.raises(FitError):
        # no E in (max P, 1] admits a saturating curve through P = 1
        fit_power_law(points([1, 2, 3], [0.2, 0.5, 1.0]), e_bounds=(0.1, 0.3))


def test_predict_behaviour():
    fit = fit_power_law(points(XS, saturating(XS)))
    val, extrap = predict(fit, XS[3])
    assert val == pytest.approx(saturating(XS[3]), abs=1e-9) and not extrap
    vals, flags = predict(fit, np.array([1e1, 1e4, 1e12]))
    assert list(flags) == [True, False, True]
    far = predict(fit, np.logspace(7, 20, 14))[0]
    assert np.all(far < 0.9) and np.all(np.diff(far) > 0) and 0.9 - far[-1] < 1e-5
    with pytest.raises(ValueError):
        predict(fit, 0.0)


def test_points_csv_round_trip(tmp_path, rng):
    pts = [ScalingPoint(float(x), float(p), f"p{i}") for i, (x, p) in enumerate(zip(XS, rng.random(9)))]
    write_points_csv(pts, tmp_path / "pts.csv")
    assert read_points_csv(tmp_path / "pts.csv") == pts
    (tmp_path / "bad.csv").write_text("x,perf\n1,2\n")
    with pytest.raises(FitError):
        read_points_csv(tmp_path / "bad.csv")


def test_fit_outputs(tmp_path):
    pts = points(XS, saturating(XS))
    fit = fit_power_law(pts)
    write_fit_outputs(fit, pts, tmp_path, "law")
    assert json.loads((tmp_path / "law.json").read_text())["exponent"] == pytest.approx(0.3, abs=1e-6)
    rows = (tmp_path / "law_curve.csv").read_text().splitlines()
    assert len(rows) == 10
    first = rows[1].split(",")
    assert float(first[1]) == pytest.approx(float(first[2]), abs=1e-9)


# -- FLOPs --------------------------------------------------------------------------
class MatmulCounter:
    """Counts 2 FLOPs per multiply-accumulate of every matmul actually executed."""

    def __init__(self, monkeypatch):
        self.flops = 0
        orig = tc.matmul

        def counting(a, b):
            out = orig(a, b)
            k = np.shape(a.data if isinstance(a, Tensor) else a)[-1]
            self.flops += 2 * k * out.size
            return out

        monkeypatch.setattr(tc, "matmul", counting)


def test_linear_hand_count():
    assert linear_flops(10, 4, 8) == 640


def test_tiny_block_hand_enumeration(monkeypatch, rng):
    t, d, h = 2, 4, 16
    # q, k, v, o: four (2x4)@(4x4) = 4 * 2*2*4*4
    proj = 4 * (2 * t * d * d)
    # q k^T: (2x4)@(4x2); softmax(.) v: (2x2)@(2x4)
    mix = 2 * t * d * t + 2 * t * t * d
    # gate, up: (2x4)@(4x16); down: (2x16)@(16x4)
    mlp = 2 * (2 * t * d * h) + 2 * t * h * d
    assert (proj, mix, mlp) == (256, 64, 768)
    assert block_flops(1, t, d, h) == {"attention_proj": 256, "attention_mix": 64, "mlp": 768}

    counter = MatmulCounter(monkeypatch)
    p = {f"b.{k}": Tensor(rng.normal(size=s)) for k, s in
         dict(norm=(d,), wq=(d, d), wk=(d, d), wv=(d, d), wo=(d, d), w_gate=(d, h), w_up=(d, h), w_down=(h, d)).items()}
    parallel_block(Tensor(rng.normal(size=(t, d))), p, "b.", 1, 1e4, 0.5)
    assert counter.flops == proj + mix + mlp


def random_cfgs(rng, n=5):
    out = []
    for _ in range(n):
        hd = int(rng.choice([2, 4]))
        heads = tuple(int(x) for x in rng.integers(1, 3, size=4))
        out.append(ModelConfig(
            family=str(rng.choice(["gaitpt_v2", "gaitformer"])),
            variant=str(rng.choice(["deep", "shallow"])),
            base_stage_widths=tuple(hd * x for x in heads),
            base_stage_heads=heads,
            head_dim=hd,
            emb_size=int(rng.integers(2, 8)),
            crop_length=int(rng.integers(2, 6)),
            mlp_ratio=int(rng.integers(1, 4)),
        ))
    return out


def test_forward_count_matches_executed_matmuls(monkeypatch, rng):
    for cfg in random_cfgs(rng):
        model = build_model(cfg, 0)
        counter = MatmulCounter(monkeypatch)
        model.embed(rng.normal(size=(1, cfg.crop_length, 17, 3)))
        rep = flops_forward(cfg)
        assert rep.forward_total == sum(rep.components.values())
        assert counter.flops == rep.forward_total, cfg


def test_width_scaling_ratios(rng):
    for cfg in random_cfgs(rng):
        one, two, three = (flops_forward(cfg.with_width(c)).components for c in (1, 2, 3))
        for key in ("attention_proj", "mlp", "merges"):
            if one[key]:
                assert two[key] == 4 * one[key] and three[key] == 9 * one[key], key
        # token mixing is linear in width
        assert two["attention_mix"] == 2 * one["attention_mix"]


def test_training_flops_factor():
    rep = flops_forward(small_config())
    assert rep.training_total(10, 6) == 2 * rep.training_total(10, 3)
    assert rep.training_total(10, 3) == 3 * rep.forward_total * 2 * 10 * 3
    assert rep.training_total(10, 3, views_per_sequence=1) * 2 == rep.training_total(10, 3)


def test_heuristic_close_for_flat_model():
    rows = compute_budget_table([ModelConfig(family="gaitformer"), ModelConfig(family="gaitformer", variant="shallow")],
                                1000, 25, 1e15)
    for r in rows:
        assert 0.5 <= r.heuristic_flops / r.training_flops <= 2.0


def test_budget_allocations_hit_budget():
    cfg = small_config(family="gaitformer")
    per = flops_forward(cfg).training_total(1, 1)
    budget = per * 240.0
    (row,) = compute_budget_table([cfg], 100, 5, budget, epoch_grid=[1, 2, 3, 4, 5])
    assert sorted(row.allocations) == [(48, 5, per * 240), (60, 4, per * 240), (80, 3, per * 240),
                                       (120, 2, per * 240), (240, 1, per * 240)]


def test_equal_flops_equal_allocations():
    a = small_config(family="gaitformer")
    b = small_config(family="gaitformer", emb_size=16)
    rows = compute_budget_table({"a": a, "b": b}, 100, 5, 1e12)
    assert rows[0].allocations == rows[1].allocations


def test_budget_too_small(tmp_path):
    with pytest.raises(ValueError):
        compute_budget_table([small_config()], 10, 1, 1.0)
    rows = compute_budget_table([small_config()], 10, 1, 1e13)
    budget_table_csv(rows, tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().startswith("model,params")
