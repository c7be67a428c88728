"""Property-based checks over generated inputs."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gaitscale import tensor as tc
from gaitscale.data import N_JOINTS, AugmentationConfig, SkeletonSequence, augment, normalize_sequence
from gaitscale.models import rope_apply
from gaitscale.scaling import ScalingPoint, fit_power_law
from gaitscale.tensor import Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = tc.softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out >= 0)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 4).map(lambda k: 2 * k)), elements=finite),
       st.integers(0, 10_000))
def test_rope_norm_preserved(x, start):
    out = rope_apply(Tensor(x), np.arange(x.shape[0]) + start).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-9)


@st.composite
def sequences(draw):
    t = draw(st.integers(1, 12))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    xy = rng.normal(size=(t, N_JOINTS, 2)) * draw(st.floats(1, 300)) + draw(st.floats(-500, 500))
    conf = rng.uniform(0, 1, size=(t, N_JOINTS, 1))
    return SkeletonSequence(np.concatenate([xy, conf], -1))


@settings(max_examples=50)
@given(sequences())
def test_normalize_idempotent(seq):
    once = normalize_sequence(seq)
    np.testing.assert_allclose(normalize_sequence(once).frames, once.frames, atol=1e-9)
    np.testing.assert_array_equal(once.confidence, seq.confidence)


@settings(max_examples=50)
@given(sequences())
def test_flip_mirror_involutions(seq):
    cfg = AugmentationConfig()
    rng = np.random.default_rng(0)
    np.testing.assert_allclose(augment(augment(seq, "flip", cfg, rng), "flip", cfg, rng).frames, seq.frames, atol=1e-9)
    assert np.array_equal(augment(augment(seq, "mirror", cfg, rng), "mirror", cfg, rng).frames, seq.frames)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.6, 0.95), st.floats(0.5, 5.0), st.floats(0.1, 0.6))
def test_noiseless_saturating_recovery(e, a, b):
    xs = np.logspace(2, 6, 7)
    ps = e - a * xs**-b
    fit = fit_power_law([ScalingPoint(float(x), float(p)) for x, p in zip(xs, ps)])
    assert abs(fit.exponent - b) < 1e-6 and abs(fit.irreducible - e) < 1e-6 and abs(fit.amplitude - a) < 1e-5 * a
