import numpy as np
import pytest

from gaitscale.data import (
    FLIP_PERMUTATION,
    MIN_CONFIDENCE,
    MIN_FRAMES,
    N_JOINTS,
    AugmentationConfig,
    DegenerateSkeletonError,
    FormatError,
    GaitDataset,
    SkeletonSequence,
    TooShortError,
    augment,
    curate,
    dataset_from_bytes,
    dataset_to_bytes,
    filter_sequence,
    generate_synthetic_dataset,
    make_views,
    nested_subset_indices,
    normalize_sequence,
    read_dataset,
    write_dataset,
)


def make_seq(t, conf, rng, **kw):
    xy = rng.normal(size=(t, N_JOINTS, 2)) * 50 + 300
    c = np.full((t, N_JOINTS, 1), conf)
    return SkeletonSequence(np.concatenate([xy, c], axis=-1), **kw)


@pytest.fixture(scope="module")
def walkers():
    return generate_synthetic_dataset(20, 10, 7)


def test_filter_constants():
    assert MIN_FRAMES == 48
    assert MIN_CONFIDENCE == 0.6


def test_filter_boundaries(rng):
    assert filter_sequence(make_seq(47, 0.9, rng)) == (False, "too_short")
    assert filter_sequence(make_seq(100, 0.59, rng)) == (False, "low_confidence")
    assert filter_sequence(make_seq(48, 0.60, rng)) == (True, None)


def test_curate_drops_rejected(rng):
    ds = GaitDataset([make_seq(47, 0.9, rng), make_seq(60, 0.9, rng), make_seq(60, 0.1, rng)])
    out = curate(ds)
    assert len(out) == 1 and out.provenance["rejected"] == 2


def test_normalize_anchors_middle_frame(rng):
    s = normalize_sequence(make_seq(31, 0.9, rng))
    mid = s.frames[15]
    np.testing.assert_allclose(mid[:, :2].mean(axis=0), 0.0, atol=1e-9)
    torso = np.linalg.norm(0.5 * (mid[5, :2] + mid[6, :2]) - 0.5 * (mid[11, :2] + mid[12, :2]))
    assert torso == pytest.approx(1.0, abs=1e-9)


def test_normalize_translation_invariant_and_idempotent(rng):
    s = make_seq(20, 0.9, rng)
    shifted = s.frames.copy()
    shifted[..., :2] += 5.0
    a = normalize_sequence(s).frames
    np.testing.assert_allclose(normalize_sequence(s.with_frames(shifted)).frames, a, atol=1e-9)
    np.testing.assert_allclose(normalize_sequence(normalize_sequence(s)).frames, a, atol=1e-9)


def test_normalize_single_frame(rng):
    s = normalize_sequence(make_seq(1, 0.9, rng))
    np.testing.assert_allclose(s.frames[0, :, :2].mean(axis=0), 0.0, atol=1e-9)


def test_normalize_degenerate_raises():
    f = np.zeros((5, N_JOINTS, 3))
    with pytest.raises(DegenerateSkeletonError):
        normalize_sequence(SkeletonSequence(f))


def test_flip_and_mirror_are_involutions(rng):
    s = make_seq(30, 0.9, rng)
    cfg = AugmentationConfig()
    twice = augment(augment(s, "flip", cfg, rng), "flip", cfg, rng)
    np.testing.assert_allclose(twice.frames, s.frames, atol=1e-9)
    mirrored = augment(augment(s, "mirror", cfg, rng), "mirror", cfg, rng)
    assert np.array_equal(mirrored.frames, s.frames)


def test_flip_swaps_left_right(rng):
    s = make_seq(3, 0.9, rng)
    out = augment(s, "flip", AugmentationConfig(), rng).frames
    assert FLIP_PERMUTATION[5] == 6 and FLIP_PERMUTATION[0] == 0
    np.testing.assert_array_equal(out[:, 5, 0], -s.frames[:, 6, 0])
    np.testing.assert_array_equal(out[:, 5, 1], s.frames[:, 6, 1])


def test_zero_noise_is_identity(rng):
    s = make_seq(30, 0.9, rng)
    out = augment(s, "noise", AugmentationConfig(noise_sigma=0.0), rng)
    assert np.array_equal(out.frames, s.frames)


def test_augmentations_keep_confidence(rng):
    s = make_seq(60, 0.8, rng)
    cfg = AugmentationConfig(crop_length=40)
    for kind in ("crop", "flip", "mirror", "noise", "smooth"):
        out = augment(s, kind, cfg, rng)
        assert np.all(out.confidence == 0.8), kind


def test_crop_and_pace_lengths(rng):
    s = make_seq(60, 0.9, rng)
    cfg = AugmentationConfig(crop_length=40)
    crop = augment(s, "crop", cfg, rng)
    assert crop.n_frames == 40
    # contiguous window of the input
    start = int(np.flatnonzero(np.all(s.frames == crop.frames[0], axis=(1, 2)))[0])
    assert np.array_equal(s.frames[start : start + 40], crop.frames)
    assert augment(s, "pace", cfg, rng).n_frames == 40
    with pytest.raises(TooShortError):
        augment(make_seq(10, 0.9, rng), "crop", cfg, rng)


def test_smooth_window_one_is_identity(rng):
    s = make_seq(20, 0.9, rng)
    out = augment(s, "smooth", AugmentationConfig(smooth_window=1), rng)
    assert np.array_equal(out.frames, s.frames)


def test_smooth_is_moving_average(rng):
    s = make_seq(20, 0.9, rng)
    out = augment(s, "smooth", AugmentationConfig(smooth_window=3), rng)
    np.testing.assert_allclose(out.frames[5, :, :2], s.frames[4:7, :, :2].mean(axis=0), atol=1e-12)


def test_make_views_determinism(walkers):
    cfg = AugmentationConfig(crop_length=32)
    seq = walkers[0]
    a = make_views(seq, cfg, np.random.default_rng(3))
    b = make_views(seq, cfg, np.random.default_rng(3))
    assert all(np.array_equal(x.frames, y.frames) for x, y in zip(a, b))
    assert a[0].n_frames == a[1].n_frames == 32
    differ = sum(
        not np.array_equal(make_views(seq, cfg, np.random.default_rng(s))[0].frames, a[0].frames)
        for s in range(4, 104)
    )
    assert differ == 100


def test_generator_counts_and_filter(walkers):
    assert len(walkers) == 200
    assert len(np.unique(walkers.subject_ids)) == 20
    assert all(filter_sequence(s)[0] for s in walkers)


def test_generator_determinism(walkers):
    again = generate_synthetic_dataset(20, 10, 7)
    assert dataset_to_bytes(again) == dataset_to_bytes(walkers)


def test_heading_sweep_leaves_default_untouched():
    a = generate_synthetic_dataset(3, 3, 5)
    b = generate_synthetic_dataset(3, 3, 5, heading_sweep_deg=0.0)
    c = generate_synthetic_dataset(3, 3, 5, heading_sweep_deg=90.0)
    assert dataset_to_bytes(a) == dataset_to_bytes(b) != dataset_to_bytes(c)


def test_gsk1_round_trip(walkers, tmp_path):
    path = tmp_path / "walkers.gsk"
    write_dataset(walkers, path)
    back = read_dataset(path)
    assert len(back) == len(walkers)
    for a, b in zip(walkers, back):
        assert np.array_equal(a.frames, b.frames)
        assert (a.subject_id, a.view_id, a.variation_id) == (b.subject_id, b.view_id, b.variation_id)


def test_gsk1_text_round_trip(tmp_path):
    ds = generate_synthetic_dataset(2, 2, 1)
    write_dataset(ds, tmp_path / "d.jsonl")
    back = read_dataset(tmp_path / "d.jsonl")
    assert dataset_to_bytes(back) == dataset_to_bytes(ds)


def test_gsk1_errors_name_offset(walkers):
    raw = bytearray(dataset_to_bytes(walkers.subset(range(2))))
    bad = bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="offset 0"):
        dataset_from_bytes(bad)
    with pytest.raises(FormatError) as err:
        dataset_from_bytes(bytes(raw[:-10]))
    assert err.value.offset > 0
    wrong_version = bytes(raw[:4] + b"\x09\x00" + raw[6:])
    with pytest.raises(FormatError, match="version"):
        dataset_from_bytes(wrong_version)


def test_empty_dataset_file(tmp_path):
    write_dataset(GaitDataset([]), tmp_path / "empty.gsk")
    assert len(read_dataset(tmp_path / "empty.gsk")) == 0


def test_nested_subsets():
    small = nested_subset_indices(100, 0.25, 3)
    half = nested_subset_indices(100, 0.5, 3)
    full = nested_subset_indices(100, 1.0, 3)
    assert len(small) == 25 and len(half) == 50 and len(full) == 100
    assert set(small) <= set(half) <= set(full)
    with pytest.raises(ValueError):
        nested_subset_indices(10, 0.0, 0)
