"""Synthetic walkers, normalization and the augmentation chain.

Run: python demos/01_walkers_and_views.py
"""
import numpy as np

from gaitscale.data import (
    AugmentationConfig,
    augment,
    generate_synthetic_dataset,
    make_views,
    normalize_sequence,
)

ds = generate_synthetic_dataset(n_ids=4, seqs_per_id=6, rng=7, heading_sweep_deg=150.0)
print(f"{len(ds)} sequences from {len(set(ds.subject_ids.tolist()))} walkers")

seq = ds.sequences[0]
print("raw frames:", seq.frames.shape, " view:", seq.view_id, " variation:", seq.variation_id)

# after normalization the middle frame's neck sits at the origin
norm = normalize_sequence(seq)
mid = norm.frames[norm.n_frames // 2, :, :2]
print("normalized middle-frame extent:", np.ptp(mid, axis=0).round(3))

cfg = AugmentationConfig(crop_length=32)
rng = np.random.default_rng(0)
for kind in ("flip", "mirror", "noise", "pace", "smooth"):
    out = augment(norm, kind, cfg, rng)
    if out.n_frames == norm.n_frames:
        print(f"{kind:>6}: {out.frames.shape}  mean |change| = {np.abs(out.frames - norm.frames).mean():.4f}")
    else:
        print(f"{kind:>6}: {out.frames.shape}")

# two views of one walk; these become a positive pair during pretraining
a, b = make_views(seq, cfg, rng)
print("view shapes:", a.frames.shape, b.frames.shape)
print("views differ:", not np.allclose(a.frames, b.frames))
