"""Build both encoder families, count parameters and forward FLOPs across widths.

Run: python demos/02_models_and_flops.py
"""
import dataclasses

import numpy as np

from gaitscale.config import desk_config
from gaitscale.models import build_model, param_count
from gaitscale.scaling import compute_budget_table, flops_forward

cfg = desk_config()
x = np.random.default_rng(0).normal(size=(2, cfg.model.crop_length, 17, 3))

for family in ("gaitpt_v2", "gaitformer"):
    base = dataclasses.replace(cfg.model, family=family)
    print(f"\n{family}")
    for c in (1, 2, 4):
        m = base.with_width(c)
        rep = flops_forward(m)
        print(f"  c={c}: params={param_count(m, include_head=False):>8,d}  forward GFLOPs={rep.forward_total / 1e9:.4f}")
    model = build_model(base, seed=0)
    print("  embedding shape:", model.embed(x).shape)

# how many (sequences, epochs) pairs fit a fixed training budget
rows = compute_budget_table([cfg.model.with_width(c) for c in (1, 2)], dataset_size=240, epochs=20, budget=1e11)
for r in rows:
    print(f"\n{r.name}: {r.training_flops / 1e12:.2f} TFLOPs at D=240, 20 epochs")
    for d, ep, fl in r.allocations[:4]:
        print(f"  D={d:>6}  epochs={ep:>3}  {fl / 1e12:.2f} TFLOPs")
