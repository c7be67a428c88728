"""Per-layer activation scale as width grows, under muP and standard parametrization.

Run: python demos/04_mup_coordinate_check.py
"""
from gaitscale.config import desk_config
from gaitscale.pipeline import is_readout_layer, run_mup_check

cfg = desk_config()
res = run_mup_check(cfg, widths=(1, 2, 4), steps=10)

for par in ("mup", "sp"):
    spread = [
        v
        for by_layer in res.ratios[par].values()
        for layer, v in by_layer.items()
        if not is_readout_layer(layer)
    ]
    print(f"{par:>3}: ratio range [{min(spread):.2f}, {max(spread):.2f}], {len(res.violations[par])} layers outside [0.5, 2]")
print("muP check passed:", res.passed)
