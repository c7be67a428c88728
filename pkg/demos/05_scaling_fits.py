"""Fit saturating power laws to (x, performance) points and extrapolate.

Run: python demos/05_scaling_fits.py
"""
import numpy as np

from gaitscale.scaling import ScalingPoint, fit_power_law, predict

rng = np.random.default_rng(0)
xs = np.logspace(2, 6, 8)
true_e, true_a, true_b = 0.9, 2.0, 0.3
ps = true_e - true_a * xs**-true_b

clean = fit_power_law([ScalingPoint(float(x), float(p)) for x, p in zip(xs, ps)])
print(f"noiseless: E={clean.irreducible:.4f} A={clean.amplitude:.4f} beta={clean.exponent:.4f}")

betas = []
for seed in range(20):
    noisy = ps * (1 + 0.01 * np.random.default_rng(seed).normal(size=ps.shape))
    betas.append(fit_power_law([ScalingPoint(float(x), float(p)) for x, p in zip(xs, noisy)]).exponent)
print(f"1% noise, 20 seeds: median beta={np.median(betas):.3f} (true {true_b})")

value, extrapolated = predict(clean, [1e3, 1e7])
for x, v, e in zip([1e3, 1e7], value, extrapolated):
    print(f"  P({x:.0e}) = {v:.4f}{'  (outside fitted range)' if e else ''}")
