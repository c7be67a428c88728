"""Shared test utilities that are not fixtures."""

import numpy as np

from gaitscale import tensor as tc
from gaitscale.models import GaitModel
from gaitscale.tensor import Tensor


def flat_loss(model: GaitModel, loss_fn):
    """Wrap a model loss as f(theta) over all parameters flattened in layout order."""
    names = list(model.params)
    shapes = [model.params[n].shape for n in names]
    sizes = [model.params[n].size for n in names]
    theta = np.concatenate([model.params[n].data.ravel() for n in names]).astype(np.float64)
    offsets = np.cumsum([0] + sizes)

    def f(th: Tensor) -> Tensor:
        for n, sh, a, b in zip(names, shapes, offsets[:-1], offsets[1:]):
            model.params[n] = tc.reshape(tc.slice_(th, slice(int(a), int(b))), sh)
        return loss_fn(model)

    return f, theta, dict(zip(names, zip(offsets[:-1], offsets[1:])))


def per_tensor_coords(spans: dict, k: int, seed: int = 0) -> list[int]:
    """Up to k seeded flat indices inside every parameter tensor."""
    rng = np.random.default_rng(seed)
    out = []
    for a, b in spans.values():
        n = int(b - a)
        out += [int(a) + int(i) for i in rng.choice(n, size=min(k, n), replace=False)]
    return out
