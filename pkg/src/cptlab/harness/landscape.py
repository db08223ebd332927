"""2-D loss-landscape slices along filter-normalized random directions."""

import csv
from typing import Callable, Sequence

import numpy as np

from cptlab import autodiff as ad
from cptlab.harness.models import QuantContext, Sequential
from cptlab.quantization import FULL_PRECISION


def filter_axis(role):
    """Axis indexing filters: conv weights (F, C, kh, kw) -> 0, linear weights (in, out) -> 1."""
    return {"conv_weight": 0, "linear_weight": 1}.get(role)


def filter_norms(arr, role):
    ax = filter_axis(role)
    if ax is None:
        return np.array([np.linalg.norm(arr)])
    moved = np.moveaxis(arr, ax, 0)
    return np.linalg.norm(moved.reshape(moved.shape[0], -1), axis=1)


def normalized_direction(params, roles, rng, include_biases=False):
    """Gaussian direction rescaled so every filter matches the norm of its parameter filter.

    Bias (1-D) directions are zeroed unless ``include_biases``, in which case each
    bias vector is treated as one filter.
    """
    out = []
    for p, role in zip(params, roles):
        d = rng.standard_normal(p.shape)
        ax = filter_axis(role)
        if ax is None:
            if role == "bias" and not include_biases:
                d = np.zeros_like(d)
            else:
                d *= np.linalg.norm(p) / max(np.linalg.norm(d), 1e-12)
        else:
            dm = np.moveaxis(d, ax, 0)
            pm = np.moveaxis(np.asarray(p, dtype=np.float64), ax, 0)
            for f in range(dm.shape[0]):
                dm[f] *= np.linalg.norm(pm[f]) / max(np.linalg.norm(dm[f]), 1e-12)
        out.append(d)
    return out


def landscape_grid(params: Sequence[np.ndarray], loss_fn: Callable[[], float], d1, d2,
                   grid_half_width=1.0, grid_points=21):
    """Evaluate ``loss_fn`` with ``params`` moved to ``theta + a*d1 + b*d2`` over a square grid.

    ``params`` are modified in place during evaluation and restored afterwards.
    Returns ``(alphas, betas, grid)`` with ``grid[i, j]`` at ``(alphas[i], betas[j])``.
    Non-finite losses are kept as NaN/inf in the grid.
    """
    if grid_points < 1 or grid_points % 2 == 0:
        raise ValueError("grid_points must be a positive odd number so the centre is the trained model")
    coords = np.linspace(-grid_half_width, grid_half_width, grid_points)
    coords[grid_points // 2] = 0.0
    base = [np.array(p, copy=True) for p in params]
    grid = np.empty((grid_points, grid_points))
    try:
        for i, a in enumerate(coords):
            for j, b in enumerate(coords):
                for p, p0, u, v in zip(params, base, d1, d2):
                    if a == 0.0 and b == 0.0:
                        p[...] = p0
                    else:
                        p[...] = p0 + a * u + b * v
                try:
                    grid[i, j] = loss_fn()
                except (ad.NonFiniteError, FloatingPointError):
                    grid[i, j] = np.nan
    finally:
        for p, p0 in zip(params, base):
            p[...] = p0
    return coords, coords.copy(), grid


def model_loss(model: Sequential, x, y, fw_bits=FULL_PRECISION, batch_size=512, **kinds) -> float:
    """Mean cross-entropy of ``model`` on ``(x, y)`` without recording a tape."""
    ctx_kw = dict(weight_bits=fw_bits, act_bits=fw_bits, error_bits=FULL_PRECISION, **kinds)
    total = 0.0
    for i in range(0, len(y), batch_size):
        logits = model(ad.Tensor(x[i:i + batch_size], check=False), QuantContext(**ctx_kw))
        total += ad.softmax_cross_entropy(logits, y[i:i + batch_size]).item() * len(y[i:i + batch_size])
    return total / len(y)


def loss_landscape(model: Sequential, x, y, grid_half_width=1.0, grid_points=21, rng=None,
                   fw_bits=FULL_PRECISION, include_biases=False, **kinds):
    """Loss grid around a trained model; returns ``(alphas, betas, grid, (d1, d2))``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    named = model.named_parameters()
    params = [t.data for _, t, _ in named]
    roles = [r for _, _, r in named]
    d1 = normalized_direction(params, roles, rng, include_biases)
    d2 = normalized_direction(params, roles, rng, include_biases)
    d1 = [d.astype(p.dtype) for d, p in zip(d1, params)]
    d2 = [d.astype(p.dtype) for d, p in zip(d2, params)]
    a, b, grid = landscape_grid(params, lambda: model_loss(model, x, y, fw_bits, **kinds), d1, d2,
                                grid_half_width, grid_points)
    return a, b, grid, (d1, d2)


def write_landscape_csv(path, alphas, betas, grid):
    """Header row ``alpha\\beta, b0, b1, ...`` then one row per alpha."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha\\beta"] + [repr(float(b)) for b in betas])
        for a, row in zip(alphas, grid):
            w.writerow([repr(float(a))] + [repr(float(v)) for v in row])
