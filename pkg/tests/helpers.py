"""Independent oracles shared across the test suite.

Everything here is written against the mathematical definitions, not against
the library code it checks: numeric gradients come from central differences,
divergences from quadrature, and ranking metrics from explicit pair/rank
loops.
"""

from __future__ import annotations

import math

import numpy as np

from tagsynth.autodiff import Parameter, Tape

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def central_difference(scalar_fn, params, step: float = 1e-5):
    """d scalar_fn / d p for every Parameter, by central differences.

    ``scalar_fn`` takes no arguments, reads the parameter values as they
    currently are, and returns a float. Parameter values are perturbed in
    place and restored.
    """
    grads = []
    for p in params:
        arr = p.tensor.values
        g = np.zeros_like(arr)
        for flat in range(arr.size):
            idx = np.unravel_index(flat, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + step
            hi = scalar_fn()
            arr[idx] = orig - step
            lo = scalar_fn()
            arr[idx] = orig
            g[idx] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def backward_grads(loss_fn, params):
    """Run one taped forward/backward; return per-parameter gradients."""
    for p in params:
        p.tensor.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    out = []
    for p in params:
        g = p.tensor.grad
        out.append(np.zeros_like(p.tensor.values) if g is None else g.copy())
    return out, loss.item()


def max_rel_error(analytic, numeric, floor: float = 1e-2) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def gradcheck(loss_fn, params, rtol: float = 1e-4, step: float = 1e-5) -> float:
    """Assert taped gradients match central differences; return worst error."""
    analytic, _ = backward_grads(loss_fn, params)
    numeric = central_difference(lambda: loss_fn().item(), params, step=step)
    err = max_rel_error(analytic, numeric)
    assert err < rtol, f"gradient mismatch: worst relative error {err:.3e}"
    return err


def gaussian_kl_quadrature(mu: float, sigma: float) -> float:
    """KL(N(mu, sigma^2) || N(0,1)) for scalars, by trapezoid quadrature."""
    lo = min(mu - 12.0 * sigma, -12.0)
    hi = max(mu + 12.0 * sigma, 12.0)
    xs = np.linspace(lo, hi, 200_001)
    log_q = -0.5 * math.log(2 * math.pi) - math.log(sigma) - (xs - mu) ** 2 / (2 * sigma**2)
    log_p = -0.5 * math.log(2 * math.pi) - xs**2 / 2.0
    q = np.exp(log_q)
    return float(_trapezoid(q * (log_q - log_p), xs))


def density_integral(log_density_fn, lo: float, hi: float, n: int = 200_001) -> float:
    xs = np.linspace(lo, hi, n)
    return float(_trapezoid(np.exp([log_density_fn(x) for x in xs]), xs))


def brute_force_average_precision(scores, labels) -> float:
    """Mean precision@k over the ranks of positives, descending scores.

    Ties broken by original index (stable order), matching the documented
    ordering convention.
    """
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits = 0
    precisions = []
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            hits += 1
            precisions.append(hits / rank)
    if not precisions:
        raise ValueError("no positives")
    return sum(precisions) / len(precisions)


def brute_force_roc_auc(scores, labels) -> float:
    """Mann-Whitney pair count with ties scoring one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        raise ValueError("need both classes")
    total = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                total += 1.0
            elif sp == sn:
                total += 0.5
    return total / (len(pos) * len(neg))


def make_params(rng, *shapes, scale: float = 0.7):
    from tagsynth.autodiff import Tensor

    return [
        Parameter(f"p{i}", Tensor(scale * rng.standard_normal(shape), requires_grad=True))
        for i, shape in enumerate(shapes)
    ]
