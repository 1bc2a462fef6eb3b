"""Central finite-difference gradient oracle.

Independent of the tape: it only perturbs raw parameter buffers and re-runs a
caller-supplied forward function, so it cannot inherit a bug from the autodiff
backward rules it is checking.
"""

import numpy as np

from eosbridge.autodiff import Graph, Tensor, backward, zero_grads

FD_STEP = 1e-5
REL_TOL = 1e-4


def rel_error(a: float, b: float) -> float:
    """|a-b| relative to max(|a|, |b|, 1); the unit floor makes near-zero
    gradients an absolute comparison."""
    return abs(a - b) / max(abs(a), abs(b), 1.0)


def numeric_grad(loss_fn, param: Tensor, h: float = FD_STEP,
                 coords=None) -> dict:
    """Central finite differences of loss_fn() w.r.t. selected coordinates.

    loss_fn must recompute the forward pass from the params' current buffers
    and return a float. Returns {flat_index: d loss / d param}.
    """
    flat = param.data.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    grads = {}
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        grads[i] = (up - down) / (2.0 * h)
    return grads


def check_grads(build_loss, params, tol: float = REL_TOL, h: float = FD_STEP,
                sample: int | None = None, rng: np.random.Generator | None = None):
    """Assert analytic gradients match central finite differences.

    build_loss() must run a fresh forward pass reading the params' current
    data and return the scalar loss Tensor; it is called once under a graph
    for the analytic side and many times bare for the numeric side.

    When ``sample`` is given, only that many random coordinates per parameter
    are checked (needed for whole-model checks); otherwise every element is.
    Returns the worst relative error seen.
    """
    zero_grads(params)
    with Graph():
        loss = build_loss()
        backward(loss)
    analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for p in params}

    def loss_value() -> float:
        return build_loss().item()

    worst = 0.0
    for p in params:
        flat_analytic = analytic[id(p)].reshape(-1)
        if sample is not None and flat_analytic.size > sample:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(flat_analytic.size, size=sample, replace=False)
        else:
            coords = range(flat_analytic.size)
        numeric = numeric_grad(loss_value, p, h=h, coords=coords)
        for i, num in numeric.items():
            err = rel_error(flat_analytic[i], num)
            worst = max(worst, err)
            assert err <= tol, (
                f"gradient mismatch at flat index {i} of param shape {p.shape}: "
                f"analytic {flat_analytic[i]:.8g} vs numeric {num:.8g} (rel {err:.3g})")
    return worst
