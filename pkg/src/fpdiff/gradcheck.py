"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor, backward, no_recording, recording, using_dtype


def finite_difference_check(f, params, h=1e-3, probes_per_param=3, eps_abs=1e-4):
    """Compare tape gradients of ``f`` against central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor computed from
    the current values of ``params`` (a list of Parameter). For each
    parameter the probes target the coordinates with the largest analytic
    gradient magnitude, which keeps the relative-error denominator away from
    the float noise floor. Parameters are perturbed in place and restored.

    Returns the max over probed coordinates of
    ``|analytic - central| / (|central| + eps_abs)``.
    """
    tape = Tape()
    with recording(tape):
        loss = f()
    grads = backward(tape, loss)

    worst = 0.0
    for p in params:
        g = grads.get(p.name)
        if g is None:
            continue
        flat_g = g.data.reshape(-1)
        k = min(probes_per_param, flat_g.size)
        coords = np.argsort(np.abs(flat_g))[-k:]
        flat_p = p.data.reshape(-1)
        for c in coords:
            orig = flat_p[c]
            flat_p[c] = orig + h
            with no_recording():
                up = f().item()
            flat_p[c] = orig - h
            with no_recording():
                down = f().item()
            flat_p[c] = orig
            central = (up - down) / (2.0 * h)
            err = abs(float(flat_g[c]) - central) / (abs(central) + eps_abs)
            if err > worst:
                worst = err
    return worst


def network_gradient_check(seed, width=64, heads=4, n_classes=4, batch=4,
                           iterations=2, dtype="float32"):
    """FD-check every parameter of a small conditional denoiser.

    Builds a fresh width-``width`` network (one pre and one post block),
    runs a recorded forward with ``iterations`` fixed-point steps against a
    random v target, and compares tape gradients with central differences.
    float64 mode shrinks the step so the check tightens by roughly three
    orders of magnitude. Returns the max relative error over all probes.
    """
    from .nn import DenoiseNet, NetworkConfig

    if dtype not in ("float32", "float64"):
        raise ValueError(f"dtype must be float32 or float64, got {dtype!r}")
    np_dtype = np.float32 if dtype == "float32" else np.float64
    h = 1e-3 if dtype == "float32" else 1e-5
    with using_dtype(np_dtype):
        net = DenoiseNet(NetworkConfig(width=width, heads=heads,
                                       n_classes=n_classes), seed=seed)
        rng = np.random.default_rng(seed + 1)
        x = rng.standard_normal((batch, 2)).astype(np_dtype)
        target = Tensor(rng.standard_normal((batch, 2)).astype(np_dtype))
        t = rng.integers(0, net.config.train_timesteps, size=batch)
        labels = rng.integers(0, n_classes + 1, size=batch)

        def f():
            pred = net.forward(x, t, labels, iterations=iterations)
            return T.mse(pred, target)

        params = [p for _, p in net.store.items()]
        return finite_difference_check(f, params, h=h)
