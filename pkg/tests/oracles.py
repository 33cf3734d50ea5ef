"""Independent oracles used by the tests: finite differences, a closed-form
Kalman filter, quadrature, and Monte-Carlo helpers. These never call the
code paths they are checking."""

from __future__ import annotations

import numpy as np

from flowstate.autodiff import Tape


def finite_difference_grads(loss_fn, params, h=1e-5):
    """Central-difference gradients of a scalar loss over Parameter objects.

    ``loss_fn()`` must rebuild the forward pass from the parameters' current
    data and return a float.
    """
    out = {}
    for p in params:
        fd = np.zeros_like(p.data)
        flat = p.data.ravel()
        fd_flat = fd.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            fd_flat[i] = (up - down) / (2.0 * h)
        out[p] = fd
    return out


def max_relative_error(analytic, numeric, floor=1e-6):
    denom = np.maximum(np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck(module, loss_builder, rtol=1e-4, h=1e-5, sample=None, rng=None):
    """Compare tape gradients with central differences for every parameter.

    ``loss_builder(tape) -> Tensor`` rebuilds the loss. With ``sample`` set,
    only that many entries per parameter are probed (seeded by ``rng``).
    """
    tape = Tape()
    loss = loss_builder(tape)
    grads = tape.parameter_grads(tape.backward(loss))

    def scalar_loss():
        return loss_builder(Tape()).item()

    worst = 0.0
    for _, p in module.named_parameters():
        flat = p.data.ravel()
        analytic = grads[p].ravel()
        if sample is not None and flat.size > sample:
            idx = rng.choice(flat.size, size=sample, replace=False)
        else:
            idx = range(flat.size)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = scalar_loss()
            flat[i] = orig - h
            down = scalar_loss()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            worst = max(worst, abs(analytic[i] - fd) / max(abs(fd), 1e-6))
    assert worst < rtol, f"gradient mismatch: max relative error {worst:.3e} >= {rtol}"
    return worst


def kalman_filter_step(mean, cov, A, H, Q, R, measurement):
    """Textbook linear Kalman predict + update."""
    mean_p = A @ mean
    cov_p = A @ cov @ A.T + Q
    innovation_cov = H @ cov_p @ H.T + R
    gain = cov_p @ H.T @ np.linalg.inv(innovation_cov)
    mean_n = mean_p + gain @ (measurement - H @ mean_p)
    cov_n = cov_p - gain @ innovation_cov @ gain.T
    return mean_n, cov_n


def grid_integral_2d(log_prob_fn, extent, resolution=200):
    """Midpoint quadrature of exp(log_prob) over a square grid."""
    (x0, x1), (y0, y1) = extent
    xs = np.linspace(x0, x1, resolution)
    ys = np.linspace(y0, y1, resolution)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    dens = np.exp(np.asarray(log_prob_fn(pts)))
    cell = (xs[1] - xs[0]) * (ys[1] - ys[0])
    return float(dens.sum() * cell)


def gaussian_mixture_log_pdf(points, weights, means, covs):
    """Exact log density of a 2-D Gaussian mixture (full covariances)."""
    points = np.atleast_2d(points)
    parts = []
    for w, mu, cov in zip(weights, means, covs):
        inv = np.linalg.inv(cov)
        diff = points - mu
        quad = np.einsum("ni,ij,nj->n", diff, inv, diff)
        norm = np.log(w) - 0.5 * (np.log(np.linalg.det(cov)) + 2 * np.log(2 * np.pi))
        parts.append(norm - 0.5 * quad)
    stacked = np.stack(parts)
    m = stacked.max(axis=0)
    return m + np.log(np.exp(stacked - m).sum(axis=0))


def mixture_entropy(weights, means, covs, extent, resolution=400):
    """Differential entropy of a 2-D mixture by quadrature."""
    (x0, x1), (y0, y1) = extent
    xs = np.linspace(x0, x1, resolution)
    ys = np.linspace(y0, y1, resolution)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    logp = gaussian_mixture_log_pdf(pts, weights, means, covs)
    p = np.exp(logp)
    cell = (xs[1] - xs[0]) * (ys[1] - ys[0])
    return float(-(p * logp).sum() * cell)
