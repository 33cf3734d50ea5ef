"""Comparison methods: unscented Kalman filter and mixture density network.

The UKF keeps a Gaussian belief and pushes a deterministic sigma-point set
through the (nonlinear) dynamics and observation maps. On linear-Gaussian
systems it reduces exactly to the Kalman filter, which the tests exploit as
an oracle.

The MDN parameterizes a conditional diagonal-Gaussian mixture: a tanh
network with two hidden layers of eight units feeds three heads producing
per-component logit weights, means, and log-stds (five components by
default). Its negative log-likelihood uses log-sum-exp so far-away
components underflow gracefully.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dynamics
from .autodiff import Tensor
from .nn import Linear, Module, bind

# -- unscented Kalman filter ------------------------------------------------


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError(
                f"cov shape {self.cov.shape} does not match state dim {self.mean.size}")


@dataclass
class UKFParams:
    alpha: float = 0.1
    beta: float = 2.0
    kappa: float = 0.0
    process_noise: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    obs_noise: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


def sigma_points(belief: GaussianBelief, params: UKFParams):
    """Standard unscented point set: mean plus +-columns of chol((n+lam) cov).

    Returns (points (2n+1, n), mean weights, covariance weights). The weighted
    mean and weighted covariance of the returned set reproduce the belief
    exactly.
    """
    n = belief.mean.size
    lam = params.alpha ** 2 * (n + params.kappa) - n
    scale = n + lam
    try:
        root = np.linalg.cholesky(scale * belief.cov)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError(
            f"belief covariance is not positive-definite: {err}") from err
    points = np.empty((2 * n + 1, n))
    points[0] = belief.mean
    for i in range(n):
        points[1 + i] = belief.mean + root[:, i]
        points[1 + n + i] = belief.mean - root[:, i]
    w_mean = np.full(2 * n + 1, 1.0 / (2.0 * scale))
    w_cov = w_mean.copy()
    w_mean[0] = lam / scale
    w_cov[0] = lam / scale + (1.0 - params.alpha ** 2 + params.beta)
    return points, w_mean, w_cov


def _unscented_moments(points: np.ndarray, w_mean: np.ndarray, w_cov: np.ndarray):
    mean = w_mean @ points
    diff = points - mean
    cov = (w_cov[:, None] * diff).T @ diff
    return mean, 0.5 * (cov + cov.T)


def ukf_step(belief: GaussianBelief, params: UKFParams, dynamics_fn, observation_fn,
             measurement: np.ndarray) -> GaussianBelief:
    """One predict-update cycle; re-symmetrizes covariances after each stage."""
    pts, w_m, w_c = sigma_points(belief, params)
    propagated = np.array([dynamics_fn(p) for p in pts])
    mean_p, cov_p = _unscented_moments(propagated, w_m, w_c)
    cov_p = cov_p + params.process_noise
    predicted = GaussianBelief(mean_p, 0.5 * (cov_p + cov_p.T))

    pts2, w_m, w_c = sigma_points(predicted, params)
    obs_pts = np.array([observation_fn(p) for p in pts2])
    obs_mean, obs_cov = _unscented_moments(obs_pts, w_m, w_c)
    innovation_cov = obs_cov + params.obs_noise
    try:
        np.linalg.cholesky(innovation_cov)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError(
            f"innovation covariance is not positive-definite: {err}") from err
    cross = (w_c[:, None] * (pts2 - predicted.mean)).T @ (obs_pts - obs_mean)
    gain = cross @ np.linalg.inv(innovation_cov)
    mean = predicted.mean + gain @ (np.asarray(measurement, dtype=np.float64) - obs_mean)
    cov = predicted.cov - gain @ innovation_cov @ gain.T
    return GaussianBelief(mean, 0.5 * (cov + cov.T))


def drive_process_noise(config: dynamics.RolloutConfig, theta: float, phi: float,
                        inflation: float = 1.0) -> np.ndarray:
    """Input noise mapped into (px, py, theta, phi) space for one Euler step.

    Speed noise enters the position and heading rows through the dynamics
    Jacobian; the phi-increment noise enters phi directly. ``inflation``
    scales the whole matrix to absorb linearization error.
    """
    g = np.array([config.dt * math.cos(theta), config.dt * math.sin(theta),
                  config.dt * phi, 0.0])
    q = config.sigma_v ** 2 * np.outer(g, g)
    q[3, 3] += config.sigma_phi ** 2
    return inflation * q + 1e-12 * np.eye(4)


def drive_ukf_belief(config: dynamics.RolloutConfig, n_steps: int,
                     params: UKFParams | None = None, q_inflation: float = 1.0,
                     initial_var: float = 1e-9) -> GaussianBelief:
    """Belief over (px, py, theta, phi) after filtering the noise-free
    observation stream for n_steps steps.

    Every rollout starts at the origin, so the filter starts from a
    near-delta prior there and consumes the nominal trajectory's positions
    as measurements with the configured observation noise.
    """
    config.validate()
    if not 1 <= n_steps < config.horizon:
        raise ValueError(f"n_steps must be in [1, {config.horizon}), got {n_steps}")
    nominal = dynamics.nominal_trajectory(config)
    obs_var = max(config.obs_sigma ** 2, 1e-12)
    base_params = params or UKFParams()
    belief = GaussianBelief(np.zeros(4), initial_var * np.eye(4))
    for k in range(n_steps):
        t = k * config.dt

        def dyn(state_vec, t=t):
            s = dynamics.RobotState(*state_vec)
            s2 = dynamics.step(s, config.v_nominal, config.dt, 1.0, config.c1, config.c2, t)
            return np.array([s2.px, s2.py, s2.theta, s2.phi])

        step_params = UKFParams(
            alpha=base_params.alpha, beta=base_params.beta, kappa=base_params.kappa,
            process_noise=drive_process_noise(config, belief.mean[2], belief.mean[3],
                                              q_inflation),
            obs_noise=obs_var * np.eye(2),
        )
        target = nominal[k + 1]
        belief = ukf_step(belief, step_params, dyn, lambda s: s[:2],
                          np.array([target.px, target.py]))
    return belief


def sample_position_belief(belief: GaussianBelief, n: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Draw (px, py) samples from the position marginal of a belief."""
    mean = belief.mean[:2]
    cov = belief.cov[:2, :2]
    root = np.linalg.cholesky(cov + 1e-15 * np.eye(2))
    return mean + rng.standard_normal((n, 2)) @ root.T


# -- mixture density network -------------------------------------------------


class MDNModel(Module):
    """Conditional Gaussian mixture with softmax weights and diagonal stds."""

    def __init__(self, ctx_dim: int, data_dim: int, rng: np.random.Generator,
                 n_components: int = 5, hidden: int = 8):
        self.ctx_dim = ctx_dim
        self.data_dim = data_dim
        self.n_components = n_components
        self.lin1 = Linear(ctx_dim, hidden, rng)
        self.lin2 = Linear(hidden, hidden, rng)
        self.head_logits = Linear(hidden, n_components, rng)
        self.head_means = Linear(hidden, n_components * data_dim, rng)
        self.head_log_stds = Linear(hidden, n_components * data_dim, rng)

    def _trunk(self, tape, ctx: Tensor) -> Tensor:
        return ad.tanh(self.lin2(tape, ad.tanh(self.lin1(tape, ctx))))

    def heads(self, tape, ctx: Tensor):
        h = self._trunk(tape, ctx)
        logits = self.head_logits(tape, h)
        means = self.head_means(tape, h)
        log_stds = ad.clamp(self.head_log_stds(tape, h), -7.0, 7.0)
        return logits, means, log_stds

    def forward(self, ctx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Mixture parameters (weights, means, stds) for raw context rows."""
        ctx_rows = np.atleast_2d(np.asarray(ctx, dtype=np.float64))
        logits, means, log_stds = self.heads(None, Tensor(ctx_rows))
        weights = ad.softmax(logits).data
        k, d = self.n_components, self.data_dim
        return (weights,
                means.data.reshape(-1, k, d),
                np.exp(log_stds.data).reshape(-1, k, d))

    def _component_log_probs(self, tape, batch: Tensor, ctx: Tensor) -> Tensor:
        """(n, K) matrix of log pi_k + log N_k(x)."""
        logits, means, log_stds = self.heads(tape, ctx)
        max_logit = Tensor(np.max(logits.data, axis=-1, keepdims=True))
        shifted = logits - max_logit
        log_norm = ad.log(ad.sum_(ad.exp(shifted), axis=-1, keepdims=True))
        log_weights = shifted - log_norm
        d = self.data_dim
        cols = []
        for k in range(self.n_components):
            mu = means[:, k * d:(k + 1) * d]
            ls = log_stds[:, k * d:(k + 1) * d]
            unit = (batch - mu) * ad.exp(ad.neg(ls))
            comp = (-0.5) * ad.sum_(unit * unit, axis=-1, keepdims=True) \
                - ad.sum_(ls, axis=-1, keepdims=True) - 0.5 * d * math.log(2.0 * math.pi)
            cols.append(comp + log_weights[:, k:k + 1])
        return ad.concat(cols, axis=-1)

    def log_prob(self, tape, batch, ctx) -> Tensor:
        """Per-row mixture log density via a stabilized log-sum-exp."""
        batch = batch if isinstance(batch, Tensor) else Tensor(np.atleast_2d(batch))
        ctx = ctx if isinstance(ctx, Tensor) else Tensor(np.atleast_2d(ctx))
        joint = self._component_log_probs(tape, batch, ctx)
        m = Tensor(np.max(joint.data, axis=-1, keepdims=True))
        lse = ad.log(ad.sum_(ad.exp(joint - m), axis=-1)) + m[:, 0]
        return lse

    def nll(self, tape, batch, ctx) -> Tensor:
        batch = batch if isinstance(batch, Tensor) else Tensor(np.atleast_2d(batch))
        if batch.shape[0] < 1:
            raise ValueError("nll requires a non-empty batch")
        return ad.neg(ad.mean_(self.log_prob(tape, batch, ctx)))

    def sample(self, ctx, n: int, rng: np.random.Generator) -> np.ndarray:
        """Pick components by weight, then draw from their diagonal Gaussians."""
        if n < 1:
            raise ValueError(f"sample count must be >= 1, got {n}")
        weights, means, stds = self.forward(ctx)
        if weights.shape[0] != 1:
            raise ValueError("sample() conditions on a single context")
        comp = rng.choice(self.n_components, size=n, p=weights[0])
        eps = rng.standard_normal((n, self.data_dim))
        return means[0][comp] + stds[0][comp] * eps


def mdn_forward(model: MDNModel, context) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return model.forward(context)


def mdn_nll(model: MDNModel, tape, batch, contexts) -> Tensor:
    return model.nll(tape, batch, contexts)


def mdn_sample(model: MDNModel, context, n: int, rng: np.random.Generator) -> np.ndarray:
    return model.sample(context, n, rng)
