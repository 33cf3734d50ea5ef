"""Nonholonomic driving simulator producing the uni- and bimodal datasets.

A rollout integrates a planar vehicle with position (px, py), heading theta,
and an angular-acceleration state phi driven by a cosine schedule scaled by a
mode parameter psi. Fixed mode holds psi = 1 for the whole rollout (unimodal
dataset); switching mode redraws psi ~ U[-1, 1] once at a configured step and
holds it, which fans rollouts into branches (bimodal dataset).

Discrete-time Euler update, in this exact order (theta uses the pre-update
phi, positions use the pre-update theta):

    px    += dt * v * cos(theta)
    py    += dt * v * sin(theta)
    theta += dt * v * phi
    phi   += dt * psi * c1 * cos(c2 * t)

Inputs are noise-corrupted per step: v gets additive Gaussian noise, and the
phi increment gets additive Gaussian noise. Observations are the positions
plus per-axis Gaussian noise. Every rollout is reproducible from
(seed, rollout_id) alone; the mode draw uses a separate child stream so that
pre-switch trajectories are bit-identical between fixed and switching modes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

CSV_HEADER = "rollout_id,step,time,px,py,obs_x,obs_y,psi"


@dataclass
class RobotState:
    px: float
    py: float
    theta: float
    phi: float


@dataclass
class RolloutConfig:
    dt: float = 0.125
    horizon: int = 160
    v_nominal: float = 1.0
    c1: float = 0.5
    c2: float = 0.3
    sigma_v: float = 0.05
    sigma_phi: float = 0.005
    obs_sigma: float = 0.05
    psi_mode: str = "fixed"  # "fixed" or "switching"
    switch_step: int = 40
    seed: int = 0

    def validate(self) -> None:
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        for name in ("sigma_v", "sigma_phi", "obs_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.psi_mode not in ("fixed", "switching"):
            raise ValueError(f"psi_mode must be 'fixed' or 'switching', got {self.psi_mode!r}")
        if self.psi_mode == "switching" and not 0 <= self.switch_step < self.horizon:
            raise ValueError(
                f"switch_step must be in [0, {self.horizon}), got {self.switch_step}")


@dataclass
class RolloutRecord:
    rollout_id: int
    step: int
    time: float
    px: float
    py: float
    obs_x: float
    obs_y: float
    psi: float


def step(state: RobotState, v: float, dt: float, psi: float, c1: float, c2: float,
         t: float) -> RobotState:
    """One noise-free Euler step; t is the current time in seconds."""
    px = state.px + dt * v * math.cos(state.theta)
    py = state.py + dt * v * math.sin(state.theta)
    theta = state.theta + dt * v * state.phi
    phi = state.phi + dt * psi * c1 * math.cos(c2 * t)
    return RobotState(px, py, theta, phi)


def _rollout_rngs(seed: int, rollout_id: int):
    # Independent noise and mode streams so the mode draw cannot shift the
    # per-step noise sequence between fixed and switching configs.
    noise = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, rollout_id, 0))))
    mode = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, rollout_id, 1))))
    return noise, mode


def rollout(config: RolloutConfig, rollout_id: int) -> list[RolloutRecord]:
    """Simulate one rollout; fully determined by (config.seed, rollout_id)."""
    config.validate()
    noise_rng, mode_rng = _rollout_rngs(config.seed, rollout_id)
    state = RobotState(0.0, 0.0, 0.0, 0.0)
    psi = 1.0
    records: list[RolloutRecord] = []
    for k in range(config.horizon):
        if config.psi_mode == "switching" and k == config.switch_step:
            psi = mode_rng.uniform(-1.0, 1.0)
        obs_x = state.px + noise_rng.normal(0.0, config.obs_sigma)
        obs_y = state.py + noise_rng.normal(0.0, config.obs_sigma)
        records.append(RolloutRecord(rollout_id, k, k * config.dt, state.px, state.py,
                                     obs_x, obs_y, psi))
        v = config.v_nominal + noise_rng.normal(0.0, config.sigma_v)
        state = step(state, v, config.dt, psi, config.c1, config.c2, k * config.dt)
        state.phi += noise_rng.normal(0.0, config.sigma_phi)
    return records


def nominal_trajectory(config: RolloutConfig, psi: float = 1.0) -> list[RobotState]:
    """Noise-free trajectory (states at steps 0..horizon-1) for fixed psi."""
    config.validate()
    state = RobotState(0.0, 0.0, 0.0, 0.0)
    states = []
    for k in range(config.horizon):
        states.append(state)
        state = step(state, config.v_nominal, config.dt, psi, config.c1, config.c2,
                     k * config.dt)
    return states


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def generate_dataset(config: RolloutConfig, n_rollouts: int, path: str) -> str:
    """Write n_rollouts * horizon records as CSV, ordered by (rollout_id, step)."""
    config.validate()
    if n_rollouts < 1:
        raise ValueError(f"n_rollouts must be >= 1, got {n_rollouts}")
    try:
        f = open(path, "w", newline="\n")
    except OSError as err:
        raise OSError(f"cannot write dataset to {path!r}: {err}") from err
    with f:
        f.write(CSV_HEADER + "\n")
        for rid in range(n_rollouts):
            for r in rollout(config, rid):
                f.write(",".join([
                    str(r.rollout_id), str(r.step), _fmt(r.time),
                    _fmt(r.px), _fmt(r.py), _fmt(r.obs_x), _fmt(r.obs_y), _fmt(r.psi),
                ]) + "\n")
    return path


def load_dataset(path: str) -> dict[str, np.ndarray]:
    """Read a dataset CSV into column arrays; validates the exact header."""
    with open(path, "r", newline="") as f:
        header = f.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"unexpected dataset header {header!r} in {path!r}")
        raw = np.loadtxt(f, delimiter=",", ndmin=2)
    if raw.shape[1] != 8:
        raise ValueError(f"expected 8 columns in {path!r}, got {raw.shape[1]}")
    return {
        "rollout_id": raw[:, 0].astype(np.int64),
        "step": raw[:, 1].astype(np.int64),
        "time": raw[:, 2],
        "px": raw[:, 3],
        "py": raw[:, 4],
        "obs_x": raw[:, 5],
        "obs_y": raw[:, 6],
        "psi": raw[:, 7],
    }
