"""Dataset slicing, task tensors, feature scaling, and split rules.

The train / held-out split is by rollout id (id % 10 == 9 is held out), never
by row, so no trajectory contributes to both sides.

The temporal task pairs each noise-free position with its time stamp. The
history task builds sliding windows of (obs_x, obs_y, time) observation
triples: the window for a target at step t covers steps t-w .. t-1, so the
context never includes the target step. Contexts fed to the trainable
networks are standardized per feature; the fitted shift/scale pair travels
with the checkpoint so evaluation reproduces the training-time mapping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HELDOUT_MODULUS = 10
HELDOUT_RESIDUE = 9


@dataclass
class FeatureScaler:
    """Per-feature standardization x -> (x - shift) / scale."""

    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray) -> "FeatureScaler":
        flat = rows.reshape(-1, rows.shape[-1])
        shift = flat.mean(axis=0)
        scale = flat.std(axis=0)
        scale = np.where(scale < 1e-12, 1.0, scale)
        return cls(shift, scale)

    @classmethod
    def identity(cls, n_features: int) -> "FeatureScaler":
        return cls(np.zeros(n_features), np.ones(n_features))

    def transform(self, rows: np.ndarray) -> np.ndarray:
        return (np.asarray(rows, dtype=np.float64) - self.shift) / self.scale

    def inverse_transform(self, rows: np.ndarray) -> np.ndarray:
        return np.asarray(rows, dtype=np.float64) * self.scale + self.shift

    def log_det(self) -> float:
        """log |det| of the forward (standardizing) affine map."""
        return float(-np.sum(np.log(self.scale)))

    def to_dict(self) -> dict:
        return {"shift": self.shift.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureScaler":
        return cls(np.asarray(d["shift"], dtype=np.float64),
                   np.asarray(d["scale"], dtype=np.float64))


def heldout_mask(rollout_ids: np.ndarray) -> np.ndarray:
    return rollout_ids % HELDOUT_MODULUS == HELDOUT_RESIDUE


def select_rows(dataset: dict[str, np.ndarray], mask: np.ndarray) -> dict[str, np.ndarray]:
    return {key: col[mask] for key, col in dataset.items()}


def split_dataset(dataset: dict[str, np.ndarray]):
    held = heldout_mask(dataset["rollout_id"])
    return select_rows(dataset, ~held), select_rows(dataset, held)


def temporal_arrays(dataset: dict[str, np.ndarray]):
    """(points (n, 2), times (n, 1)): noise-free positions and their stamps."""
    points = np.column_stack([dataset["px"], dataset["py"]])
    times = dataset["time"].reshape(-1, 1)
    return points, times


def time_slice(dataset: dict[str, np.ndarray], t: float, dt_hint: float | None = None):
    """Rows whose time stamp equals t (within half the smallest step)."""
    times = dataset["time"]
    if dt_hint is None:
        uniq = np.unique(times)
        dt_hint = float(np.min(np.diff(uniq))) if uniq.size > 1 else 1.0
    mask = np.abs(times - t) < 0.5 * dt_hint
    if not np.any(mask):
        raise ValueError(f"dataset has no rows at time slice t={t}")
    return select_rows(dataset, mask)


@dataclass
class HistoryWindows:
    """Sliding observation windows with their noise-free targets."""

    observations: np.ndarray  # (n, window, 3) when fixed-length, else object array
    targets: np.ndarray       # (n, 2)
    rollout_ids: np.ndarray   # (n,)
    target_steps: np.ndarray  # (n,)
    window: int
    variable: bool

    def __len__(self) -> int:
        return self.targets.shape[0]


def history_windows(dataset: dict[str, np.ndarray], window: int,
                    variable: bool = False) -> HistoryWindows:
    """Build (observation window, next noise-free state) pairs per rollout.

    Fixed mode keeps exactly ``window`` observations per context. Variable
    mode keeps the full prefix from the rollout start (ragged, stored as an
    object array); targets are identical between modes where both exist.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    order = np.lexsort((dataset["step"], dataset["rollout_id"]))
    rid = dataset["rollout_id"][order]
    features = np.column_stack([dataset["obs_x"][order], dataset["obs_y"][order],
                                dataset["time"][order]])
    targets_all = np.column_stack([dataset["px"][order], dataset["py"][order]])
    steps = dataset["step"][order]

    obs_list: list[np.ndarray] = []
    target_list: list[np.ndarray] = []
    rid_list: list[int] = []
    step_list: list[int] = []
    for r in np.unique(rid):
        sel = rid == r
        feats = features[sel]
        tgts = targets_all[sel]
        stp = steps[sel]
        horizon = feats.shape[0]
        start_t = 1 if variable else window
        for t in range(start_t, horizon):
            lo = 0 if variable else t - window
            obs_list.append(feats[lo:t])
            target_list.append(tgts[t])
            rid_list.append(int(r))
            step_list.append(int(stp[t]))
    if not obs_list:
        raise ValueError(
            f"no history windows: window={window} does not fit in the rollouts")
    if variable:
        observations = np.empty(len(obs_list), dtype=object)
        for i, o in enumerate(obs_list):
            observations[i] = o
    else:
        observations = np.stack(obs_list)
    return HistoryWindows(observations, np.stack(target_list), np.asarray(rid_list),
                          np.asarray(step_list), window, variable)


def group_by_length(indices: np.ndarray, observations: np.ndarray):
    """Bucket ragged window indices by sequence length (for variable mode)."""
    lengths = np.array([observations[i].shape[0] for i in indices])
    out = []
    for length in np.unique(lengths):
        out.append((int(length), indices[lengths == length]))
    return out
