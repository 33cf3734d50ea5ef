"""Experiment configuration, training loops, checkpoints, and evaluations.

Two tasks:
  * ``temporal``: fit p(position | time stamp) on the unimodal dataset with
    an identity or MLP conditioning operator (model "flow") or with the MDN
    baseline (model "mdn").
  * ``history``: fit p(next position | window of noisy observations) on the
    bimodal dataset with a sequence conditioning operator.

Training is plain minibatch maximum likelihood with Adam at its default
parameters. Everything is derived from the experiment seed: weight init,
batch order, and sampling, so a rerun reproduces the loss log bit for bit.
Checkpoints are JSON (version, config snapshot, context scaler, named
parameter arrays, optimizer state, iteration count, final loss); reloading
and re-evaluating the fixed verification batch reproduces the stored loss.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import data as data_mod
from . import dynamics, metrics
from .autodiff import AdamState, Tape
from .baselines import MDNModel, UKFParams, drive_ukf_belief, sample_position_belief
from .conditioners import ConditionerSpec, build_conditioner
from .flows import FlowModel, build_flow

CHECKPOINT_VERSION = 1
VERIFY_BATCH_ROWS = 512

TEMPORAL_CONDITIONERS = ("identity", "mlp")
HISTORY_CONDITIONERS = ("rnn", "gru", "lstm", "transformer")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration


@dataclass
class ExperimentConfig:
    task: str = "temporal"            # temporal | history
    dataset: str = ""
    model: str = "flow"               # flow | mdn
    conditioner: str = "identity"
    blocks: int = 5
    hidden: int = 32
    iterations: int = 2000
    batch_size: int = 512
    learning_rate: float = 1e-3
    seed: int = 0
    window: int = 15
    variable_windows: bool = False
    t_slice: float = 13.0
    kl_samples: int = 1000
    kl_k: int = 1

    def validate(self) -> None:
        if self.task not in ("temporal", "history"):
            raise ValueError(f"task must be 'temporal' or 'history', got {self.task!r}")
        if self.model not in ("flow", "mdn"):
            raise ValueError(f"model must be 'flow' or 'mdn', got {self.model!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.model == "flow":
            allowed = TEMPORAL_CONDITIONERS if self.task == "temporal" else HISTORY_CONDITIONERS
            if self.conditioner not in allowed:
                raise ValueError(
                    f"task {self.task!r} requires a conditioner in {allowed}, "
                    f"got {self.conditioner!r}")
        if self.model == "mdn" and self.task != "temporal":
            raise ValueError("the MDN baseline applies to the temporal task only")


def conditioner_spec(config: ExperimentConfig) -> ConditionerSpec:
    if config.task == "temporal":
        if config.conditioner == "identity":
            return ConditionerSpec("identity", input_features=1, output_features=1)
        return ConditionerSpec("mlp", input_features=1, hidden_features=16,
                               output_features=4)
    return ConditionerSpec(config.conditioner)


def _arch_rng(config: ExperimentConfig) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((config.seed, 0))))


def build_model(config: ExperimentConfig):
    """Model instance for a config; architecture derives only from the config."""
    config.validate()
    rng = _arch_rng(config)
    if config.model == "mdn":
        return MDNModel(ctx_dim=1, data_dim=2, rng=rng)
    spec = conditioner_spec(config)
    conditioner = build_conditioner(spec, rng)
    return build_flow(2, spec.output_features, conditioner, rng,
                      blocks=config.blocks, hidden=config.hidden)


@dataclass
class TaskData:
    """Standardized training arrays plus the scalers fitted on the train split.

    Models are trained in standardized target units; reported likelihoods and
    samples are mapped back to raw units through ``target_scaler``.
    """

    points: np.ndarray            # standardized targets (n, 2)
    contexts: np.ndarray          # (n, 1) temporal; (n, w, 3) fixed history; object ragged
    scaler: data_mod.FeatureScaler
    target_scaler: data_mod.FeatureScaler
    variable: bool = False


def prepare_task_data(config: ExperimentConfig, dataset: dict[str, np.ndarray],
                      scaler: data_mod.FeatureScaler | None = None,
                      target_scaler: data_mod.FeatureScaler | None = None,
                      heldout: bool = False) -> TaskData:
    part = data_mod.split_dataset(dataset)[1 if heldout else 0]
    if config.task == "temporal":
        points, times = data_mod.temporal_arrays(part)
        fitted = scaler or data_mod.FeatureScaler.fit(times)
        tfitted = target_scaler or data_mod.FeatureScaler.fit(points)
        return TaskData(tfitted.transform(points), fitted.transform(times), fitted, tfitted)
    windows = data_mod.history_windows(part, config.window, config.variable_windows)
    tfitted = target_scaler or data_mod.FeatureScaler.fit(windows.targets)
    targets = tfitted.transform(windows.targets)
    if config.variable_windows:
        flat = np.concatenate([w for w in windows.observations], axis=0)
        fitted = scaler or data_mod.FeatureScaler.fit(flat)
        ctx = np.empty(len(windows), dtype=object)
        for i, w in enumerate(windows.observations):
            ctx[i] = fitted.transform(w)
        return TaskData(targets, ctx, fitted, tfitted, variable=True)
    fitted = scaler or data_mod.FeatureScaler.fit(windows.observations)
    return TaskData(targets, fitted.transform(windows.observations), fitted, tfitted)


def _batch_loss(model, tape, points: np.ndarray, contexts: np.ndarray, variable: bool):
    if not variable:
        fn = model.nll_loss if isinstance(model, FlowModel) else model.nll
        return fn(tape, points, contexts)
    # ragged contexts: group by length, weight each group's mean by its share
    idx = np.arange(points.shape[0])
    total = None
    fn = model.nll_loss if isinstance(model, FlowModel) else model.nll
    for length, members in data_mod.group_by_length(idx, contexts):
        seqs = np.stack([contexts[i] for i in members])
        part = fn(tape, points[members], seqs) * (members.size / points.shape[0])
        total = part if total is None else total + part
    return total


@dataclass
class TrainResult:
    model: object
    config: ExperimentConfig
    scaler: data_mod.FeatureScaler
    target_scaler: data_mod.FeatureScaler
    losses: list[tuple[int, float]]
    final_loss: float
    adam: AdamState


def _verification_batch(task: TaskData):
    k = min(VERIFY_BATCH_ROWS, task.points.shape[0])
    return task.points[:k], task.contexts[:k]


def train(config: ExperimentConfig, dataset: dict[str, np.ndarray],
          progress=None) -> TrainResult:
    config.validate()
    model = build_model(config)
    task = prepare_task_data(config, dataset)
    params = model.parameters()
    adam = AdamState(params, lr=config.learning_rate)
    batch_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((config.seed, 1))))
    n = task.points.shape[0]
    losses: list[tuple[int, float]] = []
    for it in range(1, config.iterations + 1):
        idx = batch_rng.integers(0, n, size=min(config.batch_size, n))
        tape = Tape()
        loss = _batch_loss(model, tape, task.points[idx], task.contexts[idx], task.variable)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(it)
        grads = tape.parameter_grads(tape.backward(loss))
        adam.step(grads)
        losses.append((it, value))
        if progress is not None:
            progress(it, value)
    vb_points, vb_ctx = _verification_batch(task)
    final = _batch_loss(model, None, vb_points, vb_ctx, task.variable).item()
    return TrainResult(model, config, task.scaler, task.target_scaler, losses, final, adam)


def write_loss_log(losses: list[tuple[int, float]], path: str) -> None:
    with open(path, "w", newline="\n") as f:
        f.write("iteration,nll\n")
        for it, value in losses:
            f.write(f"{it},{value:.17g}\n")


# -- checkpoints --------------------------------------------------------------


def _array_block(arrays: dict[str, np.ndarray]) -> dict:
    return {name: {"shape": list(a.shape), "data": a.ravel().tolist()}
            for name, a in arrays.items()}


def _read_block(block: dict) -> dict[str, np.ndarray]:
    return {name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in block.items()}


def save_checkpoint(result: TrainResult, path: str) -> str:
    model = result.model
    named = dict(model.named_parameters())
    adam = result.adam
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(result.config),
        "context_scaler": result.scaler.to_dict(),
        "target_scaler": result.target_scaler.to_dict(),
        "params": _array_block({k: p.data for k, p in named.items()}),
        "adam": {
            "t": adam.t,
            "lr": adam.lr,
            "m": _array_block({k: adam.m[id(p)] for k, p in named.items()}),
            "v": _array_block({k: adam.v[id(p)] for k, p in named.items()}),
        },
        "iterations": result.config.iterations,
        "final_loss": result.final_loss,
    }
    with open(path, "w", newline="\n") as f:
        json.dump(payload, f)
        f.write("\n")
    return path


@dataclass
class LoadedCheckpoint:
    config: ExperimentConfig
    model: object
    scaler: data_mod.FeatureScaler
    target_scaler: data_mod.FeatureScaler
    adam: AdamState
    iterations: int
    final_loss: float


def load_checkpoint(path: str) -> LoadedCheckpoint:
    with open(path) as f:
        payload = json.load(f)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r} in {path!r}")
    config = ExperimentConfig(**payload["config"])
    model = build_model(config)
    model.load_state_dict(_read_block(payload["params"]))
    named = dict(model.named_parameters())
    adam = AdamState(list(named.values()), lr=payload["adam"]["lr"])
    adam.t = payload["adam"]["t"]
    adam_m = _read_block(payload["adam"]["m"])
    adam_v = _read_block(payload["adam"]["v"])
    for k, p in named.items():
        adam.m[id(p)] = adam_m[k]
        adam.v[id(p)] = adam_v[k]
    scaler = data_mod.FeatureScaler.from_dict(payload["context_scaler"])
    target_scaler = data_mod.FeatureScaler.from_dict(payload["target_scaler"])
    return LoadedCheckpoint(config, model, scaler, target_scaler, adam,
                            payload["iterations"], payload["final_loss"])


def verification_loss(ckpt: LoadedCheckpoint, dataset: dict[str, np.ndarray]) -> float:
    """NLL on the fixed verification batch; must reproduce ckpt.final_loss."""
    task = prepare_task_data(ckpt.config, dataset, scaler=ckpt.scaler,
                             target_scaler=ckpt.target_scaler)
    vb_points, vb_ctx = _verification_batch(task)
    return _batch_loss(ckpt.model, None, vb_points, vb_ctx, task.variable).item()


# -- evaluations ---------------------------------------------------------------


def sample_model(ckpt: LoadedCheckpoint, raw_context, n: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Raw-unit samples for one raw context, applying both checkpoint scalers."""
    model = ckpt.model
    if isinstance(model, MDNModel):
        ctx = ckpt.scaler.transform(np.atleast_2d(np.asarray(raw_context, dtype=np.float64)))
        std_samples = model.sample(ctx, n, rng)
    else:
        if ckpt.config.task == "temporal":
            ctx = ckpt.scaler.transform(np.asarray(raw_context, dtype=np.float64).reshape(1, 1))
        else:
            seq = np.asarray(raw_context, dtype=np.float64)
            if seq.ndim != 2 or seq.shape[1] != 3:
                raise ValueError(f"history context must be (steps, 3), got shape {seq.shape}")
            ctx = ckpt.scaler.transform(seq)[None, :, :]
        std_samples = model.sample(n, ctx, rng)
    return ckpt.target_scaler.inverse_transform(std_samples)


def log_prob_fn(ckpt: LoadedCheckpoint):
    """Raw-unit log-density closure over (points, raw contexts) batches."""
    model = ckpt.model
    correction = ckpt.target_scaler.log_det()

    def fn(points, contexts):
        if ckpt.config.task == "temporal":
            ctx = ckpt.scaler.transform(np.asarray(contexts, dtype=np.float64).reshape(-1, 1))
        else:
            ctx = ckpt.scaler.transform(np.asarray(contexts, dtype=np.float64))
        std_points = ckpt.target_scaler.transform(points)
        return model.log_prob(None, std_points, ctx).data + correction

    return fn


def eval_temporal_kl(ckpt: LoadedCheckpoint, dataset: dict[str, np.ndarray],
                     t_slice: float, n_samples: int, k: int,
                     seed: int) -> metrics.KLEstimate:
    """KL(model || dataset) at one time slice from model samples."""
    rows = data_mod.time_slice(dataset, t_slice)
    target = np.column_stack([rows["px"], rows["py"]])
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 2))))
    samples = sample_model(ckpt, [[t_slice]], n_samples, rng)
    return metrics.knn_kl_estimate(samples, target, k=k)


def eval_history_mean_ll(ckpt: LoadedCheckpoint, dataset: dict[str, np.ndarray]) -> dict:
    """Mean raw-unit log-likelihood of noise-free next states, held-out windows."""
    task = prepare_task_data(ckpt.config, dataset, scaler=ckpt.scaler,
                             target_scaler=ckpt.target_scaler, heldout=True)
    model = ckpt.model
    correction = ckpt.target_scaler.log_det()
    if task.variable:
        idx = np.arange(task.points.shape[0])
        total = 0.0
        for length, members in data_mod.group_by_length(idx, task.contexts):
            seqs = np.stack([task.contexts[i] for i in members])
            vals = model.log_prob(None, task.points[members], seqs).data
            total += float(np.sum(vals))
        mean = total / task.points.shape[0]
    else:
        mean = metrics.mean_log_likelihood(
            lambda pts, ctx: model.log_prob(None, pts, ctx).data,
            task.points, task.contexts)
    return {"mean_log_likelihood": mean + correction, "windows": task.points.shape[0]}


def ukf_slice_kl(sim_config: dynamics.RolloutConfig, dataset: dict[str, np.ndarray],
                 t_slice: float, n_samples: int, k: int, seed: int,
                 q_inflation: float = 1.0) -> metrics.KLEstimate:
    """KL(UKF belief || dataset) at a slice, filtering the nominal stream."""
    n_steps = int(round(t_slice / sim_config.dt))
    if abs(n_steps * sim_config.dt - t_slice) > 1e-9:
        raise ValueError(f"t_slice {t_slice} is not a multiple of dt {sim_config.dt}")
    belief = drive_ukf_belief(sim_config, n_steps, q_inflation=q_inflation)
    rows = data_mod.time_slice(dataset, t_slice)
    target = np.column_stack([rows["px"], rows["py"]])
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 3))))
    samples = sample_position_belief(belief, n_samples, rng)
    return metrics.knn_kl_estimate(samples, target, k=k)
