"""Command-line workflows: gen-data, train, eval, levelsets, sample.

Common flags: ``--config PATH`` (flat key=value file whose keys mirror the
long flag names; explicit flags win), ``--seed N``, ``--out PATH``.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numeric
failure.

``gen-data`` writes the dataset CSV plus a ``<out>.meta`` sidecar recording
the simulator constants; the UKF baseline evaluation reads the sidecar to
reconstruct its state-space model.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict

import numpy as np

from . import data as data_mod
from . import dynamics, metrics, training
from .conditioners import ObservationSequence


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        with open(path) as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, value = line.partition("=")
                values[key.strip().replace("-", "_")] = value.strip()
    except OSError as err:
        raise UsageError(f"cannot read config file {path!r}: {err}") from err
    return values


def _merge_config(args: argparse.Namespace, defaults: dict) -> argparse.Namespace:
    """Resolve each option as: explicit flag > config file > default."""
    file_values = _read_config_file(args.config) if getattr(args, "config", None) else {}
    for key, default in defaults.items():
        if getattr(args, key, None) is not None:
            continue
        if key in file_values:
            raw = file_values[key]
            if isinstance(default, bool):
                value = raw.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                value = int(raw)
            elif isinstance(default, float):
                value = float(raw)
            else:
                value = raw
            setattr(args, key, value)
        else:
            setattr(args, key, default)
    return args


def _write_sim_sidecar(path: str, config: dynamics.RolloutConfig, n_rollouts: int) -> None:
    with open(path + ".meta", "w", newline="\n") as f:
        for key, value in asdict(config).items():
            f.write(f"{key}={value}\n")
        f.write(f"n_rollouts={n_rollouts}\n")


def read_sim_sidecar(dataset_path: str) -> dynamics.RolloutConfig:
    values = _read_config_file(dataset_path + ".meta")
    fields = {}
    for key in ("dt", "v_nominal", "c1", "c2", "sigma_v", "sigma_phi", "obs_sigma"):
        if key in values:
            fields[key] = float(values[key])
    for key in ("horizon", "switch_step", "seed"):
        if key in values:
            fields[key] = int(values[key])
    if "psi_mode" in values:
        fields["psi_mode"] = values["psi_mode"]
    return dynamics.RolloutConfig(**fields)


def read_observation_file(path: str) -> np.ndarray:
    """Observation sequence file: one `obs_x,obs_y,time` triple per line."""
    triples = []
    try:
        with open(path) as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.strip()
                if not line or line.startswith("#") or line.startswith("obs_x"):
                    continue
                parts = line.split(",")
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: expected 3 comma-separated values")
                try:
                    triples.append([float(p) for p in parts])
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: non-numeric value in {line!r}") from None
    except OSError as err:
        raise ValueError(f"cannot read observation file {path!r}: {err}") from err
    if not triples:
        raise ValueError(f"{path}: no observation triples found")
    seq = ObservationSequence([tuple(t) for t in triples])
    return np.asarray(seq.triples, dtype=np.float64)


# -- subcommands ----------------------------------------------------------------


_GEN_DEFAULTS = dict(mode="unimodal", rollouts=312, seed=0, dt=0.125, horizon=160,
                     v_nominal=1.0, c1=0.5, c2=0.3, sigma_v=0.05, sigma_phi=0.005,
                     obs_sigma=0.05, switch_step=40)


def cmd_gen_data(args) -> int:
    args = _merge_config(args, _GEN_DEFAULTS)
    if args.mode not in ("unimodal", "bimodal"):
        raise UsageError(f"--mode must be unimodal or bimodal, got {args.mode!r}")
    config = dynamics.RolloutConfig(
        dt=args.dt, horizon=args.horizon, v_nominal=args.v_nominal, c1=args.c1,
        c2=args.c2, sigma_v=args.sigma_v, sigma_phi=args.sigma_phi,
        obs_sigma=args.obs_sigma,
        psi_mode="fixed" if args.mode == "unimodal" else "switching",
        switch_step=args.switch_step, seed=args.seed)
    try:
        config.validate()
        if args.rollouts < 1:
            raise ValueError(f"--rollouts must be >= 1, got {args.rollouts}")
    except ValueError as err:
        raise UsageError(str(err)) from err
    dynamics.generate_dataset(config, args.rollouts, args.out)
    _write_sim_sidecar(args.out, config, args.rollouts)
    print(f"wrote {args.rollouts * args.horizon} records to {args.out}")
    return 0


_TRAIN_DEFAULTS = dict(task="temporal", model="flow", conditioner=None, blocks=5,
                       hidden=32, iterations=2000, batch_size=512, learning_rate=1e-3,
                       seed=0, window=15, variable_windows=False, loss_log=None)


def cmd_train(args) -> int:
    args = _merge_config(args, _TRAIN_DEFAULTS)
    if args.conditioner is None:
        args.conditioner = "identity" if args.task == "temporal" else "gru"
    config = training.ExperimentConfig(
        task=args.task, dataset=args.dataset, model=args.model,
        conditioner=args.conditioner, blocks=args.blocks, hidden=args.hidden,
        iterations=args.iterations, batch_size=args.batch_size,
        learning_rate=args.learning_rate, seed=args.seed, window=args.window,
        variable_windows=args.variable_windows)
    try:
        config.validate()
    except ValueError as err:
        raise UsageError(str(err)) from err
    dataset = dynamics.load_dataset(args.dataset)
    result = training.train(config, dataset)
    training.save_checkpoint(result, args.out)
    loss_log = args.loss_log or args.out + ".losses.csv"
    training.write_loss_log(result.losses, loss_log)
    print(f"trained {config.model}/{config.conditioner} for {config.iterations} "
          f"iterations; final nll={result.final_loss:.6f}")
    print(f"checkpoint={args.out}")
    print(f"loss_log={loss_log}")
    return 0


_EVAL_DEFAULTS = dict(baseline=None, t_slice=13.0, kl_samples=1000, kl_k=1, seed=0,
                      q_inflation=1.0, out=None)


def cmd_eval(args) -> int:
    args = _merge_config(args, _EVAL_DEFAULTS)
    if (args.checkpoint is None) == (args.baseline is None):
        raise UsageError("eval needs exactly one of --checkpoint or --baseline ukf")
    dataset = dynamics.load_dataset(args.dataset)
    if args.baseline is not None:
        if args.baseline != "ukf":
            raise UsageError(f"unknown baseline {args.baseline!r}; only 'ukf' is supported")
        sim_config = read_sim_sidecar(args.dataset)
        est = training.ukf_slice_kl(sim_config, dataset, args.t_slice, args.kl_samples,
                                    args.kl_k, args.seed, args.q_inflation)
        report = f"method=ukf\nt_slice={args.t_slice:.17g}\n" + metrics.format_kl_report(est)
    else:
        ckpt = training.load_checkpoint(args.checkpoint)
        if ckpt.config.task == "temporal":
            est = training.eval_temporal_kl(ckpt, dataset, args.t_slice, args.kl_samples,
                                            args.kl_k, args.seed)
            report = (f"method={ckpt.config.model}/{ckpt.config.conditioner}\n"
                      f"t_slice={args.t_slice:.17g}\n" + metrics.format_kl_report(est))
        else:
            res = training.eval_history_mean_ll(ckpt, dataset)
            report = (f"method={ckpt.config.model}/{ckpt.config.conditioner}\n"
                      f"mean_log_likelihood={res['mean_log_likelihood']:.17g}\n"
                      f"windows={res['windows']}\n")
    sys.stdout.write(report)
    if args.out:
        with open(args.out, "w", newline="\n") as f:
            f.write(report)
    return 0


_LEVELSET_DEFAULTS = dict(time=None, obs_file=None, extent=None, resolution=64,
                          samples=20000, seed=0)


def _context_from_flags(args, task: str):
    if task == "temporal":
        if args.time is None:
            raise UsageError("temporal checkpoints need --time")
        return np.asarray([[args.time]])
    if args.obs_file is None:
        raise UsageError("history checkpoints need --obs-file")
    return read_observation_file(args.obs_file)


def cmd_levelsets(args) -> int:
    args = _merge_config(args, _LEVELSET_DEFAULTS)
    ckpt = training.load_checkpoint(args.checkpoint)
    raw_context = _context_from_flags(args, ckpt.config.task)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((args.seed, 4))))
    probe = training.sample_model(ckpt, raw_context, 4096, rng)
    if args.extent is None:
        lo = probe.min(axis=0) - 0.5
        hi = probe.max(axis=0) + 0.5
        extents = ((float(lo[0]), float(hi[0])), (float(lo[1]), float(hi[1])))
    else:
        try:
            x0, x1, y0, y1 = [float(v) for v in args.extent.split(",")]
        except ValueError:
            raise UsageError(f"--extent expects x0,x1,y0,y1 got {args.extent!r}") from None
        extents = ((x0, x1), (y0, y1))
    fn = training.log_prob_fn(ckpt)
    if ckpt.config.task == "temporal":
        contexts = lambda n: np.full((n, 1), raw_context[0, 0])
    else:
        contexts = lambda n: np.repeat(raw_context[None, :, :], n, axis=0)
    grid = metrics.level_set_grid(
        lambda pts: fn(pts, contexts(pts.shape[0])),
        lambda n, r: training.sample_model(ckpt, raw_context, n, r),
        extents, args.resolution, rng, n_samples=args.samples)
    metrics.write_level_set_csv(grid, args.out)
    print(f"grid={args.out}")
    print(f"meta={args.out}.meta")
    return 0


_SAMPLE_DEFAULTS = dict(time=None, obs_file=None, n=1000, seed=0)


def cmd_sample(args) -> int:
    args = _merge_config(args, _SAMPLE_DEFAULTS)
    if args.n < 1:
        raise UsageError(f"-n must be >= 1, got {args.n}")
    ckpt = training.load_checkpoint(args.checkpoint)
    raw_context = _context_from_flags(args, ckpt.config.task)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((args.seed, 5))))
    samples = training.sample_model(ckpt, raw_context, args.n, rng)
    with open(args.out, "w", newline="\n") as f:
        f.write("x,y\n")
        for row in samples:
            f.write(f"{row[0]:.17g},{row[1]:.17g}\n")
    print(f"samples={args.out}")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="flowstate",
                     description="Conditional-flow state estimation workflows")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file; flags override")
        p.add_argument("--seed", type=int, default=None)

    g = sub.add_parser("gen-data", help="simulate a driving dataset CSV")
    common(g)
    g.add_argument("--mode", choices=["unimodal", "bimodal"], default=None)
    g.add_argument("--rollouts", type=int, default=None)
    g.add_argument("--out", required=True)
    for flag, typ in [("--dt", float), ("--horizon", int), ("--v-nominal", float),
                      ("--c1", float), ("--c2", float), ("--sigma-v", float),
                      ("--sigma-phi", float), ("--obs-sigma", float),
                      ("--switch-step", int)]:
        g.add_argument(flag, type=typ, default=None)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="fit a flow or MDN by maximum likelihood")
    common(t)
    t.add_argument("--task", choices=["temporal", "history"], default=None)
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--model", choices=["flow", "mdn"], default=None)
    t.add_argument("--conditioner",
                   choices=["identity", "mlp", "rnn", "gru", "lstm", "transformer"],
                   default=None)
    t.add_argument("--blocks", type=int, default=None)
    t.add_argument("--hidden", type=int, default=None)
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--learning-rate", type=float, default=None)
    t.add_argument("--window", type=int, default=None)
    t.add_argument("--variable-windows", action="store_const", const=True, default=None)
    t.add_argument("--loss-log", default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="divergence or mean log-likelihood report")
    common(e)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--baseline", choices=["ukf"], default=None)
    e.add_argument("--dataset", required=True)
    e.add_argument("--t-slice", type=float, default=None)
    e.add_argument("--kl-samples", type=int, default=None)
    e.add_argument("--kl-k", type=int, default=None)
    e.add_argument("--q-inflation", type=float, default=None)
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_eval)

    l = sub.add_parser("levelsets", help="density grid with HDR thresholds")
    common(l)
    l.add_argument("--checkpoint", required=True)
    l.add_argument("--out", required=True)
    l.add_argument("--time", type=float, default=None)
    l.add_argument("--obs-file", default=None)
    l.add_argument("--extent", default=None)
    l.add_argument("--resolution", type=int, default=None)
    l.add_argument("--samples", type=int, default=None)
    l.set_defaults(fn=cmd_levelsets)

    s = sub.add_parser("sample", help="draw conditioned samples to CSV")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("-n", type=int, default=None)
    s.add_argument("--time", type=float, default=None)
    s.add_argument("--obs-file", default=None)
    s.set_defaults(fn=cmd_sample)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except training.TrainingDiverged as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, np.linalg.LinAlgError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
