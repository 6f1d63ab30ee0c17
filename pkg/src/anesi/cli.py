"""Command-line harness: train, eval, timing, verify-pruner and gradest-bench.

Configuration precedence is flag > JSON file > preset default. Every verb
honours ``--seed`` (falling back to the ``ANESI_SEED`` environment variable,
then 0), so identical invocations write identical artifacts apart from
wall-clock fields.

Exit codes: 0 success, 2 configuration or missing-input error, 3 training
aborted on a non-finite value, 4 pruner disagreement.
"""

from __future__ import annotations

import json
import os
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np

from . import gradest, ndauto as nd, plotting, pruners, tasks, train
from .infer import PredictionModel, beam_search_outputs
from .ndauto import ConfigError, TrainingError
from .problem import Belief, Space

EXIT_CONFIG = 2
EXIT_NAN = 3
EXIT_PRUNER = 4

METRIC_KEYS = ("epoch", "variant", "N", "acc_symbolic", "acc_neural", "acc_digit", "loss_pred",
               "loss_joint", "seconds")

CHECKPOINT_NAME = "model.anesi"
CONFIG_NAME = "config.json"
METRICS_NAME = "metrics.jsonl"


# -- run configuration --------------------------------------------------------

def desk_preset(N: int) -> dict:
    """Single-core settings for N-digit addition; named ``desk-n{N}``.

    These shrink the published full-scale hyperparameters so a run takes
    seconds to a minute instead of hours.
    """
    return {
        "train": {"lr": 3e-3, "perception_lr": 1e-2, "epochs": 10 if N == 1 else 20, "batch_size": 16,
                  "samples": 100, "beam_width": 100, "hidden": [128, 128]},
        "task": "add", "n": N, "pool_size": {1: 2000, 2: 6000, 3: 9000}.get(N, 3000 * N),
        "test_pool_size": 4000, "flip_rate": 0.0, "noise_std": 0.1, "feature_dim": 16,
    }


PRESETS = {f"desk-n{N}": (lambda N=N: desk_preset(N)) for N in (1, 2, 3, 4, 8, 15)}
PRESETS["full"] = lambda: {"train": train.TrainConfig().to_dict(), "pool_size": 60000,
                            "test_pool_size": 10000}

RUN_KEYS = {"task", "n", "pool_size", "test_pool_size", "flip_rate", "noise_std", "feature_dim",
            "idx_images", "idx_labels", "out", "neural_eval", "preset"}


@dataclass
class RunConfig:
    train: train.TrainConfig
    task: str = "add"
    n: int = 1
    pool_size: int = 2000
    test_pool_size: int = 4000
    flip_rate: float = 0.0
    noise_std: float = 0.1
    feature_dim: int = 16
    idx_images: str | None = None
    idx_labels: str | None = None
    out: str = "runs/anesi"
    neural_eval: bool = True
    preset: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task != "add":
            raise ConfigError(f"unknown task {self.task!r}; only 'add' trains end to end")
        if self.n < 1:
            raise ConfigError("n must be at least 1")
        if (self.idx_images is None) != (self.idx_labels is None):
            raise ConfigError("--idx-images and --idx-labels must be given together")
        if self.pool_size < 2 * self.n or self.test_pool_size < 2 * self.n:
            raise ConfigError("digit pools must hold at least one instance")
        if not 0.0 <= self.flip_rate < 0.5:
            raise ConfigError("flip_rate must lie in [0, 0.5)")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in RUN_KEYS}
        out["train"] = self.train.to_dict()
        return out


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def resolve_seed(flag_seed: int | None, file_seed: int | None) -> int:
    if flag_seed is not None:
        return flag_seed
    if file_seed is not None:
        return int(file_seed)
    env = os.environ.get("ANESI_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"ANESI_SEED must be an integer, got {env!r}") from None
    return 0


def build_config(config_path: str | None, flags: dict) -> RunConfig:
    """Merge preset defaults, the JSON file and explicit flags (in that order)."""
    file_values: dict = {}
    if config_path is not None:
        try:
            file_values = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {config_path} does not exist") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {config_path} is not valid JSON: {err}") from None
        if not isinstance(file_values, dict):
            raise ConfigError("config file must hold a JSON object")
    n = flags.get("n") or file_values.get("n") or 1
    preset = flags.get("preset") or file_values.get("preset") or f"desk-n{n}"
    if preset.startswith("desk-n") and preset[6:].isdigit():
        values = desk_preset(int(preset[6:]))
    elif preset in PRESETS:
        values = PRESETS[preset]()
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    values["n"] = n
    values = _merge(values, file_values)
    train_flags = {k: flags[k] for k in ("variant", "epochs", "beam_width") if flags.get(k) is not None}
    run_flags = {k: v for k, v in flags.items() if k in RUN_KEYS and v is not None}
    values = _merge(values, {"train": train_flags, **run_flags})
    values["preset"] = preset
    train_values = dict(values.pop("train", {}))
    train_values["seed"] = resolve_seed(flags.get("seed"), train_values.get("seed", values.pop("seed", None)))
    unknown = set(values) - RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        cfg = train.TrainConfig.from_dict(train_values)
        return RunConfig(train=cfg, **values)
    except TypeError as err:
        raise ConfigError(str(err)) from None


def load_datasets(run: RunConfig):
    """(train, test) addition datasets with perception features attached."""
    N, seed = run.n, run.train.seed
    if run.idx_images is not None:
        data = tasks.load_idx(run.idx_images, run.idx_labels)
        full = tasks.idx_addition(N, data, seed)
        cut = max(1, int(0.9 * len(full)))
        pick = lambda ds, rows: tasks.AdditionDataset(N, ds.indices[rows], ds.digits[rows],
                                                      ds.outputs[rows], ds.features)
        return pick(full, slice(0, cut)), pick(full, slice(cut, None))
    train_cfg = tasks.SyntheticDigitConfig(run.feature_dim, run.flip_rate, run.noise_std, seed)
    test_cfg = tasks.SyntheticDigitConfig(run.feature_dim, run.flip_rate, run.noise_std, seed + 100_003)
    return (tasks.synthetic_addition(N, run.pool_size, train_cfg),
            tasks.synthetic_addition(N, run.test_pool_size, test_cfg))


def make_state(run: RunConfig, feature_dim: int) -> train.TrainState:
    task = tasks.AdditionTask(run.n)
    return train.TrainState.create(run.train, task.symbolic_fn(), feature_dim, pruners.MNISTAddPruner(run.n))


def metrics_line(rec: train.MetricsRecord, run: RunConfig) -> dict:
    values = {"epoch": rec.epoch, "variant": run.train.variant, "N": run.n, "acc_symbolic": rec.acc_symbolic,
              "acc_neural": rec.acc_neural, "acc_digit": rec.acc_digit, "loss_pred": rec.loss_pred,
              "loss_joint": rec.loss_joint, "seconds": round(rec.seconds, 6)}
    return {k: values[k] for k in METRIC_KEYS}


def save_state(state: train.TrainState, run: RunConfig, out: Path) -> None:
    nd.save_checkpoint(out / CHECKPOINT_NAME, nd.store_tensors(state.stores()))
    (out / CONFIG_NAME).write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")


def load_state(path: Path) -> tuple[train.TrainState, RunConfig]:
    """Rebuild a trained state from a run directory or a checkpoint file."""
    ckpt = path / CHECKPOINT_NAME if path.is_dir() else path
    if not ckpt.exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    sidecar = ckpt.parent / CONFIG_NAME
    if not sidecar.exists():
        raise FileNotFoundError(f"no {CONFIG_NAME} next to {ckpt}")
    values = json.loads(sidecar.read_text())
    run = RunConfig(train=train.TrainConfig.from_dict(values.pop("train")), **values)
    tensors = nd.load_checkpoint(ckpt)
    feature_dim = nd.restore_store(tensors, "perception")["perc.W0"].shape[0]
    state = make_state(run, feature_dim)
    state.pred.store = nd.restore_store(tensors, "pred")
    state.perception.store = nd.restore_store(tensors, "perception")
    state.prior.store = nd.restore_store(tensors, "prior")
    if state.expl is not None:
        state.expl.store = nd.restore_store(tensors, "expl")
    return state, run


# -- commands -----------------------------------------------------------------

def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


common_options = [
    click.option("--task", type=str, default=None, help="Task name (only 'add').", show_default=False),
    click.option("--n", "n", type=int, default=None, help="Digits per number."),
    click.option("--variant", type=str, default=None, help="predict | explain | pruning | no-prior."),
    click.option("--seed", type=int, default=None, help="Seed (falls back to ANESI_SEED, then 0)."),
    click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                 help="JSON config file."),
    click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory."),
    click.option("--beam", "beam_width", type=int, default=None, help="Beam width for neural prediction."),
    click.option("--epochs", type=int, default=None, help="Training epochs."),
    click.option("--preset", type=str, default=None, help="desk-nX or full (default desk-n{N})."),
    click.option("--idx-images", type=click.Path(dir_okay=False), default=None, help="IDX image file."),
    click.option("--idx-labels", type=click.Path(dir_okay=False), default=None, help="IDX label file."),
]


def with_common(fn):
    for option in reversed(common_options):
        fn = option(fn)
    return fn


@click.group()
def main():
    """Approximate neurosymbolic inference on multi-digit addition."""


@main.command("train")
@with_common
def cmd_train(**flags):
    """Train a model; writes metrics.jsonl, model.anesi, config.json and training.png."""
    try:
        run = build_config(flags.pop("config_path"), flags)
        train_set, test_set = load_datasets(run)
    except (ConfigError, tasks.IdxError, FileNotFoundError) as err:
        _fail(EXIT_CONFIG, str(err))
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    state = make_state(run, train_set.features.shape[-1])
    lines = []
    with open(out / METRICS_NAME, "w") as fh:
        def emit(rec):
            line = metrics_line(rec, run)
            lines.append(line)
            fh.write(json.dumps(line) + "\n")
            fh.flush()
            click.echo(f"epoch {rec.epoch:3d}  symbolic {rec.acc_symbolic:.4f}  neural "
                       f"{'-' if rec.acc_neural is None else format(rec.acc_neural, '.4f')}  "
                       f"digit {rec.acc_digit:.4f}  ({rec.seconds:.1f}s)")
        try:
            train.fit(state, train_set, test_set, on_epoch=emit, neural=run.neural_eval)
        except TrainingError as err:
            _fail(EXIT_NAN, f"training aborted: {err}")
    save_state(state, run, out)
    plotting.plot_training(lines, out / "training.png")
    click.echo(f"wrote {out / METRICS_NAME}, {out / CHECKPOINT_NAME}")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(), required=True, help="Run directory or model.anesi file.")
@click.option("--mode", type=click.Choice(["symbolic", "neural", "both"]), default="both")
@click.option("--beam", "beam_width", type=int, default=None, help="Beam width (default: samples K).")
@click.option("--seed", type=int, default=None, help="Seed for the evaluation digits.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the result JSON here.")
def cmd_eval(checkpoint, mode, beam_width, seed, out):
    """Evaluate a trained checkpoint on a fresh test set."""
    try:
        state, run = load_state(Path(checkpoint))
    except (FileNotFoundError, ValueError, KeyError) as err:
        _fail(EXIT_CONFIG, str(err))
    if seed is not None:
        run.train.seed = seed
    _, test_set = load_datasets(run)
    result = {"checkpoint": str(checkpoint), "N": run.n, "variant": run.train.variant}
    modes = ["symbolic", "neural"] if mode == "both" else [mode]
    for m in modes:
        rec = train.evaluate(state, test_set, m, beam_width or run.train.beam_width)
        result[f"acc_{m}"] = rec.acc_symbolic if m == "symbolic" else rec.acc_neural
        result["acc_digit"] = rec.acc_digit
    for m in modes:
        click.echo(f"{m} accuracy: {result[f'acc_{m}']:.4f}")
    text = json.dumps(result, sort_keys=True)
    click.echo(text)
    if out:
        Path(out).write_text(text + "\n")


def time_inference(N: int, repeats: int, hidden=(128, 128), beam_width: int = 10, seed: int = 0) -> list[float]:
    """Wall-clock seconds of beam-search prediction for single inputs with random weights."""
    task = tasks.AdditionTask(N)
    rng = np.random.default_rng(seed)
    pred = PredictionModel(task.w_space, task.y_space, hidden, rng)
    beliefs = rng.dirichlet(np.ones(10), size=(repeats + 1, 2 * N)).reshape(repeats + 1, -1)
    beam_search_outputs(pred, beliefs[:1], beam_width)  # warm-up
    samples = []
    for b in beliefs[1:]:
        t0 = time.perf_counter()
        beam_search_outputs(pred, b[None, :], beam_width)
        samples.append(time.perf_counter() - t0)
    return samples


@main.command("timing")
@click.option("--n-list", default="1,2,4,8,15", show_default=True, help="Comma-separated N values.")
@click.option("--repeats", type=int, default=20, show_default=True)
@click.option("--beam", "beam_width", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(file_okay=False), default="runs/timing", show_default=True)
def cmd_timing(n_list, repeats, beam_width, seed, out):
    """Median single-input inference time per N; writes timing.json and timing.png."""
    try:
        ns = [int(v) for v in n_list.split(",") if v.strip()]
        if not ns or any(n < 1 for n in ns) or repeats < 1:
            raise ValueError
    except ValueError:
        _fail(EXIT_CONFIG, f"bad --n-list {n_list!r} or --repeats {repeats}")
    seed = resolve_seed(seed, None)
    medians, raw = [], {}
    for N in ns:
        samples = time_inference(N, repeats, beam_width=beam_width, seed=seed)
        raw[str(N)] = samples
        medians.append(statistics.median(samples))
        click.echo(f"N={N:2d}  median {medians[-1] * 1e3:.3f} ms")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    result = {"N": ns, "median_seconds": medians, "samples": raw, "repeats": repeats, "beam_width": beam_width}
    (out / "timing.json").write_text(json.dumps(result, indent=2) + "\n")
    plotting.plot_timing(ns, medians, out / "timing.png")


@main.command("verify-pruner")
@click.option("--n-max", type=int, default=3, show_default=True)
@click.option("--cases", type=int, default=100_000, show_default=True, help="Random cases at N = 3.")
@click.option("--seed", type=int, default=None)
@click.option("--mutant", is_flag=True, help="Verify a deliberately broken pruner instead.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the report JSON here.")
def cmd_verify_pruner(n_max, cases, seed, mutant, out):
    """Compare the linear-time pruner with brute-force enumeration."""
    if n_max > pruners.BRUTE_FORCE_MAX_N:
        _fail(EXIT_CONFIG, f"--n-max above {pruners.BRUTE_FORCE_MAX_N} has no enumeration oracle")
    seed = resolve_seed(seed, None)
    make = pruners.OffByOnePruner if mutant else pruners.MNISTAddPruner
    reports = []
    for N in range(1, n_max + 1):
        if N <= 2:
            report = pruners.verify_exhaustive(N, make)
        else:
            report = pruners.verify_random(N, cases, seed, make)
        reports.append(report)
        click.echo(f"N={N} {report.mode}: {report.cases} decisions, {report.disagreements} disagreements")
    payload = [{"N": r.N, "mode": r.mode, "cases": r.cases, "disagreements": r.disagreements,
                "counterexamples": r.counterexamples} for r in reports]
    if out:
        Path(out).write_text(json.dumps(payload, indent=2) + "\n")
    bad = [r for r in reports if not r.ok]
    if bad:
        click.echo(json.dumps(bad[0].counterexamples, indent=2), err=True)
        sys.exit(EXIT_PRUNER)


@main.command("gradest-bench")
@click.option("--n", "n", type=int, default=3, show_default=True, help="Number of binary latents.")
@click.option("--iters", type=int, default=3000, show_default=True, help="Outcome-model fitting steps.")
@click.option("--samples", type=int, default=100, show_default=True, help="Score-function samples.")
@click.option("--repeats", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the reports here.")
def cmd_gradest_bench(n, iters, samples, repeats, seed, out):
    """Surrogate versus score-function gradients for g(z) = [exactly two latents set]."""
    if not 2 <= n <= 16:
        _fail(EXIT_CONFIG, "--n must lie between 2 and 16")
    seed = resolve_seed(seed, None)
    space = Space((2,) * n)
    probs = np.random.default_rng(seed).uniform(0.2, 0.8, size=n)
    belief = Belief([[1.0 - p, p] for p in probs])
    reports = gradest.benchmark(space, gradest.exactly_two, belief, iters, repeats, samples, seed)
    for r in reports:
        click.echo(r.to_json())
    if out:
        Path(out).write_text("\n".join(r.to_json() for r in reports) + "\n")


if __name__ == "__main__":
    main()
