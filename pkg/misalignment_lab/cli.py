"""misalignment-lab: attention noise analysis, synthetic tasks and attention-variant training"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import math
import pathlib
import sys
from typing import Optional, Sequence

import apischema

from . import analysis, constants
from .analysis import MisalignmentSpec, NoiseSpec, TrialConfig, WeightsMode
from .attention import Variant
from .config import (AnalyzeSettings, EvalSettings, GenSettings,
                     ReproSettings, TrainSettings, UsageError, resolve,
                     write_resolved)
from .models import (MODEL_VARIANTS, PROFILES, CheckpointFormatError, ModelSpec,
                     bias_maps, build_model, collate, load_checkpoint,
                     save_checkpoint)
from .tasks import Dataset, DatasetFormatError, DatasetSpec, Task, load_dataset, save_dataset
from .training import (EVAL_BATCH_SIZE, TrainConfig, TrainingDivergedError,
                       TrainJob, evaluate, run_jobs, train)
from .util import atomic_write_text, check_output_dir, file_digest, write_csv

logger = logging.getLogger(__name__)

DESCRIPTION = __doc__
EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

PROFILE_EPOCHS = {"fast": 100, "full": 200}
FIG2_MARGIN = 0.20
MANIFEST = "manifest.json"
BIAS_MAPS_HEADER = ("layer", "head", "i", "j", "bias")


@dataclasses.dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclasses.dataclass
class CommandResult:
    summary: str
    outputs: list[pathlib.Path]
    checks: list[Check] = dataclasses.field(default_factory=list)

    @property
    def failures(self) -> list[Check]:
        return [check for check in self.checks if not check.passed]


@dataclasses.dataclass
class ManifestEntry:
    path: str
    sha256: str


@dataclasses.dataclass
class Manifest:
    figure: str
    seed: int
    files: list[ManifestEntry]


def configure_logging(level: Optional[str]) -> None:
    if level is None:
        level = "DEBUG" if constants.VERBOSE else "INFO"
    logging.basicConfig(
        level=level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _check_within(name: str, value: float, target: float, tolerance: float) -> Check:
    error = abs(value - target) / max(abs(target), 1e-12)
    return Check(
        name, bool(error < tolerance),
        f"{value:.6g} vs {target:.6g} (rel error {error:.4f}, tolerance {tolerance})",
    )


def _strictly_decreasing(name: str, values: Sequence[float]) -> Check:
    ok = all(a > b for a, b in zip(values, values[1:]))
    return Check(name, ok, ", ".join(f"{value:.6g}" for value in values))


def _trial_config(settings: AnalyzeSettings, d: int, n: int, mode: WeightsMode, heads: int = 1) -> TrialConfig:
    return TrialConfig(
        d=d, n=n, n_trials=settings.trials, seed=settings.seed, weights_mode=mode,
        heads=heads, input_distribution=settings.input_distribution,
    )


def analyze_lemma1(settings: AnalyzeSettings, out: pathlib.Path) -> CommandResult:
    rows, checks = [], []
    for d, n, sigma, mode in itertools.product(
        settings.d, settings.n, settings.sigma, settings.weights_mode
    ):
        cfg = _trial_config(settings, d, n, mode)
        fraction = analysis.lemma1_check(cfg, NoiseSpec(sigma))
        violations = int(round(fraction * cfg.n_trials))
        rows.append((d, n, sigma, mode.value, cfg.n_trials, violations))
        checks.append(Check(f"lemma1 d={d} n={n} sigma={sigma} {mode.value}", violations == 0,
                            f"{violations} violations"))
    path = write_csv(out / "lemma1.csv", analysis.LEMMA1_HEADER, rows)
    total = sum(row[-1] for row in rows)
    return CommandResult(f"analyze lemma1: {total} violations in {len(rows)} settings", [path], checks)


def analyze_lemma2(settings: AnalyzeSettings, out: pathlib.Path) -> CommandResult:
    rows, checks = [], []
    for d, n, sigma, mode in itertools.product(
        settings.d, settings.n, settings.sigma, settings.weights_mode
    ):
        estimate = analysis.lemma2_error(_trial_config(settings, d, n, mode), NoiseSpec(sigma))
        rows.append((
            d, n, sigma, mode.value, estimate.empirical, estimate.theoretical,
            estimate.rel_error, estimate.n_trials,
        ))
        name = f"lemma2 d={d} n={n} sigma={sigma} {mode.value}"
        if sigma == 0:
            checks.append(Check(name, estimate.empirical == 0.0, f"{estimate.empirical}"))
        else:
            checks.append(_check_within(
                name, estimate.empirical, estimate.theoretical, constants.LEMMA2_TOLERANCE
            ))
    path = write_csv(out / "lemma2.csv", analysis.LEMMA2_HEADER, rows)
    worst = max((row[6] for row in rows), default=0.0)
    return CommandResult(f"analyze lemma2: worst rel error {worst:.4f}", [path], checks)


def snr_checks(sweep: analysis.SNRSweep) -> list[Check]:
    checks = []
    for d, crossing in sweep.crossings.items():
        if math.isnan(crossing):
            logger.warning("SNR curve for d=%d does not cross 1 inside the sigma grid", d)
            continue
        checks.append(_check_within(f"snr crossing d={d}", crossing, 1.0, constants.CROSSING_TOLERANCE))
    spread = sweep.max_spread()
    checks.append(Check("snr curves coincide across d", spread < constants.CROSSING_TOLERANCE,
                        f"max relative spread {spread:.4f}"))
    return checks


def analyze_snr(settings: AnalyzeSettings, out: pathlib.Path) -> CommandResult:
    cfg = _trial_config(settings, settings.d[0], settings.n[0], settings.weights_mode[0])
    sweep = analysis.snr_sweep(settings.d, settings.sigma, cfg)
    path = write_csv(
        out / "snr_vs_sigma.csv",
        analysis.SNR_VS_SIGMA_HEADER,
        [dataclasses.astuple(row) for row in sweep.rows],
    )
    crossings = ", ".join(f"d={d}: {value:.4f}" for d, value in sweep.crossings.items())
    return CommandResult(f"analyze snr: crossings {crossings}", [path], snr_checks(sweep))


def gamma_checks(
    gamma: dict[tuple[int, float], analysis.GammaEstimate],
    mode: WeightsMode,
) -> list[Check]:
    checks = []
    for (d, shift), estimate in sorted(gamma.items()):
        checks.append(_check_within(
            f"gamma general form d={d} shift={shift}", estimate.empirical,
            estimate.general_theoretical, constants.GAMMA_TOLERANCE,
        ))
        if mode is WeightsMode.PEAKED:
            checks.append(_check_within(
                f"gamma d={d} shift={shift}", estimate.empirical,
                estimate.theoretical, constants.GAMMA_TOLERANCE,
            ))
    d_values = sorted({d for d, _ in gamma})
    if mode is WeightsMode.PEAKED and len(d_values) > 1:
        for shift in sorted({shift for _, shift in gamma}):
            slope, intercept = analysis.affine_fit(
                d_values, [gamma[(d, shift)].empirical for d in d_values]
            )
            checks.append(Check(
                f"gamma slope shift={shift}", abs(slope - 2.0) < 0.1, f"slope {slope:.4f}"
            ))
            allowed = constants.GAMMA_TOLERANCE * max(shift, 2.0 * d_values[0])
            checks.append(Check(
                f"gamma intercept shift={shift}", abs(intercept - shift) < allowed,
                f"intercept {intercept:.4f} vs {shift}",
            ))
    return checks


def misaligned_snr_checks(
    misaligned: dict[tuple[int, float], analysis.SNREstimate],
    signal_mean_sq: float,
) -> list[Check]:
    checks = []
    d_values = sorted({d for d, _ in misaligned})
    for shift in sorted({shift for _, shift in misaligned}):
        if len(d_values) < 2 or shift >= 2 * signal_mean_sq:
            continue
        checks.append(_strictly_decreasing(
            f"misaligned snr decreasing in d, shift={shift}",
            [misaligned[(d, shift)].empirical for d in d_values],
        ))
    return checks


def analyze_gamma(settings: AnalyzeSettings, out: pathlib.Path) -> CommandResult:
    mode = settings.weights_mode[0]
    gamma, misaligned = {}, {}
    for d, shift in itertools.product(settings.d, settings.mean_shift_sq):
        cfg = _trial_config(settings, d, settings.n[0], mode)
        mis = MisalignmentSpec.from_norms(d, settings.signal_mean_sq, shift)
        gamma[(d, shift)] = analysis.gamma_estimate(cfg, mis)
        misaligned[(d, shift)] = analysis.misaligned_snr(cfg, mis)
    paths = [
        write_csv(
            out / "gamma_vs_d.csv",
            analysis.GAMMA_VS_D_HEADER,
            [
                (d, shift, est.empirical, est.theoretical, est.n_trials)
                for (d, shift), est in gamma.items()
            ],
        ),
        write_csv(
            out / "snr_vs_d_misaligned.csv",
            analysis.SNR_VS_D_HEADER,
            [(d, shift, est.empirical, est.n_trials) for (d, shift), est in misaligned.items()],
        ),
    ]
    checks = gamma_checks(gamma, mode) + misaligned_snr_checks(misaligned, settings.signal_mean_sq)
    worst = max(est.rel_error for est in gamma.values())
    return CommandResult(f"analyze gamma: worst headline rel error {worst:.4f}", paths, checks)


def analyze_mha(settings: AnalyzeSettings, out: pathlib.Path) -> CommandResult:
    rows, checks = [], []
    for d, heads, sigma, mode, shift in itertools.product(
        settings.d, settings.heads, settings.sigma, settings.weights_mode,
        settings.mean_shift_sq,
    ):
        cfg = _trial_config(settings, d, settings.n[0], mode, heads=heads)
        result = analysis.mha_variants(
            cfg, NoiseSpec(sigma), MisalignmentSpec.from_norms(d, 0.0, shift)
        )
        for quantity, estimate in (
            ("error", result.error), ("snr", result.snr), ("gamma", result.gamma)
        ):
            rows.append((
                quantity, d, heads, estimate.empirical, estimate.theoretical,
                estimate.rel_error, estimate.n_trials,
            ))
        label = f"d={d} H={heads} sigma={sigma} {mode.value} shift={shift}"
        if sigma > 0:
            checks.append(_check_within(
                f"mha error {label}", result.error.empirical,
                result.error.theoretical, constants.LEMMA2_TOLERANCE,
            ))
            checks.append(_check_within(
                f"mha snr {label}", result.snr.empirical,
                result.snr.theoretical, constants.LEMMA2_TOLERANCE,
            ))
        checks.append(_check_within(
            f"mha gamma general form {label}", result.gamma.empirical,
            result.gamma.general_theoretical, constants.GAMMA_TOLERANCE,
        ))
        if mode is WeightsMode.PEAKED:
            checks.append(_check_within(
                f"mha gamma {label}", result.gamma.empirical,
                result.gamma.theoretical, constants.GAMMA_TOLERANCE,
            ))
    path = write_csv(out / "mha.csv", analysis.MHA_HEADER, rows)
    return CommandResult(f"analyze mha: {len(rows)} estimates", [path], checks)


ANALYZERS = {
    "lemma1": analyze_lemma1,
    "lemma2": analyze_lemma2,
    "snr": analyze_snr,
    "gamma": analyze_gamma,
    "mha": analyze_mha,
}


def cmd_analyze(args: argparse.Namespace) -> CommandResult:
    settings = resolve(AnalyzeSettings, args.config, {
        "kind": args.kind,
        "d": args.d,
        "n": args.n,
        "sigma": args.sigma,
        "trials": args.trials,
        "seed": args.seed,
        "weights_mode": args.weights_mode,
        "heads": args.heads,
        "mean_shift_sq": args.mean_shift_sq,
        "signal_mean_sq": args.signal_mean_sq,
        "input_distribution": args.input_distribution,
    })
    out = _prepare_output(args, f"analyze-{settings.kind}")
    result = ANALYZERS[settings.kind](settings, out)
    result.outputs.append(write_resolved(settings, out))
    result.summary += f" (trials={settings.trials}, seed={settings.seed}) -> {out}"
    return result


def cmd_gen(args: argparse.Namespace) -> CommandResult:
    settings = resolve(GenSettings, args.config, {
        "task": args.task, "n_train": args.n_train, "n_test": args.n_test, "seed": args.seed,
    })
    out = _prepare_output(args, f"data-{settings.task.value}")
    dataset = Dataset.generate(
        DatasetSpec(settings.task, settings.seed, settings.n_train, settings.n_test)
    )
    paths = save_dataset(dataset, out) + [write_resolved(settings, out)]
    return CommandResult(
        f"gen {settings.task.value}: {len(dataset.train)} train / {len(dataset.test)} test "
        f"(seed={settings.seed}) -> {out}",
        paths,
    )


def _load_data(directory: str, task: Task) -> Dataset:
    if not directory:
        raise UsageError("No dataset directory given; pass --data")
    try:
        return load_dataset(pathlib.Path(directory), task)
    except FileNotFoundError as ex:
        raise UsageError(f"Dataset not found: {ex.filename}") from None


def model_spec(settings: TrainSettings) -> ModelSpec:
    sizes = dict(PROFILES[settings.profile])
    for key in ("n_layers", "n_heads", "d_model"):
        if getattr(settings, key) is not None:
            sizes[key] = getattr(settings, key)
    try:
        return ModelSpec(variant=settings.variant, task=settings.task, **sizes)
    except ValueError as ex:
        raise UsageError(str(ex)) from None


def train_config(settings: TrainSettings) -> TrainConfig:
    return TrainConfig(
        optimizer=settings.optimizer,
        lr=settings.lr,
        epochs=settings.epochs or PROFILE_EPOCHS[settings.profile],
        batch_size=settings.batch_size,
        seed=settings.seed,
        weight_decay=settings.weight_decay,
    )


def cmd_train(args: argparse.Namespace) -> CommandResult:
    settings = resolve(TrainSettings, args.config, {
        "variant": args.variant,
        "task": args.task,
        "data": args.data,
        "profile": args.profile,
        "n_layers": args.layers,
        "n_heads": args.heads,
        "d_model": args.d_model,
        "optimizer": args.optimizer,
        "lr": args.lr,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "weight_decay": args.weight_decay,
        "seed": args.seed,
    })
    dataset = _load_data(settings.data, settings.task)
    spec = model_spec(settings)
    out = _prepare_output(args, f"train-{settings.task.value}-{settings.variant.value}")
    model = build_model(spec, seed=settings.seed)
    log = train(model, dataset, train_config(settings))
    paths = [
        log.write_csv(out / "train_log.csv"),
        save_checkpoint(model, out / "model.ckpt"),
        write_resolved(settings, out),
    ]
    return CommandResult(
        f"train {spec.variant.value} on {spec.task.value}: final test accuracy "
        f"{log.final.test_accuracy:.4f} after {len(log.rows)} epochs "
        f"(seed={settings.seed}) -> {out}",
        paths,
    )


def write_bias_maps(maps, path: pathlib.Path) -> pathlib.Path:
    layers, heads, rows, cols = maps.shape
    return write_csv(
        path,
        BIAS_MAPS_HEADER,
        [
            (layer, head, i, j, maps[layer, head, i, j])
            for layer in range(layers)
            for head in range(heads)
            for i in range(rows)
            for j in range(cols)
        ],
    )


def cmd_eval(args: argparse.Namespace) -> CommandResult:
    settings = resolve(EvalSettings, args.config, {
        "checkpoint": args.checkpoint, "data": args.data,
        "bias_maps": True if args.bias_maps else None,
    })
    if not settings.checkpoint:
        raise UsageError("No checkpoint given")
    try:
        model = load_checkpoint(settings.checkpoint)
    except FileNotFoundError:
        raise UsageError(f"Checkpoint not found: {settings.checkpoint}") from None
    except CheckpointFormatError as ex:
        raise UsageError(f"Corrupt checkpoint: {ex}") from None
    except OSError as ex:
        raise UsageError(f"Cannot read checkpoint {settings.checkpoint}: {ex}") from None
    if settings.bias_maps and model.spec.variant is not Variant.INDIRECT:
        raise UsageError(f"--bias-maps needs an indirect checkpoint, got {model.spec.variant.value}")
    dataset = _load_data(settings.data, model.spec.task)
    out = _prepare_output(args, "eval")
    metrics = evaluate(model, dataset.test)
    metrics_path = atomic_write_text(
        out / "metrics.json",
        json.dumps(apischema.serialize(type(metrics), metrics), indent=2, sort_keys=True) + "\n",
    )
    paths = [metrics_path, write_resolved(settings, out)]
    if settings.bias_maps:
        batch = collate(model.spec.variant, dataset.test[:EVAL_BATCH_SIZE])
        paths.append(write_bias_maps(bias_maps(model, batch), out / "bias_maps.csv"))
    summary = f"eval {model.spec.variant.value} on {model.spec.task.value}: accuracy {metrics.accuracy:.4f}"
    if metrics.consistency_accuracy is not None:
        summary += f", consistency accuracy {metrics.consistency_accuracy:.4f}"
    return CommandResult(summary + f" over {metrics.n_instances} instances -> {out}", paths)


def write_manifest(out: pathlib.Path, figure: str, seed: int, paths: Sequence[pathlib.Path]) -> pathlib.Path:
    """List every output with the sha256 of its stable bytes (timings zeroed)."""
    entries = [
        ManifestEntry(path=str(path.relative_to(out)), sha256=file_digest(path))
        for path in sorted(paths)
    ]
    manifest = Manifest(figure=figure, seed=seed, files=entries)
    return atomic_write_text(
        out / MANIFEST,
        json.dumps(apischema.serialize(Manifest, manifest), indent=2, sort_keys=True) + "\n",
    )


def repro_fig1(settings: ReproSettings, out: pathlib.Path) -> CommandResult:
    figure = analysis.Figure1Config(seed=settings.seed, n_trials=settings.trials)
    result = analysis.figure1_emit(out, figure)
    checks = snr_checks(result.snr)
    checks += gamma_checks(result.gamma, figure.misaligned_weights_mode)
    checks += misaligned_snr_checks(result.misaligned, figure.signal_mean_sq)
    return CommandResult(f"repro fig1: {len(result.paths)} panels", list(result.paths), checks)


FIG2_SUMMARY_HEADER = ("task", "variant", "seed", "final_test_accuracy")


def fig2_checks(task: Task, finals: dict[tuple[Variant, int], float], seeds: Sequence[int]) -> list[Check]:
    checks = []
    for seed in seeds:
        indirect = finals[(Variant.INDIRECT, seed)]
        cross = finals[(Variant.CROSS, seed)]
        naive = finals[(Variant.NAIVE_MISALIGNED, seed)]
        checks.append(Check(
            f"fig2 {task.value} seed={seed} ordering", indirect >= cross >= naive,
            f"indirect {indirect:.4f}, cross {cross:.4f}, naive {naive:.4f}",
        ))
        checks.append(Check(
            f"fig2 {task.value} seed={seed} margin", indirect - naive >= FIG2_MARGIN,
            f"indirect - naive = {indirect - naive:.4f}",
        ))
    return checks


def repro_fig2(settings: ReproSettings, out: pathlib.Path) -> CommandResult:
    epochs = settings.epochs or PROFILE_EPOCHS[settings.profile]
    paths, checks, summary_rows = [], [], []
    for task in Task:
        dataset = Dataset.generate(DatasetSpec(task, seed=settings.seed))
        paths += save_dataset(dataset, out / task.value)
        jobs = [
            TrainJob(
                spec=ModelSpec(variant=variant, task=task, **PROFILES[settings.profile]),
                cfg=TrainConfig(epochs=epochs, seed=seed),
                dataset=dataset,
                model_seed=seed,
            )
            for variant in MODEL_VARIANTS
            for seed in settings.seeds
        ]
        finals = {}
        for result in run_jobs(jobs):
            variant, seed = result.job.spec.variant, result.job.cfg.seed
            finals[(variant, seed)] = result.log.final.test_accuracy
            summary_rows.append((task.value, variant.value, seed, result.log.final.test_accuracy))
            paths.append(result.log.write_csv(out / task.value / f"{variant.value}_seed{seed}.csv"))
        checks += fig2_checks(task, finals, settings.seeds)
    paths.append(write_csv(out / "fig2_summary.csv", FIG2_SUMMARY_HEADER, summary_rows))
    return CommandResult(
        f"repro fig2 ({settings.profile} profile, {epochs} epochs, seeds {settings.seeds})",
        paths, checks,
    )


def cmd_repro(args: argparse.Namespace) -> CommandResult:
    settings = resolve(ReproSettings, args.config, {
        "figure": args.figure, "seed": args.seed, "trials": args.trials,
        "profile": args.profile, "seeds": args.seeds, "epochs": args.epochs,
    })
    out = _prepare_output(args, f"repro-{settings.figure}")
    runner = repro_fig1 if settings.figure == "fig1" else repro_fig2
    result = runner(settings, out)
    result.outputs.append(write_resolved(settings, out))
    result.outputs.append(write_manifest(out, settings.figure, settings.seed, result.outputs))
    result.summary += f" (seed={settings.seed}) -> {out}"
    return result


def _prepare_output(args: argparse.Namespace, default_name: str) -> pathlib.Path:
    out = pathlib.Path(args.out) if args.out else constants.OUTPUT_ROOT / default_name
    try:
        return check_output_dir(out, args.overwrite)
    except FileExistsError as ex:
        raise UsageError(str(ex)) from None


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", help="Output directory (default: $MISALIGNMENT_LAB_OUTPUT/<command>)")
    parser.add_argument("--overwrite", action="store_true", help="Reuse a non-empty output directory")
    parser.add_argument("--config", help="INI file with per-command sections")
    parser.add_argument(
        "--log-level",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
        type=str.upper,
        help="Logging level (default: INFO, or DEBUG when VERBOSE=y)",
    )


def _build_arg_parser(parser: Optional[argparse.ArgumentParser] = None) -> argparse.ArgumentParser:
    if parser is None:
        parser = argparse.ArgumentParser()

    parser.description = DESCRIPTION
    parser.formatter_class = argparse.RawTextHelpFormatter
    subparsers = parser.add_subparsers(dest="command", required=True)

    analyze = subparsers.add_parser("analyze", help="Monte Carlo noise analysis")
    analyze.add_argument("kind", nargs="?", choices=tuple(ANALYZERS))
    analyze.add_argument("--d", help="Dimensions, e.g. 32,64,128")
    analyze.add_argument("--n", help="Sequence lengths")
    analyze.add_argument("--sigma", help="Noise scales, e.g. 0.1:2.0:0.1")
    analyze.add_argument("--trials", type=int)
    analyze.add_argument("--seed", type=int)
    analyze.add_argument("--weights-mode", dest="weights_mode",
                         help="Comma list of: " + ", ".join(mode.value for mode in WeightsMode))
    analyze.add_argument("--heads", help="Head counts (mha)")
    analyze.add_argument("--mean-shift-sq", dest="mean_shift_sq", help="Squared mean shifts")
    analyze.add_argument("--signal-mean-sq", dest="signal_mean_sq", type=float)
    analyze.add_argument("--input-distribution", dest="input_distribution",
                         choices=tuple(dist.value for dist in analysis.InputDistribution))
    analyze.set_defaults(func=cmd_analyze)

    gen = subparsers.add_parser("gen", help="Generate a synthetic dataset")
    gen.add_argument("task", nargs="?", choices=tuple(task.value for task in Task))
    gen.add_argument("--n-train", dest="n_train", type=int)
    gen.add_argument("--n-test", dest="n_test", type=int)
    gen.add_argument("--seed", type=int)
    gen.set_defaults(func=cmd_gen)

    variants = tuple(variant.value for variant in MODEL_VARIANTS)
    train_parser = subparsers.add_parser("train", help="Train one model variant")
    train_parser.add_argument("variant", nargs="?", choices=variants)
    train_parser.add_argument("task", nargs="?", choices=tuple(task.value for task in Task))
    train_parser.add_argument("--data", help="Directory written by `gen`")
    train_parser.add_argument("--profile", choices=tuple(PROFILES))
    train_parser.add_argument("--layers", type=int)
    train_parser.add_argument("--heads", type=int)
    train_parser.add_argument("--d-model", dest="d_model", type=int)
    train_parser.add_argument("--optimizer", choices=("adam", "sgd"))
    train_parser.add_argument("--lr", type=float)
    train_parser.add_argument("--epochs", type=int)
    train_parser.add_argument("--batch-size", dest="batch_size", type=int)
    train_parser.add_argument("--weight-decay", dest="weight_decay", type=float)
    train_parser.add_argument("--seed", type=int)
    train_parser.set_defaults(func=cmd_train)

    eval_parser = subparsers.add_parser("eval", help="Evaluate a checkpoint on a dataset")
    eval_parser.add_argument("checkpoint", nargs="?")
    eval_parser.add_argument("data", nargs="?", help="Directory written by `gen`")
    eval_parser.add_argument("--bias-maps", dest="bias_maps", action="store_true",
                             help="Also write bias_maps.csv (indirect checkpoints)")
    eval_parser.set_defaults(func=cmd_eval)

    repro = subparsers.add_parser("repro", help="Reproduce a figure's data with a manifest")
    repro.add_argument("figure", nargs="?", choices=("fig1", "fig2"))
    repro.add_argument("--seed", type=int)
    repro.add_argument("--trials", type=int, help="Monte Carlo trials per point (fig1)")
    repro.add_argument("--profile", choices=tuple(PROFILES), help="Model size (fig2)")
    repro.add_argument("--seeds", help="Training seeds (fig2), e.g. 0,1,2")
    repro.add_argument("--epochs", type=int, help="Override the profile's epoch count (fig2)")
    repro.set_defaults(func=cmd_repro)

    for subparser in (analyze, gen, train_parser, eval_parser, repro):
        _add_common(subparser)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_arg_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as ex:
        return EXIT_USAGE if ex.code else EXIT_OK
    configure_logging(args.log_level)

    try:
        result = args.func(args)
    except (UsageError, DatasetFormatError) as ex:
        print(f"{parser.prog} {args.command}: error: {ex}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as ex:
        logger.error("Training diverged: %s", ex)
        return EXIT_FAILED

    for check in result.failures:
        logger.error("Check failed: %s: %s", check.name, check.detail)
    print(result.summary)
    if result.checks:
        print(f"{len(result.checks) - len(result.failures)}/{len(result.checks)} checks passed")
    return EXIT_FAILED if result.failures else EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
