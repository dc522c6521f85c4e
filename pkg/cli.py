"""
Command-line entry point of the bias-correction toolkit.

Every subcommand writes its machine-readable outputs into ``--output-dir``,
prints a short summary and records a ``run.json`` holding the resolved
configuration, the seed and SHA-256 hashes of every input and output file.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

import env_loader  # noqa: F401  loads .env before configuration defaults are read
from audit import write_matrix_csv
from baselines import fit_gridwise_linear, gridwise_handle
from climnorm import Climatology, load_climatology, normalizer_from_record, save_climatology
from core import RunConfig, parse_years
from exceptions import AcceptanceError, ConfigurationError, InternalError, ResaError
from facade import BiasCorrectionToolkit, ExperimentData
from gridio import forecast_series_by_lead, read_gridts, resolve_path, write_gridts
from interfaces import INormalizer
from metrics import improvement_table, mean_rmse, skill_frame, write_skill_csv
from model import ReSAConvLSTM, load_checkpoint, save_checkpoint
from processing import CorrectionEngine
from train import write_loss_curve

logger = logging.getLogger("resa")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
RUN_RECORD = "run.json"


@dataclass
class CommandOutcome:
    summary: Dict[str, Any]
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    failure: Optional[str] = None


# ---------------------------------------------------------------------------
# helpers

def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _builtin(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def write_json(data: Dict[str, Any], path: str) -> str:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_builtin)
        f.write("\n")
    return path


def write_run_record(config: RunConfig, outcome: CommandOutcome, path: str) -> str:
    record = {
        "subcommand": config.subcommand,
        "config": config.to_dict(),
        "seed": config.seed,
        "inputs": {p: sha256_file(p) for p in sorted(set(outcome.inputs))},
        "outputs": {p: sha256_file(p) for p in sorted(set(outcome.outputs))},
    }
    return write_json(record, path)


def configure_logging(level: Optional[str]) -> None:
    level = (level or os.environ.get("RESA_LOG_LEVEL", "INFO")).upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        raise ConfigurationError(f"Unknown log level {level!r}")
    logging.basicConfig(level=getattr(logging, level), format=LOG_FORMAT, stream=sys.stderr)


def _out(config: RunConfig, name: str) -> str:
    return os.path.join(config.output_dir, name)


def _manifest_inputs(data: ExperimentData, manifest_path: str) -> List[str]:
    return [manifest_path] + [resolve_path(data.manifest, e) for e in data.manifest.files
                              if e.variable == data.variable]


def _climatology_path(config: RunConfig, directory: str, variable: str) -> str:
    return config.climatology or os.path.join(directory, f"climatology_{variable}.gtcl")


def _fit_normalizer(toolkit: BiasCorrectionToolkit, data: ExperimentData,
                    config: RunConfig) -> Tuple[INormalizer, Optional[Climatology], List[str]]:
    """Fit the configured normalizer; a dynamic one also writes its climatology"""
    if config.normalization == "static":
        return toolkit.make_normalizer(data, "static"), None, []
    clim = toolkit.fit_climatology(data)
    path = _out(config, f"climatology_{data.variable}.gtcl")
    save_climatology(clim, path)
    return toolkit.make_normalizer(data, "dynamic", clim), clim, [path]


def _restore_model(config: RunConfig, checkpoint: str) -> Tuple[ReSAConvLSTM, INormalizer, List[str]]:
    """Load a checkpoint together with the normalizer it was trained with"""
    state = load_checkpoint(checkpoint)
    record = state.metadata.get("normalizer") or {"mode": state.normalization}
    inputs = [checkpoint]
    clim = None
    if record.get("mode") == "dynamic":
        variable = state.metadata.get("variable", "")
        path = _climatology_path(config, os.path.dirname(os.path.abspath(checkpoint)), variable)
        clim = load_climatology(path)
        inputs.append(path)
    return ReSAConvLSTM.from_state(state), normalizer_from_record(record, clim), inputs


def _checkpoint_variable(checkpoint: Optional[str]) -> Optional[str]:
    if not checkpoint:
        return None
    return load_checkpoint(checkpoint).metadata.get("variable") or None


def _model_id(checkpoint: str) -> str:
    return os.path.splitext(os.path.basename(checkpoint))[0]


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(toolkit: BiasCorrectionToolkit, args, config: RunConfig) -> CommandOutcome:
    manifest = toolkit.synthesize(config.output_dir, seed=config.seed)
    outputs = [resolve_path(manifest, e) for e in manifest.files] + [_out(config, "manifest.json")]
    return CommandOutcome({
        "variable": manifest.variables[0],
        "files": len(manifest.files),
        "years": f"{manifest.years[0]}-{manifest.years[-1]}",
        "test_years": list(manifest.test_years),
    }, outputs=outputs)


def cmd_climatology(toolkit: BiasCorrectionToolkit, args, config: RunConfig) -> CommandOutcome:
    data = toolkit.load(config.manifest, args.variable)
    clim = toolkit.fit_climatology(data)
    clim_path = _out(config, f"climatology_{data.variable}.gtcl")
    save_climatology(clim, clim_path)
    diagnostics = toolkit.normalization_diagnostics(data, clim)
    report_path = write_json(diagnostics, _out(config, f"normalization_report_{data.variable}.json"))
    return CommandOutcome({
        "climatology": clim.identifier,
        "fit_years": len(clim.fit_years),
        "static_gridpoint_mean_spread": diagnostics["gridpoint_mean_spread"]["static"],
        "dynamic_gridpoint_mean_spread": diagnostics["gridpoint_mean_spread"]["dynamic"],
    }, _manifest_inputs(data, config.manifest), [clim_path, report_path])


def cmd_train(toolkit: BiasCorrectionToolkit, args, config: RunConfig) -> CommandOutcome:
    data = toolkit.load(config.manifest, args.variable)
    normalizer, _, outputs = _fit_normalizer(toolkit, data, config)
    result = toolkit.train_model(data, normalizer)
    checkpoint = _out(config, f"model_{data.variable}.resa")
    save_checkpoint(result.model.state(), checkpoint)
    curve = _out(config, f"loss_curve_{data.variable}.csv")
    write_loss_curve(result, curve)
    summary = {
        "architecture": result.model.config.architecture.value,
        "normalization": normalizer.mode.value,
        "epochs_run": result.epochs_run,
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
        "final_train_loss": result.final_train_loss,
        "best_val_loss": result.best_val_loss,
    }
    summary.update(toolkit.parameter_report(result.model.config))
    return CommandOutcome(summary, _manifest_inputs(data, config.manifest), outputs + [checkpoint, curve])


def cmd_finetune(toolkit: BiasCorrectionToolkit, args, config: RunConfig) -> CommandOutcome:
    if not config.checkpoint:
        raise ConfigurationError("finetune needs --checkpoint")
    state = load_checkpoint(config.checkpoint)
    data = toolkit.load(config.manifest, args.variable)
    normalizer, _, outputs = _fit_normalizer(toolkit, data, config)
    result = toolkit.finetune_model(state, data, normalizer, args.target_loss)
    checkpoint = _out(config, f"model_{data.variable}_finetuned.resa")
    save_checkpoint(result.model.state(), checkpoint)
    curve = _out(config, f"loss_curve_{data.variable}_finetuned.csv")
    write_loss_curve(result, curve)
    return CommandOutcome({
        "pretrained_variable": state.metadata.get("variable", ""),
        "variable": data.variable,
        "frozen_groups": result.frozen_groups,
        "epochs_run": result.epochs_run,
        "epochs_to_target": result.epochs_to_target,
        "final_train_loss": result.final_train_loss,
        "best_val_loss": result.best_val_loss,
    }, _manifest_inputs(data, config.manifest) + [config.checkpoint], outputs + [checkpoint, curve])


def cmd_correct(toolkit: BiasCorrectionToolkit, args, config: RunConfig) -> CommandOutcome:
    if not config.checkpoint:
        raise ConfigurationError("correct needs --checkpoint")
    model, normalizer, inputs = _restore_model(config, config.checkpoint)
    engine = toolkit.engine_for(model, normalizer)
    outputs = []
    if args.forecast:
        # plugin mode: per-lead files of any forecast model, lead 1 first
        corrected = engine.correct_lead_series([read_gridts(p) for p in args.forecast])
        for path, series in zip(args.forecast, corrected):
            target = _out(config, f"corrected_{os.path.basename(path)}")
            write_gridts(series, target)
            outputs.append(target)
        return CommandOutcome({"mode": "plugin", "leads": len(corrected), "inits": corrected[0].n_times},
                              inputs + list(args.forecast), outputs)

    data = toolkit.load(config.manifest, args.variable or model.metadata.get("variable"))
    result = engine.correct_cases(data.test_cases)
    series = forecast_series_by_lead(result.cases, data.variable, np.stack(result.corrected))
    for lead, s in enumerate(series, start=1):
        target = _out(config, f"corrected_{data.variable}_lead{lead}.gts")
        write_gridts(s, target)
        outputs.append(target)
    return CommandOutcome({"mode": "test-years", "cases": len(result.cases), "leads": len(series),
                           "seconds": round(result.processing_time, 3)},
                          inputs + _manifest_inputs(data, config.manifest), outputs)


def cmd_evaluate(toolkit: BiasCorrectionToolkit, args, config: RunConfig) -> CommandOutcome:
    checkpoints = ([config.checkpoint] if config.checkpoint else []) + list(args.compare or [])
    data = toolkit.load(config.manifest, args.variable or _checkpoint_variable(checkpoints[0] if checkpoints else None))
    inputs = _manifest_inputs(data, config.manifest)
    engines = [toolkit.raw_engine(),
               CorrectionEngine(gridwise_handle(fit_gridwise_linear(data.train_cases)), None)]
    for checkpoint in checkpoints:
        model, normalizer, used = _restore_model(config, checkpoint)
        engines.append(toolkit.engine_for(model, normalizer, _model_id(checkpoint)))
        inputs.extend(used)

    clim = toolkit.fit_climatology(data)
    report = toolkit.evaluate(data, engines, clim)
    skill_path = _out(config, f"skill_{data.variable}.csv")
    write_skill_csv(report.records, skill_path)
    improvement_path = _out(config, f"improvement_{data.variable}.csv")
    improvement = improvement_table(report.records)
    improvement.to_csv(improvement_path, index=False)
    regions_path = write_json(report.region_bias, _out(config, f"region_bias_{data.variable}.json"))

    summary = {}
    for engine in engines:
        rows = improvement[improvement["model"] == engine.model_id]
        summary[engine.model_id] = {"mean_rmse": mean_rmse(report.records, engine.model_id),
                                    "mean_reduction_pct": float(rows["reduction_pct"].mean())}
    return CommandOutcome(summary, inputs, [skill_path, improvement_path, regions_path])


def cmd_ablate_norm(toolkit: BiasCorrectionToolkit, args, config: RunConfig) -> CommandOutcome:
    data = toolkit.load(config.manifest, args.variable)
    report = toolkit.ablate_norm(data)
    skill_path = _out(config, "ablate_norm_skill.csv")
    write_skill_csv(report.records, skill_path)
    summary_path = write_json(report.summary, _out(config, "ablate_norm.json"))
    return CommandOutcome(report.summary, _manifest_inputs(data, config.manifest), [skill_path, summary_path])


def cmd_ablate_leadtime(toolkit: BiasCorrectionToolkit, args, config: RunConfig) -> CommandOutcome:
    data = toolkit.load(config.manifest, args.variable)
    report = toolkit.ablate_leadtime(data, horizons=args.horizons)
    matrix_path = _out(config, "leadtime_matrix.csv")
    write_matrix_csv(report.matrices, matrix_path)
    summary_path = write_json(report.to_dict(), _out(config, "ablate_leadtime.json"))
    summary = {name: {"max_difference": inv.max_difference, "bound": inv.bound, "passed": inv.passed}
               for name, inv in report.invariance.items()}
    summary["noise_band"] = report.noise_band
    return CommandOutcome(summary, _manifest_inputs(data, config.manifest), [matrix_path, summary_path])


def cmd_ablate_arch(toolkit: BiasCorrectionToolkit, args, config: RunConfig) -> CommandOutcome:
    data = toolkit.load(config.manifest, args.variable)
    report = toolkit.ablate_arch(data, seeds=args.seeds)
    skill_path = _out(config, "ablate_arch_skill.csv")
    frame = skill_frame(report.records)
    frame.groupby("model", sort=False)[["rmse", "acc"]].mean().reset_index().to_csv(
        _out(config, "ablate_arch_summary.csv"), index=False)
    write_skill_csv(report.records, skill_path)
    summary_path = write_json(report.summary, _out(config, "ablate_arch.json"))
    return CommandOutcome(report.summary, _manifest_inputs(data, config.manifest),
                          [skill_path, _out(config, "ablate_arch_summary.csv"), summary_path])


def cmd_audit(toolkit: BiasCorrectionToolkit, args, config: RunConfig) -> CommandOutcome:
    model, normalizer, inputs = None, None, []
    if config.checkpoint:
        model, normalizer, inputs = _restore_model(config, config.checkpoint)
    data = toolkit.load(config.manifest, args.variable or (model.metadata.get("variable") if model else None))
    report = toolkit.audit(data, model, normalizer, baseline_epochs=args.baseline_epochs)
    path = write_json(report.to_dict(), _out(config, "audit.json"))
    summary = {model_id: h["verdict"] for model_id, h in report.handles.items()}
    summary["passed"] = report.passed
    failure = None
    if not report.passed:
        wrong = [m for m, h in report.handles.items() if not h["consistent"]]
        failure = f"Causality verdicts contradict the declared claims: {', '.join(wrong)}"
    return CommandOutcome(summary, inputs + _manifest_inputs(data, config.manifest), [path], failure)


def cmd_plotdata(toolkit: BiasCorrectionToolkit, args, config: RunConfig) -> CommandOutcome:
    engines, inputs, variable = [], [], args.variable
    if config.checkpoint:
        model, normalizer, inputs = _restore_model(config, config.checkpoint)
        engines.append(toolkit.engine_for(model, normalizer, _model_id(config.checkpoint)))
        variable = variable or model.metadata.get("variable")
    data = toolkit.load(config.manifest, variable)
    frames = toolkit.plot_frames(data, toolkit.fit_climatology(data), engines)
    outputs = []
    for name, frame in frames.items():
        path = _out(config, f"plot_{name}.csv")
        frame.to_csv(path, index=False)
        outputs.append(path)
    return CommandOutcome({"tables": sorted(frames), "rows": {k: len(v) for k, v in frames.items()}},
                          inputs + _manifest_inputs(data, config.manifest), outputs)


COMMANDS: Dict[str, Callable[..., CommandOutcome]] = {
    "synth": cmd_synth,
    "climatology": cmd_climatology,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "correct": cmd_correct,
    "evaluate": cmd_evaluate,
    "ablate-norm": cmd_ablate_norm,
    "ablate-leadtime": cmd_ablate_leadtime,
    "ablate-arch": cmd_ablate_arch,
    "audit": cmd_audit,
    "plotdata": cmd_plotdata,
}


# ---------------------------------------------------------------------------
# argument parsing

def _int_list(raw: str) -> List[int]:
    try:
        return [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (version 1)")
    common.add_argument("--output-dir", "-o", help="Directory for all outputs")
    common.add_argument("--manifest", help="Dataset manifest")
    common.add_argument("--checkpoint", help="Model checkpoint")
    common.add_argument("--climatology", help="Climatology file of the checkpoint's variable")
    common.add_argument("--variable", help="Variable to work on")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int,
                        help="Concurrent training runs in ablate-norm and ablate-arch (default RESA_THREADS or 1); "
                             "numpy's own BLAS threads follow OMP_NUM_THREADS")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR (default RESA_LOG_LEVEL or INFO)")
    common.add_argument("--normalization", choices=["static", "dynamic"])
    common.add_argument("--area-weighted", action="store_true", default=None,
                        help="Weight verification scores by cos(latitude)")
    common.add_argument("--smoothing-window", type=int)
    common.add_argument("--sigma-floor", type=float)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--learning-rate", type=float)
    common.add_argument("--patience", type=int)
    common.add_argument("--hidden", type=_int_list, help="Hidden channels per layer, e.g. 32,32")
    common.add_argument("--kernel-size", type=int)
    common.add_argument("--aux-channels", choices=["none", "latlon"])
    common.add_argument("--no-attention", action="store_true", default=None)
    common.add_argument("--no-residual", action="store_true", default=None)
    common.add_argument("--lon-wrap", action="store_true", default=None,
                        help="Periodic longitude padding in convolutions")

    parser = argparse.ArgumentParser(prog="resa", description="Forecast bias correction on gridded data")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="Generate synthetic truth and forecasts")
    synth.add_argument("--years", help="Years, e.g. 1981-2021 or 1990,1991")
    synth.add_argument("--grid-lat", type=int)
    synth.add_argument("--grid-lon", type=int)
    synth.add_argument("--leads", type=int)
    synth.add_argument("--init-stride", type=int, help="Days between initializations")
    synth.add_argument("--external", action="store_true", default=None,
                       help="Emit an external model with its own bias pattern")

    sub.add_parser("climatology", parents=[common], help="Fit the day-of-year climatology")
    sub.add_parser("train", parents=[common], help="Train a corrector")
    finetune = sub.add_parser("finetune", parents=[common], help="Fine-tune a checkpoint on another variable")
    finetune.add_argument("--freeze", help="Comma-separated groups to freeze: convlstm, attention, norm, head, all, none")
    finetune.add_argument("--target-loss", type=float)
    correct = sub.add_parser("correct", parents=[common], help="Correct test-year or external forecasts")
    correct.add_argument("--forecast", nargs="+", help="Per-lead forecast files, lead 1 first")
    evaluate = sub.add_parser("evaluate", parents=[common], help="Skill of raw, baseline and trained models")
    evaluate.add_argument("--compare", nargs="+", help="Additional checkpoints to score")
    sub.add_parser("ablate-norm", parents=[common], help="Static versus dynamic normalization")
    leadtime = sub.add_parser("ablate-leadtime", parents=[common], help="Lead-time invariance experiment")
    leadtime.add_argument("--horizons", type=_int_list, default=[3, 5, 7])
    arch = sub.add_parser("ablate-arch", parents=[common], help="Architecture variants")
    arch.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    audit = sub.add_parser("audit", parents=[common], help="Black-box temporal causality audit")
    audit.add_argument("--baseline-epochs", type=int, default=10)
    sub.add_parser("plotdata", parents=[common], help="Tidy CSV tables for plotting")
    return parser


def _set(section: Dict[str, Any], key: str, value) -> None:
    if value is not None:
        section[key] = value


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge the JSON config file with command-line flags; flags win"""
    data: Dict[str, Any] = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot read config file: {e}", {"path": args.config})
        if not isinstance(data, dict) or "version" not in data:
            raise ConfigurationError("Config file needs a top-level 'version' field", {"path": args.config})
    data["subcommand"] = args.command
    for key in ("manifest", "checkpoint", "climatology", "output_dir", "seed", "threads",
                "normalization", "area_weighted", "smoothing_window", "sigma_floor"):
        _set(data, key, getattr(args, key))

    train = dict(data.get("train", {}))
    for key in ("epochs", "batch_size", "learning_rate", "patience"):
        _set(train, key, getattr(args, key))
    if getattr(args, "freeze", None):
        train["freeze_spec"] = [g.strip() for g in args.freeze.split(",") if g.strip()]

    model = dict(data.get("model", {}))
    _set(model, "hidden_channels", args.hidden)
    _set(model, "kernel_size", args.kernel_size)
    _set(model, "aux_channels", args.aux_channels)
    _set(model, "lon_wrap", args.lon_wrap)
    if args.no_attention:
        model["use_attention"] = False
    if args.no_residual:
        model["use_residual"] = False

    synth = dict(data.get("synth", {}))
    if args.command == "synth":
        _set(synth, "variable", args.variable)
        _set(synth, "years", list(parse_years(args.years)) if args.years else None)
        _set(synth, "grid_lat", args.grid_lat)
        _set(synth, "grid_lon", args.grid_lon)
        _set(synth, "leads", args.leads)
        _set(synth, "init_stride_days", args.init_stride)
        _set(synth, "external", args.external)

    data.update({"train": train, "model": model, "synth": synth})
    return RunConfig.from_dict(data)


def print_summary(command: str, summary: Dict[str, Any], stream=None) -> None:
    stream = stream or sys.stdout
    print(f"{command}:", file=stream)
    for key, value in summary.items():
        if isinstance(value, dict):
            value = json.dumps(value, sort_keys=True, default=_builtin)
        print(f"  {key}: {value}", file=stream)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_logging(args.log_level)
        config = load_run_config(args)
        os.makedirs(config.output_dir, exist_ok=True)
        toolkit = BiasCorrectionToolkit(config)
        outcome = COMMANDS[args.command](toolkit, args, config)
        write_run_record(config, outcome, _out(config, RUN_RECORD))
        print_summary(args.command, outcome.summary)
        if outcome.failure:
            raise AcceptanceError(outcome.failure)
        return 0
    except ResaError as e:
        logger.error("%s: %s %s", type(e).__name__, e, e.context or "")
        return e.exit_code
    except Exception as e:
        logger.exception("Unexpected failure: %s", e)
        return InternalError.exit_code


if __name__ == "__main__":
    sys.exit(main())
