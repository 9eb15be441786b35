#!/usr/bin/env python3
"""
Command-line entry point.

    python cli.py init-model --out runs/model.qpt
    python cli.py gen-calib --out runs/calib.qpt
    python cli.py calibrate --model runs/model.qpt --calib runs/calib.qpt --out-dir runs/w4a8
    python cli.py switch --artifact runs/w4a8/calibrated.qpt --uniform 6 --out runs/w6a6.qpt
    python cli.py eval --deployable runs/w6a6.qpt --data runs/calib.qpt --out-dir runs/eval
    python cli.py allocate --artifact ... --calib ... --avg-bits 3.0 --out-dir runs/alloc
    python cli.py ablate --model ... --calib ... --study lora --out runs/lora.csv
    python cli.py report --deployable ... --data ... --out-dir runs/report
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

import mb_clora as clora
import mb_tome as tome
import mixed_precision as mp
import model_zoo as zoo
import recon_engine as engine
import tensor_core as tc
from config import get_settings
from errors import ArgumentError, ConfigError, InfeasibleBudgetError, ElastiqError

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
MANIFEST_VERSION = 1


def configure_logging(level: str = "INFO"):
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(getattr(logging, str(level).upper(), logging.INFO))


def _sha256(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def _write_json(doc: Dict[str, Any], path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _parse_lambdas(text: Optional[str]):
    if text is None:
        return None
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError as e:
        raise ArgumentError(f"--tome-lambdas must be three numbers, got {text!r}") from e
    if len(values) != 3:
        raise ArgumentError(f"--tome-lambdas must be three numbers, got {text!r}")
    return values


def _load_calibrated(path: str) -> engine.CalibratedModel:
    return engine.CalibratedModel.from_artifact(zoo.load(path))


def _load_deployable(args) -> engine.DeployableModel:
    """A deployable from --deployable, or configured from --artifact and --uniform."""
    if getattr(args, "deployable", None):
        return engine.DeployableModel.from_artifact(zoo.load(args.deployable))
    if getattr(args, "artifact", None) is None:
        raise ArgumentError("pass --deployable or --artifact")
    calibrated = _load_calibrated(args.artifact)
    bits = getattr(args, "uniform", None)
    return engine.configure(calibrated, engine.uniform_config(calibrated, bits))


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------


def cmd_init_model(args) -> int:
    model = zoo.init_model(
        seed=args.seed, blocks=args.blocks, dim=args.dim, heads=args.heads, mlp_ratio=args.mlp_ratio, tokens=args.tokens
    )
    zoo.save(zoo.model_artifact(model), args.out)
    print(f"Model written to {args.out}")
    return 0


def cmd_gen_calib(args) -> int:
    calib = zoo.gen_calib(args.seed, args.n, args.tokens, args.dim)
    zoo.save(zoo.calib_artifact(calib), args.out)
    print(f"Calibration set written to {args.out} ({calib.n} sequences)")
    return 0


def _calib_config(args, base: Optional[engine.CalibConfig] = None) -> engine.CalibConfig:
    overrides = dict(
        steps=args.steps,
        lr_adapter=args.lr_adapter,
        lr_clip=args.lr_clip,
        batch_size=args.batch_size,
        seed=args.seed,
        loss=args.loss,
        percentile=args.percentile,
    )
    if args.sharing is not None:
        overrides["sharing"] = clora.SharingMode.parse(args.sharing)
    if args.ranks is not None:
        overrides["ranks"] = clora.RankPartition.parse(args.ranks)
    if args.weight_only:
        overrides["weight_only"] = True
    if args.no_clip:
        overrides["learn_clips"] = False
    if args.no_tome:
        overrides["use_tome"] = False
    if args.no_progress:
        overrides["progress"] = False
    if args.tome_case is not None or args.tome_p is not None or args.tome_lambdas is not None:
        current = base.merge_policy if base else tome.MergePolicy()
        overrides["merge_policy"] = tome.MergePolicy(
            case=args.tome_case if args.tome_case is not None else current.case,
            p=args.tome_p if args.tome_p is not None else current.p,
            lambdas=_parse_lambdas(args.tome_lambdas) or current.lambdas,
        )
    if base is not None:
        values = base.to_dict()
        values["merge_policy"] = base.merge_policy
        values["ranks"] = base.ranks
        values.update({k: v for k, v in overrides.items() if v is not None})
        return engine.CalibConfig(**values)
    return engine.CalibConfig.from_settings(get_settings(), **overrides)


def _partition(args, weight_only: bool, manifest: Optional[Dict[str, Any]] = None) -> engine.TierPartition:
    if args.tiers:
        partition = engine.parse_tiers(args.tiers)
        if args.bits and set(engine.parse_bits(args.bits)) != set(partition.bits):
            raise ArgumentError(f"--tiers {args.tiers} does not cover --bits {args.bits}")
        return partition
    if args.bits:
        return engine.default_partition(engine.parse_bits(args.bits))
    if manifest is not None:
        return engine.TierPartition.from_dict(manifest["tiers"])
    return engine.default_partition(range(2, 9) if weight_only else range(4, 9))


def cmd_calibrate(args) -> int:
    manifest = None
    base = None
    if args.manifest:
        try:
            with open(args.manifest, "r") as f:
                manifest = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read run manifest {args.manifest}: {e}") from e
        base = engine.CalibConfig.from_dict(manifest["config"])
    model_path = args.model or (manifest and manifest["inputs"]["model"])
    calib_path = args.calib or (manifest and manifest["inputs"]["calib"])
    if not model_path or not calib_path:
        raise ArgumentError("calibrate needs --model and --calib (or --manifest)")

    config = _calib_config(args, base)
    partition = _partition(args, config.weight_only, manifest)
    model = zoo.load_model(model_path)
    calib = zoo.load_calib(calib_path)

    logger.info("Calibrating over bits %s with tiers %s", list(partition.bits), partition.describe())
    calibrated = engine.calibrate_model(model, calib, partition, config)

    out_dir = args.out_dir or os.path.join(get_settings().output_dir, "calibrated")
    artifact_path = zoo.save(calibrated.to_artifact(), os.path.join(out_dir, "calibrated.qpt"))
    log_path = engine.write_history(calibrated.history, os.path.join(out_dir, "calib_log.jsonl"))
    run_manifest = {
        "manifest_version": MANIFEST_VERSION,
        "format_version": zoo.FORMAT_VERSION,
        "command": "calibrate",
        "inputs": {
            "model": model_path,
            "model_sha256": _sha256(model_path),
            "calib": calib_path,
            "calib_sha256": _sha256(calib_path),
        },
        "bits": list(partition.bits),
        "tiers": partition.to_dict(),
        "config": config.to_dict(),
        "outputs": {"artifact": artifact_path, "log": log_path},
    }
    _write_json(run_manifest, os.path.join(out_dir, "run_manifest.json"))
    print(f"Calibrated artifact written to {artifact_path}")
    return 0


def cmd_switch(args) -> int:
    calibrated = _load_calibrated(args.artifact)
    if args.config:
        cfg = engine.BitConfig.load(args.config)
    elif args.uniform is not None:
        cfg = engine.uniform_config(calibrated, args.uniform)
    else:
        raise ArgumentError("switch needs --uniform or --config")
    steps_before, writes_before = engine.OPTIMIZER_STEPS, tc.PARAMETER_WRITES
    deployable = engine.configure(calibrated, cfg)
    steps = engine.OPTIMIZER_STEPS - steps_before
    writes = tc.PARAMETER_WRITES - writes_before
    if args.out:
        zoo.save(deployable.to_artifact(), args.out)
        print(f"Deployable written to {args.out}")
    print(f"Average weight bits: {cfg.average_weight_bits():.3f}")
    print(f"optimizer steps taken: {steps}")
    print(f"parameter writes: {writes}")
    return 0


def cmd_eval(args) -> int:
    deployable = _load_deployable(args)
    data = zoo.load_calib(args.data).data
    report = engine.evaluate(deployable, data)
    out_dir = args.out_dir or os.path.join(get_settings().output_dir, "eval")
    paths = report.save(out_dir)
    print(report.summary())
    print(f"Metrics written to {paths['metrics']}")
    return 0


def cmd_ablate(args) -> int:
    config = _calib_config(args)
    partition = _partition(args, config.weight_only)
    model = zoo.load_model(args.model)
    calib = zoo.load_calib(args.calib)
    frame = engine.run_ablation(model, calib, partition, config, args.study)
    out = args.out or os.path.join(get_settings().output_dir, f"ablation_{args.study}.csv")
    directory = os.path.dirname(out)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame.to_csv(out, index=False)
    from report_plots import ReportPlotter

    figure = ReportPlotter(directory or ".").plot_bit_errors(
        frame, os.path.splitext(os.path.basename(out))[0] + ".png", partition
    )
    print(frame.to_string(index=False))
    print(f"Ablation table written to {out}")
    print(f"Figure bit_errors: {figure}")
    return 0


def cmd_allocate(args) -> int:
    calibrated = _load_calibrated(args.artifact)
    calib = zoo.load_calib(args.calib)
    budget = mp.Budget(args.avg_bits, len(calibrated.layer_names()))
    if args.avg_bits < min(calibrated.bits):
        # fail before the sensitivity sweep
        raise InfeasibleBudgetError(
            f"average-bit target {args.avg_bits} is below the smallest bit-width {min(calibrated.bits)}"
        )
    table = mp.measure_table(calibrated, calib)
    allocation = mp.allocate_dp(table, budget)
    out_dir = args.out_dir or os.path.join(get_settings().output_dir, "allocate")
    table_path = table.save_csv(os.path.join(out_dir, "sensitivity.csv"))
    cfg_path = allocation.to_bit_config().save(os.path.join(out_dir, "bit_config.json"))
    print(f"Achieved average weight bits: {allocation.achieved_avg:.3f} (target {args.avg_bits})")
    print(f"Total sensitivity: {allocation.total:.6g}")
    print(f"Bit configuration written to {cfg_path}; sensitivities to {table_path}")
    return 0


def cmd_report(args) -> int:
    from report_plots import ReportPlotter

    deployable = _load_deployable(args)
    data = zoo.load_calib(args.data).data
    report = engine.evaluate(deployable, data)
    out_dir = args.out_dir or os.path.join(get_settings().output_dir, "report")
    csv_path = tome.save_divergence_report(report.token_ks, os.path.join(out_dir, "token_ks.csv"))
    table = mp.SensitivityTable.from_csv(args.sensitivity) if args.sensitivity else None
    paths = ReportPlotter(out_dir).generate_all(report.token_ks, table)
    print(f"Token K-S report written to {csv_path}")
    for name, path in paths.items():
        print(f"Figure {name}: {path}")
    return 0


# ----------------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------------


def _add_calib_flags(p: argparse.ArgumentParser):
    p.add_argument("--bits", help="bit set, e.g. 4,5,6,7,8 or 2-8")
    p.add_argument("--tiers", help="low/mid/high tiers, e.g. 4/5,6/7,8")
    p.add_argument("--ranks", help="rank partition r_h,r_m,r_l (default 4,4,4)")
    p.add_argument("--sharing", choices=[m.value for m in clora.SharingMode])
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-adapter", type=float)
    p.add_argument("--lr-clip", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--percentile", type=float)
    p.add_argument("--loss", choices=list(engine.LOSSES))
    p.add_argument("--tome-case", choices=[c.value for c in tome.MergeCase])
    p.add_argument("--tome-p", type=float)
    p.add_argument("--tome-lambdas", help="three fusion weights, e.g. 0.5,0.3,0.2")
    p.add_argument("--weight-only", action="store_true", help="keep activations in full precision")
    p.add_argument("--no-clip", action="store_true", help="freeze clipping at alpha = beta = 1")
    p.add_argument("--no-tome", action="store_true", help="feed each block its full-precision input")
    p.add_argument("--no-progress", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elastiq", description="Elastic post-training quantization at desk scale")
    parser.add_argument("--log-level", default=None, help="logging level (default from ELASTIQ_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-model", help="write a seeded toy model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blocks", type=int, default=zoo.DEFAULT_BLOCKS)
    p.add_argument("--dim", type=int, default=zoo.DEFAULT_DIM)
    p.add_argument("--heads", type=int, default=zoo.DEFAULT_HEADS)
    p.add_argument("--mlp-ratio", type=int, default=zoo.DEFAULT_MLP_RATIO)
    p.add_argument("--tokens", type=int, default=zoo.DEFAULT_TOKENS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("gen-calib", help="write a seeded synthetic calibration set")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=zoo.DEFAULT_SEQUENCES)
    p.add_argument("--tokens", type=int, default=zoo.DEFAULT_TOKENS)
    p.add_argument("--dim", type=int, default=zoo.DEFAULT_DIM)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_calib)

    p = sub.add_parser("calibrate", help="run elastic block-wise calibration")
    p.add_argument("--model")
    p.add_argument("--calib")
    p.add_argument("--manifest", help="re-run from a previous run_manifest.json")
    p.add_argument("--out-dir")
    _add_calib_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("switch", help="configure a calibrated artifact without optimization")
    p.add_argument("--artifact", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--uniform", type=int)
    group.add_argument("--config", help="BitConfig JSON, e.g. from allocate")
    p.add_argument("--out")
    p.set_defaults(func=cmd_switch)

    for name, func, helptext in (
        ("eval", cmd_eval, "evaluate a deployable against full precision"),
        ("report", cmd_report, "token K-S report and figures"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--deployable")
        p.add_argument("--artifact", help="calibrated artifact, configured with --uniform")
        p.add_argument("--uniform", type=int)
        p.add_argument("--data", required=True, help="calibration-set artifact to evaluate on")
        p.add_argument("--out-dir")
        if name == "report":
            p.add_argument("--sensitivity", help="SensitivityTable CSV for the heat-map")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="run a matched ablation study")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--study", required=True, choices=list(engine.STUDIES))
    p.add_argument("--out")
    _add_calib_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("allocate", help="KL sensitivity plus DP mixed-precision allocation")
    p.add_argument("--artifact", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--avg-bits", type=float, required=True)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_allocate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        settings = get_settings()
        configure_logging(args.log_level or settings.log_level)
        return args.func(args)
    except ArgumentError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ElastiqError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
