"""
DA-Cal Command Line
===================

Subcommands:
    generate   materialize the ShiftShapes benchmark
    train      run self-training (variant none) or DA-Cal (PH / BI)
    eval       score a checkpoint under a calibration mode
    plot       reliability diagrams and temperature-map panels
    ablate     run a sweep grid over several seeds

Exit codes: 0 success, 2 invalid config or input, 3 training fault, 4 I/O error.
"""

import argparse
import json
import sys
import traceback
from datetime import datetime
from pathlib import Path
from typing import List, Optional

from ablation import run_sweep
from config import ExperimentConfig, apply_overrides, configure_threads, load_config, output_root
from errors import ConfigurationError, DaCalError, TrainingFault
from evaluation import EVAL_DOMAINS, EVAL_MODES, evaluate
from experiment_runner import DomainAdaptationRunner
from plotting import plot_reliability_csv, plot_temperature_maps
from shift_shapes import Benchmark, load_benchmark, make_benchmark, save_benchmark

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_TRAINING_FAULT = 3
EXIT_IO = 4


def resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = apply_overrides(config, {"seed": args.seed})
    return config


def open_benchmark(path, config: Optional[ExperimentConfig] = None) -> Benchmark:
    benchmark = load_benchmark(path)
    if config is not None and benchmark.num_classes != config.dataset.num_classes:
        raise ConfigurationError(f"dataset has {benchmark.num_classes} classes, "
                                 f"config expects {config.dataset.num_classes}")
    return benchmark


def record_results(run_dir: Path, files: dict) -> None:
    """Append produced files to the run manifest, if the checkpoint lives in a run directory"""
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        return
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    reports = manifest.setdefault("results", {}).setdefault("reports", [])
    for path in files.values():
        if path not in reports:
            reports.append(path)
    manifest["updated"] = datetime.now().isoformat()
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)


def cmd_generate(args) -> int:
    config = resolve_config(args)
    out = Path(args.out) if args.out else output_root() / "dataset"
    print(f"🚀 Generating ShiftShapes benchmark ({config.dataset.preset}, seed {config.seed})")
    benchmark = make_benchmark(config.dataset, config.seed)
    save_benchmark(benchmark, out, force=args.force)
    total = sum(len(s) for s in benchmark.splits())
    print(f"✅ {total} images written to {out}")
    print(f"🔑 Fingerprint: {benchmark.fingerprint()}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_config(args)
    benchmark = open_benchmark(args.data or output_root() / "dataset", config)
    out = Path(args.out) if args.out else output_root() / f"{config.variant}_seed{config.seed}"
    runner = DomainAdaptationRunner(config, benchmark, out, verbose=True, log_every=args.log_every)
    summary = runner.run(resume=not (args.no_resume or args.force))

    print("\n✨ Training Summary:")
    print("=" * 40)
    for key, value in summary.items():
        print(f"  {key.replace('_', ' ').title()}: {value}")
    return EXIT_OK


def cmd_eval(args) -> int:
    benchmark = open_benchmark(args.data or output_root() / "dataset")
    checkpoints = [Path(p) for p in args.checkpoint]
    out = Path(args.out) if args.out else checkpoints[0].parent
    result = evaluate(checkpoints, benchmark, mode=args.mode, domain=args.domain, out_dir=out, verbose=True)
    record_results(checkpoints[0].parent, result.files)
    return EXIT_OK


def cmd_plot(args) -> int:
    if not args.reliability and not args.checkpoint:
        raise ConfigurationError("nothing to plot: give --reliability CSVs and/or --checkpoint")
    for csv_path in args.reliability or []:
        stem = Path(args.out) / (Path(csv_path).stem + "_diagram") if args.out else None
        files = plot_reliability_csv(csv_path, stem)
        print(f"💾 Saved: {', '.join(files.values())}")
    if args.checkpoint:
        benchmark = open_benchmark(args.data or output_root() / "dataset")
        checkpoint = Path(args.checkpoint)
        stem = Path(args.out or checkpoint.parent) / "temperature_maps"
        files = plot_temperature_maps(checkpoint, benchmark, args.indices, stem)
        print(f"💾 Saved: {', '.join(files.values())}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    out = Path(args.out) if args.out else output_root() / "ablation"
    table = run_sweep(args.sweep, out, workers=args.workers)
    print(table.to_string(index=False))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="JSON experiment config (default: built-in desk config)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", "-o", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--verbose", "-v", action="store_true", help="print tracebacks on failure")

    parser = argparse.ArgumentParser(
        description="Domain-adaptive calibration experiments on the ShiftShapes benchmark",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python dacal_cli.py generate --out runs/dataset
  python dacal_cli.py train --config configs/desk_ph.json --data runs/dataset --out runs/ph_seed0
  python dacal_cli.py eval --checkpoint runs/ph_seed0/checkpoint_last.pt --data runs/dataset --mode dacal_ph
  python dacal_cli.py plot --reliability runs/ph_seed0/reliability_dacal_ph_target.csv
  python dacal_cli.py ablate --sweep configs/sweep_ema_warmup.json --workers 4
""",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="generate the benchmark")
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train one run")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--no-resume", action="store_true", help="ignore an existing checkpoint_last.pt")
    p.add_argument("--log-every", type=int, default=10, help="iterations between progress lines")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", nargs="+", required=True, help="checkpoint(s); several for ensemble mode")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--mode", choices=EVAL_MODES, default="nocalib")
    p.add_argument("--domain", choices=EVAL_DOMAINS, default="target")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("plot", parents=[common], help="emit figures")
    p.add_argument("--reliability", nargs="*", help="reliability CSV(s) from eval")
    p.add_argument("--checkpoint", help="DA-Cal checkpoint for temperature maps")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--indices", type=int, nargs="+", default=[0, 1, 2], help="target_val images to show")
    p.set_defaults(handler=cmd_plot)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation sweep")
    p.add_argument("--sweep", required=True, help="JSON sweep spec")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.set_defaults(handler=cmd_ablate)
    return parser


def _fail(args, message: str, code: int) -> int:
    print(f"❌ {message}")
    if args.verbose:
        traceback.print_exc()
    return code


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        configure_threads()
        return args.handler(args)
    except TrainingFault as e:
        return _fail(args, f"Training fault in {e.component} at iteration {e.iteration}: {e}", EXIT_TRAINING_FAULT)
    except OSError as e:
        return _fail(args, f"I/O error: {e}", EXIT_IO)
    except (DaCalError, ValueError) as e:
        return _fail(args, f"Invalid input: {e}", EXIT_INVALID)
    except KeyboardInterrupt:
        print("\n⏹️  Interrupted by user")
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
