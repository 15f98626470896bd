"""Command-line entry point: data generation, pretraining, training, evaluation, inference."""

import logging
import logging.handlers
import sys
from pathlib import Path
from typing import List, Optional

from rich.console import Console
from rich.logging import RichHandler

from .config import BRANCHES, RunConfig
from .contrastive import pretrain_city, pretrain_neighborhood
from .errors import (
    CheckpointError,
    ConfigError,
    FormatError,
    NumericError,
    TrainingError,
    UsageError,
)
from .formatting import (
    comparison_table,
    gradcheck_table,
    loss_table,
    metrics_table,
    print_status,
)
from .fusion import FlowModel, infer_fine
from .gradcheck import all_check_names, run_suite
from .grid import FlowData, FlowGrid, Granularity, synth_generate, validate_constraint
from .metrics import METRIC_NAMES, baseline_ha, baseline_mean, evaluate
from .storage import (
    export_csv,
    get_state_dir,
    load_checkpoint,
    load_grid,
    save_checkpoint,
    save_grid,
    write_csv,
)
from .tensor import set_precision
from .training import LOSS_TRACE_HEADER, compare_modes, end_to_end_train, finetune

logger = logging.getLogger(__name__)

COARSE_FILE = "coarse.ufg"
FINE_FILE = "fine.ufg"
MODEL_FILE = "model.ckpt"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

console = Console()


# ============================================================================
# Logging
# ============================================================================


class _ConsoleFilter(logging.Filter):
    """Keep records marked ``file_only`` (tracebacks) off the console."""

    def filter(self, record: logging.LogRecord) -> bool:
        return not getattr(record, "file_only", False)


def setup_logging(verbose: bool = False):
    """Rotating log file in the XDG state directory plus Rich console output."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_finegrid", False):
            root.removeHandler(handler)
            handler.close()

    file_handler = logging.handlers.RotatingFileHandler(
        get_state_dir() / "finegrid.log",
        maxBytes=1024 * 1024,  # 1 MB
        backupCount=3,
    )
    file_handler.setLevel(logging.DEBUG if verbose else logging.INFO)
    file_handler.setFormatter(logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    ))

    console_handler = RichHandler(console=Console(stderr=True), show_path=False)
    console_handler.setLevel(logging.INFO if verbose else logging.WARNING)
    console_handler.addFilter(_ConsoleFilter())

    for handler in (file_handler, console_handler):
        handler._finegrid = True
        root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


# ============================================================================
# Shared helpers
# ============================================================================


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_dir(args) -> Path:
    return Path(args.data) if args.data else Path(args.out)


def load_data(data_dir: Path, config: RunConfig) -> FlowData:
    coarse = load_grid(data_dir / COARSE_FILE)
    fine = load_grid(data_dir / FINE_FILE)
    if coarse.granularity != Granularity.COARSE:
        raise FormatError(f"{data_dir / COARSE_FILE}: granularity tag is not coarse")
    if fine.granularity != Granularity.FINE:
        raise FormatError(f"{data_dir / FINE_FILE}: granularity tag is not fine")
    return FlowData.from_grids(coarse, fine, config.data.train_frac, config.data.val_frac)


def _load_model(path: Path, config: RunConfig) -> FlowModel:
    return FlowModel.from_checkpoint(load_checkpoint(path), config.model)


# ============================================================================
# Commands
# ============================================================================


def cmd_gen_data(args, config: RunConfig) -> int:
    out = _out_dir(args)
    fine, coarse = synth_generate(config.data)
    save_grid(coarse, out / COARSE_FILE)
    save_grid(fine, out / FINE_FILE)
    residual = validate_constraint(coarse, fine)
    print_status(f"Wrote {coarse.n_frames} frames to {out / COARSE_FILE} and {out / FINE_FILE}",
                 "success")
    print_status(f"Constraint residual: {residual:g}")
    return EXIT_OK


def cmd_pretrain(args, config: RunConfig) -> int:
    data = load_data(_data_dir(args), config)
    out = _out_dir(args)
    if args.stage == "b":
        result = pretrain_neighborhood(data, config.pretrain, config.model)
    else:
        result = pretrain_city(data, config.pretrain, config.model)

    ckpt_path = out / f"{result.group}.ckpt"
    save_checkpoint(result.checkpoint(), ckpt_path)
    write_csv(out / f"pretrain_{args.stage}_loss.csv", ("epoch", "loss"), result.loss_rows())
    console.print(loss_table(result.losses, f"Stage {result.stage.name} contrastive loss"))
    print_status(f"Stage {result.stage.name} checkpoint written to {ckpt_path}", "success")
    return EXIT_OK


def _optional_checkpoint(path: str):
    return None if path == "-" else load_checkpoint(path)


def cmd_train(args, config: RunConfig) -> int:
    if args.end_to_end:
        mode = "end_to_end"
    elif args.from_pretrained:
        mode = "two_stage"
    else:
        mode = config.train.mode
    if mode == "two_stage" and not args.from_pretrained:
        raise UsageError("two-stage training needs --from-pretrained CKPT_B CKPT_C")

    data = load_data(_data_dir(args), config)
    out = _out_dir(args)
    if mode == "two_stage":
        ckpt_b, ckpt_c = (_optional_checkpoint(p) for p in args.from_pretrained)
        result = finetune(data, ckpt_b, ckpt_c, config.train, config.model, config.eval)
    else:
        result = end_to_end_train(data, config.train, config.model, config.eval)

    save_checkpoint(result.checkpoint(), out / MODEL_FILE)
    write_csv(out / "train_loss.csv", LOSS_TRACE_HEADER, result.loss_rows())
    best = result.best
    console.print(loss_table([r.train_loss for r in result.history], f"Stage III ({mode})",
                             [r.val_loss for r in result.history]))
    print_status(f"Best epoch {result.best_epoch}: val RMSE {best.val_rmse:.4f}, "
                 f"MAE {best.val_mae:.4f}, MAPE {best.val_mape:.4f}", "success")
    print_status(f"Model written to {out / MODEL_FILE}")
    return EXIT_OK


def cmd_eval(args, config: RunConfig) -> int:
    model = _load_model(Path(args.model) if args.model else Path(args.out) / MODEL_FILE, config)
    data = load_data(_data_dir(args), config)
    out = _out_dir(args)
    threshold = config.eval.mape_mask_threshold

    _, train_fine = data.part("train")
    test_coarse, test_fine = data.part("test")
    rows = [
        ("MEAN", baseline_mean(test_coarse, test_fine, threshold)),
        ("HA", baseline_ha(train_fine, test_coarse, test_fine, threshold)),
        ("model", evaluate(model, test_coarse, test_fine, threshold)),
    ]
    console.print(metrics_table(rows, "Test split", config.eval.constraint_tol))
    csv_rows = [(label, name, getattr(report, name))
                for label, report in rows for name in METRIC_NAMES + ("constraint_residual",)]
    write_csv(out / "metrics.csv", ("method", "metric", "value"), csv_rows)

    residual = rows[-1][1].constraint_residual
    if residual >= config.eval.constraint_tol:
        print_status(f"Model constraint residual {residual:.2e} exceeds tolerance", "error")
        return EXIT_FAILURE
    print_status(f"Metrics written to {out / 'metrics.csv'}", "success")
    return EXIT_OK


def cmd_infer(args, config: RunConfig) -> int:
    model = _load_model(Path(args.model) if args.model else Path(args.out) / MODEL_FILE, config)
    coarse = load_grid(args.input)
    if coarse.granularity != Granularity.COARSE:
        raise FormatError(f"{args.input}: granularity tag is {coarse.granularity.name.lower()}, "
                          "expected coarse")
    pred = infer_fine(coarse.frames, model)
    fine = FlowGrid(pred, Granularity.FINE, model.upscale, coarse.slots_per_day, coarse.timestamps)
    output = Path(args.output) if args.output else _out_dir(args) / "inferred.ufg"
    save_grid(fine, output)
    if args.csv:
        export_csv(fine, output.with_suffix(".csv"))

    residual = validate_constraint(coarse, fine)
    print_status(f"Wrote {fine.n_frames} fine frames ({fine.height}x{fine.width}) to {output}",
                 "success")
    print_status(f"Constraint residual: {residual:.2e}")
    return EXIT_OK if residual < config.eval.constraint_tol else EXIT_FAILURE


def cmd_gradcheck(args, config: RunConfig) -> int:
    results = run_suite(args.checks, n_coords=args.coords)
    console.print(gradcheck_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print_status(f"Failed checks: {', '.join(failed)}", "error")
        return EXIT_FAILURE
    print_status(f"All {len(results)} checks passed", "success")
    return EXIT_OK


def cmd_compare(args, config: RunConfig) -> int:
    data = load_data(_data_dir(args), config)
    out = _out_dir(args)
    rows = compare_modes(data, config, args.branches)
    console.print(comparison_table(rows))
    write_csv(out / "comparison.csv",
              ("mode", "rmse", "mae", "mape", "first_val_loss", "best_val_loss"),
              [(r.label, r.report.rmse, r.report.mae, r.report.mape, r.first_val_loss,
                r.best_val_loss) for r in rows])
    print_status(f"Comparison written to {out / 'comparison.csv'}", "success")
    return EXIT_OK


# ============================================================================
# Argument parsing
# ============================================================================


def build_parser():
    import argparse

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help='JSON run configuration')
    common.add_argument('--seed', type=int, help='Seed for data, pretraining and training')
    common.add_argument('--precision', type=int, choices=(32, 64), default=32,
                        help='Floating-point precision (default: 32)')
    common.add_argument('--out', default='.', help='Output directory (default: .)')
    common.add_argument('-v', '--verbose', action='store_true', help='Log progress to stderr')

    parser = argparse.ArgumentParser(
        prog='finegrid',
        description='Fine-grained urban flow inference with multi-scale representation learning',
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', parents=[common], help='Generate a synthetic dataset')
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser('pretrain', parents=[common], help='Contrastive pretraining (Stage I / II)')
    p.add_argument('--stage', required=True, choices=('b', 'c'),
                   help='b = neighborhood encoder, c = city encoder')
    p.add_argument('--data', help='Directory with coarse.ufg and fine.ufg (default: --out)')
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser('train', parents=[common], help='Stage III fine-tuning or end-to-end training')
    mode = p.add_mutually_exclusive_group()
    mode.add_argument('--from-pretrained', nargs=2, metavar=('CKPT_B', 'CKPT_C'),
                      help="Encoder checkpoints; '-' for a branch the model does not use")
    mode.add_argument('--end-to-end', action='store_true', help='Train from random init')
    p.add_argument('--data', help='Directory with coarse.ufg and fine.ufg (default: --out)')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('eval', parents=[common], help='Score the model and baselines on the test split')
    p.add_argument('--model', help='Model checkpoint (default: OUT/model.ckpt)')
    p.add_argument('--data', help='Directory with coarse.ufg and fine.ufg (default: --out)')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('infer', parents=[common], help='Infer fine maps for a coarse grid file')
    p.add_argument('--model', help='Model checkpoint (default: OUT/model.ckpt)')
    p.add_argument('--input', required=True, help='Coarse grid file')
    p.add_argument('--output', help='Fine grid file (default: OUT/inferred.ufg)')
    p.add_argument('--csv', action='store_true', help='Also write t,i,j,value CSV')
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser('gradcheck', parents=[common], help='Finite-difference gradient suite')
    p.add_argument('--checks', nargs='+', choices=all_check_names(), metavar='CHECK',
                   help='Run only these checks')
    p.add_argument('--coords', type=int, default=100, help='Coordinates per check (default: 100)')
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser('compare', parents=[common], help='Paired two-stage vs end-to-end run')
    p.add_argument('--data', help='Directory with coarse.ufg and fine.ufg (default: --out)')
    p.add_argument('--branches', nargs='+', choices=BRANCHES,
                   help='Repeat the comparison for each branch setting')
    p.set_defaults(handler=cmd_compare)
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, run the command and return its exit code."""
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)

    try:
        set_precision(args.precision)
        config = RunConfig.load(args.config).with_seed(args.seed)
        config.validate()
        logger.info("effective config: %s", config.to_json())
        print_status("Effective config:")
        print(config.to_json())
        return args.handler(args, config)
    except (ConfigError, UsageError, FormatError) as e:
        logger.error("%s failed", args.command, exc_info=True, extra={"file_only": True})
        print_status(str(e), "error")
        return EXIT_USAGE
    except (CheckpointError, TrainingError, NumericError, OSError) as e:
        logger.error("%s failed", args.command, exc_info=True, extra={"file_only": True})
        print_status(str(e), "error")
        return EXIT_FAILURE
    finally:
        set_precision(32)


def main():
    """Entry point."""
    sys.exit(run())


if __name__ == "__main__":
    main()
