"""
ControlSR Command Line
    controlsr train    --stage {vae|backbone|control} --config F [--resume C] [--out-dir D]
    controlsr infer    --ckpt C --lr in.ppm --out out.ppm [--alpha A --beta B --steps N --seed S --trace D --hr H]
    controlsr sweep    --ckpt C --lr-dir D --alphas LIST --betas LIST --csv out.csv [--hr-dir D]
    controlsr probe    --ckpt C --lr in.ppm --outdir D [--baseline-ckpt C2] [--step I]
    controlsr degrade  --hr-dir D --out-dir D2 [--config F] [--synth COUNT]
    controlsr selftest

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from src.errors import ParseError, UsageError, ValidationError
from src.storage.checkpoint import Stage
from .pipeline import get_pipeline_instance

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

TESTS_DIR = Path(__file__).resolve().parents[2] / "tests"


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _float_list(text: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="controlsr", description="Desk-scale ControlSR super-resolution")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbs = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = verbs.add_parser("train", help="train one stage")
    p.add_argument("--stage", required=True, choices=[s.value for s in Stage])
    p.add_argument("--config", required=True)
    p.add_argument("--resume")
    p.add_argument("--out-dir", default="runs")

    p = verbs.add_parser("infer", help="super-resolve one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lr", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--trace")
    p.add_argument("--hr")

    p = verbs.add_parser("sweep", help="PSNR / HF-energy grid over alpha and beta")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lr-dir", required=True)
    p.add_argument("--alphas", required=True, type=_float_list)
    p.add_argument("--betas", required=True, type=_float_list)
    p.add_argument("--csv", required=True)
    p.add_argument("--hr-dir")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)

    p = verbs.add_parser("probe", help="control-signal diagnostics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lr", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--baseline-ckpt")
    p.add_argument("--step", type=int)
    p.add_argument("--seed", type=int)

    p = verbs.add_parser("degrade", help="synthesize LR images from HR images")
    p.add_argument("--hr-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config")
    p.add_argument("--synth", type=int, default=0)

    verbs.add_parser("selftest", help="run the test suite")
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    pipeline = get_pipeline_instance()
    if args.verb == "train":
        path = pipeline.train(Stage(args.stage), args.config, args.out_dir, args.resume)
        print(path)
    elif args.verb == "infer":
        pipeline.infer(args.ckpt, args.lr, args.out, alpha=args.alpha, beta=args.beta, steps=args.steps,
                       seed=args.seed, trace_dir=args.trace, hr_path=args.hr)
    elif args.verb == "sweep":
        cells = pipeline.sweep(args.ckpt, args.lr_dir, args.alphas, args.betas, args.csv,
                               hr_dir=args.hr_dir, steps=args.steps, seed=args.seed)
        print(f"{len(cells)} cells -> {args.csv}")
    elif args.verb == "probe":
        report = pipeline.probe(args.ckpt, args.lr, args.outdir, baseline_ckpt=args.baseline_ckpt,
                                step=args.step, seed=args.seed)
        print(f"kl={report.kl_ours:.6g}" + (f" diff={report.diff:.6g}" if report.diff is not None else ""))
    elif args.verb == "degrade":
        if args.synth < 0:
            raise UsageError("--synth must be >= 0")
        print(pipeline.degrade(args.hr_dir, args.out_dir, args.config, args.synth))
    elif args.verb == "selftest":
        import pytest
        code = pytest.main(["-q", str(TESTS_DIR)])
        return EXIT_OK if code == 0 else EXIT_INVALID
    return EXIT_OK


def run_cli(argv: Optional[List[str]] = None) -> int:
    """Parse and run one command; returns the process exit code"""
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        return _dispatch(args)
    except (ValidationError, ParseError, UsageError) as e:
        logger.error(str(e))
        return EXIT_INVALID
    except Exception as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME


def main() -> None:
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
