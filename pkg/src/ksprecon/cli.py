"""``ksp`` command line: simulate, serve, send, recon, evaluate.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
Set ``KSP_LOG`` to error, info or debug to control logging on stderr.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from .detection import (
    EvaluationReport,
    evaluate,
    ground_truth_to_json,
    load_external_detections,
    load_ground_truth,
)
from .files import read_json, write_json
from .metrics import SsimParams

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
log = logging.getLogger("ksprecon")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _non_negative_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return v


def _rate(text):
    v = float(text)
    if not v >= 1:
        raise argparse.ArgumentTypeError(f"acceleration rate must be >= 1, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ksp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="write a synthetic phantom dataset and its ground truth")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--size", type=_positive_int, default=128)
    s.add_argument("--coils", type=_positive_int, default=8)
    s.add_argument("--slices", type=_positive_int, default=16)
    s.add_argument("--lesions", type=int, default=8)
    s.add_argument("--noise", type=_non_negative_float, default=0.002)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("serve", help="run the reconstruction server")
    s.add_argument("--port", type=int, default=9002)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--config", required=True, type=Path, help="chain config JSON")

    s = sub.add_parser("send", help="replay a dataset file to a server")
    s.add_argument("--addr", required=True, help="HOST:PORT")
    s.add_argument("--in", dest="inp", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)

    s = sub.add_parser("recon", help="offline reconstruction with retrospective undersampling")
    s.add_argument("--in", dest="inp", required=True, type=Path)
    s.add_argument("--method", choices=("zero_fill", "cg_sense"), default="zero_fill")
    s.add_argument("--rate", type=_rate, default=1.0)
    s.add_argument("--acs", type=float, default=None, help="ACS fraction (default 0.08 for R<=4, else 0.04)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lambda", dest="lam", type=_non_negative_float, default=0.01)
    s.add_argument("--max-iters", type=_positive_int, default=50)
    s.add_argument("--out", required=True, type=Path)

    s = sub.add_parser("evaluate", help="score detections against ground truth")
    s.add_argument("--pred", required=True, type=Path)
    s.add_argument("--gt", required=True, type=Path)
    s.add_argument("--iou", type=float, default=0.5)
    s.add_argument("--ssim", type=Path, default=None, help="per-slice metrics JSON from recon")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--figure", type=Path, default=None, help="SSIM group figure (default: next to --out)")
    s.add_argument("--no-figure", action="store_true")
    return p


def _flags(args) -> dict:
    return {k: str(v) if isinstance(v, Path) else v for k, v in sorted(vars(args).items())}


def cmd_simulate(args) -> int:
    from .phantom import ground_truth_annotations, simulate_dataset, write_dataset

    if args.lesions < 0:
        raise UsageError("--lesions must be non-negative")
    ds = simulate_dataset(args.size, args.coils, args.slices, args.lesions, args.noise, args.seed)
    write_dataset([(p.kspace, p.mask) for p in ds], args.out, {"provenance": _flags(args)})
    gt_path = args.out.with_suffix(".gt.json")
    gts = ground_truth_annotations(ds)
    gt_path.write_text(ground_truth_to_json(gts), encoding="utf-8")
    print(f"wrote {args.out} ({len(ds)} slices) and {gt_path} ({len(gts)} lesions)")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .pipeline import ChainConfig
    from .server import run_server

    cfg = ChainConfig.load(args.config)
    try:
        run_server(args.port, cfg, args.host)
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_send(args) -> int:
    from .server import run_client

    summary = run_client(args.addr, args.inp, args.out)
    print("\t".join(f"{k}={v}" for k, v in summary.items()))
    return EXIT_OK


def cmd_recon(args) -> int:
    from .offline import recon_dataset

    if args.acs is not None and not 0 < args.acs <= 1:
        raise UsageError(f"--acs must lie in (0, 1], got {args.acs}")
    doc = recon_dataset(args.inp, args.out, args.method, args.rate, args.acs, args.seed,
                        lam=args.lam, max_iters=args.max_iters)
    write_json(args.out / "recon.meta.json", {"command": "recon", "flags": _flags(args)})
    print(f"reconstructed {len(doc['slices'])} slices with {doc['method']} at R={doc['rate']:g} into {args.out}")
    return EXIT_OK


def summary_row(report: EvaluationReport) -> str:
    def fmt(v):
        return "NA" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v))

    cols = [report.method, report.rate, report.tp, report.fp, report.fn,
            report.sensitivity, report.mean_ssim_tp, report.mean_ssim_fn]
    return "\t".join(fmt(c) for c in cols)


SUMMARY_HEADER = "method\trate\ttp\tfp\tfn\tsensitivity\tmean_ssim_tp\tmean_ssim_fn"


def cmd_evaluate(args) -> int:
    if not 0 < args.iou <= 1:
        raise UsageError(f"--iou must lie in (0, 1], got {args.iou}")
    dets = load_external_detections(args.pred.read_text(encoding="utf-8"))
    gts = load_ground_truth(args.gt.read_text(encoding="utf-8"))
    metrics_doc = read_json(args.ssim) if args.ssim else None
    report = evaluate(dets, gts, metrics_doc, args.iou)
    args.out.write_text(report.to_json(), encoding="utf-8")
    write_json(args.out.with_suffix(".meta.json"), {"command": "evaluate", "flags": _flags(args)})
    if not args.no_figure:
        from .plotting import ssim_group_figure

        ssim_group_figure([report], args.figure or args.out.with_suffix(".ssim.png"))
    print(SUMMARY_HEADER)
    print(summary_row(report))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "serve": cmd_serve,
    "send": cmd_send,
    "recon": cmd_recon,
    "evaluate": cmd_evaluate,
}


def configure_logging():
    level = os.environ.get("KSP_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
