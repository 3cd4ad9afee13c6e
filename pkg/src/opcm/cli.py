"""Command-line entry point: ``opcm {merge,diag,bench,inspect}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 a runtime self-check
(orthogonality or closed-form equivalence) failed.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

from . import deskbench
from .estimators import make_merger
from .eval import commutativity_gap, cosine_similarity_matrix, report_json, similarity_csv
from .exceptions import InvariantViolation, OPCMError
from .merge import closed_form_merge, max_relative_error
from .tensorstore import classify_params, global_norm, load_checkpoint, save_checkpoint, task_vector
from ._validation import check_fraction, check_nonnegative

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3
VERIFY_RTOL = 1e-9
ORTHOGONALITY_TOL = 1e-8


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load(path, pattern=None):
    ckpt = load_checkpoint(path)
    return classify_params(ckpt, pattern) if pattern else ckpt


def _merger_params(args) -> dict:
    if args.method == "opcm":
        return {"alpha": args.alpha, "scaling": args.scaling}
    if args.method in ("ta", "ties"):
        params = {"lambda_scale": args.lambda_scale}
        if args.method == "ties":
            params["trim_fraction"] = args.trim
        return params
    return {}


def _check_common(args) -> None:
    try:
        check_fraction(args.alpha, "--alpha")
        if getattr(args, "lambda_scale", None) is not None:
            check_nonnegative(args.lambda_scale, "--lambda")
        if getattr(args, "trim", None) is not None:
            check_fraction(args.trim, "--trim", low_open=True)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_merge(args) -> int:
    _check_common(args)
    inputs = {os.path.abspath(p) for p in [args.pretrained, *args.experts]}
    for target in (args.out, args.report):
        if target and os.path.abspath(target) in inputs:
            raise UsageError(f"refusing to overwrite input file {target}")

    theta0 = _load(args.pretrained, args.pattern)
    merger = make_merger(args.method, **_merger_params(args))
    # experts are read one at a time so only one is resident during a step
    merger.fit(theta0, _LazyExperts(args.experts, args.pattern))
    merged = merger.merged_
    metadata = {"method": args.method, "n_experts": str(len(args.experts))}
    merged = merged.with_params(dict(merged.items()), metadata=metadata)

    extra = {"method": args.method, "params": _merger_params(args), "experts": list(args.experts)}
    log = merger.log_ if args.method == "opcm" else []
    extra["lambda_trajectory"] = [rec.lambda_ for rec in log]
    status = EXIT_OK
    if args.verify and args.method == "opcm":
        experts = [_load(p, args.pattern) for p in args.experts]
        reference = closed_form_merge(theta0, experts, merger.state_.config)
        err = max_relative_error(merged, reference)
        worst = max((rec.orthogonality_ratio for rec in log), default=0.0)
        extra["verify"] = {"closed_form_max_rel_error": err, "max_orthogonality_ratio": worst}
        if not (err <= VERIFY_RTOL and worst <= ORTHOGONALITY_TOL):
            status = EXIT_INVARIANT

    save_checkpoint(merged, args.out, args.dtype)
    text = report_json(log, **extra)
    if args.report:
        Path(args.report).write_text(text + "\n")
    else:
        print(text)
    if status == EXIT_INVARIANT:
        print("verification failed: see report", file=sys.stderr)
    return status


class _LazyExperts:
    """Iterable with a length that loads each checkpoint only when reached."""

    def __init__(self, paths, pattern=None):
        self.paths = list(paths)
        self.pattern = pattern

    def __len__(self):
        return len(self.paths)

    def __iter__(self):
        for p in self.paths:
            yield _load(p, self.pattern)


def cmd_diag(args) -> int:
    if args.commutativity:
        _check_common(args)
    theta0 = _load(args.pretrained, args.pattern)
    experts = [_load(p, args.pattern) for p in args.experts]
    if args.cosine:
        sim = cosine_similarity_matrix([task_vector(e, theta0) for e in experts])
        text = similarity_csv(sim, [Path(p).stem for p in args.experts])
    else:
        args.method = args.commutativity
        params = _merger_params(args)
        lines = ["i,j,gap"]
        for i in range(len(experts)):
            for j in range(i + 1, len(experts)):
                gap = commutativity_gap(theta0, experts[i], experts[j], args.commutativity, **params)
                lines.append(f"{i + 1},{j + 1},{gap!r}")
        text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    methods = tuple(m for chunk in args.methods for m in chunk.split(",") if m)
    cfg = deskbench.BenchConfig(
        n_tasks=args.tasks,
        n_seeds=args.seeds,
        n_orders=args.orders,
        methods=methods,
        alpha=args.alpha,
        scaling=args.scaling,
        lambda_scale=args.lambda_scale,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    report = deskbench.run_benchmark(cfg)
    (out / "matrices").mkdir(parents=True, exist_ok=True)
    for run in report.runs:
        (out / "matrices" / report.matrix_filename(run)).write_text(run.matrix.to_csv())
    (out / "report.json").write_text(report.to_json() + "\n")
    summary = report.per_method()
    for method, entry in summary.items():
        print(
            f"{method:5s} ACC {100 * entry['acc_mean']:.1f} +- {100 * entry['acc_std']:.1f}"
            f"  BWT {100 * entry['bwt_mean']:.1f} +- {100 * entry['bwt_std']:.1f}"
        )
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    doc = {
        "metadata": ckpt.metadata,
        "tensors": [
            {
                "name": name,
                "shape": list(arr.shape),
                "kind": ckpt.kind(name).value,
                "norm": math.sqrt(float((arr * arr).sum())),
            }
            for name, arr in ckpt.items()
        ],
        "global_norm": global_norm(ckpt),
    }
    print(json.dumps(doc, sort_keys=True, indent=2))
    return EXIT_OK


def _add_merge_params(p) -> None:
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--scaling", choices=["adaptive", "sqrt_t"], default="adaptive")
    p.add_argument("--lambda", dest="lambda_scale", type=float, default=None,
                   help="task arithmetic / Ties scale (default 0.3, or 0.1 for more than 8 experts)")
    p.add_argument("--trim", type=float, default=0.2, help="Ties keep fraction")
    p.add_argument("--pattern", default=None,
                   help="only matrices whose name matches this glob are projected")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="opcm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("merge", help="merge expert checkpoints in the given order")
    p.add_argument("--pretrained", required=True)
    p.add_argument("--experts", nargs="+", required=True)
    p.add_argument("--method", choices=["opcm", "swa", "ta", "ties"], default="opcm")
    _add_merge_params(p)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float64")
    p.add_argument("--verify", action="store_true",
                   help="check against the closed-form merge and orthogonality; exit 3 on failure")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("diag", help="task-vector cosine similarity or order sensitivity")
    p.add_argument("--pretrained", required=True)
    p.add_argument("--experts", nargs="+", required=True)
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--cosine", action="store_true")
    mode.add_argument("--commutativity", choices=["opcm", "swa", "ta", "ties"])
    _add_merge_params(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_diag)

    p = sub.add_parser("bench", help="run the synthetic continual-merging benchmark")
    p.add_argument("--tasks", type=int, default=8)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--orders", type=int, default=10)
    p.add_argument("--methods", nargs="+", default=["opcm,swa,ta,ties"])
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--scaling", choices=["adaptive", "sqrt_t"], default="adaptive")
    p.add_argument("--lambda", dest="lambda_scale", type=float, default=None)
    p.add_argument("--out", default="bench_out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="list the tensors of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OPCMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
