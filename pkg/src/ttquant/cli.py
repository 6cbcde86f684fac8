"""``ttquant`` command line.

Exit codes: 0 success, 1 failed self-test, 2 bad flags or contract
violation, 3 malformed input files.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from typing import Sequence

import numpy as np

from . import acceptance
from .awq import (
    DEFAULT_ALPHAS,
    DEFAULT_LAMBDAS,
    DEFAULT_PS,
    awp_pgd,
    grid_search_hyperparams,
    top_k,
)
from .calibration import AwqHyperparams, activation_loss, diag_scale, shrunk_correlation, weighted_loss
from .exceptions import FormatError
from .io_formats import read_container, read_tensor, write_container, write_tensor
from .lowrank import LowRankFactors, asvd_init, pca_init, residual_quantize
from .quantizer import QuantConfig, QuantFormat, dequantize_groups, group_max_error
from .tensor_core import RandomSpec, synth_activations, synth_weights
from .ttq import TtqLayerState, lowrank_overhead, overhead_fraction, ttq_forward


class UsageError(Exception):
    """Flag combination that violates a command contract (exit 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(args) -> QuantConfig:
    return QuantConfig(q=args.bits, g=args.group, format=QuantFormat(args.format), nu=args.nu)


def _hp(args) -> AwqHyperparams:
    return AwqHyperparams(alpha=args.alpha, lam=args.lam, p=args.p)


def _load_matrix(path: str, what: str) -> np.ndarray:
    m = read_tensor(path)
    if m.ndim != 2:
        raise FormatError(f"{what} file must hold a 2-D tensor, got {m.ndim}-D")
    return m


def _check_acts(W: np.ndarray, X: np.ndarray, what: str) -> None:
    if X.shape[0] != W.shape[1]:
        raise UsageError(f"{what} has {X.shape[0]} channels but weights have {W.shape[1]} columns")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_quantize(args) -> int:
    if args.method == "ttq" and args.calib:
        raise UsageError("ttq takes no calibration data")
    if args.method in ("awq", "awp") and not args.calib:
        raise UsageError(f"{args.method} requires --calib")
    if args.method == "awp" and args.rank:
        raise UsageError("awp does not support --rank")
    if args.method == "rtn" and args.rank and args.init == "asvd":
        raise UsageError("--init asvd needs activation scales; use awq or pca")

    W = _load_matrix(args.weights, "weights")
    cfg = _config(args)
    cfg.check_divisible(W.size)
    hp = _hp(args)
    if not 0 <= args.rank <= min(W.shape):
        raise UsageError(f"--rank must lie in [0, {min(W.shape)}]")
    X = None
    if args.calib:
        X = _load_matrix(args.calib, "calibration")
        _check_acts(W, X, "calibration")

    s = diag_scale(X, hp) if X is not None else None
    if args.rank == 0:
        factors = LowRankFactors.empty(*W.shape)
    elif args.init == "asvd":
        factors = asvd_init(W, s, args.rank).to_float32()
    else:
        factors = pca_init(W, args.rank).to_float32()

    weights = stored_hp = None
    if args.method == "rtn":
        qt = residual_quantize(W, factors, None, cfg)
    elif args.method == "awq":
        qt = residual_quantize(W, factors, s, cfg)
        stored_hp = hp
    elif args.method == "awp":
        C = shrunk_correlation(X, args.lam)
        qt = awp_pgd(W, C, cfg, K=args.iters, full_output=True).best_quantized
        stored_hp = hp
    else:
        # the codes here are a plain-RTN placeholder; eval re-quantizes per call
        qt = residual_quantize(W, factors, None, cfg)
        weights, stored_hp = W, hp

    write_container(args.out, qt, factors, method=args.method, weights=weights, hp=stored_hp)
    What = dequantize_groups(qt) + factors.product()
    print(f"method={args.method} q={cfg.q} g={cfg.g} format={cfg.format.value} rank={factors.r}")
    print(f"weight_error={np.linalg.norm(W - What):.6e}")
    print(f"relative_weight_error={np.linalg.norm(W - What) / max(np.linalg.norm(W), 1e-300):.6e}")
    if X is not None:
        print(f"activation_loss={activation_loss(W, What, X):.6e}")
        print(f"weighted_loss={weighted_loss(W, What, X, args.eval_lambda):.6e}")
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    W = _load_matrix(args.weights, "weights")
    c = read_container(args.container)
    if (c.qt.rows, c.qt.cols) != W.shape:
        raise UsageError(f"container shape {(c.qt.rows, c.qt.cols)} does not match weights {W.shape}")
    X = None
    if args.acts:
        X = _load_matrix(args.acts, "activations")
        _check_acts(W, X, "activations")

    metrics: dict[str, object] = {"method": c.method}
    rho = None
    if c.method == "ttq" and X is not None:
        base = c.weights if c.weights is not None else W
        state = TtqLayerState(base, c.factors, c.qt.config, c.hp or AwqHyperparams())
        _, report = ttq_forward(state, X)
        qt = residual_quantize(base, c.factors, report.scale, c.qt.config)
        rho = report.rho
    else:
        qt = c.qt
    Wq = dequantize_groups(qt)
    What = Wq + c.factors.product()

    err = np.linalg.norm(W - What)
    gmax = group_max_error(W - c.factors.product(), Wq, c.qt.config.g)
    metrics["weight_error"] = float(err)
    metrics["relative_weight_error"] = float(err / max(np.linalg.norm(W), 1e-300))
    metrics["max_group_error"] = float(gmax.max())
    metrics["mean_group_error"] = float(gmax.mean())
    if X is not None:
        act = activation_loss(W, What, X)
        ref = float(np.sum((W @ X) ** 2))
        metrics["activation_loss"] = act
        metrics["relative_activation_loss"] = act / ref if ref > 0 else 0.0
        metrics["weighted_loss"] = weighted_loss(W, What, X, args.eval_lambda)
        metrics["rho"] = rho if rho is not None else overhead_fraction(W.shape[1], W.shape[0], X.shape[1])
    metrics["codes_checksum"] = qt.checksum()

    if args.json:
        print(json.dumps(metrics))
    else:
        for k, v in metrics.items():
            print(f"{k}={v:.6e}" if isinstance(v, float) else f"{k}={v}")
    return 0


def _parse_grid_spec(spec: str | None):
    grids = {"alpha": DEFAULT_ALPHAS, "lambda": DEFAULT_LAMBDAS, "p": DEFAULT_PS}
    if not spec:
        return grids
    for part in spec.split(";"):
        if not part.strip():
            continue
        key, _, values = part.partition("=")
        key = key.strip()
        if key not in grids or not values.strip():
            raise UsageError(f"bad --grid-spec entry {part!r}; expected alpha=..;lambda=..;p=..")
        try:
            grids[key] = tuple(float(v) for v in values.split(","))
        except ValueError:
            raise UsageError(f"non-numeric value in --grid-spec entry {part!r}") from None
    return grids


def cmd_gridsearch(args) -> int:
    grids = _parse_grid_spec(args.grid_spec)
    W = _load_matrix(args.weights, "weights")
    X = _load_matrix(args.acts, "activations")
    _check_acts(W, X, "activations")
    cfg = QuantConfig(q=args.bits, g=args.group)
    cfg.check_divisible(W.size)
    try:
        _, table = grid_search_hyperparams(
            W, X, cfg, grids["alpha"], grids["lambda"], grids["p"], workers=args.workers
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["alpha", "lambda", "p", "loss"])
            for row in table:
                writer.writerow([repr(row.alpha), repr(row.lam), repr(row.p), repr(row.loss)])
    print(f"{'rank':>4} {'alpha':>6} {'lambda':>7} {'p':>4} {'loss':>14}")
    for i, row in enumerate(top_k(table, 5), 1):
        print(f"{i:>4} {row.alpha:>6g} {row.lam:>7g} {row.p:>4g} {row.loss:>14.6e}")
    return 0


def cmd_selftest(args) -> int:
    if args.inject_failure is not None and args.inject_failure not in acceptance.CHECKS:
        raise UsageError(f"unknown check {args.inject_failure!r}; choose from {', '.join(acceptance.CHECKS)}")
    failed = []
    for name in acceptance.CHECKS:
        res = acceptance.run_check(name, args.seed, force_fail=name == args.inject_failure)
        print(res.line(args.timings), flush=True)
        if not res.passed:
            failed.append(name)
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    print(f"all {len(acceptance.CHECKS)} checks passed")
    return 0


def cmd_cost(args) -> int:
    if args.d <= 0 or args.dprime <= 0 or args.T <= 0 or args.rank < 0:
        raise UsageError("--d, --dprime and --T must be positive and --rank nonnegative")
    print(f"rho={overhead_fraction(args.d, args.dprime, args.T)!r}")
    if args.rank:
        try:
            print(f"lowrank_overhead={lowrank_overhead(args.d, args.dprime, args.rank)!r}")
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    return 0


def cmd_synth(args) -> int:
    if args.kind == "weights":
        m = synth_weights(args.seed, args.rows, args.cols)
    else:
        m = synth_activations(RandomSpec(args.seed, args.sigma, args.rows, args.cols))
    write_tensor(args.out, m)
    print(f"wrote {args.kind} {m.shape} to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_grid_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--group", type=int, default=32)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ttquant", description="Activation-aware and test-time weight quantization.")
    parser.add_argument("--seed", type=int, default=0, help="seed for randomized commands")
    # also accepted after the subcommand name
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("quantize", parents=[common], help="quantize a weight tensor into a container")
    q.add_argument("--weights", required=True)
    q.add_argument("--method", choices=["rtn", "awq", "ttq", "awp"], default="rtn")
    _add_grid_flags(q)
    q.add_argument("--format", choices=[f.value for f in QuantFormat], default=QuantFormat.ASYMMETRIC.value)
    q.add_argument("--nu", type=float, default=1.0)
    q.add_argument("--rank", type=int, default=0)
    q.add_argument("--init", choices=["pca", "asvd"], default="pca")
    q.add_argument("--calib")
    q.add_argument("--alpha", type=float, default=0.5)
    q.add_argument("--lambda", dest="lam", type=float, default=0.4)
    q.add_argument("--p", type=float, default=2.0)
    q.add_argument("--iters", type=int, default=50, help="AWP iterations")
    q.add_argument("--eval-lambda", type=float, default=0.0, help="shrinkage of the reported weighted loss")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_quantize)

    e = sub.add_parser("eval", parents=[common], help="score a container against weights and activations")
    e.add_argument("--weights", required=True)
    e.add_argument("--container", required=True)
    e.add_argument("--acts")
    e.add_argument("--json", action="store_true")
    e.add_argument("--eval-lambda", type=float, default=0.0)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gridsearch", parents=[common], help="grid search over (alpha, lambda, p)")
    g.add_argument("--weights", required=True)
    g.add_argument("--acts", required=True)
    _add_grid_flags(g)
    g.add_argument("--grid-spec", help='e.g. "alpha=0,0.5;lambda=0.4;p=1,2"')
    g.add_argument("--csv")
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_gridsearch)

    s = sub.add_parser("selftest", parents=[common], help="run the acceptance checks")
    s.add_argument("--inject-failure", metavar="CHECK")
    s.add_argument("--timings", action="store_true", help="append the runtime of each check")
    s.set_defaults(func=cmd_selftest)

    c = sub.add_parser("cost", parents=[common], help="online overhead of test-time quantization")
    c.add_argument("--d", type=float, required=True)
    c.add_argument("--dprime", type=float, required=True)
    c.add_argument("--T", type=float, required=True)
    c.add_argument("--rank", type=float, default=0)
    c.set_defaults(func=cmd_cost)

    y = sub.add_parser("synth", parents=[common], help="write a synthetic weight or activation tensor")
    y.add_argument("kind", choices=["weights", "acts"])
    y.add_argument("--rows", type=int, required=True)
    y.add_argument("--cols", type=int, required=True)
    y.add_argument("--sigma", type=float, default=2.0)
    y.add_argument("--out", required=True)
    y.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"ttquant: error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"ttquant: format error: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"ttquant: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
