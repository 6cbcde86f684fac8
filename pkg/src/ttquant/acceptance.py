"""Acceptance checks on synthetic layers.

Each ``check_*`` function runs one criterion at its full size and tolerance
and returns a :class:`CheckResult`. ``run_all`` drives them for the
``selftest`` command; ``tests/test_acceptance.py`` calls them one by one.

Seeds are derived from a single base seed, so a run is reproducible.
"""

from __future__ import annotations

import contextlib
import io
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .awq import (
    awp_pgd,
    awq_qdq,
    awq_quantize,
    brute_force_codes,
    grid_search_hyperparams,
    offline_awq,
    rounded_codes,
)
from .calibration import AwqHyperparams, activation_loss, diag_scale, shrunk_correlation
from .exceptions import ChecksumError, FormatError
from .io_formats import decode_container, decode_tensor, encode_container, encode_tensor
from .lowrank import LowRankFactors, pca_init, residual_qdq
from .quantizer import QuantConfig, QuantFormat, compute_scale_zero, dequantize_groups, quantize_groups, rtn_qdq
from .tensor_core import RandomSpec, jacobi_svd, synth_activations, synth_weights
from .ttq import TtqLayerState, ttq_forward

# Problem sizes shared by the statistical checks.
D = 64
T = 256
SIGMA = 2.0


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self, timings: bool = False) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"[{status}] {self.name}: {self.detail}"
        return text + f" ({self.seconds:.2f}s)" if timings else text


def _layer(seed: int, d: int = D, t: int = T, sigma: float = SIGMA):
    W = synth_weights(seed + 7_000_000, d, d)
    X = synth_activations(RandomSpec(seed, sigma, d, t))
    return W, X


def _ttq_loss(W, X, config, factors=None, hp=AwqHyperparams()) -> float:
    _, report = ttq_forward(TtqLayerState(W, factors, config, hp), X)
    return report.loss


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def check_oracle_optimality(seed: int = 0, trials: int = 1000) -> tuple[bool, str]:
    """Scaled rounding vs exhaustive search, g=4, q=2."""
    rng = np.random.default_rng(seed)
    q, g = 2, 4
    cfg = QuantConfig(q=q, g=g)
    shared = scaled = 0
    for _ in range(trials):
        w = rng.standard_normal(g)
        s = np.exp(rng.standard_normal(g))
        # shared grid, per-element weights s_i^2
        S, Z = compute_scale_zero(w, cfg)
        shared += np.array_equal(rounded_codes(w, S, Z, q), brute_force_codes(w, s, S, Z, q))
        # the grid awq_quantize builds in the scaled domain
        qt = awq_quantize(w[None, :], s, cfg)
        v = w * qt.col_scale
        oracle = brute_force_codes(v, np.ones(g), qt.scales[0], qt.zeros[0], q)
        scaled += np.array_equal(qt.unpacked_codes().astype(np.int64), oracle)
    ok = shared == trials and scaled == trials
    return ok, f"shared-grid {shared}/{trials}, scaled-domain {scaled}/{trials}"


def check_idempotence(seed: int = 0, matrices: int = 500) -> tuple[bool, str]:
    rng = np.random.default_rng(seed + 1)
    formats = list(QuantFormat)
    bits = (2, 3, 4, 5, 8)
    combos = [(f, q) for f in formats for q in bits]
    bad = 0
    worst = 0.0
    for i in range(matrices):
        fmt, q = combos[i % len(combos)]
        g = int(rng.choice([4, 8, 16]))
        rows = int(rng.integers(1, 9))
        cols = g * int(rng.integers(1, 5))
        cfg = QuantConfig(q=q, g=g, format=fmt)
        W = rng.standard_normal((rows, cols)) * np.exp(rng.standard_normal())
        first = quantize_groups(W, cfg)
        second = quantize_groups(dequantize_groups(first), cfg)
        diff = float(np.max(np.abs(first.scales - second.scales)))
        worst = max(worst, diff)
        same = (
            first.codes == second.codes
            and diff <= 1e-9
            and np.array_equal(first.zeros, second.zeros)
        )
        bad += not same
    return bad == 0, f"{matrices - bad}/{matrices} identical, worst scale diff {worst:.1e}"


def check_activation_benefit(seed: int = 0, trials: int = 100) -> tuple[bool, str]:
    cfg = QuantConfig(q=3, g=32)
    ratios, ttq_l, rtn_l = [], [], []
    for i in range(trials):
        W, X = _layer(seed * 1000 + i)
        lt = _ttq_loss(W, X, cfg)
        lr = activation_loss(W, rtn_qdq(W, cfg), X)
        ttq_l.append(lt)
        rtn_l.append(lr)
        ratios.append(lt / lr)
    wins = int(np.sum(np.array(ratios) < 0.9))
    ok = np.mean(ttq_l) < np.mean(rtn_l) and wins >= 90
    return ok, f"ratio<0.9 in {wins}/{trials}, mean TTQ {np.mean(ttq_l):.4g} vs RTN {np.mean(rtn_l):.4g}"


def _spearman(x, y) -> float:
    rx = np.argsort(np.argsort(x)).astype(float)
    ry = np.argsort(np.argsort(y)).astype(float)
    rx -= rx.mean()
    ry -= ry.mean()
    return float(rx @ ry / np.sqrt((rx @ rx) * (ry @ ry)))


def check_groupsize_trend(seed: int = 0, trials: int = 50) -> tuple[bool, str]:
    groups = (8, 16, 32, 64)
    means = []
    layers = [_layer(seed * 1000 + 100 + i) for i in range(trials)]
    for g in groups:
        cfg = QuantConfig(q=3, g=g)
        means.append(float(np.mean([_ttq_loss(W, X, cfg) for W, X in layers])))
    rho = _spearman(groups, means)
    ok = rho == 1.0 and all(np.diff(means) >= 0)
    return ok, f"spearman {rho:+.2f}, mean loss " + ", ".join(f"g={g}:{m:.4g}" for g, m in zip(groups, means))


def check_lowrank_benefit(seed: int = 0, trials: int = 100, rank: int = 16) -> tuple[bool, str]:
    cfg = QuantConfig(q=2, g=32)
    wins = 0
    for i in range(trials):
        W, X = _layer(seed * 1000 + 200 + i)
        l0 = _ttq_loss(W, X, cfg)
        l16 = _ttq_loss(W, X, cfg, pca_init(W, rank))
        wins += l16 < l0
    return wins >= 90, f"r={rank} beats r=0 in {wins}/{trials}"


def check_domain_shift(seed: int = 0, trials: int = 100) -> tuple[bool, str]:
    cfg = QuantConfig(q=3, g=32)
    hp = AwqHyperparams()
    wins = 0
    for i in range(trials):
        W = synth_weights(seed * 1000 + 300 + i + 7_000_000, D, D)
        X_a = synth_activations(RandomSpec(seed * 1000 + 10_000 + i, SIGMA, D, T))
        X_b = synth_activations(RandomSpec(seed * 1000 + 20_000 + i, SIGMA, D, T))
        What_awq, _ = offline_awq(W, X_a, hp, cfg)
        wins += activation_loss(W, What_awq, X_b) > _ttq_loss(W, X_b, cfg, hp=hp)
    return wins >= 90, f"TTQ beats shifted AWQ in {wins}/{trials}"


def check_monotone_precision(seed: int = 0, trials: int = 100, d: int = D, t: int = T) -> tuple[bool, str]:
    """Loss must not grow with bits for rtn, awq, ttq (r=0 and r=16) and awp."""
    bits = (2, 3, 4, 5)
    g = 32
    hp = AwqHyperparams()
    violations = []
    for i in range(trials):
        W, X = _layer(seed * 1000 + 400 + i, d, t)
        X_cal = synth_activations(RandomSpec(seed * 1000 + 30_000 + i, SIGMA, d, t))
        factors = pca_init(W, 16)
        C = shrunk_correlation(X_cal, 0.01)
        s_cal = diag_scale(X_cal, hp)
        per_method: dict[str, list[float]] = {k: [] for k in ("rtn", "awq", "ttq", "ttq_r16", "awp")}
        for q in bits:
            cfg = QuantConfig(q=q, g=g)
            per_method["rtn"].append(activation_loss(W, rtn_qdq(W, cfg), X))
            per_method["awq"].append(activation_loss(W, awq_qdq(W, s_cal, cfg), X))
            per_method["ttq"].append(_ttq_loss(W, X, cfg, hp=hp))
            per_method["ttq_r16"].append(_ttq_loss(W, X, cfg, factors, hp))
            per_method["awp"].append(activation_loss(W, awp_pgd(W, C, cfg, K=10), X))
        for name, losses in per_method.items():
            for q, lo, hi in zip(bits, losses[1:], losses[:-1]):
                if lo > hi:
                    violations.append(f"seed {i} {name} q={q}->{q + 1}")
    detail = f"{len(violations)} violations over {trials} seeds x 5 methods"
    if violations:
        detail += f" (first: {violations[0]})"
    return not violations, detail


def check_eckart_young(seed: int = 0, trials: int = 100) -> tuple[bool, str]:
    rng = np.random.default_rng(seed + 8)
    worst = 0.0
    for i in range(trials):
        W = rng.standard_normal((16, 12))
        r = 1 + i % 11
        f = pca_init(W, r)
        resid = float(np.sum((W - f.product()) ** 2))
        # independent route: singular values from the Jacobi solver
        _, sigma, _ = jacobi_svd(W)
        discarded = float(np.sum(sigma[r:] ** 2))
        worst = max(worst, abs(resid - discarded) / discarded)
    return worst <= 1e-6, f"worst relative gap {worst:.2e} (tol 1e-6)"


def check_overhead_formula(seed: int = 0) -> tuple[bool, str]:
    from .cli import main

    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = main(["cost", "--d", "1024", "--dprime", "1024", "--T", "1024", "--rank", "16"])
    values = dict(line.split("=", 1) for line in out.getvalue().split())
    rho = float(values.get("rho", "nan"))
    lr = float(values.get("lowrank_overhead", "nan"))
    ok = code == 0 and rho == 0.00390625 and lr == 0.03125
    return ok, f"rho={rho!r}, lowrank_overhead={lr!r}"


def check_format_roundtrips(seed: int = 0, cases: int = 200) -> tuple[bool, str]:
    rng = np.random.default_rng(seed + 10)
    tensor_ok = container_ok = crc_ok = 0
    for _ in range(cases):
        shape = tuple(int(x) for x in rng.integers(1, 9, size=2))
        m = rng.standard_normal(shape) * 10.0 ** rng.integers(-5, 5)
        back = decode_tensor(encode_tensor(m))
        tensor_ok += back.shape == m.shape and back.tobytes() == m.tobytes()

        q = int(rng.choice([2, 3, 4, 5, 8]))
        fmt = list(QuantFormat)[int(rng.integers(3))]
        g = int(rng.choice([2, 4, 8]))
        rows, cols = int(rng.integers(1, 7)), g * int(rng.integers(1, 4))
        cfg = QuantConfig(q=q, g=g, format=fmt)
        W = rng.standard_normal((rows, cols))
        r = int(rng.integers(0, min(rows, cols) + 1))
        factors = pca_init(W, r).to_float32()
        col_scale = np.exp(rng.standard_normal(cols)) if rng.random() < 0.5 else None
        qt = quantize_groups(W - factors.product(), cfg, col_scale=col_scale)
        weights = W if rng.random() < 0.5 else None
        hp = AwqHyperparams(0.5, 0.4, 2.0) if weights is not None else None
        blob = encode_container(qt, factors, method="ttq" if weights is not None else "rtn", weights=weights, hp=hp)
        c = decode_container(blob)
        same = (
            c.qt.codes == qt.codes
            and c.qt.scales.tobytes() == qt.scales.tobytes()
            and np.array_equal(c.qt.zeros, qt.zeros)
            and c.factors.r == factors.r
            and c.factors.B.tobytes() == factors.B.tobytes()
            and c.factors.A.tobytes() == factors.A.tobytes()
            and dequantize_groups(c.qt).tobytes() == dequantize_groups(qt).tobytes()
            and (weights is None or c.weights.tobytes() == weights.tobytes())
        )
        container_ok += bool(same)

        pos = int(rng.integers(4, len(blob)))
        corrupt = bytearray(blob)
        corrupt[pos] ^= int(rng.integers(1, 256))
        try:
            decode_container(bytes(corrupt))
        except ChecksumError:
            crc_ok += 1
        except FormatError:
            pass
    ok = tensor_ok == cases and container_ok == cases and crc_ok == cases
    return ok, f"tensor {tensor_ok}/{cases}, container {container_ok}/{cases}, CRC caught {crc_ok}/{cases}"


def check_hyperparam_trend(seed: int = 0, trials: int = 100) -> tuple[bool, str]:
    cfg = QuantConfig(q=3, g=32)
    wins = 0
    for i in range(trials):
        W, X = _layer(seed * 1000 + 500 + i)
        best, _ = grid_search_hyperparams(W, X, cfg, alphas=(0.5,), lams=(0.4,), ps=(1.0, 2.0))
        wins += best.p == 2.0
    return wins >= 70, f"p=2 wins {wins}/{trials}"


def check_degeneracies(seed: int = 0, trials: int = 100) -> tuple[bool, str]:
    failures = []
    rng = np.random.default_rng(seed + 12)
    for i in range(trials):
        cfg = QuantConfig(q=int(rng.choice([2, 3, 4])), g=16)
        W, X = _layer(seed * 1000 + 600 + i, 32, 64)
        rtn = quantize_groups(W, cfg)
        # alpha = 0
        awq0 = awq_quantize(W, diag_scale(X, AwqHyperparams(alpha=0.0)), cfg)
        if awq0.codes != rtn.codes or not np.array_equal(dequantize_groups(awq0), dequantize_groups(rtn)):
            failures.append(f"alpha=0 seed {i}")
        # uniform row norms: rows share magnitudes, differ in signs
        mag = np.abs(rng.standard_normal(64))
        Xu = mag[None, :] * rng.choice([-1.0, 1.0], size=(32, 64))
        _, rep = ttq_forward(TtqLayerState(W, None, cfg), Xu)
        if rep.codes_checksum != rtn.checksum():
            failures.append(f"uniform-norm TTQ seed {i}")
        # r = 0
        s = diag_scale(X)
        if not np.array_equal(residual_qdq(W, LowRankFactors.empty(*W.shape), s, cfg), awq_qdq(W, s, cfg)):
            failures.append(f"r=0 seed {i}")
        # K = 0
        if not np.array_equal(awp_pgd(W, shrunk_correlation(X, 0.01), cfg, K=0), dequantize_groups(rtn)):
            failures.append(f"K=0 seed {i}")
    return not failures, "all bit-exact" if not failures else "; ".join(failures[:4])


CHECKS: dict[str, Callable[..., tuple[bool, str]]] = {
    "oracle_optimality": check_oracle_optimality,
    "qdq_idempotence": check_idempotence,
    "activation_benefit": check_activation_benefit,
    "groupsize_trend": check_groupsize_trend,
    "lowrank_benefit": check_lowrank_benefit,
    "domain_shift": check_domain_shift,
    "monotone_precision": check_monotone_precision,
    "eckart_young": check_eckart_young,
    "overhead_formula": check_overhead_formula,
    "format_roundtrips": check_format_roundtrips,
    "hyperparam_trend": check_hyperparam_trend,
    "degeneracies": check_degeneracies,
}


def run_check(name: str, seed: int = 0, force_fail: bool = False) -> CheckResult:
    start = time.perf_counter()
    try:
        passed, detail = CHECKS[name](seed)
    except Exception as exc:  # a crashing check is a failing check
        passed, detail = False, f"error: {type(exc).__name__}: {exc}"
    if force_fail:
        passed, detail = False, f"failure injected ({detail})"
    return CheckResult(name, bool(passed), detail, time.perf_counter() - start)


def run_all(seed: int = 0, inject_failure: str | None = None) -> list[CheckResult]:
    if inject_failure is not None and inject_failure not in CHECKS:
        raise KeyError(f"unknown check {inject_failure!r}")
    return [run_check(name, seed, force_fail=name == inject_failure) for name in CHECKS]
