"""
Verification workflow: numerical suites for the graph-reasoning layer.

Suites
- oracle: factored vs materialized Laplacian agreement, and analytic FLOPs
  vs the instrumented MAC counter on the same shapes
- null_vector: the normalized Laplacian annihilates D^1/2 1
- spectral: quadratic forms of the normalized Laplacian stay in [0, 2]
- zero_degree: an all-zero embedding row is absorbed by the degree floor
- gradients: tape gradients of the layer and a four-level pyramid against
  central differences
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
import logging
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from .core.costmodel import flops_graph_reason
from .core.counter import MacCounter
from .core.errors import SpyGRError
from .core.gradcheck import gradcheck, relu_margin
from .core.layer import (
    DEFAULT_EPSILON,
    DEFAULT_ORACLE_CAP,
    AttentionMode,
    LaplacianPath,
    SpyGRParams,
    apply_laplacian,
    build_factors,
    graph_reason,
    materialize_similarity,
)
from .core.pyramid import PyramidConfig, spygr_pyramid
from .core.tensor import Tensor
from .utils.config_loader import get_thread_count
from .utils.stage_base import EXIT_FAILURE, EXIT_OK, StageBase

logger = logging.getLogger(__name__)

ORACLE_REL_TOL = 1e-10
NULL_VECTOR_TOL = 1e-8
SPECTRAL_TOL = 1e-10
GRAD_REL_TOL = 1e-4
GRAD_ABS_TOL = 1e-7
KINK_MARGIN = 1e-4
MAX_GRADIENT_DRAWS = 50

SUITES = ("oracle", "null_vector", "spectral", "zero_degree", "gradients")

ATTENTION_CYCLE = (AttentionMode.DYNAMIC, AttentionMode.STATIC, AttentionMode.NONE)


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = float(np.max(np.abs(b))) if b.size else 0.0
    diff = float(np.max(np.abs(a - b))) if a.size else 0.0
    return diff / scale if scale > 0 else diff


def _random_params(rng: np.random.Generator, c: int, m: int, mode: AttentionMode,
                   include_identity: bool, epsilon: float = DEFAULT_EPSILON) -> SpyGRParams:
    params = SpyGRParams.init(c, m, c, mode, include_identity, epsilon, rng)
    if mode is AttentionMode.STATIC:
        lam = Tensor(rng.uniform(0.1, 2.0, size=m), name="static_lambda")
        params = replace(params, static_lambda=lam)
    return params


# =============================================================================
# Individual cases
# =============================================================================

def oracle_case(seed: int, index: int, oracle_cap: int = DEFAULT_ORACLE_CAP) -> Dict[str, Any]:
    """One random configuration through both Laplacian paths and both FLOP counts."""
    rng = np.random.default_rng([seed, index])
    h, w = (int(v) for v in rng.integers(5, 17, size=2))
    c = int(rng.choice([4, 8, 16]))
    m = int(rng.choice([2, 4, 8]))
    mode = ATTENTION_CYCLE[index % len(ATTENTION_CYCLE)]
    include_identity = index % 2 == 0
    params = _random_params(rng, c, m, mode, include_identity)
    x = Tensor(rng.standard_normal((1, c, h, w)))

    factors = build_factors(x, params)
    fast = apply_laplacian(x, factors, include_identity, LaplacianPath.FACTORED)
    slow = apply_laplacian(x, factors, include_identity, LaplacianPath.NAIVE, oracle_cap)
    rel = _rel_err(fast.data, slow.data)

    with MacCounter() as counter:
        graph_reason(x, params)
    analytic = flops_graph_reason(h, w, c, m, c, include_identity, mode).flops

    config = {"shape": [1, c, h, w], "m": m, "attention_mode": mode.value, "include_identity": include_identity}
    return {
        "config": config,
        "rel_err": rel,
        "instrumented_macs": counter.total,
        "analytic_macs": analytic,
        "passed": rel < ORACLE_REL_TOL and counter.total == analytic,
    }


def _positive_factors(rng: np.random.Generator, h: int, w: int, c: int, m: int, epsilon: float):
    """Factors with strictly positive embeddings, hence strictly positive degrees."""
    params = _random_params(rng, c, m, AttentionMode.DYNAMIC, True, epsilon)
    params = replace(params, w_phi=Tensor(np.abs(params.w_phi.data) + 0.05, name="w_phi"))
    x = Tensor(rng.uniform(0.1, 1.0, size=(1, c, h, w)))
    return build_factors(x, params)


def null_vector_case(seed: int, index: int) -> Dict[str, Any]:
    rng = np.random.default_rng([seed, 1000 + index])
    h, w = (int(v) for v in rng.integers(2, 9, size=2))
    c, m = int(rng.choice([2, 4, 8])), int(rng.choice([2, 4]))
    factors = _positive_factors(rng, h, w, c, m, epsilon=0.0)
    v = np.sqrt(factors.degrees.data).reshape(1, 1, h, w)
    out = apply_laplacian(Tensor(v), factors, include_identity=True)
    norm = float(np.max(np.abs(out.data)))
    return {
        "config": {"shape": [1, c, h, w], "m": m},
        "inf_norm": norm,
        "passed": norm < NULL_VECTOR_TOL,
    }


def dense_laplacian(factors, oracle_cap: int = DEFAULT_ORACLE_CAP) -> np.ndarray:
    """I - D^-1/2 A D^-1/2 as a dense matrix (oracle only)."""
    a = materialize_similarity(factors, oracle_cap).data
    d_inv = 1.0 / np.sqrt(a.sum(axis=1) + factors.epsilon)
    return np.eye(factors.n) - d_inv[:, None] * a * d_inv[None, :]


def spectral_case(seed: int, index: int, vectors: int = 100) -> Dict[str, Any]:
    rng = np.random.default_rng([seed, 2000 + index])
    h, w = (int(v) for v in rng.integers(2, 9, size=2))
    c, m = int(rng.choice([2, 4, 8])), int(rng.choice([2, 4]))
    factors = _positive_factors(rng, h, w, c, m, epsilon=0.0)
    lap = dense_laplacian(factors)
    vecs = rng.standard_normal((vectors, factors.n))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    forms = np.einsum("ij,jk,ik->i", vecs, lap, vecs)
    low, high = float(forms.min()), float(forms.max())
    return {
        "config": {"shape": [1, c, h, w], "m": m, "vectors": vectors},
        "min_form": low,
        "max_form": high,
        "passed": low >= -SPECTRAL_TOL and (2.0 - high) >= -SPECTRAL_TOL,
    }


def zero_degree_case(seed: int, skip_epsilon: bool = False) -> Dict[str, Any]:
    """
    A pixel whose features are all zero gets a zero embedding row and zero
    degree; with the floor the identity term passes it through unchanged.
    """
    rng = np.random.default_rng([seed, 3000])
    c, m, h, w = 4, 3, 4, 4
    epsilon = 0.0 if skip_epsilon else DEFAULT_EPSILON
    params = _random_params(rng, c, m, AttentionMode.DYNAMIC, True, epsilon)
    x = rng.uniform(0.1, 1.0, size=(1, c, h, w))
    x[0, :, 0, 0] = 0.0
    config = {"shape": [1, c, h, w], "m": m, "epsilon": epsilon, "zero_pixel": [0, 0]}
    try:
        factors = build_factors(Tensor(x), params)
        out = apply_laplacian(Tensor(x), factors, include_identity=True)
    except SpyGRError as e:
        return {"config": config, "error": str(e), "passed": False}
    identity_kept = bool(np.allclose(out.data[0, :, 0, 0], x[0, :, 0, 0], rtol=0, atol=1e-12))
    return {"config": config, "zero_degree": float(factors.degrees.data[0]), "passed": identity_kept}


def _gradient_inputs(rng: np.random.Generator, c: int, m: int, h: int, w: int, levels: int):
    config = PyramidConfig.build(c, m, levels, seed=int(rng.integers(2 ** 31)))
    x = Tensor(rng.standard_normal((1, c, h, w)), name="x")
    inputs: List[Tensor] = [x]
    names = ["x"]
    for i, p in enumerate(config.per_level_params):
        for key in ("w_phi", "w_rho", "theta"):
            inputs.append(getattr(p, key))
            names.append(f"level{i}.{key}")

    def fn(x_, *weights):
        per_level = []
        for i, p in enumerate(config.per_level_params):
            w_phi, w_rho, theta = weights[3 * i:3 * i + 3]
            per_level.append(replace(p, w_phi=w_phi, w_rho=w_rho, theta=theta))
        if levels == 1:
            return graph_reason(x_, per_level[0])
        return spygr_pyramid(x_, replace(config, per_level_params=per_level))

    return fn, inputs, names


def gradient_case(seed: int, levels: int) -> Dict[str, Any]:
    """Gradients w.r.t. x and every level's w_phi, w_rho, theta on [1,6,9,9]."""
    rng = np.random.default_rng([seed, 4000 + levels])
    c, m, h, w = 6, 3, 9, 9
    for draw in range(MAX_GRADIENT_DRAWS):
        fn, inputs, names = _gradient_inputs(rng, c, m, h, w, levels)
        margin = relu_margin(fn, inputs)
        if margin >= KINK_MARGIN:
            break
        logger.debug(f"gradient inputs redrawn: relu margin {margin:.2e} < {KINK_MARGIN:.0e}")

    result = gradcheck(fn, inputs, step=1e-5, rtol=GRAD_REL_TOL, atol=GRAD_ABS_TOL, seed=seed, names=names)
    return {
        "config": {"shape": [1, c, h, w], "m": m, "levels": levels, "draw": draw, "relu_margin": margin},
        "max_rel_error": result.max_rel_error,
        "max_abs_error": result.max_abs_error,
        "checked_entries": result.checked_entries,
        "failures": result.failures[:5],
        "passed": result.passed,
    }


# =============================================================================
# Suite runner
# =============================================================================

def _run_cases(jobs: Sequence[Callable[[], Dict[str, Any]]], threads: int) -> List[Dict[str, Any]]:
    """Evaluate independent cases; results keep submission order."""
    if threads <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(job) for job in jobs]
        return [f.result() for f in futures]


def _summarize(cases: List[Dict[str, Any]], worst_key: str) -> Dict[str, Any]:
    failures = [c["config"] for c in cases if not c["passed"]]
    values = [c[worst_key] for c in cases if worst_key in c]
    return {
        "passed": not failures,
        "cases": len(cases),
        f"worst_{worst_key}": max(values) if values else None,
        "failures": failures,
    }


def run_verification(
    seed: int = 0,
    cases: int = 50,
    oracle_cap: int = DEFAULT_ORACLE_CAP,
    skip_epsilon: bool = False,
    threads: int = 1,
    suites: Sequence[str] = SUITES,
) -> Dict[str, Any]:
    """
    Run the requested suites and return a deterministic report.

    Args:
        seed: master seed for every random case
        cases: number of oracle-equivalence configurations
        skip_epsilon: disable the degree floor in the zero-degree case
        threads: worker count for independent cases
    """
    report: Dict[str, Any] = {"seed": seed, "suites": {}}
    for suite in suites:
        if suite == "oracle":
            results = _run_cases([lambda i=i: oracle_case(seed, i, oracle_cap) for i in range(cases)], threads)
            summary = _summarize(results, "rel_err")
            summary["flops_mismatches"] = [
                r["config"] for r in results if r["instrumented_macs"] != r["analytic_macs"]
            ]
        elif suite == "null_vector":
            results = _run_cases([lambda i=i: null_vector_case(seed, i) for i in range(20)], threads)
            summary = _summarize(results, "inf_norm")
        elif suite == "spectral":
            results = _run_cases([lambda i=i: spectral_case(seed, i) for i in range(20)], threads)
            summary = _summarize(results, "max_form")
            summary["worst_min_form"] = min(r["min_form"] for r in results)
        elif suite == "zero_degree":
            results = [zero_degree_case(seed, skip_epsilon)]
            summary = {"passed": results[0]["passed"], "cases": 1, "detail": results[0]}
        elif suite == "gradients":
            results = _run_cases([lambda lv=lv: gradient_case(seed, lv) for lv in (1, 4)], threads)
            summary = _summarize(results, "max_rel_error")
            summary["detail"] = results
        else:
            raise ValueError(f"unknown suite '{suite}'")
        status = "ok" if summary["passed"] else "FAILED"
        logger.info(f"Suite {suite}: {summary['cases']} cases {status}")
        report["suites"][suite] = summary
    report["passed"] = all(s["passed"] for s in report["suites"].values())
    return report


class StageVerify(StageBase):
    """Numerical verification of the layer, pyramid and cost model."""

    stage_name = "Verification"
    subcommand = "verify"
    report_filename = "verify_report.json"

    def process(self) -> Dict[str, Any]:
        return run_verification(
            seed=self.seed,
            cases=int(self.config["cases"]),
            oracle_cap=int(self.config["oracle_cap"]),
            skip_epsilon=bool(self.config["skip_epsilon"]),
            threads=get_thread_count(),
        )

    def exit_code(self, report: Dict[str, Any]) -> int:
        if report["passed"]:
            return EXIT_OK
        for name, suite in report["suites"].items():
            if not suite["passed"]:
                self.logger.error(f"Suite {name} failed for: {suite.get('failures') or suite.get('detail')}")
        return EXIT_FAILURE


VERIFY_DEFAULTS = {"seed": 0, "cases": 50, "oracle_cap": DEFAULT_ORACLE_CAP, "skip_epsilon": False}


def run_verify(config: Dict[str, Any], output_dir: Optional[str] = None):
    """Execute the verification workflow."""
    return StageVerify(config, output_dir).run()
