"""End-to-end experiments: generate, check, solve, certify, score, sweep.

Seeding: every trial seed ``s`` feeds ``numpy.random.SeedSequence([s, k])``
with a fixed purpose index ``k`` (0 model, 1 mask, 2 corruption, 3
estimators and golfing batches). Sweeps reuse the same trial seeds in every
grid cell, so trials are reproducible regardless of scheduling order.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import product
from pathlib import Path

import numpy as np

from .certificate import (
    DivergenceError,
    build_certificate,
    verify_kkt,
)
from .conditions import ConditionConfig, check_conditions, opnorm_PNc_PT
from .core import (
    ParameterError,
    generate_corruption,
    generate_low_rank,
    generate_mask,
)
from .io import format_value
from .solver import SolverConfig, optimality_gap, solve_rmc, theorem_lambda

logger = logging.getLogger(__name__)

MODEL, MASK, CORRUPTION, ESTIMATOR = range(4)


def substream_seed(seed: int, purpose: int) -> int:
    """64-bit child seed for one purpose of one trial."""
    ss = np.random.SeedSequence([int(seed) & (2 ** 64 - 1), purpose])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class ExperimentSpec:
    n: int
    r: int = 1
    rho: float = 0.0
    mask_kind: str = "bernoulli"
    mask_params: dict = field(default_factory=lambda: {"rate": 0.6})
    lambda_mode: str | float = "theorem"
    seeds: list = field(default_factory=lambda: [0])
    solver: dict = field(default_factory=dict)
    out: str | None = None
    basis: str = "gaussian"
    magnitude_scale: float = 1.0
    success_tol: float = 1e-4
    certify: bool = True
    conditions: dict = field(default_factory=dict)

    def validate(self):
        if not self.seeds:
            raise ParameterError("seeds must be non-empty")
        if self.n < 2:
            raise ParameterError("n must be >= 2")
        if not 1 <= self.r <= self.n:
            raise ParameterError("rank must lie in [1, n]")
        if not 0.0 <= self.rho < 1.0:
            raise ParameterError("rho must lie in [0, 1)")
        if self.lambda_mode != "theorem" and not float(self.lambda_mode) > 0:
            raise ParameterError("lambda must be positive")

    def lam(self) -> float:
        if self.lambda_mode == "theorem":
            return theorem_lambda(self.n)
        return float(self.lambda_mode)

    @property
    def rate(self) -> float:
        return float(self.mask_params.get("rate", float("nan")))

    def mask_label(self) -> str:
        k = self.mask_kind
        if k == "decimation":
            return f"decimation:{self.mask_params['m']}"
        if k == "block":
            return f"block:{self.mask_params['b']}"
        if k == "file":
            return f"file:{self.mask_params['path']}"
        return k


@dataclass
class Instance:
    model: object
    mask: object
    corruption: object
    Y: np.ndarray


def build_instance(spec: ExperimentSpec, seed: int) -> Instance:
    model = generate_low_rank(spec.n, spec.r, substream_seed(seed, MODEL), basis=spec.basis)
    params = dict(spec.mask_params)
    if spec.mask_kind == "bernoulli":
        params.setdefault("seed", substream_seed(seed, MASK))
    if spec.mask_kind != "bernoulli":
        params.pop("rate", None)
    mask = generate_mask(spec.n, spec.mask_kind, **params)
    corr = generate_corruption(spec.n, spec.rho, mask, spec.magnitude_scale,
                               substream_seed(seed, CORRUPTION))
    Y = model.L0 + corr.S0
    return Instance(model, mask, corr, Y)


RECORD_FIELDS = (
    "n", "r", "rho", "mask", "rate", "lambda", "seed",
    "nu", "nu_admissible", "uv_inf", "uv_inf_ok", "opnorm_PT_POc_PT", "gamma_eff",
    "raiip_estimate", "raiip_ok", "opnorm_PV_PT", "rho_threshold", "all_pass",
    "rel_error", "sparse_error", "objective_gap", "converged", "iterations",
    "success", "kkt_pass", "status",
)


@dataclass
class TrialRecord:
    n: int
    r: int
    rho: float
    mask: str
    rate: float
    lam: float
    seed: int
    conditions: dict
    rel_error: float
    sparse_error: float
    objective_gap: float
    converged: bool
    iterations: int
    success: bool
    kkt_pass: bool
    status: str
    wall_time: float = 0.0

    def row(self) -> dict:
        d = {"n": self.n, "r": self.r, "rho": self.rho, "mask": self.mask, "rate": self.rate,
             "lambda": self.lam, "seed": self.seed}
        for k in RECORD_FIELDS:
            if k in self.conditions and k != "rho":
                d[k] = self.conditions[k]
        d.update(rel_error=self.rel_error, sparse_error=self.sparse_error,
                 objective_gap=self.objective_gap, converged=self.converged,
                 iterations=self.iterations, success=self.success,
                 kkt_pass=self.kkt_pass, status=self.status)
        return {k: d.get(k, float("nan")) for k in RECORD_FIELDS}

    def csv_row(self, timing: bool = False) -> str:
        vals = [format_value(v) for v in self.row().values()]
        if timing:
            vals.append(format_value(self.wall_time))
        return ",".join(_csv_escape(v) for v in vals)


def csv_header(timing: bool = False) -> str:
    cols = list(RECORD_FIELDS) + (["wall_time"] if timing else [])
    return ",".join(cols)


def _csv_escape(s: str) -> str:
    if any(c in s for c in ',"\n'):
        return '"' + s.replace('"', '""') + '"'
    return s


def _solver_config(spec: ExperimentSpec, lam: float, seed: int) -> SolverConfig:
    return SolverConfig(lam=lam, seed=seed, **spec.solver)


def _condition_config(spec: ExperimentSpec, seed: int) -> ConditionConfig:
    return ConditionConfig(seed=substream_seed(seed, ESTIMATOR) % (2 ** 32),
                           **spec.conditions)


def run_trial(spec: ExperimentSpec, seed: int) -> TrialRecord:
    """One synthetic recovery trial. Errors land in ``status``; never raises."""
    t0 = time.perf_counter()
    lam = float("nan")
    cond = {}
    rel = sparse = gap = float("nan")
    converged = success = kkt_pass = False
    iters = 0
    status = "ok"
    try:
        spec.validate()
        lam = spec.lam()
        inst = build_instance(spec, seed)
        rep = check_conditions(inst.model, inst.mask, inst.corruption,
                               _condition_config(spec, seed))
        cond = rep.as_dict()
        if rep.errors:
            status = "estimator: " + "; ".join(rep.errors)
        res = solve_rmc(inst.Y, inst.mask, _solver_config(spec, lam, seed))
        L0 = inst.model.L0
        S0b = inst.corruption.S0_bar
        rel = float(np.linalg.norm(res.L_star - L0) / np.linalg.norm(L0))
        sparse = float(np.linalg.norm(res.S_star - S0b) / (1.0 + np.linalg.norm(S0b)))
        gap = optimality_gap(res, L0, S0b, lam)
        converged, iters = res.converged, res.iterations
        success = bool(converged and rel <= spec.success_tol)
        if spec.certify:
            try:
                kkt_pass = _certify(inst, lam, seed).passed
            except DivergenceError as exc:
                status = f"certificate: {exc}"
    except Exception as exc:  # a trial never aborts a sweep
        logger.exception("trial failed")
        status = f"{type(exc).__name__}: {exc}"
    return TrialRecord(spec.n, spec.r, spec.rho, spec.mask_label(), spec.rate, lam, int(seed),
                       cond, rel, sparse, gap, converged, iters, success, kkt_pass, status,
                       time.perf_counter() - t0)


def _certify(inst: Instance, lam: float, seed: int, k: int | None = None):
    T = inst.model.tangent()
    c = inst.corruption
    cert = build_certificate(T, inst.mask, c.support, c.Sigma0_bar, lam, k,
                             seed=substream_seed(seed, ESTIMATOR), rho=c.rho)
    return verify_kkt(cert.Lambda, T, c.V_set, c.N_set, lam, Sigma_bar=c.Sigma0_bar)


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("RMCDS_THREADS")
        threads = int(env) if env else 1
    return max(1, int(threads))


def _run_jobs(jobs, threads):
    if threads <= 1 or len(jobs) <= 1:
        return [run_trial(s, seed) for s, seed in jobs]
    # one BLAS thread per worker keeps each trial bitwise reproducible
    saved = {k: os.environ.get(k) for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                                            "MKL_NUM_THREADS")}
    for k in saved:
        os.environ[k] = "1"
    try:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            futs = [ex.submit(run_trial, s, seed) for s, seed in jobs]
            return [f.result() for f in futs]
    finally:
        for k, v in saved.items():
            if v is None:
                os.environ.pop(k, None)
            else:
                os.environ[k] = v


@dataclass
class SweepResult:
    records: list
    summary: list
    trend: dict

    def data_csv(self, timing: bool = False) -> str:
        lines = [csv_header(timing)] + [rec.csv_row(timing) for rec in self.records]
        return "\n".join(lines) + "\n"

    def summary_csv(self) -> str:
        cols = ["n", "r", "rate", "rho", "trials", "successes", "success_fraction",
                "kkt_passes", "conditions_pass"]
        lines = [",".join(cols)]
        for row in self.summary:
            lines.append(",".join(format_value(row[c]) for c in cols))
        return "\n".join(lines) + "\n"


def run_sweep(spec: ExperimentSpec, rhos=None, rates=None, ranks=None,
              threads: int | None = None) -> SweepResult:
    """Grid over ``rho x rate x r``; one record per (cell, seed)."""
    spec.validate()
    rhos = [spec.rho] if rhos is None else list(rhos)
    rates = [spec.rate] if rates is None else list(rates)
    ranks = [spec.r] if ranks is None else list(ranks)
    if not (rhos and rates and ranks):
        raise ParameterError("sweep grid is empty")
    cells = list(product(ranks, rates, rhos))
    jobs = []
    for r, rate, rho in cells:
        params = dict(spec.mask_params)
        if spec.mask_kind == "bernoulli":
            params["rate"] = rate
        cell = replace(spec, r=r, rho=rho, mask_params=params)
        jobs += [(cell, s) for s in spec.seeds]
    records = _run_jobs(jobs, resolve_threads(threads))

    summary = []
    per = len(spec.seeds)
    for ci, (r, rate, rho) in enumerate(cells):
        recs = records[ci * per:(ci + 1) * per]
        succ = sum(x.success for x in recs)
        summary.append({"n": spec.n, "r": r, "rate": rate, "rho": rho, "trials": len(recs),
                        "successes": succ, "success_fraction": succ / len(recs),
                        "kkt_passes": sum(x.kkt_pass for x in recs),
                        "conditions_pass": sum(bool(x.conditions.get("all_pass")) for x in recs)})
    return SweepResult(records, summary, monotonicity_report(summary))


def monotonicity_report(summary: list) -> dict:
    """Count inversions of success fraction along increasing rho and rate."""
    out = {"rho_inversions": 0, "rho_max_inversion": 0.0,
           "rate_inversions": 0, "rate_max_inversion": 0.0}
    by_rho = {}
    by_rate = {}
    for row in summary:
        by_rho.setdefault((row["r"], row["rate"]), []).append((row["rho"], row["success_fraction"]))
        by_rate.setdefault((row["r"], row["rho"]), []).append((row["rate"], row["success_fraction"]))
    for seq, key, sign in ((by_rho, "rho", 1), (by_rate, "rate", -1)):
        for pts in seq.values():
            vals = [f for _, f in sorted(pts)]
            for a, b in zip(vals, vals[1:]):
                # success should fall with rho and rise with rate
                jump = (b - a) * sign
                if jump > 0:
                    out[f"{key}_inversions"] += 1
                    out[f"{key}_max_inversion"] = max(out[f"{key}_max_inversion"], jump)
    return out


def verify_pipeline(spec: ExperimentSpec, seed: int, k: int | None = None) -> dict:
    """Conditions, certificate, KKT and solver on one instance, cross-reported.

    ``implication_holds`` is false only when the KKT system passes, the
    tangent space meets N trivially, and the solver still misses the ground
    truth.
    """
    spec.validate()
    lam = spec.lam()
    inst = build_instance(spec, seed)
    T = inst.model.tangent()
    c = inst.corruption
    rep = check_conditions(inst.model, inst.mask, c, _condition_config(spec, seed))
    out = {"seed": seed, "lambda": lam, "conditions": rep.as_dict(), "status": "ok"}
    kkt = None
    try:
        cert = build_certificate(T, inst.mask, c.support, c.Sigma0_bar, lam, k,
                                 seed=substream_seed(seed, ESTIMATOR), rho=c.rho)
        kkt = verify_kkt(cert.Lambda, T, c.V_set, c.N_set, lam, Sigma_bar=c.Sigma0_bar)
        out["golfing"] = asdict(cert.golfing)
        out["least_squares"] = asdict(cert.least_squares)
        out["kkt"] = kkt.as_dict()
        out["kkt_failed"] = kkt.failed()
    except DivergenceError as exc:
        out["status"] = f"certificate: {exc}"
        out["kkt"] = None
        out["kkt_failed"] = ["certificate-diverged"]
    pnc = opnorm_PNc_PT(T, c.N_set)
    out["opnorm_PNc_PT"] = pnc

    res = solve_rmc(inst.Y, inst.mask, _solver_config(spec, lam, seed))
    L0 = inst.model.L0
    rel = float(np.linalg.norm(res.L_star - L0) / np.linalg.norm(L0))
    success = bool(res.converged and rel <= spec.success_tol)
    out["solver"] = res.summary()
    out["rel_error"] = rel
    out["success"] = success
    kkt_ok = bool(kkt is not None and kkt.passed)
    out["kkt_pass"] = kkt_ok
    out["implication_applies"] = bool(kkt_ok and pnc < 1.0)
    out["implication_holds"] = bool(not out["implication_applies"] or success)
    if not success:
        out["failure_margins"] = out["kkt_failed"]
    return out


def flatten(report: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in report.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(flatten(v, key + "."))
        elif isinstance(v, (list, tuple)) and v and not isinstance(v[0], (int, float, np.floating)):
            flat[key] = " ".join(map(str, v))
        elif isinstance(v, (list, tuple)):
            flat[key] = " ".join(format_value(x) for x in v)
        else:
            flat[key] = v
    return flat


def write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8", newline="\n")
