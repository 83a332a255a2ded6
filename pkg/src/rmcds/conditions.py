"""Operator norms of composed projectors and the recovery-condition report.

All linear maps here act on ``n x n`` matrices. Norms are the operator norm
induced by the Frobenius norm, computed on the vectorized map.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from .core import (
    CorruptionModel,
    LowRankModel,
    ParameterError,
    SamplingMask,
    ShapeError,
    TangentSpace,
    admissible_nu,
    incoherence,
    project_mask,
    project_mask_complement,
)

logger = logging.getLogger(__name__)

MatrixMap = Callable[[np.ndarray], np.ndarray]


class ConvergenceError(RuntimeError):
    """Iterative estimator did not converge; ``last`` holds the last iterate."""

    def __init__(self, msg, last=None, estimate=None):
        super().__init__(msg)
        self.last = last
        self.estimate = estimate


class SamplingError(RuntimeError):
    """Random restarts kept producing degenerate draws."""


def operator_norm(op: MatrixMap, n: int, tol: float = 1e-9, max_iters: int = 500,
                  seed: int = 0, *, symmetric: bool = True,
                  adjoint: MatrixMap | None = None, method: str = "lanczos") -> float:
    """Largest singular value of a linear map on ``n x n`` matrices.

    Parameters
    ----------
    op : callable
        The map, ``X -> op(X)``.
    n : int
        Side length of the matrices ``op`` acts on.
    tol : float
        Relative tolerance on the returned estimate.
    max_iters : int
        Iteration cap (restarts for ``lanczos``, steps for ``power``).
    seed : int
        Seed for the starting vector.
    symmetric : bool
        ``op`` is self-adjoint. Otherwise ``adjoint`` must be given and the
        norm is taken as ``sqrt(||adjoint o op||)``.
    method : {"lanczos", "power"}
        ``power`` runs plain power iteration; ``lanczos`` runs restarted
        Lanczos (Krylov-accelerated power iteration), which reaches 1e-9
        even when the top two eigenvalues are close.

    Raises
    ------
    ConvergenceError
        If the iteration cap is hit before ``tol`` is met.
    """
    if tol <= 0:
        raise ParameterError("tol must be positive")
    if not symmetric:
        if adjoint is None:
            raise ParameterError("non-self-adjoint map needs its adjoint")
        val = operator_norm(lambda X: adjoint(op(X)), n, tol, max_iters, seed, method=method)
        return float(np.sqrt(max(val, 0.0)))

    N = n * n
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(N)

    def matvec(v):
        return np.asarray(op(np.asarray(v, dtype=np.float64).reshape(n, n)),
                          dtype=np.float64).ravel()

    w = matvec(v0)
    if np.linalg.norm(w) <= 1e-300:
        return 0.0
    if N <= 2 or method == "power":
        return _power(matvec, v0, tol, max_iters)
    if method != "lanczos":
        raise ParameterError(f"unknown method {method!r}")
    A = LinearOperator((N, N), matvec=matvec, dtype=np.float64)
    try:
        vals = eigsh(A, k=1, which="LM", v0=v0, tol=tol, maxiter=max_iters,
                     return_eigenvectors=False)
    except ArpackNoConvergence as exc:
        est = float(np.max(np.abs(exc.eigenvalues))) if len(exc.eigenvalues) else None
        raise ConvergenceError("Lanczos did not converge", last=exc.eigenvectors,
                               estimate=est) from exc
    return float(np.abs(vals).max())


def _power(matvec, v0, tol, max_iters):
    # Power iteration on a self-adjoint map; the Rayleigh quotient of A^2
    # gives |lambda|_max even for indefinite maps.
    x = v0 / np.linalg.norm(v0)
    prev = np.inf
    for _ in range(max_iters):
        y = matvec(x)
        est = float(np.linalg.norm(y))
        if est == 0.0:
            return 0.0
        if abs(est - prev) <= tol * est:
            return est
        prev = est
        z = matvec(y)
        nz = np.linalg.norm(z)
        if nz == 0.0:
            return est
        x = z / nz
    raise ConvergenceError("power iteration did not converge", last=x, estimate=prev)


# --------------------------------------------------------------------------
# Composite projector maps
# --------------------------------------------------------------------------


def _mask_maps(M: SamplingMask):
    return (lambda X: project_mask(M, X)), (lambda X: project_mask_complement(M, X))


def opnorm_PT_mask_PT(T: TangentSpace, M: SamplingMask, tol: float = 1e-9,
                      max_iters: int = 500, seed: int = 0) -> float:
    """``||P_T P_M P_T||``, equal to ``||P_M P_T||^2``."""
    if len(M) == 0:
        return 0.0
    PM, _ = _mask_maps(M)
    return operator_norm(lambda X: T.project(PM(T.project(X))), T.n, tol, max_iters, seed)


def opnorm_PT_POc_PT(T: TangentSpace, O: SamplingMask, tol: float = 1e-9,
                     max_iters: int = 500, seed: int = 0) -> float:
    return opnorm_PT_mask_PT(T, O.complement(), tol, max_iters, seed)


def gamma_isomeric(T: TangentSpace, O: SamplingMask, tol: float = 1e-9,
                   max_iters: int = 500, seed: int = 0) -> float:
    """Isomerism margin ``1 - ||P_T P_{O^c} P_T|| / 2``.

    ``gamma > 3/4`` is the same statement as ``||P_T P_{O^c} P_T|| < 1/2``.
    """
    return 1.0 - opnorm_PT_POc_PT(T, O, tol, max_iters, seed) / 2.0


def opnorm_PV_PT(T: TangentSpace, V_set: SamplingMask, tol: float = 1e-9,
                 max_iters: int = 500, seed: int = 0) -> float:
    """``||P_V P_T||`` as the square root of ``||P_T P_V P_T||``."""
    return float(np.sqrt(opnorm_PT_mask_PT(T, V_set, tol, max_iters, seed)))


def opnorm_PNc_PT(T: TangentSpace, N_set: SamplingMask, tol: float = 1e-9,
                  max_iters: int = 500, seed: int = 0) -> float:
    """``||P_{N^perp} P_T||``; below 1 iff no nonzero tangent matrix vanishes on N."""
    return float(np.sqrt(opnorm_PT_mask_PT(T, N_set.complement(), tol, max_iters, seed)))


def prop1_operator(T: TangentSpace, O: SamplingMask, M_set: SamplingMask,
                   pi: float) -> MatrixMap:
    """The map ``P_T - pi^{-1} P_T P_O P_M P_T``."""
    if not (0.0 < pi <= 1.0):
        raise ParameterError("pi must lie in (0, 1]")
    OM = O.intersect(M_set)

    def op(X):
        PX = T.project(X)
        return PX - T.project(project_mask(OM, PX)) / pi

    return op


def prop1_deviation(T: TangentSpace, O: SamplingMask, M_set: SamplingMask, pi: float,
                    tol: float = 1e-9, max_iters: int = 500, seed: int = 0) -> float:
    """``||P_T - pi^{-1} P_T P_O P_M P_T||``."""
    return operator_norm(prop1_operator(T, O, M_set, pi), T.n, tol, max_iters, seed)


def prop2_contraction(T: TangentSpace, O: SamplingMask, M_set: SamplingMask,
                      pi: float, D) -> float:
    """``||(I - pi^{-1} P_T P_O P_M) D||_inf / ||D||_inf`` for ``D`` projected onto T."""
    if not (0.0 < pi <= 1.0):
        raise ParameterError("pi must lie in (0, 1]")
    D = T.project(D)
    dinf = np.max(np.abs(D))
    if dinf == 0.0:
        raise ValueError("D must be a nonzero element of T")
    out = D - T.project(project_mask(O.intersect(M_set), D)) / pi
    return float(np.max(np.abs(out)) / dinf)


def prop3_inequality(T: TangentSpace, N_set: SamplingMask, P) -> tuple[float, float]:
    """Return ``(||P_T P||_F, (n+1)||P_N P||_F + n||P_{T^perp} P||_F)``."""
    P = np.asarray(P, dtype=np.float64)
    n = T.n
    lhs = float(np.linalg.norm(T.project(P)))
    rhs = float((n + 1) * np.linalg.norm(project_mask(N_set, P))
                + n * np.linalg.norm(T.project_complement(P)))
    return lhs, rhs


# --------------------------------------------------------------------------
# Restricted infinity-norm estimate
# --------------------------------------------------------------------------


def _raiip_restart(T: TangentSpace, Oc: SamplingMask, rng, ascent_iters: int,
                   max_redraws: int = 100) -> float:
    n = T.n

    def A(D):
        return T.project(project_mask(Oc, D))

    for _ in range(max_redraws):
        D = T.project(rng.standard_normal((n, n)))
        dinf = np.max(np.abs(D))
        if dinf > 1e-12:
            break
    else:
        raise SamplingError("could not draw a nonzero tangent matrix")
    D = D / dinf
    Y = A(D)
    best = float(np.max(np.abs(Y)))
    for _ in range(ascent_iters):
        k = int(np.argmax(np.abs(Y)))
        if Y.flat[k] == 0.0:
            break
        E = np.zeros((n, n))
        E.flat[k] = np.sign(Y.flat[k])
        # gradient of the active entry with respect to D, restricted to T
        G = T.project(project_mask(Oc, T.project(E)))
        D_new = T.project(np.sign(G))
        dinf = np.max(np.abs(D_new))
        if dinf <= 1e-12:
            break
        D_new = D_new / dinf
        Y_new = A(D_new)
        val = float(np.max(np.abs(Y_new)))
        if val <= best:
            break
        best, D, Y = val, D_new, Y_new
    return best


def raiip_estimate(T: TangentSpace, O: SamplingMask, restarts: int = 100,
                   ascent_iters: int = 20, seed: int = 0) -> float:
    """Lower bound on ``sup_{D in T} ||P_T P_{O^c} D||_inf / ||D||_inf``.

    Multi-start ascent. Restart ``i`` draws from the substream
    ``default_rng([seed, i])``, so the value is the max over a prefix and is
    monotone in ``restarts`` for a fixed seed.
    """
    if restarts < 1:
        raise ParameterError("restarts must be >= 1")
    Oc = O.complement()
    if len(Oc) == 0:
        return 0.0
    best = 0.0
    for i in range(restarts):
        rng = np.random.default_rng([seed, i])
        best = max(best, _raiip_restart(T, Oc, rng, ascent_iters))
    return best


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------


@dataclass
class ConditionConfig:
    rho_threshold: float = 0.1
    tol: float = 1e-9
    max_iters: int = 500
    seed: int = 0
    raiip_restarts: int = 100
    raiip_iters: int = 20


REPORT_FIELDS = ("nu", "nu_admissible", "uv_inf", "uv_inf_ok", "opnorm_PT_POc_PT",
                 "gamma_eff", "raiip_estimate", "raiip_ok", "opnorm_PV_PT", "rho",
                 "rho_threshold", "all_pass")


@dataclass
class ConditionReport:
    """Measured recovery conditions for one (model, mask, corruption) instance.

    ``uv_inf_ok`` holds when some ``nu`` in ``[1, n/r]`` satisfies both
    incoherence inequalities (see :func:`rmcds.core.admissible_nu`).
    """

    nu: float
    nu_admissible: float
    uv_inf: float
    uv_inf_ok: bool
    opnorm_PT_POc_PT: float
    gamma_eff: float
    raiip_estimate: float
    raiip_ok: bool
    opnorm_PV_PT: float
    rho: float
    rho_threshold: float
    all_pass: bool
    errors: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("errors")
        return d

    def to_text(self) -> str:
        from .io import format_kv

        d = self.as_dict()
        if self.errors:
            d["errors"] = "; ".join(f"{k}: {v}" for k, v in self.errors.items())
        return format_kv(d)

    def csv_header(self) -> str:
        return ",".join(REPORT_FIELDS)

    def csv_row(self) -> str:
        from .io import format_value

        d = self.as_dict()
        return ",".join(format_value(d[k]) for k in REPORT_FIELDS)


def check_conditions(model: LowRankModel, mask: SamplingMask, corruption: CorruptionModel,
                     config: ConditionConfig | None = None) -> ConditionReport:
    """Evaluate every recovery hypothesis on one instance.

    Estimator failures are recorded in ``errors`` and make the affected
    field NaN and ``all_pass`` false; nothing is raised.
    """
    cfg = config or ConditionConfig()
    n, r = model.n, model.r
    if mask.n != n or corruption.n != n:
        raise ShapeError("model, mask and corruption must share n")
    T = model.tangent()
    errors = {}

    nu, uv_inf, _ = incoherence(model)
    nu_adm = admissible_nu(model)
    uv_ok = bool(nu_adm <= n / r)

    try:
        a = opnorm_PT_POc_PT(T, mask, cfg.tol, cfg.max_iters, cfg.seed)
    except ConvergenceError as exc:
        errors["opnorm_PT_POc_PT"] = str(exc)
        a = float("nan")
    gamma = 1.0 - a / 2.0

    try:
        raiip = raiip_estimate(T, mask, cfg.raiip_restarts, cfg.raiip_iters, cfg.seed)
    except SamplingError as exc:
        errors["raiip_estimate"] = str(exc)
        raiip = float("nan")

    try:
        pvpt = opnorm_PV_PT(T, corruption.V_set, cfg.tol, cfg.max_iters, cfg.seed)
    except ConvergenceError as exc:
        errors["opnorm_PV_PT"] = str(exc)
        pvpt = float("nan")

    raiip_ok = bool(raiip < 1.0)
    all_pass = bool(uv_ok and gamma > 0.75 and raiip_ok
                    and corruption.rho < cfg.rho_threshold and not errors)
    return ConditionReport(nu=nu, nu_admissible=nu_adm, uv_inf=uv_inf, uv_inf_ok=uv_ok,
                           opnorm_PT_POc_PT=a, gamma_eff=gamma, raiip_estimate=raiip,
                           raiip_ok=raiip_ok, opnorm_PV_PT=pvpt, rho=corruption.rho,
                           rho_threshold=cfg.rho_threshold, all_pass=all_pass,
                           errors=errors)
