"""Dual certificate construction and relaxed-KKT verification.

The certificate is ``Lam = Lam_L + Lam_S``:

* ``Lam_L`` (golfing scheme) lives on the clean observed entries N and
  drives the tangent residual ``P_T(Lam) - U V^T`` to zero geometrically.
* ``Lam_S`` (least squares) matches ``lam * sgn(S0_bar)`` on V exactly, has
  no tangent component, and is built from a Neumann series through the
  projector onto ``T + O^perp``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .conditions import opnorm_PT_POc_PT, operator_norm, prop1_deviation
from .core import ParameterError, SamplingMask, TangentSpace, project_mask, project_mask_complement


class DivergenceError(RuntimeError):
    """A Neumann series was requested outside its convergence region."""


DEFAULT_MAX_TERMS = 500
DEFAULT_REL_STOP = 1e-10


def default_batches(n: int) -> int:
    return max(1, math.ceil(5 * math.log(n))) if n > 1 else 1


# --------------------------------------------------------------------------
# Neumann inverse on T and the sum-space projector
# --------------------------------------------------------------------------


@dataclass
class NeumannResult:
    value: np.ndarray = field(repr=False)
    terms: int
    residual: float


def _neumann(T: TangentSpace, Oc: SamplingMask, X: np.ndarray, terms: int | None,
             rel_stop: float, max_terms: int) -> tuple[np.ndarray, int]:
    # sum_i (P_T P_{O^c} P_T)^i X for X in T; adaptive when terms is None
    out = X.copy()
    term = X
    first = np.linalg.norm(X)
    if first == 0.0:
        return out, 0
    limit = max_terms if terms is None else terms
    used = 0
    for _ in range(limit):
        term = T.project(project_mask(Oc, term))
        out = out + term
        used += 1
        if terms is None and np.linalg.norm(term) <= rel_stop * first:
            break
    return out, used


def neumann_inverse_on_T(T: TangentSpace, O: SamplingMask, X, terms: int | None = None,
                         *, check: bool = True, rel_stop: float = DEFAULT_REL_STOP,
                         max_terms: int = DEFAULT_MAX_TERMS, seed: int = 0) -> NeumannResult:
    """Apply ``(P_T P_O P_T)^{-1}`` on T by its Neumann series.

    ``terms`` fixes the truncation order (sum over ``i = 0..terms``); ``None``
    stops once a term falls below ``rel_stop`` times the first. With
    ``check`` the series norm ``||P_T P_{O^c} P_T||`` is measured first and
    a value ``>= 1`` raises :class:`DivergenceError`.
    """
    X = T.project(X)
    Oc = O.complement()
    if check and len(Oc):
        a = opnorm_PT_POc_PT(T, O, seed=seed)
        if a >= 1.0:
            raise DivergenceError(f"||P_T P_O^c P_T|| = {a:.6g} >= 1; series diverges")
    val, used = _neumann(T, Oc, X, terms, rel_stop, max_terms)
    resid = float(np.linalg.norm(T.project(project_mask(O, val)) - X))
    return NeumannResult(val, used, resid)


def project_sum_space(T: TangentSpace, O: SamplingMask, M, *, check: bool = True,
                      rel_stop: float = DEFAULT_REL_STOP,
                      max_terms: int = DEFAULT_MAX_TERMS) -> np.ndarray:
    """Orthogonal projection onto ``T + O^perp``.

    Writes ``M = D + Z + rest`` with ``D`` in T, ``Z`` off O: stationarity
    gives ``P_T P_O P_T D = P_T P_O M`` and ``Z = P_{O^c}(M - D)``.
    """
    M = np.asarray(M, dtype=np.float64)
    D = neumann_inverse_on_T(T, O, T.project(project_mask(O, M)), None, check=check,
                             rel_stop=rel_stop, max_terms=max_terms).value
    return D + project_mask_complement(O, M - D)


# --------------------------------------------------------------------------
# Golfing scheme
# --------------------------------------------------------------------------


def golfing_batches(M_set: SamplingMask, k: int, eta: float, rng) -> list[SamplingMask]:
    """Split ``M_set`` into ``k`` Bernoulli(``eta``) batches covering it.

    Each grid entry outside ``M_set`` is in no batch. Each entry of
    ``M_set`` gets a membership pattern drawn from ``Ber(eta)^k``
    conditioned on being nonzero, so the union is exactly ``M_set``. When
    ``M_set`` is itself ``Ber(1 - (1 - eta)^k)`` this makes every batch
    marginally ``Ber(eta)`` over the whole grid.
    """
    n = M_set.n
    idx = M_set.index
    member = np.zeros((k, idx.size), dtype=bool)
    todo = np.arange(idx.size)
    while todo.size:
        draw = rng.random((k, todo.size)) < eta
        ok = draw.any(axis=0)
        member[:, todo[ok]] = draw[:, ok]
        todo = todo[~ok]
    return [SamplingMask(n, idx[member[i]]) for i in range(k)]


@dataclass
class GolfingDiagnostics:
    k: int
    eta: float
    D_norms: list
    Lambda_inf: float
    PTperp_opnorm: float
    diverging: bool
    batch_deviations: list = field(default_factory=list)


def golfing_certificate(T: TangentSpace, O: SamplingMask, W: SamplingMask,
                        k: int | None = None, seed: int = 0, rho: float | None = None,
                        measure_batches: bool = False
                        ) -> tuple[np.ndarray, GolfingDiagnostics]:
    """Golfing-scheme certificate supported on ``N = O & ~W``.

    With ``eta = 1 - rho^(1/k)`` and batches ``M_1..M_k`` covering
    ``M = ~W``, iterates ``Lam_i = Lam_{i-1} - eta^{-1} P_O P_{M_i} D_{i-1}``
    from ``Lam_0 = 0`` where ``D_i = P_T P_O P_M Lam_i - U V^T``.

    ``rho`` defaults to the empirical fraction ``|W| / n^2``. With
    ``measure_batches`` the per-batch deviation
    ``||P_T - eta^{-1} P_T P_O P_{M_i} P_T||`` is also recorded.
    """
    n = T.n
    if k is None:
        k = default_batches(n)
    if k < 1:
        raise ParameterError("k must be >= 1")
    if rho is None:
        rho = len(W) / (n * n)
    if not (0.0 <= rho < 1.0):
        raise ParameterError("rho must lie in [0, 1)")
    eta = 1.0 - rho ** (1.0 / k)
    M_set = W.complement()
    rng = np.random.default_rng(seed)
    batches = golfing_batches(M_set, k, eta, rng)

    N_set = O.intersect(M_set)
    UV = T.UV
    Lam = np.zeros((n, n))
    D = -UV
    D_norms = [float(np.linalg.norm(D))]
    deviations = []
    for Mi in batches:
        OMi = O.intersect(Mi)
        if measure_batches:
            deviations.append(prop1_deviation(T, O, Mi, eta))
        Lam = Lam - project_mask(OMi, D) / eta
        D = T.project(project_mask(N_set, Lam)) - UV
        D_norms.append(float(np.linalg.norm(D)))

    diverging = any(D_norms[i + 1] > D_norms[i] and D_norms[i + 2] > D_norms[i + 1]
                    and D_norms[i + 3] > D_norms[i + 2] for i in range(len(D_norms) - 3))
    Lam_L = project_mask(N_set, Lam)
    diag = GolfingDiagnostics(
        k=k, eta=eta, D_norms=D_norms,
        Lambda_inf=float(np.max(np.abs(Lam))),
        PTperp_opnorm=float(np.linalg.norm(T.project_complement(Lam), 2)),
        diverging=diverging, batch_deviations=deviations)
    return Lam_L, diag


# --------------------------------------------------------------------------
# Least-squares certificate
# --------------------------------------------------------------------------


@dataclass
class LeastSquaresDiagnostics:
    terms: int
    series_norm: float
    v_residual: float
    PTperp_opnorm: float
    N_inf: float
    tail_estimate: float


def least_squares_certificate(T: TangentSpace, O: SamplingMask, V_set: SamplingMask,
                              Sigma_bar, lam: float, terms: int | None = None,
                              *, rel_stop: float = DEFAULT_REL_STOP,
                              max_terms: int = DEFAULT_MAX_TERMS, seed: int = 0
                              ) -> tuple[np.ndarray, LeastSquaresDiagnostics]:
    """``Lam_S = lam (I - Q) sum_i (P_V Q P_V)^i Sigma_bar`` with ``Q = P_{T+O^perp}``.

    ``terms`` fixes the outer truncation (``i = 0..terms``); ``None`` stops
    adaptively. The series norm ``||P_V Q P_V||`` is measured first and a
    value ``>= 1`` raises :class:`DivergenceError`.
    """
    n = T.n
    Sig = project_mask(V_set, np.asarray(Sigma_bar, dtype=np.float64))
    N_set = O.difference(V_set)

    def Q(X):
        return project_sum_space(T, O, X, check=False)

    if len(V_set) == 0 or not np.any(Sig):
        Z = np.zeros((n, n))
        return Z, LeastSquaresDiagnostics(0, 0.0, 0.0, 0.0, 0.0, 0.0)

    a = opnorm_PT_POc_PT(T, O, seed=seed)
    if a >= 1.0:
        raise DivergenceError(f"||P_T P_O^c P_T|| = {a:.6g} >= 1; T + O^perp projector diverges")
    qnorm = operator_norm(lambda X: project_mask(V_set, Q(project_mask(V_set, X))), n,
                          tol=1e-6, seed=seed)
    if qnorm >= 1.0:
        raise DivergenceError(f"||P_V Q P_V|| = {qnorm:.6g} >= 1; series diverges")

    acc = Sig.copy()
    term = Sig
    first = np.linalg.norm(Sig)
    used = 0
    limit = max_terms if terms is None else terms
    for _ in range(limit):
        term = project_mask(V_set, Q(term))
        acc = acc + term
        used += 1
        if terms is None and np.linalg.norm(term) <= rel_stop * first:
            break
    tnorm = np.linalg.norm(term) if used else first
    tail = float(tnorm * qnorm / (1.0 - qnorm)) if used else float("nan")
    Lam_S = lam * (acc - Q(acc))
    Lam_S = project_mask(O, Lam_S)
    diag = LeastSquaresDiagnostics(
        terms=used, series_norm=float(qnorm),
        v_residual=float(np.linalg.norm(project_mask(V_set, Lam_S) - lam * Sig)),
        PTperp_opnorm=float(np.linalg.norm(T.project_complement(Lam_S), 2)),
        N_inf=float(np.max(np.abs(project_mask(N_set, Lam_S)))) if len(N_set) else 0.0,
        tail_estimate=tail)
    return Lam_S, diag


# --------------------------------------------------------------------------
# Relaxed KKT verification
# --------------------------------------------------------------------------


KKT_FIELDS = ("t_fro", "t_perp_op", "v_exact", "n_inf", "thr_t_fro", "thr_t_perp_op",
              "thr_v_exact", "thr_n_inf", "pass")


@dataclass
class KKTReport:
    """The four relaxed-KKT quantities with their thresholds.

    Passing needs ``t_fro < 1/n^2``, ``t_perp_op < 1/2``,
    ``v_exact <= 1e-6 * lam`` (numerical stand-in for equality) and
    ``n_inf < lam / 2``.
    """

    t_fro: float
    t_perp_op: float
    v_exact: float
    n_inf: float
    thresholds: tuple
    passed: bool

    def margins(self) -> dict:
        thr = self.thresholds
        return {"t_fro": thr[0] - self.t_fro, "t_perp_op": thr[1] - self.t_perp_op,
                "v_exact": thr[2] - self.v_exact, "n_inf": thr[3] - self.n_inf}

    def failed(self) -> list[str]:
        return [k for k, v in self.margins().items()
                if (v < 0 if k == "v_exact" else v <= 0)]

    def as_dict(self) -> dict:
        thr = self.thresholds
        return {"t_fro": self.t_fro, "t_perp_op": self.t_perp_op, "v_exact": self.v_exact,
                "n_inf": self.n_inf, "thr_t_fro": thr[0], "thr_t_perp_op": thr[1],
                "thr_v_exact": thr[2], "thr_n_inf": thr[3], "pass": self.passed}

    def to_text(self) -> str:
        from .io import format_kv

        return format_kv(self.as_dict())

    def csv_row(self) -> str:
        from .io import format_value

        d = self.as_dict()
        return ",".join(format_value(d[k]) for k in KKT_FIELDS)


def verify_kkt(Lam, T: TangentSpace, V_set: SamplingMask, N_set: SamplingMask, lam: float,
               n: int | None = None, Sigma_bar=None, eq_tol: float | None = None) -> KKTReport:
    """Evaluate the relaxed KKT system for a candidate multiplier.

    ``Lam`` must vanish off ``O = V | N``. ``Sigma_bar`` is the sign matrix
    on V (zero when omitted).
    """
    Lam = np.asarray(Lam, dtype=np.float64)
    n = T.n if n is None else n
    if Lam.shape != (n, n):
        raise ParameterError(f"Lambda must be {n}x{n}")
    O = V_set.union(N_set)
    if np.any(project_mask_complement(O, Lam) != 0.0):
        raise ParameterError("Lambda has entries outside the observed set")
    Sig = np.zeros((n, n)) if Sigma_bar is None else project_mask(V_set, Sigma_bar)
    eq_tol = 1e-6 * lam if eq_tol is None else eq_tol

    t_fro = float(np.linalg.norm(T.project(Lam) - T.UV))
    t_perp = float(np.linalg.norm(T.project_complement(Lam), 2))
    v_exact = float(np.linalg.norm(project_mask(V_set, Lam) - lam * Sig))
    n_inf = float(np.max(np.abs(project_mask(N_set, Lam)))) if len(N_set) else 0.0
    thr = (1.0 / n ** 2, 0.5, eq_tol, lam / 2.0)
    passed = bool(t_fro < thr[0] and t_perp < thr[1] and v_exact <= thr[2] and n_inf < thr[3])
    return KKTReport(t_fro, t_perp, v_exact, n_inf, thr, passed)


@dataclass
class CertificatePair:
    Lambda_L: np.ndarray = field(repr=False)
    Lambda_S: np.ndarray = field(repr=False)
    k_golf: int
    eta: float
    neumann_terms: int
    golfing: GolfingDiagnostics | None = None
    least_squares: LeastSquaresDiagnostics | None = None

    @property
    def Lambda(self) -> np.ndarray:
        return self.Lambda_L + self.Lambda_S


def build_certificate(T: TangentSpace, O: SamplingMask, W: SamplingMask, Sigma_bar,
                      lam: float, k: int | None = None, seed: int = 0,
                      rho: float | None = None) -> CertificatePair:
    """Golfing plus least-squares certificate for one instance."""
    V_set = O.intersect(W)
    Lam_L, gd = golfing_certificate(T, O, W, k, seed, rho)
    Lam_S, ld = least_squares_certificate(T, O, V_set, Sigma_bar, lam, seed=seed)
    return CertificatePair(Lam_L, Lam_S, gd.k, gd.eta, ld.terms, gd, ld)
