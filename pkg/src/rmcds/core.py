"""Matrix substrate: low-rank models, sampling masks, corruption, projectors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Union

import numpy as np


class ShapeError(ValueError):
    """Matrix dimensions do not match the model or mask."""


class ParameterError(ValueError):
    """Invalid generator or solver parameter."""


def as_matrix(X, n: int | None = None) -> np.ndarray:
    """Return ``X`` as a finite float64 square array, optionally of side ``n``."""
    A = np.asarray(X, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {A.shape}")
    if n is not None and A.shape[0] != n:
        raise ShapeError(f"expected {n}x{n} matrix, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix contains NaN or Inf")
    return A


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _orthonormalize(G: np.ndarray) -> np.ndarray:
    """QR with sign fixing: first nonzero entry of each column is positive."""
    Q, _ = np.linalg.qr(G)
    for k in range(Q.shape[1]):
        col = Q[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-14)
        if nz.size and col[nz[0]] < 0:
            Q[:, k] = -col
    return Q


# --------------------------------------------------------------------------
# Index sets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplingMask:
    """A set of grid positions in ``[0, n) x [0, n)``.

    Stored as sorted, unique row-major flat indices ``i * n + j``. The same
    type is used for every index set in the package (observed set, corruption
    support, clean/corrupted observed entries, golfing batches).
    """

    n: int
    index: np.ndarray = field(repr=False)

    def __post_init__(self):
        idx = np.unique(np.asarray(self.index, dtype=np.int64).ravel())
        if self.n < 1:
            raise ParameterError("side length must be positive")
        if idx.size and (idx[0] < 0 or idx[-1] >= self.n * self.n):
            raise ParameterError("mask index out of range")
        object.__setattr__(self, "index", _frozen(idx))

    @classmethod
    def from_pairs(cls, n: int, pairs: Iterable[tuple[int, int]]) -> "SamplingMask":
        pairs = list(pairs)
        if not pairs:
            return cls(n, np.empty(0, dtype=np.int64))
        ij = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if np.any(ij < 0) or np.any(ij >= n):
            raise ParameterError("mask index out of range")
        flat = ij[:, 0] * n + ij[:, 1]
        if np.unique(flat).size != flat.size:
            raise ParameterError("duplicate pairs in mask")
        return cls(n, flat)

    @classmethod
    def from_grid(cls, grid) -> "SamplingMask":
        g = np.asarray(grid, dtype=bool)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ShapeError(f"expected square boolean grid, got {g.shape}")
        return cls(g.shape[0], np.flatnonzero(g.ravel()))

    @classmethod
    def full(cls, n: int) -> "SamplingMask":
        return cls(n, np.arange(n * n, dtype=np.int64))

    @classmethod
    def empty(cls, n: int) -> "SamplingMask":
        return cls(n, np.empty(0, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.index.size)

    def __contains__(self, pair) -> bool:
        i, j = pair
        k = i * self.n + j
        pos = np.searchsorted(self.index, k)
        return bool(pos < self.index.size and self.index[pos] == k)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SamplingMask):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.index, other.index)

    def __hash__(self) -> int:
        return hash((self.n, self.index.tobytes()))

    @property
    def rows(self) -> np.ndarray:
        return self.index // self.n

    @property
    def cols(self) -> np.ndarray:
        return self.index % self.n

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.rows.tolist(), self.cols.tolist()))

    def to_grid(self) -> np.ndarray:
        g = np.zeros(self.n * self.n, dtype=bool)
        g[self.index] = True
        return g.reshape(self.n, self.n)

    def fraction(self) -> float:
        return len(self) / (self.n * self.n)

    def _check(self, other: "SamplingMask"):
        if other.n != self.n:
            raise ShapeError(f"mask sizes differ: {self.n} vs {other.n}")

    def complement(self) -> "SamplingMask":
        return SamplingMask(self.n, np.setdiff1d(np.arange(self.n * self.n), self.index,
                                                 assume_unique=True))

    def intersect(self, other: "SamplingMask") -> "SamplingMask":
        self._check(other)
        return SamplingMask(self.n, np.intersect1d(self.index, other.index, assume_unique=True))

    def union(self, other: "SamplingMask") -> "SamplingMask":
        self._check(other)
        return SamplingMask(self.n, np.union1d(self.index, other.index))

    def difference(self, other: "SamplingMask") -> "SamplingMask":
        self._check(other)
        return SamplingMask(self.n, np.setdiff1d(self.index, other.index, assume_unique=True))

    def issubset(self, other: "SamplingMask") -> bool:
        self._check(other)
        return bool(np.all(np.isin(self.index, other.index, assume_unique=True)))


IndexLike = Union[SamplingMask, np.ndarray]


def project_mask(M: IndexLike, X) -> np.ndarray:
    """Keep the entries of ``X`` on the index set ``M`` and zero the rest.

    ``M`` may be a :class:`SamplingMask` or a boolean grid of the same shape.
    """
    X = np.asarray(X, dtype=np.float64)
    if isinstance(M, SamplingMask):
        if X.shape != (M.n, M.n):
            raise ShapeError(f"matrix {X.shape} does not match mask side {M.n}")
        out = np.zeros(X.shape)
        out.flat[M.index] = X.flat[M.index]
        return out
    grid = np.asarray(M, dtype=bool)
    if grid.shape != X.shape:
        raise ShapeError(f"matrix {X.shape} does not match grid {grid.shape}")
    return np.where(grid, X, 0.0)


def project_mask_complement(M: SamplingMask, X) -> np.ndarray:
    """Zero the entries of ``X`` on ``M``."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape != (M.n, M.n):
        raise ShapeError(f"matrix {X.shape} does not match mask side {M.n}")
    out = np.array(X, copy=True)
    out.flat[M.index] = 0.0
    return out


def generate_mask(n: int, kind: str = "full", *, m: int | None = None,
                  b: int | None = None, rate: float | None = None,
                  seed: int | None = None, path=None) -> SamplingMask:
    """Build a deterministic observation pattern.

    ``kind`` is one of ``full``, ``decimation`` (needs ``m``), ``block``
    (needs ``b``), ``bernoulli`` (needs ``rate`` and ``seed``; the draw is
    frozen once made) or ``file`` (needs ``path``).
    """
    if n < 1:
        raise ParameterError("n must be positive")
    if kind == "full":
        return SamplingMask.full(n)
    if kind == "decimation":
        if m is None or m < 2:
            raise ParameterError("decimation needs m >= 2")
        i, j = np.divmod(np.arange(n * n), n)
        return SamplingMask(n, np.flatnonzero((i + j) % m != 0))
    if kind == "block":
        if b is None or b < 0 or b >= n:
            raise ParameterError("block needs 0 <= b < n")
        grid = np.ones((n, n), dtype=bool)
        grid[:b, :b] = False
        return SamplingMask.from_grid(grid)
    if kind in ("bernoulli", "fixed-seed-bernoulli"):
        if rate is None or not (0.0 < rate <= 1.0):
            raise ParameterError("bernoulli rate must lie in (0, 1]")
        rng = np.random.default_rng(0 if seed is None else seed)
        keep = rng.random(n * n) < rate
        return SamplingMask(n, np.flatnonzero(keep))
    if kind in ("file", "from-file"):
        from .io import read_mask

        mask = read_mask(path)
        if mask.n != n:
            raise ShapeError(f"mask file is for n={mask.n}, expected {n}")
        return mask
    raise ParameterError(f"unknown mask kind {kind!r}")


# --------------------------------------------------------------------------
# Low-rank model and tangent space
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LowRankModel:
    """Ground truth ``L0 = U diag(sigma) V^T`` on an ``n x n`` grid."""

    U: np.ndarray = field(repr=False)
    sigma: np.ndarray
    V: np.ndarray = field(repr=False)

    def __post_init__(self):
        U = np.asarray(self.U, dtype=np.float64)
        V = np.asarray(self.V, dtype=np.float64)
        s = np.asarray(self.sigma, dtype=np.float64).ravel()
        if U.ndim != 2 or U.shape != V.shape or U.shape[1] != s.size:
            raise ShapeError("U, V must be n x r and sigma length r")
        n, r = U.shape
        if not 1 <= r <= n:
            raise ParameterError(f"invalid rank {r} for n={n}")
        eye = np.eye(r)
        if (np.abs(U.T @ U - eye).max() > 1e-10 or np.abs(V.T @ V - eye).max() > 1e-10):
            raise ParameterError("U and V must have orthonormal columns")
        if np.any(s <= 0) or np.any(np.diff(s) > 0):
            raise ParameterError("sigma must be positive and non-increasing")
        object.__setattr__(self, "U", _frozen(U))
        object.__setattr__(self, "V", _frozen(V))
        object.__setattr__(self, "sigma", _frozen(s))

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def r(self) -> int:
        return self.U.shape[1]

    @property
    def L0(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T

    @property
    def UV(self) -> np.ndarray:
        return self.U @ self.V.T

    def tangent(self) -> "TangentSpace":
        return TangentSpace(self.U, self.V)


def generate_low_rank(n: int, r: int, seed: int, basis: str = "gaussian") -> LowRankModel:
    """Draw a seeded rank-``r`` model with singular values uniform in [1, 2].

    ``basis="gaussian"`` orthonormalizes standard normal ``n x r`` draws.
    ``basis="sign"`` orthonormalizes random +-1 draws instead, which gives
    flatter (more incoherent) singular vectors at small ``n``.
    """
    if not isinstance(r, (int, np.integer)) or r < 1 or r > n:
        raise ParameterError(f"invalid rank r={r} for n={n}")
    rng = np.random.default_rng(seed)
    if basis == "gaussian":
        GU = rng.standard_normal((n, r))
        GV = rng.standard_normal((n, r))
    elif basis == "sign":
        GU = rng.choice([-1.0, 1.0], size=(n, r))
        GV = rng.choice([-1.0, 1.0], size=(n, r))
    else:
        raise ParameterError(f"unknown basis {basis!r}")
    sigma = np.sort(rng.uniform(1.0, 2.0, size=r))[::-1]
    return LowRankModel(_orthonormalize(GU), sigma, _orthonormalize(GV))


@dataclass(frozen=True)
class TangentSpace:
    """Tangent space ``{U R^T + Q V^T}`` of the rank-r manifold at ``U V^T``."""

    U: np.ndarray = field(repr=False)
    V: np.ndarray = field(repr=False)

    def __post_init__(self):
        U = np.asarray(self.U, dtype=np.float64)
        V = np.asarray(self.V, dtype=np.float64)
        if U.ndim != 2 or U.shape != V.shape:
            raise ShapeError("U and V must both be n x r")
        object.__setattr__(self, "U", _frozen(U))
        object.__setattr__(self, "V", _frozen(V))

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def r(self) -> int:
        return self.U.shape[1]

    @property
    def UV(self) -> np.ndarray:
        return self.U @ self.V.T

    @property
    def dim(self) -> int:
        return 2 * self.n * self.r - self.r ** 2

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape != (self.n, self.n):
            raise ShapeError(f"expected {self.n}x{self.n} matrix, got {X.shape}")
        return X

    def project(self, X) -> np.ndarray:
        X = self._check(X)
        U, V = self.U, self.V
        UtX = U.T @ X
        XV = X @ V
        # U U^T X + X V V^T - U U^T X V V^T
        return U @ UtX + (XV - U @ (UtX @ V)) @ V.T

    def project_complement(self, X) -> np.ndarray:
        X = self._check(X)
        return X - self.project(X)

    def basis(self) -> np.ndarray:
        """Orthonormal basis of T as columns of an ``n^2 x dim`` array."""
        n, r = self.n, self.r
        gens = []
        for a in range(r):
            for k in range(n):
                e = np.zeros(n)
                e[k] = 1.0
                gens.append(np.outer(self.U[:, a], e).ravel())
                gens.append(np.outer(e, self.V[:, a]).ravel())
        G = np.array(gens).T
        Q, R, _ = _pivoted_qr(G)
        d = np.abs(np.diag(R))
        rank = int(np.sum(d > 1e-10 * max(d.max(), 1.0)))
        return Q[:, :rank]


def _pivoted_qr(G):
    from scipy.linalg import qr

    return qr(G, mode="economic", pivoting=True)


def project_tangent(T: TangentSpace, X) -> np.ndarray:
    """Orthogonal projection onto the tangent space."""
    return T.project(X)


def project_tangent_complement(T: TangentSpace, X) -> np.ndarray:
    return T.project_complement(X)


def incoherence(model: LowRankModel | TangentSpace) -> tuple[float, float, bool]:
    """Coherence ``nu``, ``||U V^T||_inf`` and the strengthened-bound flag.

    ``nu = (n/r) max(max_i ||U^T e_i||^2, max_i ||V^T e_i||^2)``; the flag is
    ``||U V^T||_inf <= sqrt(nu r) / (n sqrt(log n))``.
    """
    U, V = model.U, model.V
    n, r = U.shape
    lev = max(np.max(np.sum(U ** 2, axis=1)), np.max(np.sum(V ** 2, axis=1)))
    nu = float(n / r * lev)
    uv_inf = float(np.max(np.abs(U @ V.T)))
    if n < 2:
        return nu, uv_inf, False
    bound = np.sqrt(nu * r) / (n * np.sqrt(np.log(n)))
    return nu, uv_inf, bool(uv_inf <= bound)


def admissible_nu(model: LowRankModel | TangentSpace) -> float:
    """Smallest ``nu`` meeting both incoherence inequalities at once.

    The row-leverage bound needs ``nu >= nu_rows``; the entrywise bound on
    ``U V^T`` needs ``nu >= n^2 log(n) ||U V^T||_inf^2 / r``.
    """
    nu, uv_inf, _ = incoherence(model)
    n, r = model.U.shape
    if n < 2:
        return float("inf")
    return float(max(1.0, nu, n * n * np.log(n) * uv_inf ** 2 / r))


# --------------------------------------------------------------------------
# Corruption
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CorruptionModel:
    """Sparse corruption ``S0`` on a Bernoulli support with Rademacher signs.

    Carries the observation mask so the derived sets ``V = O & W`` (observed
    corrupted) and ``N = O & ~W`` (observed clean) are available directly.
    """

    n: int
    rho: float
    support: SamplingMask
    signs: np.ndarray = field(repr=False)
    magnitudes: np.ndarray = field(repr=False)
    seed: int
    mask: SamplingMask = field(repr=False)

    def __post_init__(self):
        s = np.asarray(self.signs, dtype=np.float64)
        m = np.asarray(self.magnitudes, dtype=np.float64)
        if s.shape != (len(self.support),) or m.shape != s.shape:
            raise ShapeError("one sign and one magnitude per support entry")
        if not np.all(np.abs(s) == 1.0):
            raise ParameterError("signs must be exactly +-1")
        if np.any(m <= 0):
            raise ParameterError("magnitudes must be positive")
        if self.support.n != self.n or self.mask.n != self.n:
            raise ShapeError("support and mask must match n")
        object.__setattr__(self, "signs", _frozen(s))
        object.__setattr__(self, "magnitudes", _frozen(m))

    @property
    def S0(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        out.flat[self.support.index] = self.signs * self.magnitudes
        return out

    @property
    def S0_bar(self) -> np.ndarray:
        """Observed part of the corruption."""
        return project_mask(self.mask, self.S0)

    @property
    def Sigma0_bar(self) -> np.ndarray:
        return np.sign(self.S0_bar)

    @property
    def V_set(self) -> SamplingMask:
        return self.mask.intersect(self.support)

    @property
    def N_set(self) -> SamplingMask:
        return self.mask.difference(self.support)


def generate_corruption(n: int, rho: float, mask: SamplingMask,
                        magnitude_scale: float = 1.0, seed: int = 0) -> CorruptionModel:
    """Bernoulli(``rho``) support over the full grid, Rademacher signs,
    magnitudes uniform in ``[scale/2, scale]``."""
    if not (0.0 <= rho < 1.0):
        raise ParameterError("rho must lie in [0, 1)")
    if magnitude_scale <= 0:
        raise ParameterError("magnitude_scale must be positive")
    if mask.n != n:
        raise ShapeError("mask side does not match n")
    rng = np.random.default_rng(seed)
    support = SamplingMask(n, np.flatnonzero(rng.random(n * n) < rho))
    k = len(support)
    signs = rng.choice([-1.0, 1.0], size=k)
    mags = rng.uniform(magnitude_scale / 2, magnitude_scale, size=k)
    return CorruptionModel(n, float(rho), support, signs, mags, int(seed), mask)
