import numpy as np
import pytest

from rmcds.core import (
    LowRankModel,
    SamplingMask,
    generate_corruption,
    generate_low_rank,
    generate_mask,
)


# ---------------------------------------------------------------------------
# Dense oracles. Matrices are vectorized row-major, so vec(A X B) = kron(A, B^T) vec(X).
# ---------------------------------------------------------------------------

def dense_PT(U, V):
    n = U.shape[0]
    PU = U @ U.T
    PV = V @ V.T
    eye = np.eye(n)
    return np.kron(PU, eye) + np.kron(eye, PV) - np.kron(PU, PV)


def dense_mask(mask: SamplingMask):
    return np.diag(mask.to_grid().ravel().astype(float))


def top_abs_eig(A):
    A = (A + A.T) / 2
    return float(np.max(np.abs(np.linalg.eigvalsh(A))))


def tangent_basis_oracle(U, V):
    """Orthonormal basis of T from QR on the 2nr generators u_a e_k^T, e_k v_a^T."""
    n, r = U.shape
    gens = []
    for a in range(r):
        for k in range(n):
            e = np.zeros(n)
            e[k] = 1.0
            gens.append(np.outer(U[:, a], e).ravel())
            gens.append(np.outer(e, V[:, a]).ravel())
    G = np.array(gens).T
    Q, s, _ = np.linalg.svd(G, full_matrices=False)
    return Q[:, s > 1e-10 * s[0]]


def flat_model(n):
    """Rank one, U = V = ones / sqrt(n)."""
    u = np.ones((n, 1)) / np.sqrt(n)
    return LowRankModel(u, np.ones(1), u.copy())


def coordinate_model(n, r):
    U = np.eye(n)[:, :r]
    return LowRankModel(U, np.linspace(2, 1, r), U.copy())


# ---------------------------------------------------------------------------
# Conditions-passing fixtures (verified by check_conditions in their tests).
# ---------------------------------------------------------------------------

PASSING_CASES = [
    # n, r, rate, rho, seed
    (40, 1, 0.8, 0.02, 1),
    (60, 1, 0.7, 0.05, 1),
    (60, 1, 0.8, 0.02, 1),
    (60, 2, 0.9, 0.02, 1),
    (60, 1, 0.9, 0.0, 2),
]


def make_instance(n, r, rate, rho, seed, basis="sign"):
    model = generate_low_rank(n, r, seed, basis=basis)
    mask = generate_mask(n, "bernoulli", rate=rate, seed=seed + 2)
    corr = generate_corruption(n, rho, mask, 1.0, seed=seed + 4)
    return model, mask, corr


@pytest.fixture(params=PASSING_CASES, ids=lambda c: "n%d-r%d-rate%.1f-rho%.2f" % c[:4])
def passing_instance(request):
    return make_instance(*request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
