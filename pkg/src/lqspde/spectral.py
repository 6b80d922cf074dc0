"""Spectral workspace for the controlled stochastic heat equation on (0, 1).

The state space is discretized in the Dirichlet sine basis e_k(y) = sqrt(2) sin(k pi y),
in which the Laplacian is diagonal with eigenvalues mu_k = -(k pi)^2 and the heat
semigroup acts exactly.  Multiplication operators (the noise channels of the Anderson
model) become dense symmetric matrices of triple-product coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SymOperator",
    "SpectralBasis",
    "GradedTimeGrid",
    "build_anderson_basis",
    "sine_triple_product",
    "semigroup_sandwich",
    "verify_ac0",
    "graded_grid",
]

SYM_TOL = 1e-8
PSD_TOL = 1e-9


def symmetrize(mat: np.ndarray, tol: float = SYM_TOL) -> np.ndarray:
    """Return the symmetric part of `mat`, rejecting matrices that are not
    symmetric to within `tol` (relative to their magnitude)."""
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {mat.shape}")
    skew = np.max(np.abs(mat - mat.T))
    scale = max(1.0, np.max(np.abs(mat)))
    if skew > tol * scale:
        raise ValueError(f"matrix is not symmetric: max asymmetry {skew:.3e}")
    return 0.5 * (mat + mat.T)


def min_eigenvalue(mat: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (mat + mat.T))[0])


def operator_norm(mat: np.ndarray) -> float:
    """Spectral norm of a symmetric matrix."""
    if mat.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (mat + mat.T)))))


@dataclass(frozen=True)
class SymOperator:
    """A self-adjoint operator in the spectral basis, stored as a symmetric matrix.

    Construction symmetrizes the entries (after checking asymmetry is below a
    tolerance) and optionally certifies positive semidefiniteness.
    """

    entries: np.ndarray
    psd: bool = False

    def __post_init__(self):
        ent = symmetrize(self.entries)
        if self.psd and min_eigenvalue(ent) < -PSD_TOL:
            raise ValueError(
                f"operator flagged PSD has eigenvalue {min_eigenvalue(ent):.3e} < -{PSD_TOL}"
            )
        object.__setattr__(self, "entries", ent)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def norm(self) -> float:
        return operator_norm(self.entries)

    def min_eig(self) -> float:
        return min_eigenvalue(self.entries)

    def quadratic_form(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.entries @ x)

    @staticmethod
    def identity(dim: int, scale: float = 1.0) -> "SymOperator":
        return SymOperator(scale * np.eye(dim), psd=scale >= 0)

    @staticmethod
    def zero(dim: int) -> "SymOperator":
        return SymOperator(np.zeros((dim, dim)), psd=True)


def _cos_sin_overlap(m: int, l: int) -> float:
    # int_0^1 cos(m pi y) sin(l pi y) dy for integers m >= 0, l >= 1
    if (l + m) % 2 == 0:
        return 0.0
    return 2.0 * l / ((l * l - m * m) * math.pi)


def sine_triple_product(j: int, k: int, l: int) -> float:
    """Closed form of int_0^1 e_j e_k e_l dy with e_n(y) = sqrt(2) sin(n pi y).

    Vanishes whenever j + k + l is even (the integrand is odd under y -> 1 - y).
    """
    if min(j, k, l) < 1:
        raise ValueError("mode indices must be positive")
    return math.sqrt(2.0) * (_cos_sin_overlap(abs(j - k), l) - _cos_sin_overlap(j + k, l))


@dataclass(frozen=True)
class SpectralBasis:
    """Galerkin workspace: retained sine modes, Laplacian eigenvalues and the
    matrices of the noise multiplication operators.

    eigenvalues must be strictly decreasing and negative; each multiplier
    matrix must be symmetric.
    """

    eigenvalues: np.ndarray             # (M,) rates, strictly decreasing, < 0
    multipliers: np.ndarray             # (N_noise, M, M) symmetric channel matrices

    def __post_init__(self):
        eig = np.asarray(self.eigenvalues, dtype=float)
        if eig.ndim != 1 or eig.size < 1:
            raise ValueError("eigenvalues must be a non-empty vector")
        if np.any(eig >= 0):
            raise ValueError("all eigenvalues must be negative")
        if np.any(np.diff(eig) >= 0):
            raise ValueError("eigenvalues must be strictly decreasing")
        mult = np.asarray(self.multipliers, dtype=float)
        if mult.ndim != 3 or mult.shape[1:] != (eig.size, eig.size):
            raise ValueError(f"multipliers must have shape (N, {eig.size}, {eig.size})")
        for jj in range(mult.shape[0]):
            mult[jj] = symmetrize(mult[jj])
        object.__setattr__(self, "eigenvalues", eig)
        object.__setattr__(self, "multipliers", mult)

    @property
    def M(self) -> int:
        return self.eigenvalues.size

    @property
    def N_noise(self) -> int:
        return self.multipliers.shape[0]

    def semigroup(self, t: float) -> np.ndarray:
        """Diagonal of e^{tA}."""
        if t < 0:
            raise ValueError("t must be nonnegative")
        return np.exp(self.eigenvalues * t)

    def scaled(self, noise_scale: float) -> "SpectralBasis":
        return SpectralBasis(self.eigenvalues, noise_scale * self.multipliers)


def build_anderson_basis(M: int, N_noise: int) -> SpectralBasis:
    """Spectral data of the controlled Anderson model: Dirichlet Laplacian
    eigenvalues -(k pi)^2 and multiplication-by-e_j channel matrices.

    Entries come from the closed form for triple sine products; the pattern
    (C_j)_{kl} = 0 for j + k + l even is exact.
    """
    if M < 1 or N_noise < 1:
        raise ValueError("M and N_noise must be positive")
    eig = -np.array([(k * math.pi) ** 2 for k in range(1, M + 1)])
    mult = np.zeros((N_noise, M, M))
    for j in range(1, N_noise + 1):
        for k in range(1, M + 1):
            for l in range(k, M + 1):
                val = sine_triple_product(j, k, l)
                mult[j - 1, k - 1, l - 1] = val
                mult[j - 1, l - 1, k - 1] = val
    return SpectralBasis(eig, mult)


def semigroup_sandwich(basis: SpectralBasis, t: float, X: SymOperator) -> SymOperator:
    """e^{A* t} X e^{A t} in the spectral basis; exact since A is diagonal."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if X.dim != basis.M:
        raise ValueError(f"operator dimension {X.dim} != basis dimension {basis.M}")
    e = basis.semigroup(t)
    return SymOperator(e[:, None] * X.entries * e[None, :], psd=X.psd)


def sandwich_matrix(eigenvalues: np.ndarray, t: float, X: np.ndarray) -> np.ndarray:
    """Raw-matrix version of the semigroup sandwich (no validation)."""
    e = np.exp(eigenvalues * t)
    return e[:, None] * X * e[None, :]


def verify_ac0(basis: SpectralBasis, t_samples, alpha: float, x=None, margin: float = 0.1) -> dict:
    """Fit the small-time growth of S(t) = sum_j |e^{At} C_j x|^2.

    Returns the fitted exponent and prefactor of S(t) ~ const * t^exponent and
    whether the exponent clears -2*alpha - margin.
    """
    t_samples = np.asarray(t_samples, dtype=float)
    if t_samples.size == 0:
        raise ValueError("t_samples must be non-empty")
    if np.any(t_samples <= 0):
        raise ValueError("all t_samples must be positive")
    if not 0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 1/2)")
    if x is None:
        x = np.ones(basis.M) / math.sqrt(basis.M)
    x = np.asarray(x, dtype=float)
    # S(t) = sum_k e^{2 mu_k t} w_k with w_k = sum_j (C_j x)_k^2
    cx = basis.multipliers @ x                      # (N, M)
    w = np.sum(cx ** 2, axis=0)                     # (M,)
    S = np.array([np.sum(np.exp(2.0 * basis.eigenvalues * t) * w) for t in t_samples])
    if np.all(S == 0):
        return {"fitted_exponent": 0.0, "constant": 0.0, "passed": True, "alpha": alpha}
    slope, intercept = np.polyfit(np.log(t_samples), np.log(S), 1)
    return {
        "fitted_exponent": float(slope),
        "constant": float(math.exp(intercept)),
        "passed": bool(slope >= -2.0 * alpha - margin),
        "alpha": alpha,
    }


@dataclass(frozen=True)
class GradedTimeGrid:
    """Strictly increasing nodes on [0, T], clustered near T to resolve a
    (T - s)^(-2 alpha) weight: t_k = T (1 - (1 - k/K)^gamma)."""

    T: float
    K: int
    nodes: np.ndarray = field(repr=False)
    gamma: float = 1.0

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if self.T <= 0:
            raise ValueError("T must be positive")
        if self.K < 2 or nodes.size != self.K + 1:
            raise ValueError("grid needs K >= 2 intervals and K+1 nodes")
        if nodes[0] != 0.0 or abs(nodes[-1] - self.T) > 1e-14 * self.T:
            raise ValueError("nodes must start at 0 and end at T")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("nodes must be strictly increasing")
        nodes = nodes.copy()
        nodes[-1] = self.T
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def graded(cls, T: float, K: int, alpha: float) -> "GradedTimeGrid":
        if not 0 < alpha < 0.5:
            raise ValueError("alpha must lie in (0, 1/2)")
        if K < 2:
            raise ValueError("K must be at least 2")
        gamma = max(1.0, 1.0 / (1.0 - 2.0 * alpha))
        k = np.arange(K + 1)
        nodes = T * (1.0 - (1.0 - k / K) ** gamma)
        return cls(T=T, K=K, nodes=nodes, gamma=gamma)

    @classmethod
    def uniform(cls, T: float, K: int) -> "GradedTimeGrid":
        return cls(T=T, K=K, nodes=np.linspace(0.0, T, K + 1), gamma=1.0)

    def refined(self) -> "GradedTimeGrid":
        """Same grading with 2K intervals; shares every node of this grid."""
        if self.gamma == 1.0:
            return GradedTimeGrid.uniform(self.T, 2 * self.K)
        k = np.arange(2 * self.K + 1)
        nodes = self.T * (1.0 - (1.0 - k / (2 * self.K)) ** self.gamma)
        return GradedTimeGrid(T=self.T, K=2 * self.K, nodes=nodes, gamma=self.gamma)

    @property
    def spacings(self) -> np.ndarray:
        return np.diff(self.nodes)

    def left_index(self, t: float) -> int:
        """Index k with nodes[k] <= t < nodes[k+1] (clipped at the ends)."""
        idx = int(np.searchsorted(self.nodes, t, side="right") - 1)
        return min(max(idx, 0), self.K)


def graded_grid(T: float, K: int, alpha: float) -> GradedTimeGrid:
    """Grid with node density matched to the (T - s)^(-2 alpha) terminal weight."""
    return GradedTimeGrid.graded(T, K, alpha)
