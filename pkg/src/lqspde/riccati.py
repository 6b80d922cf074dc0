"""Finite-horizon operator Riccati equation via quasi-linearization.

Starting from P^0 = 0, each sweep solves the Lyapunov equation obtained by
freezing the feedback gain at the previous iterate.  The iterates decrease in
the PSD order from N = 1 on, and the solver certifies this at every node.  An
independent cross-check integrates the matrix Riccati ODE directly with an
adaptive stiff integrator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .errors import (
    InternalConsistencyError,
    NonConvergenceError,
    NumericalPSDError,
    SingularityError,
)
from .lyapunov import LyapunovData, NodeTable, OperatorPath, channel_congruence, solve_lyapunov
from .spectral import GradedTimeGrid, SpectralBasis, SymOperator, operator_norm, symmetrize

__all__ = [
    "RiccatiProblem",
    "GainPath",
    "RiccatiSolution",
    "lambda_operator",
    "quasi_linearize",
    "direct_riccati_oracle",
    "completion_identity_check",
    "riccati_form1_residual",
]

ORACLE_DIM_GUARD = 16
PSD_SLACK = 1e-9


def _as_timefunc(value):
    if value is None or callable(value):
        return value
    arr = np.asarray(value, dtype=float)
    return lambda t, _a=arr: _a


@dataclass
class RiccatiProblem:
    """Coefficients of one linear-quadratic instance on [0, T].

    B, D, C, Q, R may be constants or functions of time; C defaults to the
    basis noise multipliers.  R must dominate delta * I; Q and G must be PSD.
    """

    basis: SpectralBasis
    B: Callable | np.ndarray            # t -> (M, m)
    Q: Callable | np.ndarray            # t -> (M, M), PSD
    R: Callable | np.ndarray            # t -> (m, m), >= delta I
    G: np.ndarray                       # (M, M), PSD
    delta: float
    T: float
    alpha: float = 0.25
    D: Callable | np.ndarray | None = None     # t -> (N, M, m)
    C: Callable | np.ndarray | None = None     # t -> (N, M, M); default basis multipliers
    time_invariant: bool = False

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("R must be strictly positive: delta > 0 required")
        if self.T <= 0:
            raise ValueError("horizon T must be positive")
        if not 0 < self.alpha < 0.5:
            raise ValueError("alpha must lie in (0, 1/2)")
        constants = all(not callable(v) for v in (self.B, self.Q, self.R) if v is not None)
        constants &= not callable(self.D) and not callable(self.C)
        self.B = _as_timefunc(self.B)
        self.Q = _as_timefunc(self.Q)
        self.R = _as_timefunc(self.R)
        self.D = _as_timefunc(self.D)
        self.C = _as_timefunc(self.C) if self.C is not None else (
            lambda t, _c=self.basis.multipliers: _c
        )
        self.G = symmetrize(np.asarray(self.G, dtype=float))
        if not self.time_invariant:
            self.time_invariant = constants
        M = self.basis.M
        B0 = np.asarray(self.B(0.0), dtype=float)
        if B0.ndim != 2 or B0.shape[0] != M:
            raise ValueError(f"B must map the control space into the {M}-dim state space")
        self.m = B0.shape[1]
        if self.G.shape[0] != M:
            raise ValueError("G has wrong dimension")
        if np.linalg.eigvalsh(self.G)[0] < -PSD_SLACK:
            raise ValueError("terminal weight G must be PSD")

    @property
    def M(self) -> int:
        return self.basis.M

    @property
    def N_noise(self) -> int:
        return self.basis.N_noise

    def coefficients_at(self, t: float):
        B = np.asarray(self.B(t), dtype=float)
        Q = np.asarray(self.Q(t), dtype=float)
        R = np.asarray(self.R(t), dtype=float)
        C = np.asarray(self.C(t), dtype=float)
        D = np.asarray(self.D(t), dtype=float) if self.D is not None else None
        return B, Q, R, C, D

    def validate_on_grid(self, grid: GradedTimeGrid) -> None:
        times = grid.nodes if not self.time_invariant else grid.nodes[:1]
        for t in times:
            _, Q, R, _, _ = self.coefficients_at(t)
            if np.linalg.eigvalsh(symmetrize(Q))[0] < -PSD_SLACK:
                raise ValueError(f"Q({t}) is not PSD")
            if np.linalg.eigvalsh(symmetrize(R))[0] < self.delta - 1e-12:
                raise ValueError(f"R({t}) does not dominate delta*I (delta={self.delta})")

    def d_tail_norm(self, first_channel: int = 0, t: float = 0.0) -> float:
        """sum_{j > first_channel} ||D_j||^2: the Hilbert-Schmidt tail of the
        control-noise channels beyond a truncation index."""
        if self.D is None:
            return 0.0
        D = np.asarray(self.D(t), dtype=float)
        return float(sum(np.linalg.norm(D[j], 2) ** 2 for j in range(first_channel, D.shape[0])))

    def with_terminal(self, G: np.ndarray, T: Optional[float] = None) -> "RiccatiProblem":
        new = replace(self, G=np.asarray(G, dtype=float))
        if T is not None:
            new.T = T
        return new


@dataclass(frozen=True)
class GainPath:
    """Feedback gains lambda(t_k, P_k) and the control-space operators
    Lambda(t_k, P_k) along a grid."""

    grid: GradedTimeGrid
    gains: np.ndarray                  # (K+1, m, M)
    Lambda: np.ndarray                 # (K+1, m, m)
    delta: float = 0.0

    def __post_init__(self):
        if self.gains.shape[0] != self.grid.K + 1 or self.Lambda.shape[0] != self.grid.K + 1:
            raise ValueError("need one gain and one Lambda per node")
        lam_min = min(np.linalg.eigvalsh(0.5 * (L + L.T))[0] for L in self.Lambda)
        if self.delta > 0 and lam_min < self.delta - 1e-9 * max(1.0, self.delta):
            raise ValueError(f"Lambda path violates the delta*I floor: min eig {lam_min:.3e}")

    @property
    def m(self) -> int:
        return self.gains.shape[1]

    def gain_at(self, t: float) -> np.ndarray:
        # left-node lookup; at t = T the last interior node's gain is used,
        # which caps any terminal blow-up of the feedback
        k = self.grid.left_index(t)
        if k >= self.grid.K:
            k = self.grid.K - 1
        return self.gains[k]

    def node_gain(self, k: int) -> np.ndarray:
        return self.gains[min(k, self.grid.K - 1)]

    def gain_exponent(self, tail_fraction: float = 0.5) -> dict:
        """Fitted exponent of ||gain(t)|| against (T - t)."""
        nodes = self.grid.nodes[:-1]
        norms = np.array([np.linalg.norm(g, 2) for g in self.gains[:-1]])
        if np.all(norms == 0):
            return {"fitted_exponent": 0.0, "constant": 0.0}
        gap = self.grid.T - nodes
        sel = (gap <= tail_fraction * self.grid.T) & (norms > 0)
        if np.count_nonzero(sel) < 2:
            sel = norms > 0
        slope, intercept = np.polyfit(np.log(gap[sel]), np.log(norms[sel]), 1)
        return {"fitted_exponent": float(slope), "constant": float(math.exp(intercept))}


@dataclass
class RiccatiSolution:
    path: OperatorPath
    gains: GainPath
    iterations: int
    residual_history: list = field(default_factory=list)
    monotonicity_slack: float = 0.0     # most negative eig of P^N - P^{N+1} seen
    psd_slack: float = 0.0              # most negative eig of any iterate seen

    def value(self, x: np.ndarray, t: float = 0.0) -> float:
        return self.path.quadratic_form(t, x)


def lambda_operator(
    prob: RiccatiProblem,
    t: float,
    P: np.ndarray | SymOperator,
    channels: Optional[int] = None,
) -> dict:
    """Control-space operator Lambda = R + sum_j D_j^T P D_j and feedback gain
    lambda = -Lambda^{-1} (B^T P + sum_j D_j^T P C_j).

    `channels` truncates the channel sums; the tail of the mixed sum over the
    remaining channels is bounded by |sum_{j>n} D_j^T P C_j x| <=
    C (sum_{j>n} <C_j^T P C_j x, x>)^{1/2} and the bound's ingredients are
    reported as `tail_bound`.
    """
    if isinstance(P, SymOperator):
        P = P.entries
    P = symmetrize(np.asarray(P, dtype=float))
    B, _, R, C, D = prob.coefficients_at(t)
    n = C.shape[0] if channels is None else min(channels, C.shape[0])

    Lam = symmetrize(R, tol=np.inf)
    if D is not None:
        Dn = D[:n]
        Lam = Lam + np.einsum("jai,ab,jbk->ik", Dn, P, Dn)
        Lam = symmetrize(Lam, tol=np.inf)
    w = np.linalg.eigvalsh(Lam)
    if w[0] < prob.delta / 2.0:
        raise NumericalPSDError(
            f"Lambda(t={t}) has eigenvalue {w[0]:.3e} < delta/2; input P is likely broken"
        )
    S = B.T @ P
    if D is not None:
        S = S + np.einsum("jai,ab,jbk->ik", D[:n], P, C[:n])
    gain = -np.linalg.solve(Lam, S)

    tail_bound = 0.0
    if D is not None and n < C.shape[0]:
        tail_dpd = np.einsum("jai,ab,jbk->ik", D[n:], P, D[n:])
        const = math.sqrt(max(float(np.linalg.eigvalsh(symmetrize(tail_dpd, tol=np.inf))[-1]), 0.0))
        tail_cpc = channel_congruence(C[n:], P)
        tail_bound = const * math.sqrt(
            max(float(np.linalg.eigvalsh(symmetrize(tail_cpc, tol=np.inf))[-1]), 0.0)
        )
    return {"Lambda": SymOperator(Lam), "gain": gain, "tail_bound": tail_bound}


def _gain_tables(prob: RiccatiProblem, grid: GradedTimeGrid, path_values: np.ndarray):
    """Gains, Lambdas and linearized Lyapunov coefficients at every node."""
    K = grid.K
    M, m, N = prob.M, prob.m, prob.N_noise

    if prob.time_invariant:
        B, Q, R, C, D = prob.coefficients_at(0.0)
        P = path_values
        Lams = np.broadcast_to(0.5 * (R + R.T), (K + 1, m, m)).copy()
        if D is not None:
            Lams += np.einsum("jai,kab,jbl->kil", D, P, D)
            Lams = 0.5 * (Lams + np.transpose(Lams, (0, 2, 1)))
        w = np.linalg.eigvalsh(Lams)
        if w[:, 0].min() < prob.delta / 2.0:
            raise NumericalPSDError(
                f"Lambda lost positivity along the path (min eig {w[:, 0].min():.3e})"
            )
        S = np.matmul(B.T, P)
        if D is not None:
            S += np.einsum("jai,kab,jbl->kil", D, P, C)
        gains = -np.linalg.solve(Lams, S)
        A0 = np.matmul(B, gains)
        if D is not None:
            Chat = C[None] + np.matmul(D[None], gains[:, None])
        else:
            Chat = np.broadcast_to(C, (K + 1, N, M, M)).copy()
        f = Q[None] + np.matmul(np.transpose(gains, (0, 2, 1)), np.matmul(R, gains))
        f = 0.5 * (f + np.transpose(f, (0, 2, 1)))
        return gains, Lams, A0, Chat, f

    gains = np.empty((K + 1, m, M))
    Lams = np.empty((K + 1, m, m))
    A0 = np.empty((K + 1, M, M))
    Chat = np.empty((K + 1, N, M, M))
    f = np.empty((K + 1, M, M))
    for k, t in enumerate(grid.nodes):
        B, Q, R, C, D = prob.coefficients_at(t)
        P = path_values[k]
        Lam = symmetrize(R, tol=np.inf)
        if D is not None:
            Lam = symmetrize(Lam + np.einsum("jai,ab,jbk->ik", D, P, D), tol=np.inf)
        w = np.linalg.eigvalsh(Lam)
        if w[0] < prob.delta / 2.0:
            raise NumericalPSDError(
                f"Lambda at node {k} lost positivity (min eig {w[0]:.3e})"
            )
        S = B.T @ P
        if D is not None:
            S = S + np.einsum("jai,ab,jbk->ik", D, P, C)
        lam = -np.linalg.solve(Lam, S)
        gains[k] = lam
        Lams[k] = Lam
        A0[k] = B @ lam
        Chat[k] = C + (D @ lam if D is not None else 0.0)
        f[k] = symmetrize(Q + lam.T @ R @ lam, tol=np.inf)
    return gains, Lams, A0, Chat, f


def quasi_linearize(
    prob: RiccatiProblem,
    grid: GradedTimeGrid,
    tol: float = 1e-8,
    max_outer: int = 50,
    inner_tol: float = 1e-12,
    monotone_slack: float = PSD_SLACK,
) -> RiccatiSolution:
    """Solve the Riccati equation as the monotone limit of linearized Lyapunov
    solves, stopping when successive paths agree to `tol` in max norm over the
    grid.  Certifies P^1 >= P^2 >= ... >= 0 in the PSD order up to
    `monotone_slack` and raises InternalConsistencyError on violation.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    prob.validate_on_grid(grid)
    K = grid.K
    M = prob.M

    path_values = np.zeros((K + 1, M, M))
    history: list[float] = []
    worst_monotone = 0.0
    worst_psd = 0.0
    gains = Lams = None

    for outer in range(1, max_outer + 1):
        gains, Lams, A0, Chat, f = _gain_tables(prob, grid, path_values)
        data = LyapunovData(
            basis=prob.basis,
            G=prob.G,
            T=prob.T,
            A0=NodeTable(grid, A0),
            Chat=NodeTable(grid, Chat),
            f=NodeTable(grid, f),
            alpha=prob.alpha,
        )
        new_path = solve_lyapunov(data, grid, inner_tol=inner_tol)
        residual = float(np.max(np.abs(new_path.values - path_values)))
        history.append(residual)

        scale = max(1.0, float(np.max(np.abs(new_path.values))))
        worst_psd = min(worst_psd, float(np.min(new_path.min_eig_per_node())))
        if outer >= 2:
            diff = path_values - new_path.values
            worst = float(np.min(np.linalg.eigvalsh(diff)))
            worst_monotone = min(worst_monotone, worst)
            if worst < -monotone_slack * scale:
                raise InternalConsistencyError(
                    f"quasi-linearized iterates lost monotonicity: min eig {worst:.3e}"
                )
        path_values = new_path.values
        if residual <= tol:
            break
    else:
        raise NonConvergenceError(
            f"quasi-linearization did not reach tol={tol} in {max_outer} sweeps",
            residual_history=history,
        )

    gains, Lams, _, _, _ = _gain_tables(prob, grid, path_values)
    gain_path = GainPath(grid=grid, gains=gains, Lambda=Lams, delta=prob.delta)
    return RiccatiSolution(
        path=OperatorPath(grid=grid, values=path_values),
        gains=gain_path,
        iterations=outer,
        residual_history=history,
        monotonicity_slack=worst_monotone,
        psd_slack=worst_psd,
    )


def _riccati_rhs_matrix(prob: RiccatiProblem, t: float, P: np.ndarray) -> np.ndarray:
    """Right-hand side of dP/d(T - t): A^T P + P A + sum C^T P C + Q - S^T Lambda^{-1} S."""
    mu = prob.basis.eigenvalues
    B, Q, R, C, D = prob.coefficients_at(t)
    out = mu[:, None] * P + P * mu[None, :]
    out = out + channel_congruence(C, P) + Q
    Lam = R if D is None else R + np.einsum("jai,ab,jbk->ik", D, P, D)
    S = B.T @ P
    if D is not None:
        S = S + np.einsum("jai,ab,jbk->ik", D, P, C)
    out = out - S.T @ np.linalg.solve(0.5 * (Lam + Lam.T), S)
    return 0.5 * (out + out.T)


def direct_riccati_oracle(
    prob: RiccatiProblem,
    grid: GradedTimeGrid,
    rtol: float = 1e-10,
    atol: float = 1e-12,
    method: str = "Radau",
) -> OperatorPath:
    """Integrate the differential Riccati equation backward from G with an
    adaptive stiff integrator and sample it on `grid`.  Serves purely as an
    independent cross-check of `quasi_linearize`; guarded to small dimensions.
    """
    M = prob.M
    if M > ORACLE_DIM_GUARD:
        raise ValueError(f"oracle is limited to M <= {ORACLE_DIM_GUARD}")
    T = prob.T

    def rhs(tau, y):
        P = y.reshape(M, M)
        P = 0.5 * (P + P.T)
        return _riccati_rhs_matrix(prob, T - tau, P).ravel()

    taus = np.sort(T - grid.nodes)
    taus[0] = 0.0
    sol = solve_ivp(
        rhs,
        (0.0, T),
        prob.G.ravel(),
        method=method,
        t_eval=taus,
        rtol=rtol,
        atol=atol,
    )
    if not sol.success:
        raise SingularityError(f"adaptive integrator failed: {sol.message}")
    values = sol.y.T.reshape(-1, M, M)[::-1]
    values = 0.5 * (values + np.transpose(values, (0, 2, 1)))
    return OperatorPath(grid=grid, values=values)


def completion_F(prob: RiccatiProblem, t: float, Kmat: np.ndarray, P: np.ndarray) -> np.ndarray:
    """F(t, K, P) = (BK)^T P + P BK + sum_j (C_j + D_j K)^T P (C_j + D_j K) + K^T R K."""
    B, _, R, C, D = prob.coefficients_at(t)
    BK = B @ Kmat
    closed = C + (D @ Kmat if D is not None else 0.0)
    out = BK.T @ P + P @ BK + channel_congruence(closed, P) + Kmat.T @ R @ Kmat
    return 0.5 * (out + out.T)


def completion_identity_check(
    prob: RiccatiProblem, P: np.ndarray | SymOperator, Kmat: np.ndarray, t: float = 0.0
) -> float:
    """Max-norm residual of F(t, K, P) = F(t, lambda, P) + (K - lambda)^T Lambda (K - lambda)."""
    if isinstance(P, SymOperator):
        P = P.entries
    P = symmetrize(np.asarray(P, dtype=float))
    res = lambda_operator(prob, t, P)
    lam = res["gain"]
    Lam = res["Lambda"].entries
    lhs = completion_F(prob, t, Kmat, P)
    diff = Kmat - lam
    rhs = completion_F(prob, t, lam, P) + diff.T @ Lam @ diff
    return float(np.max(np.abs(lhs - rhs)))


def riccati_form1_residual(
    prob: RiccatiProblem, solution: RiccatiSolution, node_indices=None
) -> float:
    """One-step residual of the self-contained Riccati form, in which the
    source is sum_j C_j^T P C_j + Q - lambda^T Lambda lambda.

    At convergence this should match the quasi-linearized recursion to within
    the inner tolerance; it validates the algebraic tie between the two forms.
    """
    grid = solution.path.grid
    mu = prob.basis.eigenvalues
    if node_indices is None:
        node_indices = range(grid.K)
    worst = 0.0
    from .lyapunov import product_weights

    for k in node_indices:
        k = int(k)
        if not 0 <= k < grid.K:
            raise ValueError("node index out of range")
        ta, tb = grid.nodes[k], grid.nodes[k + 1]
        dt = tb - ta
        E = np.exp(mu * dt)
        wa, wb = product_weights(mu, dt)

        def source(t, P):
            _, Q, _, C, _ = prob.coefficients_at(t)
            res = lambda_operator(prob, t, P)
            lam = res["gain"]
            Lam = res["Lambda"].entries
            return channel_congruence(C, P) + Q - lam.T @ Lam @ lam

        Pa, Pb = solution.path.values[k], solution.path.values[k + 1]
        pred = (E[:, None] * E[None, :]) * Pb + wa * source(ta, Pa) + wb * source(tb, Pb)
        worst = max(worst, float(np.max(np.abs(pred - Pa))))
    return worst
