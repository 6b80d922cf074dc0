"""Backward solver for the singular operator Lyapunov equation.

The equation is solved in mild form: the semigroup transport between nodes is
exact (A is diagonal), the perturbation terms are integrated with a two-point
product rule whose weights absorb the semigroup factor exactly, and each step
is closed by a small fixed-point iteration in the left-node value.  All pieces
of the step map are congruences, Hadamard products with Gram matrices, or sums
of positive terms, so positive semidefinite data produce a positive
semidefinite path exactly (up to the inner tolerance).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import InstabilityError, IterationLimitError, SingularityError
from .spectral import (
    GradedTimeGrid,
    SpectralBasis,
    SymOperator,
    operator_norm,
    sandwich_matrix,
    symmetrize,
)

__all__ = [
    "LyapunovData",
    "OperatorPath",
    "solve_lyapunov",
    "representation_value",
    "singular_sum_bound",
    "a_priori_check",
]

OVERFLOW_GUARD = 1e12


def _as_timefunc(value, shape_hint=None):
    """Wrap a constant array as a function of time; pass callables through."""
    if value is None or callable(value):
        return value
    arr = np.asarray(value, dtype=float)
    return lambda t, _a=arr: _a


class NodeTable:
    """Time function backed by per-node values of a grid.

    Lookup requires the query time to coincide with a grid node; this is how
    quasi-linearized coefficients (known only at nodes) are fed to the solver
    without inventing an interpolation.
    """

    def __init__(self, grid: GradedTimeGrid, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.shape[0] != grid.K + 1:
            raise ValueError("need one value per grid node")
        self.grid = grid
        self.values = values

    def __call__(self, t: float) -> np.ndarray:
        idx = self.grid.left_index(t)
        for k in (idx, idx + 1):
            if 0 <= k <= self.grid.K and abs(self.grid.nodes[k] - t) <= 1e-12 * max(1.0, self.grid.T):
                return self.values[k]
        raise ValueError(f"time {t} is not a node of the table's grid")


@dataclass
class LyapunovData:
    """Coefficient bundle for one Lyapunov solve.

    A0, Chat and f are functions of time returning (M, M), (N, M, M) and
    (M, M) arrays; constants may be passed and are wrapped.  Set
    `terminal_singular` when A0 or f blow up at t = T so the solver avoids
    evaluating them there.
    """

    basis: SpectralBasis
    G: np.ndarray
    T: float
    A0: Optional[Callable] = None
    Chat: Optional[Callable] = None
    f: Optional[Callable] = None
    alpha: float = 0.25
    terminal_singular: bool = False
    a0_bound: Optional[float] = None    # c in |A0(s)| <= c (T-s)^(-alpha)

    def __post_init__(self):
        self.G = symmetrize(np.asarray(self.G, dtype=float))
        if self.G.shape[0] != self.basis.M:
            raise ValueError("terminal value G has wrong dimension")
        if self.T <= 0:
            raise ValueError("horizon T must be positive")
        if not 0 < self.alpha < 0.5:
            raise ValueError("alpha must lie in (0, 1/2)")
        self.A0 = _as_timefunc(self.A0)
        self.Chat = _as_timefunc(self.Chat)
        self.f = _as_timefunc(self.f)

    def validate_on_grid(self, grid: GradedTimeGrid) -> None:
        """Check the declared coefficient envelopes on the grid nodes."""
        if abs(grid.T - self.T) > 1e-12 * self.T:
            raise ValueError("grid horizon does not match the data horizon")
        sample = grid.nodes[:-1] if self.terminal_singular else grid.nodes
        for t in sample:
            if self.f is not None:
                symmetrize(self.f(t))
            if self.A0 is not None and self.a0_bound is not None:
                envelope = self.a0_bound * (self.T - t) ** (-self.alpha) if t < self.T else np.inf
                if np.linalg.norm(self.A0(t), 2) > envelope * (1 + 1e-9):
                    raise ValueError(
                        f"|A0({t})| exceeds the declared c(T-s)^(-alpha) envelope"
                    )


@dataclass(frozen=True)
class OperatorPath:
    """Time-indexed family of symmetric operators on a grid, constant on each
    interval [t_k, t_{k+1})."""

    grid: GradedTimeGrid
    values: np.ndarray          # (K+1, M, M)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 3 or vals.shape[0] != self.grid.K + 1 or vals.shape[1] != vals.shape[2]:
            raise ValueError("values must be (K+1, M, M)")
        skew = np.max(np.abs(vals - np.transpose(vals, (0, 2, 1))))
        if skew > 1e-8 * max(1.0, np.max(np.abs(vals))):
            raise ValueError(f"path values are not symmetric (max asymmetry {skew:.3e})")
        vals = 0.5 * (vals + np.transpose(vals, (0, 2, 1)))
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def value(self, k: int) -> np.ndarray:
        return self.values[k]

    def operator(self, k: int) -> SymOperator:
        return SymOperator(self.values[k])

    def at_time(self, t: float) -> np.ndarray:
        return self.values[self.grid.left_index(t)]

    def quadratic_form(self, t: float, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.at_time(t) @ x)

    def node_norms(self) -> np.ndarray:
        return np.max(np.abs(np.linalg.eigvalsh(self.values)), axis=1)

    def min_eig_per_node(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.values)[:, 0]


def _phi1(z: np.ndarray) -> np.ndarray:
    # (e^z - 1)/z with a series for small |z|
    out = np.empty_like(z)
    small = np.abs(z) < 1e-5
    zs = z[small]
    out[small] = 1.0 + zs / 2.0 + zs * zs / 6.0
    zb = z[~small]
    out[~small] = np.expm1(zb) / zb
    return out


def _phi2(z: np.ndarray) -> np.ndarray:
    # (e^z - 1 - z)/z^2 with a series for small |z|
    out = np.empty_like(z)
    small = np.abs(z) < 1e-4
    zs = z[small]
    out[small] = 0.5 + zs / 6.0 + zs * zs / 24.0
    zb = z[~small]
    out[~small] = (np.expm1(zb) - zb) / (zb * zb)
    return out


def product_weights(eigenvalues: np.ndarray, dt: float):
    """Weights W_a, W_b with int_0^dt e^{nu s} [(1-s/dt) H_a + (s/dt) H_b]_{ij} ds
    = (W_a o H_a + W_b o H_b)_{ij}, nu = mu_i + mu_j.  Both are Gram matrices,
    hence PSD, so Hadamard multiplication preserves the PSD cone."""
    z = (eigenvalues[:, None] + eigenvalues[None, :]) * dt
    p2 = _phi2(z)
    wa = dt * p2
    wb = dt * (_phi1(z) - p2)
    return wa, wb


def channel_congruence(channels: np.ndarray, P: np.ndarray) -> np.ndarray:
    """sum_j C_j^T P C_j for stacked channels (N, M, M)."""
    tmp = np.matmul(P, channels)                       # (N, M, M): P C_j
    return np.einsum("jik,jil->kl", channels, tmp)     # sum_j C_j^T (P C_j)


def solve_lyapunov(
    data: LyapunovData,
    grid: GradedTimeGrid,
    inner_tol: float = 1e-10,
    max_inner: int = 200,
    overflow: float = OVERFLOW_GUARD,
) -> OperatorPath:
    """Backward sweep for the mild Lyapunov equation.

    Parameters
    ----------
    data : LyapunovData
        Terminal value, drift perturbation A0, noise channels Chat, source f.
    grid : GradedTimeGrid
        Time grid on [0, T]; grading should match data.alpha for singular data.
    inner_tol, max_inner
        Fixed-point control for the implicit left-node value of each interval.

    Raises
    ------
    IterationLimitError
        if an interval's fixed point does not meet `inner_tol` in `max_inner`
        sweeps (the worst residual is attached).
    SingularityError
        if values exceed the overflow guard (expected for blow-up data).
    """
    data.validate_on_grid(grid)
    mu = data.basis.eigenvalues
    M = data.basis.M
    nodes = grid.nodes
    K = grid.K
    eye = np.eye(M)

    P = np.empty((K + 1, M, M))
    P[K] = data.G

    weight_cache: dict = {}

    for k in range(K - 1, -1, -1):
        ta, tb = nodes[k], nodes[k + 1]
        dt = tb - ta
        # the right endpoint of the last interval is t = T; fall back to the
        # left node there when the data blow up at T
        t_right = ta if (data.terminal_singular and k == K - 1) else tb
        cached = weight_cache.get(dt)
        if cached is None:
            E = np.exp(mu * dt)
            wa, wb = product_weights(mu, dt)
            cached = (E[:, None] * E[None, :], wa, wb)
            weight_cache[dt] = cached
        EE, wa, wb = cached

        A0a = data.A0(ta) if data.A0 is not None else None
        A0b = data.A0(t_right) if data.A0 is not None else None
        Ca = data.Chat(ta) if data.Chat is not None else None
        Cb = data.Chat(t_right) if data.Chat is not None else None
        fa = data.f(ta) if data.f is not None else None
        fb = data.f(t_right) if data.f is not None else None

        Pn = P[k + 1]
        if A0b is not None:
            Jb = eye + 0.5 * dt * A0b
            Y = Jb.T @ Pn @ Jb
        else:
            Y = Pn
        base = EE * Y
        src_b = None
        if Cb is not None:
            src_b = channel_congruence(Cb, Pn)
        if fb is not None:
            src_b = fb if src_b is None else src_b + fb
        if src_b is not None:
            base = base + wb * src_b
        base = symmetrize(base, tol=np.inf)

        inv_Ja = None
        if A0a is not None:
            inv_Ja = np.linalg.inv(eye - 0.5 * dt * A0a)

        if Ca is None and fa is None:
            Pk = base if inv_Ja is None else symmetrize(inv_Ja.T @ base @ inv_Ja, tol=np.inf)
        else:
            Pk = base
            res = math.inf
            for _ in range(max_inner):
                src_a = channel_congruence(Ca, Pk) if Ca is not None else None
                if fa is not None:
                    src_a = fa if src_a is None else src_a + fa
                X = base + wa * src_a
                new = X if inv_Ja is None else inv_Ja.T @ X @ inv_Ja
                new = symmetrize(new, tol=np.inf)
                res = float(np.max(np.abs(new - Pk)))
                Pk = new
                if res <= inner_tol:
                    break
            else:
                raise IterationLimitError(
                    f"fixed point on [{ta:.6g}, {tb:.6g}] stalled at residual {res:.3e}",
                    residual=res,
                )

        if not np.all(np.isfinite(Pk)) or np.max(np.abs(Pk)) > overflow:
            raise SingularityError(
                f"Lyapunov value exceeded the overflow guard at t = {ta:.6g}"
            )
        P[k] = Pk

    return OperatorPath(grid=grid, values=P)


def representation_value(
    data: LyapunovData,
    t: float,
    x: np.ndarray,
    mc,
    n_intervals: int = 128,
) -> dict:
    """Monte-Carlo estimate of E[<G Y_T, Y_T> + int_t^T <f_s Y_s, Y_s> ds] for
    the forward evolution started at (t, x); the quantity represented by the
    Lyapunov solution's quadratic form <P_t x, x>.

    Returns the estimate with a 95% confidence half-width.
    """
    if t >= data.T:
        raise ValueError("t must be smaller than the horizon T")
    x = np.asarray(x, dtype=float)
    if x.size != data.basis.M:
        raise ValueError("state dimension mismatch")
    if mc.paths < 2:
        raise ValueError("need at least 2 paths for a confidence interval")

    from .simulate import linear_forward_paths  # local import avoids a cycle

    # graded sub-grid on [t, T] matching the terminal weight
    gamma = max(1.0, 1.0 / (1.0 - 2.0 * data.alpha))
    kk = np.arange(n_intervals + 1)
    nodes = t + (data.T - t) * (1.0 - (1.0 - kk / n_intervals) ** gamma)
    nodes[-1] = data.T

    states = linear_forward_paths(
        eigenvalues=data.basis.eigenvalues,
        A0=data.A0,
        Chat=data.Chat,
        nodes=nodes,
        steps=mc.steps,
        x0=x,
        paths=mc.paths,
        seed=mc.seed,
    )
    terminal = np.einsum("pi,ij,pj->p", states[:, -1, :], data.G, states[:, -1, :])
    running = np.zeros(mc.paths)
    if data.f is not None:
        vals = np.empty((mc.paths, len(nodes)))
        last = len(nodes) - 1
        for k, s in enumerate(nodes):
            if k == last and data.terminal_singular:
                vals[:, k] = 0.0
                continue
            fs = data.f(s)
            vals[:, k] = np.einsum("pi,ij,pj->p", states[:, k, :], fs, states[:, k, :])
        dt = np.diff(nodes)
        if data.terminal_singular:
            # left rule keeps all evaluations away from the blow-up at T
            running = vals[:, :-1] @ dt
        else:
            running = 0.5 * (vals[:, :-1] + vals[:, 1:]) @ dt
    total = terminal + running
    est = float(np.mean(total))
    ci = 1.96 * float(np.std(total, ddof=1)) / math.sqrt(mc.paths) if mc.paths > 1 else 0.0
    return {"estimate": est, "ci_halfwidth": ci}


def singular_sum_bound(path: OperatorPath, data: LyapunovData, tail_fraction: float = 0.5) -> dict:
    """Fit || sum_j Chat_j(s)^T P_s Chat_j(s) || ~ const * (T - s)^exponent over
    the nodes nearest the terminal time and report the fit."""
    if data.Chat is None:
        return {"fitted_exponent": 0.0, "constant": 0.0}
    nodes = path.grid.nodes[:-1]
    norms = []
    for k, s in enumerate(nodes):
        Cs = data.Chat(s)
        norms.append(operator_norm(channel_congruence(Cs, path.values[k])))
    norms = np.array(norms)
    if np.all(norms == 0):
        return {"fitted_exponent": 0.0, "constant": 0.0}
    gap = data.T - nodes
    sel = gap <= tail_fraction * data.T
    sel &= norms > 0
    if np.count_nonzero(sel) < 2:
        sel = norms > 0
    # slope of log norm against log(T - s) is the exponent in (T - s)
    slope, intercept = np.polyfit(np.log(gap[sel]), np.log(norms[sel]), 1)
    return {"fitted_exponent": float(slope), "constant": float(math.exp(intercept))}


def a_priori_check(path: OperatorPath, data: LyapunovData, C: float = 10.0) -> dict:
    """Check ||P_t|| <= C (||G|| + int_t^T ||f_s|| ds) on the grid."""
    nodes = path.grid.nodes
    g_norm = operator_norm(data.G)
    if data.f is not None:
        f_norms = np.empty(len(nodes))
        for k, s in enumerate(nodes):
            if k == len(nodes) - 1 and data.terminal_singular:
                f_norms[k] = 0.0
            else:
                f_norms[k] = operator_norm(data.f(s))
        dt = np.diff(nodes)
        if data.terminal_singular:
            seg = f_norms[:-1] * dt
        else:
            seg = 0.5 * (f_norms[:-1] + f_norms[1:]) * dt
        tail = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
    else:
        tail = np.zeros(len(nodes))
    bounds = g_norm + tail
    norms = path.node_norms()
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(bounds > 0, norms / bounds, np.where(norms > 0, np.inf, 0.0))
    worst = float(np.max(ratios))
    return {"passed": bool(worst <= C), "worst_ratio": worst, "C": C}
