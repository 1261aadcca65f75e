"""Linearized operators around the ground state and their root structure.

Assembles dense discretizations of

    L+ = -Delta + 1 - (Phi * Q^2) - 2 Q (Phi * (Q .))
    L- = -Delta + 1 - (Phi * Q^2)

and the non-self-adjoint block operator

    H = [[ Delta - 1 + V + W,  W ],
         [ -W,  -Delta + 1 - V - W ]]

acting on pairs (f, fbar), together with the generalized null-space
machinery: the root modes phi_1..phi_4, dual modes psi_1..psi_4, the
rho mode solving L+ rho = -|x|^2 Q, Riesz projections onto the root
cluster, linear propagation, and the root-coefficient / modulation ODE
solves.  The Laplacian is the flux-form operator normalized by the grid
weights, so L+/L- are exactly self-adjoint in the weighted inner product.

Large grids are served matrix-free (`FineSystem`) for the identity checks
that need more resolution than a dense eigensolve can afford.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from hartreelab.errors import ConfigurationError, ConvergenceError
from hartreelab.grid import (RadialField, RadialGrid, d1_apply, eval_profile,
                             fv_laplacian_matrix, fv_laplacian_tridiag, inner,
                             wnorm)
from hartreelab.kernels import (KernelMatrix, KernelSpec, build_kernel_matrix,
                                newton_kernel_matrix, newton_potential)


def _pair_norm(v, grid):
    n = grid.n_points
    w = grid.weights
    return float(np.sqrt(np.dot(w, np.abs(v[:n]) ** 2) +
                         np.dot(w, np.abs(v[n:]) ** 2)))


def _pair_inner(a, b, grid):
    n = grid.n_points
    w = grid.weights
    return complex(np.dot(w, a[:n] * np.conj(b[:n])) +
                   np.dot(w, a[n:] * np.conj(b[n:])))


@dataclass
class LinearizedSystem:
    """Dense linearization around Q for one kernel spec and time parameter."""

    grid: RadialGrid
    spec: KernelSpec
    t_param: float
    Q: np.ndarray
    Lplus: np.ndarray
    Lminus: np.ndarray
    H: np.ndarray
    rho: np.ndarray
    Q1: np.ndarray
    r2Q: np.ndarray
    root_modes: np.ndarray   # 4 x 2n
    dual_modes: np.ndarray   # 4 x 2n
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.grid.n_points

    def pair_norm(self, v):
        return _pair_norm(v, self.grid)

    def pair_inner(self, a, b):
        return _pair_inner(a, b, self.grid)


def kernel_matrix_for(spec: KernelSpec, grid: RadialGrid, t_param=np.inf,
                      cache_dir=None) -> KernelMatrix:
    if spec.kind == "newton" or np.isinf(t_param):
        return newton_kernel_matrix(grid)
    at_t = KernelSpec(kind="deformed", k=spec.k, t=t_param,
                      phi_name=spec.phi_name, phi_table=spec.phi_table)
    return build_kernel_matrix(at_t, grid, cache_dir=cache_dir)


def assemble(Q: RadialField, spec: KernelSpec, t_param=np.inf,
             cache_dir=None) -> LinearizedSystem:
    """Build L+/L-, H, rho, and the root/dual modes around a profile Q.

    Q must solve the stationary equation for the same kernel at the same
    t; the kernel relations (L- Q = 0, L+ rho = -r^2 Q) then hold to the
    profile's own residual.
    """
    grid = Q.grid
    if not Q.is_real(tol=1e-10):
        raise ConfigurationError("linearization profile must be real")
    q = Q.values.real.copy()
    if np.any(q <= 0):
        raise ConfigurationError("linearization profile must be positive")
    n = grid.n_points
    C = kernel_matrix_for(spec, grid, t_param, cache_dir).entries
    V = C @ q**2
    W = (C * q[None, :]) * q[:, None]
    lap = fv_laplacian_matrix_weights(grid)
    eye = np.eye(n)
    Lminus = -lap + eye - np.diag(V)
    Lplus = Lminus - 2 * W
    L_W = Lminus - W
    H = np.zeros((2 * n, 2 * n), dtype=complex)
    H[:n, :n] = -L_W
    H[:n, n:] = W
    H[n:, :n] = -W
    H[n:, n:] = L_W

    r2Q = grid.nodes**2 * q
    try:
        rho = np.linalg.solve(Lplus, -r2Q)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(
            "singular L+ solve: nondegeneracy violated on this grid") from exc
    Q1 = 2 * q + grid.nodes * d1_apply(q, grid)

    root = np.zeros((4, 2 * n), dtype=complex)
    dual = np.zeros((4, 2 * n), dtype=complex)
    root[0] = np.concatenate([1j * q, -1j * q])
    root[1] = np.concatenate([Q1, Q1])
    root[2] = np.concatenate([1j * r2Q, -1j * r2Q])
    root[3] = np.concatenate([rho, rho])
    dual[0] = np.concatenate([q, q])
    dual[1] = np.concatenate([1j * Q1, -1j * Q1])
    dual[2] = np.concatenate([r2Q, r2Q])
    dual[3] = np.concatenate([1j * rho, -1j * rho])

    return LinearizedSystem(grid=grid, spec=spec, t_param=t_param, Q=q,
                            Lplus=Lplus, Lminus=Lminus, H=H, rho=rho, Q1=Q1,
                            r2Q=r2Q, root_modes=root, dual_modes=dual)


def fv_laplacian_matrix_weights(grid: RadialGrid) -> np.ndarray:
    lo, di, up = fv_laplacian_tridiag(grid, normalization="weights")
    n = grid.n_points
    mat = np.zeros((n, n))
    idx = np.arange(n)
    mat[idx, idx] = di
    mat[idx[:-1], idx[:-1] + 1] = up[:-1]
    mat[idx[1:], idx[1:] - 1] = lo[1:]
    return mat


def symmetry_defect(sys: LinearizedSystem) -> float:
    """Worst relative self-adjointness defect of L+/L- in the weighted
    inner product (exact up to round-off by construction)."""
    w = sys.grid.weights
    worst = 0.0
    for L in (sys.Lplus, sys.Lminus):
        S = L * w[:, None]
        worst = max(worst, np.abs(S - S.T).max() / np.abs(S).max())
    return worst


def nondegeneracy_margin(sys: LinearizedSystem, operator="Lplus"):
    """Smallest |eigenvalue| of the (weight-symmetrized) radial operator."""
    L = getattr(sys, operator)
    sq = np.sqrt(sys.grid.weights)
    S = (L * sq[:, None]) / sq[None, :]
    S = 0.5 * (S + S.T)
    vals, vecs = sla.eigh(S)
    i = np.argmin(np.abs(vals))
    mode = vecs[:, i] / sq
    return float(np.abs(vals[i])), vals, mode


def jordan_chain_check(sys: LinearizedSystem):
    """Verify H phi_1 = 0 and H phi_{i+1} in span{phi_i}; report constants.

    Returns span-fit residuals (relative orthogonal complements), the three
    proportionality constants, and the norms of H^4 phi_i.
    """
    H = sys.H
    phis = sys.root_modes
    norms = [sys.pair_norm(p) for p in phis]
    resid = []
    consts = []
    h1 = H @ phis[0]
    resid.append(sys.pair_norm(h1) / norms[0])
    for i in (1, 2, 3):
        hp = H @ phis[i]
        target = phis[i - 1]
        c = sys.pair_inner(hp, target) / sys.pair_inner(target, target)
        perp = hp - c * target
        denom = max(sys.pair_norm(hp), 1e-300)
        resid.append(sys.pair_norm(perp) / denom)
        consts.append(complex(c))
    h4 = [phis[i].copy() for i in range(4)]
    for _ in range(4):
        h4 = [H @ v for v in h4]
    nilpotency = [sys.pair_norm(h4[i]) / norms[i] for i in range(4)]
    return {
        "residuals": resid,
        "constants": consts,
        "nilpotency": nilpotency,
    }


def root_gram(sys: LinearizedSystem) -> np.ndarray:
    """Gram array <phi_i, psi_j> of root against dual modes."""
    G = np.zeros((4, 4), dtype=complex)
    for i in range(4):
        for j in range(4):
            G[i, j] = sys.pair_inner(sys.root_modes[i], sys.dual_modes[j])
    return G


# ---------------------------------------------------------------------------
# Riesz projection via ordered Schur decomposition


def spectrum(sys: LinearizedSystem):
    return sla.eigvals(sys.H)


def auto_contour_radius(eigvals, cluster_size=4, min_separation=3.0):
    """Radius separating the root cluster from the rest of the spectrum.

    The four smallest |z| form the (numerically split) generalized
    null-space; the contour is placed at the geometric mean between the
    cluster edge and the nearest genuine eigenvalue, which must be at
    least `min_separation` times farther out.
    """
    mods = np.sort(np.abs(eigvals))
    edge = mods[cluster_size - 1]
    nearest = mods[cluster_size]
    if nearest < min_separation * max(edge, 1e-14):
        raise ConvergenceError(
            f"root cluster (|z| <= {edge:.3e}) is not separated from the "
            f"spectrum (next |z| = {nearest:.3e}); refine the grid")
    return float(np.sqrt(max(edge, 1e-14) * nearest))


def riesz_projection(sys: LinearizedSystem, c: float | None = None):
    """Spectral projector onto eigenvalues inside |z| < c.

    Computed from the ordered Schur form: with T = [[T11, T12], [0, T22]]
    and X solving T11 X - X T22 = T12, the projector U [[I, X], [0, 0]] U*
    is exactly idempotent and has exact trace = cluster dimension.
    """
    eigvals = spectrum(sys)
    if c is None:
        c = auto_contour_radius(eigvals)
    if np.any(np.abs(np.abs(eigvals) - c) < 1e-12 * max(c, 1.0)):
        raise ConvergenceError("an eigenvalue sits on the contour; adjust c")
    T, U, sdim = sla.schur(sys.H, output="complex",
                           sort=lambda z: abs(z) < c)
    if sdim == 0:
        raise ConvergenceError(f"no eigenvalues inside |z| < {c}")
    T11 = T[:sdim, :sdim]
    T22 = T[sdim:, sdim:]
    T12 = T[:sdim, sdim:]
    X = sla.solve_sylvester(T11, -T22, T12)
    M = np.zeros_like(T)
    M[:sdim, :sdim] = np.eye(sdim)
    M[:sdim, sdim:] = X
    P = U @ M @ U.conj().T
    return P, {"radius": c, "cluster_dim": int(sdim),
               "trace": complex(np.trace(P))}


# ---------------------------------------------------------------------------
# linear propagation


def propagate_linearized(sys: LinearizedSystem, v0, times):
    """e^{i t H} v0 at the requested times through the eigendecomposition."""
    vals, vecs = sla.eig(sys.H)
    coeffs = np.linalg.solve(vecs, v0)
    out = []
    for t in np.atleast_1d(times):
        out.append(vecs @ (np.exp(1j * t * vals) * coeffs))
    return np.asarray(out)


def quadratic_form(sys: LinearizedSystem, v) -> float:
    """<L+ f1, f1> + <L- f2, f2> for a conjugate pair v = (f, fbar).

    Invariant under e^{itH} because L+/L- are exactly self-adjoint in the
    grid inner product.
    """
    n = sys.n
    f = v[:n]
    f1 = f.real
    f2 = f.imag
    w = sys.grid.weights
    return float(np.dot(w, (sys.Lplus @ f1) * f1) +
                 np.dot(w, (sys.Lminus @ f2) * f2))


# ---------------------------------------------------------------------------
# root coefficients and the modulation ODEs


def root_coefficients(sys: LinearizedSystem, F):
    """Solve the four-by-four root system for b_1..b_4.

    The system couples the b_i through 2<rho,Q>, 2<r^2 Q, Q> and
    2<r^2 Q, rho>, all of which must be positive; the right sides are the
    pairings of F with the dual modes.
    """
    w = sys.grid.weights
    ip_rho_Q = float(np.dot(w, sys.rho * sys.Q))
    ip_r2Q_Q = float(np.dot(w, sys.r2Q * sys.Q))
    ip_r2Q_rho = float(np.dot(w, sys.r2Q * sys.rho))
    for name, val in (("<rho,Q>", ip_rho_Q), ("<r2Q,Q>", ip_r2Q_Q),
                      ("<r2Q,rho>", ip_r2Q_rho)):
        if val <= 0:
            raise ConvergenceError(
                f"root-system coefficient {name} = {val:.3e} is not positive")
    rhs = np.array([sys.pair_inner(F, sys.dual_modes[j]) for j in range(4)])
    b4 = rhs[0] / (2 * ip_rho_Q)
    b2 = rhs[1] / (2 * ip_r2Q_Q)
    b3 = (2 * b4 * ip_r2Q_rho - rhs[2]) / (2 * ip_r2Q_Q)
    b1 = -(rhs[3] + 2 * b3 * ip_r2Q_rho) / (2 * ip_rho_Q)
    return np.array([b1, b2, b3, b4]), {
        "ip_rho_Q": ip_rho_Q, "ip_r2Q_Q": ip_r2Q_Q, "ip_r2Q_rho": ip_r2Q_rho}


def integrate_modulation(b, t):
    """Solve the chained modulation ODEs backward with zero terminal data.

        a1' - 2 a2 = b1 / i,   a2' - 4 a3 = b2 / i,
        a3' + a4 = b3 / i,     a4' = b4 / i.

    b has shape (4, len(t)); t is increasing and b must decay at least
    like t^-2 (checked by a tail fit).
    """
    b = np.asarray(b, dtype=complex)
    t = np.asarray(t, dtype=float)
    if b.shape != (4, t.size):
        raise ConfigurationError("b must have shape (4, len(t))")
    if t.size >= 8:
        tail = np.abs(b[:, -t.size // 3:])
        mags = tail.max(axis=0)
        if np.any(mags > 0):
            lt = np.log(t[-t.size // 3:])
            mask = mags > 0
            if mask.sum() >= 3:
                slope = np.polyfit(lt[mask], np.log(mags[mask]), 1)[0]
                if slope > -2.0 + 0.25:
                    raise ConfigurationError(
                        f"b does not decay like t^-2 (tail slope {slope:.2f})")

    def backward_integral(f):
        """F(t) = -int_t^inf f ds via trapezoid with zero terminal data."""
        out = np.zeros_like(f)
        dt = np.diff(t)
        increments = 0.5 * (f[1:] + f[:-1]) * dt
        out[:-1] = -np.cumsum(increments[::-1])[::-1]
        return out

    a4 = backward_integral(b[3] / 1j)
    a3 = backward_integral(b[2] / 1j - a4)
    a2 = backward_integral(b[1] / 1j + 4 * a3)
    a1 = backward_integral(b[0] / 1j + 2 * a2)
    return np.vstack([a1, a2, a3, a4])


# ---------------------------------------------------------------------------
# homogeneous growth probe: the scalar Volterra form of L+


def homogeneous_growth_probe(sys: LinearizedSystem, r_fit_span=10.0):
    """Integrate the homogeneous scalar equation outward and fit the rate.

    The local-plus-Volterra operator (rank-one far-field term removed) is

        -v'' - (3/r) v' + v + V(r) v + 2 Q(r) int_0^r K(r,s) Q(s) v(s) ds

    with V = -(Phi * Q^2).  Solutions with v(0) = 1, v'(0) = 0 grow
    exponentially; the fitted rate over the outermost decade is returned.
    """
    grid = sys.grid
    qf = RadialField(sys.Q.astype(complex), grid)
    Vf = -newton_potential(RadialField((sys.Q**2).astype(complex), grid)).values.real
    r_end = grid.r_max
    h = min(0.01, grid.r_max / (2 * grid.n_points))
    steps = int(r_end / h)
    two_pi2 = 2 * np.pi**2

    rs = np.linspace(h, r_end, steps)
    Qs = eval_profile(qf, rs).real
    Vs = np.interp(rs, grid.nodes, Vf)

    def rhs(i, r, y):
        v, p, n1, n3 = y
        volterra = two_pi2 * (n1 - n3 / r**2)
        q = Qs[min(i, steps - 1)]
        V = Vs[min(i, steps - 1)]
        return np.array([p, (1.0 + V) * v + 2 * q * volterra - (3.0 / r) * p,
                         r * q * v, r**3 * q * v])

    v0 = 1.0
    y = np.array([v0 * (1 + (1 + Vs[0]) * h**2 / 8), v0 * (1 + Vs[0]) * h / 4,
                  v0 * Qs[0] * h**2 / 2, v0 * Qs[0] * h**4 / 4])
    log_carry = 0.0
    vlog = np.empty(steps)
    vsign = np.empty(steps)
    for i in range(steps):
        r = rs[i]
        k1 = rhs(i, r, y)
        k2 = rhs(i, r + h / 2, y + h / 2 * k1)
        k3 = rhs(i, r + h / 2, y + h / 2 * k2)
        k4 = rhs(i, r + h, y + h * k3)
        y = y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        if abs(y[0]) > 1e200:
            scale = abs(y[0])
            y /= scale
            log_carry += np.log(scale)
        vlog[i] = np.log(max(abs(y[0]), 1e-300)) + log_carry
        vsign[i] = np.sign(y[0])
    fit_mask = rs >= r_end - r_fit_span
    slope = np.polyfit(rs[fit_mask], vlog[fit_mask], 1)[0]
    return float(slope), {"r": rs, "log_v": vlog, "sign": vsign}


# ---------------------------------------------------------------------------
# matrix-free fine system for high-resolution identity checks


class FineSystem:
    """Matrix-free L+/L-/H appliers on large grids (newton kernel).

    Serves the identity checks (chain residuals, L+ (2Q + r dQ) = -2Q,
    nilpotency) at resolutions beyond dense assembly; all applies are
    O(n) through the closed-form Newton reduction.
    """

    def __init__(self, Q: RadialField):
        self.grid = Q.grid
        self.q = Q.values.real.copy()
        grid = self.grid
        self.V = newton_potential(
            RadialField((self.q**2).astype(complex), grid)).values.real
        self._lap = fv_laplacian_tridiag(grid, normalization="weights")
        self.r2Q = grid.nodes**2 * self.q
        self.Q1 = 2 * self.q + grid.nodes * d1_apply(self.q, grid)
        self._rho = None

    def conv(self, f):
        return newton_potential(
            RadialField(np.asarray(f, dtype=complex), self.grid)).values.real

    def lap(self, f):
        lo, di, up = self._lap
        out = di * f
        out[:-1] = out[:-1] + up[:-1] * f[1:]
        out[1:] = out[1:] + lo[1:] * f[:-1]
        return out

    def apply_Lminus(self, f):
        return -self.lap(f) + f - self.V * f

    def apply_W(self, f):
        return self.q * self.conv(self.q * f)

    def apply_Lplus(self, f):
        return self.apply_Lminus(f) - 2 * self.apply_W(f)

    def apply_H(self, v):
        n = self.grid.n_points
        a, b = v[:n], v[n:]
        LW_a = self.apply_Lminus(a.real) - self.apply_W(a.real) \
            + 1j * (self.apply_Lminus(a.imag) - self.apply_W(a.imag))
        LW_b = self.apply_Lminus(b.real) - self.apply_W(b.real) \
            + 1j * (self.apply_Lminus(b.imag) - self.apply_W(b.imag))
        Wa = self.apply_W(a.real) + 1j * self.apply_W(a.imag)
        Wb = self.apply_W(b.real) + 1j * self.apply_W(b.imag)
        return np.concatenate([-LW_a + Wb, -Wa + LW_b])

    @property
    def rho(self):
        if self._rho is None:
            self._rho = self.solve_Lplus(-self.r2Q)
        return self._rho

    def solve_Lplus(self, rhs, rtol=1e-12):
        grid = self.grid
        sq = np.sqrt(grid.weights)
        from hartreelab.ground_state import _helmholtz_banded
        from scipy.linalg import solve_banded
        helm = _helmholtz_banded(grid)

        def s_apply(x):
            return sq * self.apply_Lplus(x / sq)

        def m_apply(x):
            return sq * solve_banded((1, 1), helm, x / sq)

        n = grid.n_points
        S = spla.LinearOperator((n, n), matvec=s_apply)
        M = spla.LinearOperator((n, n), matvec=m_apply)
        x, info = spla.minres(S, sq * rhs, M=M, rtol=rtol, maxiter=3000)
        if info != 0:
            raise ConvergenceError(f"MINRES failed on the L+ solve (info={info})")
        return x / sq

    def root_modes(self):
        n = self.grid.n_points
        q, Q1, r2Q, rho = self.q, self.Q1, self.r2Q, self.rho
        return np.array([
            np.concatenate([1j * q, -1j * q]),
            np.concatenate([Q1, Q1]).astype(complex),
            np.concatenate([1j * r2Q, -1j * r2Q]),
            np.concatenate([rho, rho]).astype(complex),
        ])

    def pair_norm(self, v):
        return _pair_norm(v, self.grid)

    def pair_inner(self, a, b):
        return _pair_inner(a, b, self.grid)

    def propagate_root_taylor(self, v0, times):
        """e^{itH} on the root sector by the exact nilpotent Taylor sum.

        H^4 annihilates the root space up to the discretization defect, so
        the four-term sum is the spectral polynomial of the propagator
        restricted to the cluster.
        """
        powers = [np.asarray(v0, dtype=complex)]
        for _ in range(3):
            powers.append(self.apply_H(powers[-1]))
        out = []
        for t in np.atleast_1d(times):
            acc = np.zeros_like(powers[0])
            fac = 1.0
            for m, hv in enumerate(powers):
                if m > 0:
                    fac *= m
                acc = acc + (1j * t) ** m / fac * hv
            out.append(acc)
        return np.asarray(out)
