"""Radial convolution kernels: the Newton kernel |x|^-2 and its deformations.

Two independent routes compute the same convolution (Phi * rho) for radial
densities on R^4:

* `newton_potential` uses the closed-form radial reduction of the |x|^-2
  kernel: the interior Volterra piece with K(r,s) = 2 pi^2 s (1 - s^2/r^2)
  plus the constant far-field moment, evaluated in O(n) with cumulative
  sums.
* `build_kernel_matrix` assembles the dense angularly-averaged kernel
  w(r_i, s_j) by numerical quadrature over the 3-sphere polar angle, which
  also covers the deformed kernels phi(t^-k |x|^k)/|x|^2.

Both routes fold the same grid quadrature rule (plus a diagonal correction
for the derivative kink of the angular average at s = r), so for the
Newton kernel they agree to the accuracy of the angular quadrature.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from hartreelab.errors import ConfigurationError, QuadratureError
from hartreelab.grid import RadialField, RadialGrid

PHI_BOUND = 10.0  # admissibility cap for sup |phi| + <u>|phi'(u)|

_PHI_BUILTINS = {
    "one": lambda u: np.ones_like(np.asarray(u, dtype=float)),
    "rational": lambda u: 1.0 / (1.0 + u),
    "exponential": lambda u: np.exp(-u),
}


def phi_from_table(u_samples, phi_samples) -> Callable:
    """Deformation profile from tabulated samples (monotone cubic)."""
    from scipy.interpolate import PchipInterpolator

    u = np.asarray(u_samples, dtype=float)
    p = np.asarray(phi_samples, dtype=float)
    interp = PchipInterpolator(u, p, extrapolate=False)
    tail = p[-1]

    def phi(x):
        x = np.asarray(x, dtype=float)
        out = interp(np.clip(x, u[0], u[-1]))
        return np.where(x > u[-1], tail, out)

    return phi


@dataclass(frozen=True)
class KernelSpec:
    """Which convolution kernel: pure Newton or phi(t^-k |x|^k)/|x|^2."""

    kind: str = "newton"
    k: float = 5.0
    t: float = np.inf
    phi_name: str = "one"
    phi_table: tuple = ()

    def __post_init__(self):
        if self.kind not in ("newton", "deformed"):
            raise ConfigurationError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "deformed":
            if not (self.k > 0):
                raise ConfigurationError("deformation exponent k must be positive")
            if not (self.t > 0):
                raise ConfigurationError("deformation time t must be positive")
            self._check_admissible()

    @property
    def phi(self) -> Callable:
        if self.phi_table:
            return phi_from_table(*self.phi_table)
        try:
            return _PHI_BUILTINS[self.phi_name]
        except KeyError:
            raise ConfigurationError(f"unknown phi choice {self.phi_name!r}") from None

    def _check_admissible(self):
        phi = self.phi
        p0 = float(np.asarray(phi(0.0)))
        if abs(p0 - 1.0) > 1e-12:
            raise ConfigurationError(f"phi(0) must equal 1, got {p0}")
        u = np.concatenate([[0.0], np.logspace(-6, 8, 200)])
        pu = np.asarray(phi(u), dtype=float)
        du = np.gradient(pu, u)
        bound = np.max(np.abs(pu) + (1 + u) * np.abs(du))
        if not np.isfinite(bound) or bound > PHI_BOUND:
            raise ConfigurationError(
                f"phi violates the boundedness check: sup |phi| + <u>|phi'| = {bound:.3g} > {PHI_BOUND}")

    def phi_at_distance(self, u):
        """phi(t^-k u^k) for distances u; identically 1 for the newton kind."""
        u = np.asarray(u, dtype=float)
        if self.kind == "newton" or np.isinf(self.t):
            return np.ones_like(u)
        return self.phi((u / self.t) ** self.k)

    def label(self) -> str:
        if self.kind == "newton":
            return "newton"
        return f"deformed(k={self.k:g},t={self.t:g},phi={self.phi_name})"

    def key(self) -> str:
        h = hashlib.sha256()
        h.update(self.label().encode())
        if self.phi_table:
            h.update(np.asarray(self.phi_table).tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# closed-form Newton route


def newton_K(r: float, s: float) -> float:
    """Volterra kernel K(r,s) = 2 pi^2 s (1 - s^2/r^2) for 0 < s <= r."""
    if s > r:
        raise ConfigurationError("newton_K requires s <= r (order the arguments)")
    if s <= 0 or r <= 0:
        raise ConfigurationError("newton_K requires positive radii")
    return 2 * np.pi**2 * s * (1.0 - (s / r) ** 2)


def _fold_weights(grid: RadialGrid):
    """Per-node ds-weights of the grid rule: w_j / (2 pi^2 s_j^3)."""
    return grid.weights / (2 * np.pi**2 * grid.nodes**3)


def _kink_diagonal(grid: RadialGrid):
    """Diagonal correction for the kink of the angular average at s = r.

    d_s a(r,s) jumps by -4 pi^2 / r^3 across s = r, the center of cell i.
    The kink cell needs (h^2/8) * jump, and the smooth cells' collective
    h^3 g''/24 terms telescope through the kink contributing -(h^2/24) *
    jump, so the composite midpoint rule needs (h^2/12) * jump * rho s^3.
    """
    h = grid.cell_widths
    return -(np.pi**2 / 3.0) * h**2


def newton_potential(rho: RadialField) -> RadialField:
    """(|x|^-2 * rho)(r) for a real radial density, via Newton's theorem.

    O(n): cumulative moments of rho s and rho s^3 against the grid rule.
    """
    if not rho.is_real(tol=1e-10):
        raise ConfigurationError("newton_potential expects a real density")
    grid = rho.grid
    vals = rho.values.real
    ds = _fold_weights(grid)
    s = grid.nodes
    m3 = np.cumsum(vals * s**3 * ds)                      # int_0^r rho s^3 ds
    m1_tail = np.cumsum((vals * s * ds)[::-1])[::-1]      # int over s >= r
    m1_strict_tail = m1_tail - vals * s * ds              # s > r only
    pot = 2 * np.pi**2 * (m3 / s**2 + m1_strict_tail)
    pot = pot + _kink_diagonal(grid) * vals
    return RadialField(pot.astype(complex), grid)


def newton_average(r, s):
    """Closed-form 3-sphere average of |x|^-2: a(r,s) = 2 pi^2 / max(r,s)^2."""
    return 2 * np.pi**2 / np.maximum(r, s) ** 2


# ---------------------------------------------------------------------------
# angular quadrature route

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(12)
_LADDER_DEPTH = 26


def _theta_panels():
    """Geometric panel ladder on [0, pi] refining toward theta = 0."""
    edges = np.pi * 2.0 ** -np.arange(_LADDER_DEPTH, -1, -1.0)
    edges = np.concatenate([[0.0], edges])
    return edges


_PANEL_EDGES = _theta_panels()
_PANEL_THETA = []
_PANEL_W = []
for _a, _b in zip(_PANEL_EDGES[:-1], _PANEL_EDGES[1:]):
    _PANEL_THETA.append(0.5 * (_b - _a) * _GL_NODES + 0.5 * (_b + _a))
    _PANEL_W.append(0.5 * (_b - _a) * _GL_WEIGHTS)
_PANEL_THETA = np.concatenate(_PANEL_THETA)
_PANEL_W = np.concatenate(_PANEL_W)


def angular_average(spec: KernelSpec, r, s):
    """a(r,s) = int_0^pi Phi(|x-y|) 4 pi sin^2(theta) dtheta, vectorized.

    The integrable |x-y|^-2 near-singularity at theta -> 0 (when r ~ s) is
    handled by the geometric panel ladder, which plays the role of a
    square-root-type refinement of the quadrature near the singular corner.
    """
    r = np.atleast_1d(np.asarray(r, dtype=float))
    s = np.atleast_1d(np.asarray(s, dtype=float))
    theta = _PANEL_THETA[None, :]
    wq = _PANEL_W[None, :]
    # |x-y|^2 written without cancellation: (r-s)^2 + 4 r s sin^2(theta/2)
    d2 = (r - s)[:, None] ** 2 + 4 * (r * s)[:, None] * np.sin(theta / 2) ** 2
    integrand = 4 * np.pi * np.sin(theta) ** 2 / d2
    if spec.kind == "deformed" and not np.isinf(spec.t):
        integrand = integrand * spec.phi((np.sqrt(d2) / spec.t) ** spec.k)
    out = np.sum(integrand * wq, axis=1)
    if not np.all(np.isfinite(out)):
        raise QuadratureError("angular quadrature produced non-finite entries")
    return out


@dataclass
class KernelMatrix:
    """Dense discretization of rho -> (Phi * rho) on a fixed grid."""

    entries: np.ndarray
    spec: KernelSpec
    grid: RadialGrid

    def __post_init__(self):
        n = self.grid.n_points
        if self.entries.shape != (n, n):
            raise ConfigurationError("kernel matrix shape does not match grid")
        if not np.all(np.isfinite(self.entries)):
            raise ConfigurationError("kernel matrix has non-finite entries")


def _fold_matrix(avg: np.ndarray, grid: RadialGrid) -> np.ndarray:
    ds = _fold_weights(grid)
    m = avg * (grid.nodes**3 * ds)[None, :]
    m[np.diag_indices_from(m)] += _kink_diagonal(grid)
    return m


def build_kernel_matrix(spec: KernelSpec, grid: RadialGrid,
                        cache_dir=None) -> KernelMatrix:
    """Assemble the angular-average kernel matrix (upper triangle + mirror)."""
    if cache_dir is not None:
        cached = _cache_load(spec, grid, cache_dir)
        if cached is not None:
            return cached
    n = grid.n_points
    r = grid.nodes
    avg = np.empty((n, n))
    iu, ju = np.triu_indices(n)
    chunk = max(1, 2_000_000 // _PANEL_THETA.size)
    for start in range(0, iu.size, chunk * 1000):
        sl = slice(start, min(start + chunk * 1000, iu.size))
        avg[iu[sl], ju[sl]] = angular_average(spec, r[iu[sl]], r[ju[sl]])
    il, jl = np.tril_indices(n, -1)
    avg[il, jl] = avg[jl, il]
    mat = KernelMatrix(_fold_matrix(avg, grid), spec, grid)
    if cache_dir is not None:
        _cache_store(mat, cache_dir)
    return mat


def newton_kernel_matrix(grid: RadialGrid) -> KernelMatrix:
    """Kernel matrix from the exact Newton angular average (no quadrature)."""
    r = grid.nodes
    avg = newton_average(r[:, None], r[None, :])
    return KernelMatrix(_fold_matrix(avg, grid),
                        KernelSpec(kind="newton"), grid)


def convolve(matrix: KernelMatrix, rho: RadialField) -> RadialField:
    """Matrix-vector convolution (Phi * rho); rho must be real."""
    if rho.grid is not matrix.grid and rho.grid.key() != matrix.grid.key():
        raise ConfigurationError("kernel matrix and density live on different grids")
    if not rho.is_real(tol=1e-10):
        raise ConfigurationError("convolve expects a real density")
    return RadialField((matrix.entries @ rho.values.real).astype(complex), rho.grid)


# ---------------------------------------------------------------------------
# disk cache: text header + raw numpy payload


def _cache_path(spec: KernelSpec, grid: RadialGrid, cache_dir) -> Path:
    name = f"kernel_{spec.key()}_{grid.key()}.npz"
    return Path(cache_dir) / name


def _cache_store(mat: KernelMatrix, cache_dir):
    path = _cache_path(mat.spec, mat.grid, cache_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({
        "spec": mat.spec.label(),
        "grid": mat.grid.key(),
        "n_points": mat.grid.n_points,
        "r_max": mat.grid.r_max,
        "panel_depth": _LADDER_DEPTH,
        "gl_order": len(_GL_NODES),
    }, indent=None)
    buf = io.BytesIO()
    np.save(buf, mat.entries)
    with open(path, "wb") as fh:
        fh.write(b"# hartreelab kernel cache\n# ")
        fh.write(header.encode())
        fh.write(b"\n")
        fh.write(buf.getvalue())


def _cache_load(spec: KernelSpec, grid: RadialGrid, cache_dir):
    path = _cache_path(spec, grid, cache_dir)
    if not path.exists():
        return None
    with open(path, "rb") as fh:
        magic = fh.readline()
        if not magic.startswith(b"# hartreelab kernel cache"):
            return None
        header = json.loads(fh.readline().decode().lstrip("# "))
        if header.get("grid") != grid.key() or header.get("spec") != spec.label():
            return None
        entries = np.load(fh)
    return KernelMatrix(entries, spec, grid)
