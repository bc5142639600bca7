"""
Regularized propagators, Gaussian loop moments, position-space free propagators,
loop-momentum quadrature and the logarithmic Lambda grid used to integrate flows.
"""
import logging
import math
from functools import lru_cache
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import legendre
from scipy import integrate, special

from config.constants import (
    FD_BASE_STEP, LAMBDA_GRID_FLOOR, LAMBDA_PANEL_NODES, LAMBDA_PANEL_WIDTH, LOOP_ANGULAR_NODES,
    LOOP_MAX_REFINEMENTS, LOOP_RADIAL_NODES, LOOP_TOLERANCE, MIN_EXACT_DISTANCE, PHASE_DAMPING_CUTOFF,
    POSITION_PROPAGATOR_RTOL,
)
from data.models import CoincidentPointsError, CutoffPair, QuadratureError
from utils.multiindex_taylor import richardson_derivative

logger = logging.getLogger(__name__)

# d^4k/(2pi)^4 measure factor
MEASURE: float = 1.0 / (2.0 * math.pi) ** 4


def propagator(p: np.ndarray, c: CutoffPair) -> np.ndarray:
    """
    C^{Lambda,Lambda0}(p) = [exp(-(p^2+m^2)/Lambda0^2) - exp(-(p^2+m^2)/Lambda^2)] / (p^2+m^2).

    Args:
        p: momenta of shape (..., 4)
        c: cutoffs and mass

    Returns:
        Array of shape (...)
    """
    s = np.sum(np.asarray(p, dtype=float) ** 2, axis=-1) + c.mass ** 2
    uv = 1.0 if math.isinf(c.lam0) else np.exp(-s / c.lam0 ** 2)
    ir = 0.0 if c.lam == 0.0 else np.exp(-s / c.lam ** 2)
    return (uv - ir) / s


def propagator_from_square(s: np.ndarray, c: CutoffPair) -> np.ndarray:
    """Propagator as a function of p^2 (vectorized, used inside flows)."""
    shifted = np.asarray(s, dtype=float) + c.mass ** 2
    uv = 1.0 if math.isinf(c.lam0) else np.exp(-shifted / c.lam0 ** 2)
    ir = 0.0 if c.lam == 0.0 else np.exp(-shifted / c.lam ** 2)
    return (uv - ir) / shifted


def propagator_from_complex_square(s: np.ndarray, c: CutoffPair) -> np.ndarray:
    """
    Analytic continuation of propagator_from_square to complex s = q.q.

    Written as e^{-u/Lambda0^2} (1 - e^{-u a}) / u with a = 1/Lambda^2 - 1/Lambda0^2, with the
    series of (1 - e^{-z})/z near z = 0, so the removable pole at u = 0 stays finite.
    """
    u = np.asarray(s, dtype=complex) + c.mass ** 2
    uv_rate = 0.0 if math.isinf(c.lam0) else 1.0 / c.lam0 ** 2
    if c.lam == 0.0:
        return np.exp(-u * uv_rate) / u
    a = 1.0 / c.lam ** 2 - uv_rate
    z = u * a
    small = np.abs(z) < 1e-4
    safe = np.where(small, 1.0, z)
    ratio = np.where(small, 1.0 - z / 2.0 + z * z / 6.0, -np.expm1(-safe) / safe)
    return np.exp(-u * uv_rate) * a * ratio


def propagator_dot(k: np.ndarray, lam, mass: float) -> np.ndarray:
    """dC/dLambda = -(2/Lambda^3) exp(-(k^2+m^2)/Lambda^2); broadcast over k (...,4) and lam."""
    lam = np.asarray(lam, dtype=float)
    s = np.sum(np.asarray(k, dtype=float) ** 2, axis=-1) + mass ** 2
    return -2.0 / lam ** 3 * np.exp(-s / lam ** 2)


def propagator_dot_position(d: np.ndarray, lam, mass: float) -> np.ndarray:
    """Fourier transform of propagator_dot at separation d: -(Lambda/8pi^2) e^{-m^2/Lambda^2} e^{-Lambda^2 d^2/4}."""
    lam = np.asarray(lam, dtype=float)
    d2 = float(np.sum(np.asarray(d, dtype=float) ** 2))
    return -lam / (8.0 * math.pi ** 2) * np.exp(-mass ** 2 / lam ** 2 - lam ** 2 * d2 / 4.0)


def gaussian_moment(beta: Sequence[int], lam, mass: float, d: Sequence[float]) -> np.ndarray:
    """
    int_k Cdot^Lambda(k) e^{ik.d} k^beta = (-i d_d)^beta Cdot^Lambda(d), closed form via Hermite polynomials.

    Args:
        beta: 4-component power of the loop momentum
        lam: scalar or array of Lambda values
        mass: m
        d: separation 4-vector

    Returns:
        Complex array shaped like lam
    """
    lam = np.asarray(lam, dtype=float)
    sc = lam / 2.0
    d = np.asarray(d, dtype=float)
    value = -lam / (8.0 * math.pi ** 2) * np.exp(-mass ** 2 / lam ** 2)
    value = value.astype(complex)
    for b, x in zip(beta, d):
        value = value * (-sc) ** b * special.eval_hermite(int(b), sc * x) * np.exp(-(sc * x) ** 2)
    return value * (-1j) ** int(sum(beta))


def free_propagator_position(x: Sequence[float], mass: float,
                             cutoffs: Optional[CutoffPair] = None) -> float:
    """
    Position-space free propagator.

    Exact case (cutoffs None): m K_1(m|x|) / (4 pi^2 |x|).
    Cutoff case: int_Lambda^Lambda0 (L/8pi^2) exp(-m^2/L^2 - L^2 x^2/4) dL.

    The two forms agree at Lambda = 0, Lambda0 = inf: the Schwinger integral over L, with
    t = 1/L^2, is the proper-time form of the Fourier-Bessel transform of 1/(p^2 + m^2).
    """
    r = float(np.linalg.norm(np.asarray(x, dtype=float)))
    if cutoffs is None:
        if r < MIN_EXACT_DISTANCE / mass:
            raise CoincidentPointsError(f"exact propagator requested at |x|={r:.3e}")
        return mass * special.k1(mass * r) / (4.0 * math.pi ** 2 * r)

    def integrand(lam):
        return lam / (8.0 * math.pi ** 2) * math.exp(-mass ** 2 / lam ** 2 - lam ** 2 * r ** 2 / 4.0)

    lower = max(cutoffs.lam, 1e-3 * mass)
    # below m/1000 the integrand is exp(-1e6) small
    value, error = integrate.quad(integrand, lower, cutoffs.lam0, epsrel=POSITION_PROPAGATOR_RTOL,
                                  epsabs=0.0, limit=400)
    if error > max(POSITION_PROPAGATOR_RTOL * abs(value), 1e-300):
        raise QuadratureError("position-space cutoff propagator", value, error)
    return value


def _bessel_derivative_terms(v: Sequence[int], mass: float) -> Dict[Tuple[Tuple[int, ...], int], float]:
    """d^v of h_1, h_nu(r) = K_nu(mr)/(mr)^nu, as {(alpha, nu): coeff} meaning coeff x^alpha h_nu."""
    terms = {((0, 0, 0, 0), 1): 1.0}
    for mu, count in enumerate(v):
        for _ in range(count):
            nxt: Dict[Tuple[Tuple[int, ...], int], float] = {}
            for (alpha, nu), c in terms.items():
                if alpha[mu]:
                    lower = tuple(a - (i == mu) for i, a in enumerate(alpha))
                    nxt[(lower, nu)] = nxt.get((lower, nu), 0.0) + c * alpha[mu]
                raised = tuple(a + (i == mu) for i, a in enumerate(alpha))
                nxt[(raised, nu + 1)] = nxt.get((raised, nu + 1), 0.0) - c * mass ** 2
            terms = nxt
    return terms


def free_propagator_derivative(v: Sequence[int], x: Sequence[float], mass: float,
                               cutoffs: Optional[CutoffPair] = None) -> float:
    """
    d^v_x of the position-space free propagator.

    Exact case uses d_mu h_nu = -m^2 x_mu h_{nu+1}; the cutoff case uses Richardson differences.
    """
    x = np.asarray(x, dtype=float)
    if sum(v) == 0:
        return free_propagator_position(x, mass, cutoffs)
    if cutoffs is not None:
        func = lambda pts: np.array([free_propagator_position(pt, mass, cutoffs) for pt in pts])
        return float(np.real(richardson_derivative(func, x, v, h=FD_BASE_STEP)))
    r = float(np.linalg.norm(x))
    if r < MIN_EXACT_DISTANCE / mass:
        raise CoincidentPointsError(f"exact propagator derivative requested at |x|={r:.3e}")
    z = mass * r
    total = 0.0
    for (alpha, nu), c in _bessel_derivative_terms(v, mass).items():
        total += c * float(np.prod(x ** np.asarray(alpha))) * special.kv(nu, z) / z ** nu
    return mass ** 2 / (4.0 * math.pi ** 2) * total


@lru_cache(maxsize=16)
def _loop_grid(n_rad: int, n_psi: int, n_theta: int, n_phi: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit-scale loop grid: (t radii, unit directions, weights) for int d^4k e^{-k^2} k-dependence."""
    s, ws = special.roots_genlaguerre(n_rad, 1.0)
    t = np.sqrt(s)
    c1, w1 = special.roots_chebyu(n_psi)
    c2, w2 = special.roots_legendre(n_theta)
    phi = 2.0 * math.pi * np.arange(n_phi) / n_phi
    w3 = np.full(n_phi, 2.0 * math.pi / n_phi)
    s1 = np.sqrt(1.0 - c1 ** 2)
    s2 = np.sqrt(1.0 - c2 ** 2)
    P, T, F = np.meshgrid(np.arange(n_psi), np.arange(n_theta), np.arange(n_phi), indexing='ij')
    omega = np.stack([
        c1[P],
        s1[P] * c2[T],
        s1[P] * s2[T] * np.cos(phi[F]),
        s1[P] * s2[T] * np.sin(phi[F]),
    ], axis=-1).reshape(-1, 4)
    w_ang = (w1[P] * w2[T] * w3[F]).reshape(-1)
    k_unit = (t[:, None, None] * omega[None, :, :]).reshape(-1, 4)
    # k^3 dk e^{-k^2} = (1/2) s e^{-s} ds
    weights = (0.5 * ws[:, None] * w_ang[None, :]).reshape(-1)
    return k_unit, weights, t


def loop_integrate(f: Callable[[np.ndarray], np.ndarray], lam: float, mass: float,
                   tolerance: float = LOOP_TOLERANCE) -> Tuple[complex, float]:
    """
    int d^4k/(2pi)^4 Cdot^Lambda(k) f(k) on a hyperspherical grid adapted to e^{-k^2/Lambda^2}.

    Args:
        f: vectorized integrand factor, (M, 4) -> (M, ...)
        lam: damping scale Lambda
        mass: m
        tolerance: absolute (or relative, whichever is looser) target

    Returns:
        (value, error estimate)

    Raises:
        QuadratureError: when the refinement budget is exhausted
    """
    prefactor = MEASURE * (-2.0 / lam ** 3) * math.exp(-mass ** 2 / lam ** 2) * lam ** 4
    n_psi, n_theta, n_phi = LOOP_ANGULAR_NODES
    previous = None
    for level in range(LOOP_MAX_REFINEMENTS + 1):
        scale = level + 1
        k_unit, weights, _ = _loop_grid(LOOP_RADIAL_NODES * scale, n_psi * scale, n_theta * scale,
                                        n_phi * scale)
        values = np.asarray(f(lam * k_unit))
        current = prefactor * np.tensordot(weights, values, axes=(0, 0))
        if previous is not None:
            error = float(np.max(np.abs(current - previous)))
            size = float(np.max(np.abs(current))) if np.size(current) else 0.0
            logger.debug(f"loop_integrate level {level}: error {error:.3e}")
            if error <= tolerance or error <= tolerance * size:
                return current, error
        previous = current
    raise QuadratureError(f"loop integral at Lambda={lam:g} missed tolerance {tolerance:g}",
                          previous, error)


def phased_loop_integrate(f: Callable[[np.ndarray], np.ndarray], d: Sequence[float], lam: float, mass: float,
                          tolerance: float = LOOP_TOLERANCE) -> Tuple[complex, float]:
    """
    int d^4k/(2pi)^4 Cdot^Lambda(k) e^{ik.d} f(k) for f analytic in k.

    The contour is shifted to k + i sigma d/|d| with sigma = Lambda^2 |d| / 4, which takes out
    the oscillation of the phase up to a residual e^{ik.d/2} damped by exp(-3 Lambda^2 d^2 / 16).
    f then receives complex momenta.
    """
    d = np.asarray(d, dtype=float)
    dist = float(np.linalg.norm(d))
    if dist == 0.0:
        return loop_integrate(f, lam, mass, tolerance)
    damping = 3.0 * lam ** 2 * dist ** 2 / 16.0
    if damping > PHASE_DAMPING_CUTOFF:
        return 0.0 + 0.0j, 0.0
    shift = 1j * (lam ** 2 * dist / 4.0) * d / dist

    def shifted(k: np.ndarray) -> np.ndarray:
        values = np.asarray(f(k + shift))
        factor = np.exp(0.5j * (k @ d) - damping)
        return factor.reshape((-1,) + (1,) * (values.ndim - 1)) * values

    return loop_integrate(shifted, lam, mass, tolerance)


class LambdaGrid:
    """
    Composite Gauss-Legendre nodes on panels uniform in log(Lambda), from a floor to Lambda0.

    Flow integrals X(L) = int_L^{Lambda0} f(L') dL' are taken with per-panel spectral
    integration matrices, so nested flows stay on one node set.
    """

    def __init__(self, lam0: float, mass: float, floor: Optional[float] = None,
                 panel_width: float = LAMBDA_PANEL_WIDTH, nodes: int = LAMBDA_PANEL_NODES):
        self.mass = mass
        self.lam0 = lam0
        lo = floor if floor is not None else LAMBDA_GRID_FLOOR * mass
        self.lam_lo = min(lo, lam0 / 2.0)
        u0, u1 = math.log(self.lam_lo), math.log(lam0)
        self.n_panels = max(1, int(math.ceil((u1 - u0) / panel_width)))
        self.q = nodes
        self.edges = np.linspace(u0, u1, self.n_panels + 1)
        self.half = (self.edges[1] - self.edges[0]) / 2.0
        t, w = legendre.leggauss(nodes)
        self.t_ref, self.w_ref = t, w
        mids = (self.edges[:-1] + self.edges[1:]) / 2.0
        self.u = (mids[:, None] + self.half * t[None, :]).reshape(-1)
        self.lam = np.exp(self.u)
        self.vander_inv = np.linalg.inv(legendre.legvander(t, nodes - 1))
        self.upper_matrix = self._integration_matrix(t)
        logger.debug(f"LambdaGrid: {self.n_panels} panels x {nodes} nodes on [{self.lam_lo:g}, {lam0:g}]")

    def _integration_matrix(self, points: np.ndarray) -> np.ndarray:
        """Rows give int_{t}^{1} of the panel interpolant in reference coordinates."""
        integrated = np.zeros((len(points), self.q))
        for j in range(self.q):
            coeffs = np.zeros(self.q)
            coeffs[j] = 1.0
            anti = legendre.legint(coeffs)
            integrated[:, j] = legendre.legval(1.0, anti) - legendre.legval(points, anti)
        return integrated @ self.vander_inv

    @property
    def size(self) -> int:
        return self.lam.size

    def _panel_values(self, f_nodes: np.ndarray) -> np.ndarray:
        f = np.asarray(f_nodes)
        g = f * self.lam.reshape((-1,) + (1,) * (f.ndim - 1))
        return g.reshape((self.n_panels, self.q) + f.shape[1:])

    def cumulative(self, f_nodes: np.ndarray) -> np.ndarray:
        """X at every node: int_{node}^{Lambda0} f dLambda."""
        g = self._panel_values(f_nodes)
        full = self.half * np.tensordot(self.w_ref, g, axes=(0, 1))
        above = np.cumsum(full[::-1], axis=0)[::-1]
        above = np.concatenate([above[1:], np.zeros_like(above[:1])], axis=0)
        local = self.half * np.einsum('ij,pj...->pi...', self.upper_matrix, g)
        return (local + above[:, None, ...]).reshape(np.asarray(f_nodes).shape)

    def total(self, f_nodes: np.ndarray) -> np.ndarray:
        """int over the whole grid, i.e. from the floor to Lambda0."""
        g = self._panel_values(f_nodes)
        return self.half * np.tensordot(self.w_ref, g, axes=(0, 1)).sum(axis=0)

    def tail(self, f_nodes: np.ndarray, lam: float) -> np.ndarray:
        """int_lam^{Lambda0} f dLambda for an arbitrary lam (the floor is used below it)."""
        if lam >= self.lam0:
            return np.zeros(np.asarray(f_nodes).shape[1:])
        if lam <= self.lam_lo:
            return self.total(f_nodes)
        g = self._panel_values(f_nodes)
        u = math.log(lam)
        p = min(int((u - self.edges[0]) / (2.0 * self.half)), self.n_panels - 1)
        t = (u - (self.edges[p] + self.half)) / self.half
        row = self._integration_matrix(np.array([t]))[0]
        local = self.half * np.tensordot(row, g[p], axes=(0, 0))
        full = self.half * np.tensordot(self.w_ref, g[p + 1:], axes=(0, 1)).sum(axis=0)
        return local + full

    def interpolate(self, values: np.ndarray, lam: float) -> np.ndarray:
        """Value of a smooth node profile at lam (clamped to the grid range)."""
        values = np.asarray(values)
        u = min(max(math.log(max(lam, 1e-300)), self.edges[0]), self.edges[-1])
        p = min(int((u - self.edges[0]) / (2.0 * self.half)), self.n_panels - 1)
        t = (u - (self.edges[p] + self.half)) / self.half
        basis = legendre.legvander(np.array([t]), self.q - 1)[0] @ self.vander_inv
        panel = values.reshape((self.n_panels, self.q) + values.shape[1:])[p]
        return np.tensordot(basis, panel, axes=(0, 0))
