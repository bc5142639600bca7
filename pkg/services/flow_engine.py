"""
Flow-equation engine for connected amputated Green functions (CAG's).

No- and one-insertion CAG's of the interacting theory are integrated in momentum space
on a logarithmic Lambda grid (l <= 1). CAG's with two or three insertions come from the
plane-wave backend whenever no interaction vertex contributes; otherwise their tree-level
flow is integrated here, with the source integrals of phased factors taken on a shifted contour.
"""
import itertools
import logging
import math
import threading
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config.constants import (
    DEFAULT_COUPLING, DEFAULT_L_MAX, DEFAULT_N_MAX, DEFAULT_N_MAX_INSERTIONS, ENGINE_PANEL_WIDTH,
    FD_BASE_STEP, LAMBDA0_LADDER, LAMBDA_FLOOR_SAMPLES, LOOP_TOLERANCE,
)
from data.models import (
    Block, BudgetExceededError, CagKey, CoincidentPointsError, ConfigurationError, CutoffPair,
    Insertion, MultiIndex, RegTuple, THREE_INSERTION_COLLECTIONS, UnsupportedConfigurationError,
    multi_indices_of_order,
)
from services.wave_series import SeriesCag, WaveSeries, cached_wave_series
from utils.multiindex_taylor import TaylorJet, leibniz_weights, operator_derivative, richardson_derivative
from utils.propagators import (
    LambdaGrid, loop_integrate, phased_loop_integrate, propagator_from_complex_square, propagator_from_square,
)
from utils.wick_oracle import TreeDiagramCag

logger = logging.getLogger(__name__)

ORIGIN = (0.0, 0.0, 0.0, 0.0)

_ENGINES: Dict[Tuple[float, float, float], 'FlowEngine'] = {}
_ENGINES_LOCK = threading.Lock()


def get_engine(lam0: float, mass: float, coupling: float = DEFAULT_COUPLING) -> 'FlowEngine':
    """Module-level engine cache, one engine (and profile cache) per (Lambda0, m, g)."""
    key = (float(lam0), float(mass), float(coupling))
    with _ENGINES_LOCK:
        if key not in _ENGINES:
            logger.info(f"Creating flow engine for Lambda0={lam0:g}, m={mass:g}, g={coupling:g}")
            _ENGINES[key] = FlowEngine(lam0, mass, coupling)
        return _ENGINES[key]


def clear_engines() -> None:
    with _ENGINES_LOCK:
        _ENGINES.clear()


def _signature(momenta: np.ndarray) -> Tuple[float, ...]:
    return tuple(np.round(np.asarray(momenta, dtype=float), 13).ravel().tolist())


def _propagator_series(s0: float, degree: int, lam: float, lam0: float, mass: float) -> List[float]:
    """Taylor coefficients in (s - s0) of C^{lam,lam0} as a function of s = q^2."""
    u = s0 + mass ** 2
    a = 1.0 / lam0 ** 2
    b = 1.0 / lam ** 2 if lam > 0 else None
    exps = []
    for k in range(degree + 1):
        uv = math.exp(-a * u) * (-a) ** k / math.factorial(k)
        ir = 0.0 if b is None else math.exp(-b * u) * (-b) ** k / math.factorial(k)
        exps.append(uv - ir)
    inverse = [(-1) ** k / u ** (k + 1) for k in range(degree + 1)]
    return [sum(exps[i] * inverse[k - i] for i in range(k + 1)) for k in range(degree + 1)]


def extrapolate_lambda0(evaluate: Callable[[float], complex],
                        ladder: Sequence[float] = LAMBDA0_LADDER) -> Tuple[complex, float]:
    """
    Remove the UV cutoff by Richardson extrapolation in 1/Lambda0^2 over a ladder.

    Returns:
        (extrapolated value, spread between the top rung and the extrapolation)
    """
    h = np.array([1.0 / lam0 ** 2 for lam0 in ladder])
    values = np.array([complex(evaluate(lam0)) for lam0 in ladder])
    if len(ladder) == 1:
        return values[0], 0.0
    deg = len(ladder) - 1
    re = np.polyval(np.polyfit(h, values.real, deg), 0.0)
    im = np.polyval(np.polyfit(h, values.imag, deg), 0.0)
    extrapolated = complex(re, im)
    top = values[int(np.argmin(h))]
    return extrapolated, float(abs(top - extrapolated))


def extrapolate_lambda_floor(evaluate: Callable[[float], complex], mass: float,
                             samples: Sequence[float] = LAMBDA_FLOOR_SAMPLES) -> complex:
    """Lambda -> 0 from two small-Lambda samples, Richardson in Lambda^2."""
    lam_a, lam_b = (s * mass for s in samples)
    v_a, v_b = complex(evaluate(lam_a)), complex(evaluate(lam_b))
    ratio = (lam_a / lam_b) ** 2
    return (ratio * v_b - v_a) / (ratio - 1.0)


class FlowEngine:
    """
    Integrates the flow equations of no- and one-insertion CAG's, and of multi-insertion CAG's
    at tree level; vertex-free multi-insertion CAG's go to the plane-wave backend.

    Profiles (values on the Lambda nodes plus a trailing Lambda = 0 entry) are cached per
    (n, l, insertion, momentum signature); relevant Taylor data are cached per (n, l, insertion).
    """

    def __init__(self, lam0: float, mass: float, coupling: float = DEFAULT_COUPLING,
                 grid: Optional[LambdaGrid] = None, closed_form_tree: bool = True,
                 loop_tolerance: float = LOOP_TOLERANCE):
        self.lam0 = lam0
        self.mass = mass
        self.coupling = coupling
        self.closed_form_tree = closed_form_tree
        self.loop_tolerance = loop_tolerance
        self.grid = grid or LambdaGrid(lam0, mass, panel_width=ENGINE_PANEL_WIDTH)
        self._profiles: Dict[Tuple, Tuple[np.ndarray, float]] = {}
        self._rhs_cache: Dict[Tuple, Tuple[np.ndarray, np.ndarray]] = {}
        self._relevant: Dict[Tuple, Dict[Tuple[int, ...], complex]] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    # ---- public surface -----------------------------------------------

    def cutoffs(self, lam: float) -> CutoffPair:
        return CutoffPair(lam, self.lam0, self.mass)

    def cag_no_insertion(self, key: CagKey, momenta: np.ndarray, w: Optional[MultiIndex] = None) -> complex:
        """d^w L_{n,l}(p_1..p_{n-1}) at the key's Lambda; the last momentum follows from conservation."""
        return self.evaluate(key, momenta, w)[0]

    def cag_one_insertion(self, key: CagKey, momenta: np.ndarray, w: Optional[MultiIndex] = None) -> complex:
        """d^w L_{n,l}(O_A(x); p_1..p_n) at the key's Lambda."""
        return self.evaluate(key, momenta, w)[0]

    def cag_two_insertion(self, key: CagKey, momenta: np.ndarray, w: Optional[MultiIndex] = None) -> complex:
        """d^w L_{D,n,l}(O_A1(x_1) O_A2(x_2); p) with the key's D (unregularized when absent)."""
        if key.n_insertions != 2:
            raise ConfigurationError(f"cag_two_insertion needs two insertions, got {key.n_insertions}")
        return self.evaluate(key, momenta, w)[0]

    def cag_three_insertion(self, key: CagKey, momenta: np.ndarray, w: Optional[MultiIndex] = None) -> complex:
        """d^w L_{D,n,l}(O_A1 O_A2 O_A3; p) for one of the supported regularization collections."""
        if key.n_insertions != 3:
            raise ConfigurationError(f"cag_three_insertion needs three insertions, got {key.n_insertions}")
        return self.evaluate(key, momenta, w)[0]

    def evaluate(self, key: CagKey, momenta: np.ndarray,
                 w: Optional[MultiIndex] = None) -> Tuple[complex, float]:
        """
        Value (or momentum derivative) of the CAG named by the key.

        Returns:
            (value, combined quadrature error estimate)
        """
        self._check_key(key)
        n, l = key.n_ext, key.loops
        if key.n_insertions >= 2:
            return self._multi_insertion(key, momenta, w)
        insertion = key.insertions[0] if key.insertions else None
        full = self._complete(momenta, n, insertion)
        lam = key.cutoffs.lam
        if w is None or w.order == 0:
            return self._value(n, l, full, insertion, lam)
        if l == 0 and self.closed_form_tree:
            return self._tree_derivative(n, full, insertion, lam, w), 0.0
        flat0 = self._flatten(full, insertion)
        if len(w.entries) != flat0.size:
            raise ConfigurationError(f"derivative index of length {len(w.entries)} for {flat0.size} momentum components")

        def func(points: np.ndarray) -> np.ndarray:
            return np.array([self._value(n, l, self._unflatten(pt, n, insertion), insertion, lam)[0]
                             for pt in points])

        return complex(richardson_derivative(func, flat0, w.entries)), 0.0

    # ---- validation and momentum bookkeeping ---------------------------

    def _check_key(self, key: CagKey) -> None:
        if abs(key.cutoffs.lam0 - self.lam0) > 1e-12 * self.lam0 or key.cutoffs.mass != self.mass:
            raise ConfigurationError(f"key cutoffs {key.cutoffs} do not match the engine (Lambda0={self.lam0:g})")
        if key.loops > DEFAULT_L_MAX and key.n_insertions <= 1:
            raise BudgetExceededError(f"loop order {key.loops} exceeds l_max={DEFAULT_L_MAX}", n=key.n_ext, l=key.loops)
        if key.loops >= 1:
            cap = DEFAULT_N_MAX if key.n_insertions == 0 else DEFAULT_N_MAX_INSERTIONS
            if key.n_ext > cap:
                raise BudgetExceededError(f"n={key.n_ext} exceeds n_max={cap} at l={key.loops}",
                                          n=key.n_ext, l=key.loops)

    @staticmethod
    def _complete(momenta: np.ndarray, n: int, insertion: Optional[Insertion]) -> np.ndarray:
        p = np.asarray(momenta, dtype=float).reshape(-1, 4) if np.size(momenta) else np.zeros((0, 4))
        if insertion is not None:
            if p.shape[0] != n:
                raise ConfigurationError(f"insertion CAG with n={n} takes {n} momenta, got {p.shape[0]}")
            return p
        if p.shape[0] == n and n > 0 and np.allclose(p.sum(axis=0), 0.0, atol=1e-12):
            return p
        if p.shape[0] != max(n - 1, 0):
            raise ConfigurationError(f"CAG with n={n} takes {n - 1} independent momenta, got {p.shape[0]}")
        if n == 0:
            return p
        return np.vstack([p, -p.sum(axis=0, keepdims=True)])

    @staticmethod
    def _flatten(full: np.ndarray, insertion: Optional[Insertion]) -> np.ndarray:
        return (full if insertion is not None else full[:-1]).reshape(-1).copy()

    @staticmethod
    def _unflatten(flat: np.ndarray, n: int, insertion: Optional[Insertion]) -> np.ndarray:
        p = np.asarray(flat, dtype=float).reshape(-1, 4)
        if insertion is not None:
            return p
        return np.vstack([p, -p.sum(axis=0, keepdims=True)])

    # ---- values --------------------------------------------------------

    def _vanishes(self, n: int, l: int, insertion: Optional[Insertion]) -> bool:
        if n < 0 or n % 2:
            return True
        if insertion is None:
            return n < 2 or (n == 2 and l == 0) or (self.coupling == 0.0)
        if l == 0:
            return n < min(op.n for op, _ in insertion.terms)
        return False

    def _value(self, n: int, l: int, full: np.ndarray, insertion: Optional[Insertion],
               lam: float) -> Tuple[complex, float]:
        if self._vanishes(n, l, insertion):
            return 0.0 + 0.0j, 0.0
        if l == 0 and self.closed_form_tree:
            tree = TreeDiagramCag(n, self.coupling, self.cutoffs(lam), insertion)
            return complex(tree(full)), 0.0
        at_origin = insertion.moved(ORIGIN) if insertion is not None else None
        values, error = self._profile(n, l, full, at_origin)
        value = values[-1] if lam <= self.grid.lam_lo else self.grid.interpolate(values[:-1], lam)
        if insertion is not None:
            value = value * np.exp(1j * float(np.dot(full.sum(axis=0), insertion.position)))
        return complex(value), error

    def _tree_derivative(self, n: int, full: np.ndarray, insertion: Optional[Insertion], lam: float,
                         w: MultiIndex) -> complex:
        """Exact d^w of the closed-form tree through truncated power series in the momenta."""
        if self._vanishes(n, 0, insertion):
            return 0.0 + 0.0j
        flat = self._flatten(full, insertion)
        support = [i for i, e in enumerate(w.entries) if e]
        degree = w.order
        n_vars = len(support)
        jets = []
        for i, value in enumerate(flat):
            if i in support:
                grad = [0.0] * n_vars
                grad[support.index(i)] = 1.0
                jets.append(TaylorJet.linear(grad, n_vars, degree, value))
            else:
                jets.append(TaylorJet.constant(value, n_vars, degree))
        legs = [jets[4 * j:4 * j + 4] for j in range(len(jets) // 4)]
        if insertion is None:
            legs.append([-sum(leg[mu] for leg in legs) for mu in range(4)])
        cut = self.cutoffs(lam)

        def prop(q):
            s = sum(c * c for c in q)
            return s.compose(_propagator_series(float(np.real(s.constant_term)), degree, cut.lam, cut.lam0, cut.mass))

        tree = TreeDiagramCag(n, self.coupling, cut, insertion)
        amplitude = tree.amplitude(legs, prop=prop, exp=lambda z: z.exp())
        if not isinstance(amplitude, TaylorJet):
            return 0.0 + 0.0j
        return complex(amplitude.derivative(tuple(w.entries[i] for i in support))) / math.factorial(n)

    # ---- profiles ------------------------------------------------------

    def _cache_key(self, n: int, l: int, full: np.ndarray, insertion: Optional[Insertion]) -> Tuple:
        return (n, l, insertion, _signature(full))

    def _node_propagator(self, s: float) -> np.ndarray:
        """C^{Lambda,Lambda0}(q) on the nodes, with the Lambda = 0 entry appended."""
        u = s + self.mass ** 2
        nodes = (math.exp(-u / self.lam0 ** 2) - np.exp(-u / self.grid.lam ** 2)) / u
        return np.concatenate([nodes, [math.exp(-u / self.lam0 ** 2) / u]])

    def _node_propagator_dot(self, s: float) -> np.ndarray:
        lam = self.grid.lam
        return -2.0 / lam ** 3 * np.exp(-(s + self.mass ** 2) / lam ** 2)

    def _tree_profile(self, n: int, full: np.ndarray, insertion: Optional[Insertion]) -> np.ndarray:
        tree = TreeDiagramCag(n, self.coupling, self.cutoffs(0.0), insertion)
        prop = lambda q: self._node_propagator(float(sum(c * c for c in q)))
        value = tree.amplitude([list(map(float, p)) for p in full], prop=prop) / math.factorial(n)
        return np.broadcast_to(np.asarray(value, dtype=complex), (self.grid.size + 1,)).copy()

    def _profile(self, n: int, l: int, full: np.ndarray,
                 insertion: Optional[Insertion]) -> Tuple[np.ndarray, float]:
        """L_{n,l} at the given momenta on all Lambda nodes (insertion at the origin)."""
        if self._vanishes(n, l, insertion):
            return np.zeros(self.grid.size + 1, dtype=complex), 0.0
        key = self._cache_key(n, l, full, insertion)
        cached = self._profiles.get(key)
        if cached is not None:
            self.hits += 1
            return cached
        self.misses += 1
        if l == 0 and self.closed_form_tree:
            result = (self._tree_profile(n, full, insertion), 0.0)
        else:
            rhs, error = self._rhs(n, l, full, insertion)
            x_nodes = self.grid.cumulative(-rhs)
            bottom = self.grid.total(-rhs)
            values = np.concatenate([x_nodes, [bottom]]).astype(complex)
            values = values - self._relevant_polynomial(n, l, full, insertion) + self._datum(n, l, full, insertion)
            result = (values, float(self.grid.total(np.abs(np.broadcast_to(error, rhs.shape)))))
        with self._lock:
            self._profiles[key] = result
        return result

    def _threshold(self, insertion: Optional[Insertion]) -> int:
        return 4 if insertion is None else insertion.dimension

    def _datum(self, n: int, l: int, full: np.ndarray, insertion: Optional[Insertion]) -> complex:
        if l != 0:
            return 0.0
        if insertion is None:
            return self.coupling / 24.0 if n == 4 else 0.0
        total = 0.0 + 0.0j
        for op, c in insertion.terms:
            if op.n != n:
                continue
            matrix = np.array([[np.prod((1j * p) ** np.asarray(block)) for p in full] for block in op.blocks])
            total += c * _symmetric_mean(matrix)
        return total

    def _relevant_polynomial(self, n: int, l: int, full: np.ndarray, insertion: Optional[Insertion]) -> complex:
        """T^{<= threshold - n}_p X(0, .) evaluated at the given momenta."""
        return _taylor_polynomial(self._relevant_data(n, l, insertion), self._flatten(full, insertion))

    def _relevant_data(self, n: int, l: int, insertion: Optional[Insertion]) -> Dict[Tuple[int, ...], complex]:
        """Momentum derivatives at p = 0 of the unsubtracted flow integral X at Lambda = 0."""
        key = (n, l, insertion)
        if key in self._relevant:
            return self._relevant[key]
        dim = 4 * (n - 1) if insertion is None else 4 * n

        def bottom(points: np.ndarray) -> np.ndarray:
            out = []
            for pt in points:
                rhs, _ = self._rhs(n, l, self._unflatten(pt, n, insertion), insertion)
                out.append(self.grid.total(-rhs))
            return np.array(out)

        data = _moments_at_origin(bottom, self._threshold(insertion) - n, max(dim, 0))
        if data:
            logger.debug(f"relevant data for (n={n}, l={l}, {insertion.label if insertion else 'no insertion'}): "
                         f"{len(data)} moments")
        with self._lock:
            self._relevant[key] = data
        return data

    def rhs_profile(self, n: int, l: int, full: np.ndarray, insertion: Optional[Insertion]) -> np.ndarray:
        """Assembled flow right-hand side on the Lambda nodes (insertion at the origin)."""
        return self._rhs(n, l, full, insertion)[0]

    def _rhs(self, n: int, l: int, full: np.ndarray, insertion: Optional[Insertion]) -> Tuple[np.ndarray, np.ndarray]:
        key = self._cache_key(n, l, full, insertion)
        cached = self._rhs_cache.get(key)
        if cached is not None:
            return cached
        total = np.zeros(self.grid.size, dtype=complex)
        error = np.zeros(self.grid.size)
        if l >= 1:
            loop, loop_error = self._loop_term(n, l, full, insertion)
            total += loop
            error += loop_error
        total += self._product_terms(n, l, full, insertion)
        result = (total, error)
        with self._lock:
            self._rhs_cache[key] = result
        return result

    def _loop_term(self, n: int, l: int, full: np.ndarray,
                   insertion: Optional[Insertion]) -> Tuple[np.ndarray, np.ndarray]:
        """binom(n+2, 2) int_k Cdot(k) L_{n+2,l-1}(k, -k, p) on every node."""
        if l - 1 > 0:
            raise BudgetExceededError(f"loop term of L_{n},{l} needs l-1={l - 1} inner flows", n=n, l=l)
        if self._vanishes(n + 2, l - 1, insertion):
            return np.zeros(self.grid.size, dtype=complex), np.zeros(self.grid.size)
        factor = math.comb(n + 2, 2)
        tree = TreeDiagramCag(n + 2, self.coupling, self.cutoffs(0.0), insertion)
        external = [list(map(float, p)) for p in full]
        values = np.zeros(self.grid.size, dtype=complex)
        errors = np.zeros(self.grid.size)
        for j, lam in enumerate(self.grid.lam):
            cut = self.cutoffs(float(lam))

            def integrand(k: np.ndarray) -> np.ndarray:
                kk = [k[:, mu] for mu in range(4)]
                legs = [kk, [-c for c in kk]] + external
                prop = lambda q: propagator_from_square(sum(c * c for c in q), cut)
                amp = tree.amplitude(legs, prop=prop) / math.factorial(n + 2)
                return np.broadcast_to(np.asarray(amp, dtype=complex), (k.shape[0],))

            value, err = loop_integrate(integrand, float(lam), self.mass, self.loop_tolerance)
            values[j] = factor * value
            errors[j] = factor * err
        return values, errors

    def _product_terms(self, n: int, l: int, full: np.ndarray, insertion: Optional[Insertion]) -> np.ndarray:
        """
        -1/2 sum over ordered factor pairs of n_1 n_2 <L, Cdot L> with the connecting momentum
        fixed by conservation on the no-insertion factor, averaged over leg splits.
        """
        total = np.zeros(self.grid.size, dtype=complex)
        legs = list(range(n))
        for n1 in range(2, n + 2):
            n2 = n + 2 - n1
            if n2 < 1:
                continue
            for l1 in range(l + 1):
                l2 = l - l1
                if self._vanishes(n1, l1, None) or self._vanishes(n2, l2, insertion):
                    continue
                # (L_A, L) and (L, L_A) orderings contribute equally
                weight = -0.5 * n1 * n2 * (2 if insertion is not None else 1)
                splits = list(itertools.combinations(legs, n1 - 1))
                acc = np.zeros(self.grid.size, dtype=complex)
                for s1 in splits:
                    s2 = [j for j in legs if j not in s1]
                    q = -full[list(s1)].sum(axis=0) if s1 else np.zeros(4)
                    left = np.vstack([full[list(s1)], q[None, :]]) if s1 else q[None, :]
                    right = np.vstack([-q[None, :], full[s2]]) if s2 else -q[None, :]
                    p1, _ = self._profile(n1, l1, left, None)
                    p2, _ = self._profile(n2, l2, right, insertion)
                    acc += p1[:-1] * self._node_propagator_dot(float(q @ q)) * p2[:-1]
                total += weight * acc / len(splits)
        return total

    # ---- multi-insertion CAG's -----------------------------------------

    def _regularization(self, key: CagKey) -> RegTuple:
        reg = key.reg or RegTuple.none(key.n_insertions)
        if key.n_insertions == 3:
            collection = frozenset(reg.table)
            if collection not in THREE_INSERTION_COLLECTIONS:
                raise UnsupportedConfigurationError(
                    f"regularization collection {sorted(sorted(s) for s in collection)} is not supported")
        return reg

    def _check_coincidences(self, key: CagKey, reg: RegTuple) -> None:
        points = [np.asarray(ins.position) for ins in key.insertions]
        for i, j in itertools.combinations(range(len(points)), 2):
            if np.linalg.norm(points[i] - points[j]) > 0.0:
                continue
            covering = [s for s in reg.table if {i, j} <= s]
            smallest = min(covering, key=len)
            needed = sum(key.insertions[k].dimension for k in smallest)
            if reg.table[smallest] < needed:
                raise CoincidentPointsError(
                    f"insertions {i + 1} and {j + 1} coincide but D_{sorted(k + 1 for k in smallest)}="
                    f"{reg.table[smallest]} < {needed}")

    @staticmethod
    def vertex_free(n: int, l: int, insertions: Sequence[Insertion]) -> bool:
        """
        True when no diagram with a phi^4 vertex contributes to L_{n,l} of these insertions,
        from 2V = n + 2l + 2N - 2 - sum_i n_i with the fewest fields per insertion.
        """
        fields = sum(min(op.n for op, _ in ins.terms) for ins in insertions)
        return n + 2 * l + 2 * len(insertions) - 2 - fields < 2

    def wave_series(self, key: CagKey) -> WaveSeries:
        """The Gaussian-sector backend of a multi-insertion key (exact whenever the key is vertex free)."""
        reg = self._regularization(key)
        self._check_coincidences(key, reg)
        return cached_wave_series(tuple(key.insertions), reg, self.lam0, self.mass)

    def _is_gaussian(self, n: int, l: int, group: Sequence[Insertion]) -> bool:
        return self.coupling == 0.0 or self.vertex_free(n, l, group)

    def _multi_insertion(self, key: CagKey, momenta: np.ndarray,
                         w: Optional[MultiIndex]) -> Tuple[complex, float]:
        p = np.asarray(momenta, dtype=float).reshape(-1, 4) if np.size(momenta) else np.zeros((0, 4))
        if w is not None and w.order > 0:
            if w.n_blocks != key.n_ext:
                raise ConfigurationError(f"derivative over {w.n_blocks} legs for n={key.n_ext}")
        elif p.shape[0] != key.n_ext:
            raise ConfigurationError(f"CAG with insertions takes all {key.n_ext} momenta, got {p.shape[0]}")
        lam = key.cutoffs.lam
        if self._is_gaussian(key.n_ext, key.loops, key.insertions):
            series: SeriesCag = self.wave_series(key).connected(range(key.n_insertions))
            if w is not None and w.order > 0:
                return series.derivative(w, lam, key.loops), 0.0
            return series.value(p, lam, key.loops), 0.0
        reg = self._regularization(key)
        self._check_coincidences(key, reg)
        anchor = np.asarray(key.insertions[-1].position, dtype=float)
        group = _recentred(key.insertions, anchor)

        def value(full: np.ndarray) -> Tuple[complex, float]:
            values, error = self._group_profile(key.n_ext, key.loops, full, group, reg)
            v = values[-1] if lam <= self.grid.lam_lo else self.grid.interpolate(values[:-1], lam)
            return complex(v * np.exp(1j * float(np.dot(full.sum(axis=0), anchor)))), error

        if w is None or w.order == 0:
            return value(p)

        def func(points: np.ndarray) -> np.ndarray:
            return np.array([value(pt.reshape(-1, 4))[0] for pt in points])

        return complex(richardson_derivative(func, np.zeros(4 * key.n_ext), w.entries)), 0.0

    def f_value(self, insertions: Sequence[Insertion], reg: RegTuple, momenta: np.ndarray, lam: float,
                l: int = 0) -> complex:
        """
        F_D(O_A1 ... O_AN; p) in moment units, from its own flow with the regularization D = reg.total.

        For N = 2 this is the connected CAG.
        """
        insertions = tuple(insertions)
        if len(insertions) not in (2, 3):
            raise ConfigurationError(f"the F functional takes two or three insertions, got {len(insertions)}")
        p = np.asarray(momenta, dtype=float).reshape(-1, 4) if np.size(momenta) else np.zeros((0, 4))
        n = p.shape[0]
        if l > DEFAULT_L_MAX:
            raise BudgetExceededError(f"loop order {l} exceeds l_max={DEFAULT_L_MAX}", n=n, l=l)
        if self._is_gaussian(n, l, insertions):
            series = cached_wave_series(insertions, reg, self.lam0, self.mass).f_functional()
            return series.value(p, lam, l)
        anchor = np.asarray(insertions[-1].position, dtype=float)
        values, _ = self._group_profile(n, l, p, _recentred(insertions, anchor), reg, 'F')
        v = values[-1] if lam <= self.grid.lam_lo else self.grid.interpolate(values[:-1], lam)
        return complex(v * np.exp(1j * float(np.dot(p.sum(axis=0), anchor))))

    def _group_profile(self, n: int, l: int, full: np.ndarray, group: Tuple[Insertion, ...],
                       reg: RegTuple, kind: str = 'L') -> Tuple[np.ndarray, float]:
        """
        L_{D,n,l} (kind 'L') or F_D (kind 'F') of two or three insertions on all Lambda nodes,
        in the frame of the last insertion.

        Vertex-free functionals come from the plane-wave backend. The others are integrated from
        Lambda0 with the relevant part fixed to zero at Lambda = 0, p = 0 (n <= D_total).
        """
        if n < 0 or n % 2:
            return np.zeros(self.grid.size + 1, dtype=complex), 0.0
        if self._is_gaussian(n, l, group):
            backend = cached_wave_series(group, reg, self.lam0, self.mass)
            series = backend.f_functional() if kind == 'F' else backend.connected(range(len(group)))
            return series.values_at(full, list(self.grid.lam) + [0.0], l), 0.0
        if l > 0:
            raise BudgetExceededError(
                f"L_{n},{l} of {len(group)} insertions with interaction vertices needs nested loop integrals",
                n=n, l=l)
        if n > DEFAULT_N_MAX_INSERTIONS:
            raise BudgetExceededError(f"n={n} exceeds n_max={DEFAULT_N_MAX_INSERTIONS} for interacting "
                                      f"multi-insertion CAG's", n=n, l=l)
        key = ('group', kind, n, l, group, reg, _signature(full))
        cached = self._profiles.get(key)
        if cached is not None:
            self.hits += 1
            return cached
        self.misses += 1
        rhs, error = self._group_rhs(n, full, group, reg, kind)
        x_nodes = self.grid.cumulative(-rhs)
        bottom = self.grid.total(-rhs)
        values = np.concatenate([x_nodes, [bottom]]).astype(complex)
        if n <= reg.total:
            data = self._group_relevant_data(n, group, reg, kind)
            values = values - _taylor_polynomial(data, full.reshape(-1))
        result = (values, float(self.grid.total(error)))
        with self._lock:
            self._profiles[key] = result
        return result

    def _group_relevant_data(self, n: int, group: Tuple[Insertion, ...], reg: RegTuple,
                             kind: str) -> Dict[Tuple[int, ...], complex]:
        key = ('group', kind, n, group, reg)
        if key in self._relevant:
            return self._relevant[key]

        def bottom(points: np.ndarray) -> np.ndarray:
            return np.array([self.grid.total(-self._group_rhs(n, pt.reshape(-1, 4), group, reg, kind)[0])
                             for pt in points])

        data = _moments_at_origin(bottom, reg.total - n, 4 * n)
        with self._lock:
            self._relevant[key] = data
        return data

    def group_rhs_profile(self, n: int, full: np.ndarray, group: Tuple[Insertion, ...],
                          reg: RegTuple, kind: str = 'L') -> np.ndarray:
        """Assembled tree-level right-hand side of an interacting multi-insertion flow on the nodes."""
        return self._group_rhs(n, full, group, reg, kind)[0]

    def _group_rhs(self, n: int, full: np.ndarray, group: Tuple[Insertion, ...], reg: RegTuple,
                   kind: str = 'L') -> Tuple[np.ndarray, np.ndarray]:
        """
        Tree-level right-hand side: no-insertion trees attached through Cdot(q), plus the source.

        For L the source is -n_1 n_2 Sym int_k L(O_I1; k, .) Cdot(k) L(O_I2; -k, .) over bipartitions
        I1, I2 admitted by the regularization; for F it is -(-1)^N n_i n_j Sym of the same integral for
        single insertions i < j, times the remaining single-insertion CAG's.
        """
        key = ('group', kind, n, group, reg, _signature(full))
        cached = self._rhs_cache.get(key)
        if cached is not None:
            return cached
        total = np.zeros(self.grid.size, dtype=complex)
        error = np.zeros(self.grid.size)
        legs = list(range(n))
        for n1 in range(4, n + 1, 2):
            n2 = n + 2 - n1
            splits = list(itertools.combinations(legs, n1 - 1))
            acc = np.zeros(self.grid.size, dtype=complex)
            for s1 in splits:
                s2 = [j for j in legs if j not in s1]
                q = -full[list(s1)].sum(axis=0)
                left, _ = self._profile(n1, 0, np.vstack([full[list(s1)], q[None, :]]), None)
                right, _ = self._group_profile(n2, 0, np.vstack([-q[None, :], full[s2]]), group, reg, kind)
                acc += left[:-1] * self._node_propagator_dot(float(q @ q)) * right[:-1]
            total += -n1 * n2 * acc / len(splits)
        sources = self._f_sources(n, full, group, reg) if kind == 'F' else self._l_sources(n, full, group, reg)
        total += sources[0]
        error += sources[1]
        result = (total, error)
        with self._lock:
            self._rhs_cache[key] = result
        return result

    def _l_sources(self, n: int, full: np.ndarray, group: Tuple[Insertion, ...],
                   reg: RegTuple) -> Tuple[np.ndarray, np.ndarray]:
        total = np.zeros(self.grid.size, dtype=complex)
        error = np.zeros(self.grid.size)
        legs = list(range(n))
        for left_set, right_set in WaveSeries.bipartitions(frozenset(range(len(group)))):
            if not (reg.admits(left_set) and reg.admits(right_set)):
                continue
            for n1 in range(2, n + 1, 2):
                n2 = n + 2 - n1
                splits = list(itertools.combinations(legs, n1 - 1))
                acc = np.zeros(self.grid.size, dtype=complex)
                acc_error = np.zeros(self.grid.size)
                memo: Dict[Tuple, Tuple[np.ndarray, np.ndarray]] = {}
                for s1 in splits:
                    s2 = [j for j in legs if j not in s1]
                    rest1, rest2 = full[list(s1)], full[s2]
                    sig = (_leg_signature(rest1), _leg_signature(rest2))
                    if sig not in memo:
                        memo[sig] = self._source_profile(left_set, n1, rest1, right_set, n2, rest2, group, reg)
                    values, errors = memo[sig]
                    acc += values
                    acc_error += errors
                total += -n1 * n2 * acc / len(splits)
                error += n1 * n2 * acc_error / len(splits)
        return total, error

    def _f_sources(self, n: int, full: np.ndarray, group: Tuple[Insertion, ...],
                   reg: RegTuple) -> Tuple[np.ndarray, np.ndarray]:
        total = np.zeros(self.grid.size, dtype=complex)
        error = np.zeros(self.grid.size)
        sign = -(-1) ** len(group)
        legs = list(range(n))
        for i, j in itertools.combinations(range(len(group)), 2):
            spectators = [r for r in range(len(group)) if r not in (i, j)]
            for n_r in (range(0, n + 1, 2) if spectators else (0,)):
                m = n - n_r
                for n1 in range(2, m + 1, 2):
                    n2 = m + 2 - n1
                    acc = np.zeros(self.grid.size, dtype=complex)
                    acc_error = np.zeros(self.grid.size)
                    count = 0
                    for s_r in itertools.combinations(legs, n_r):
                        spectator = self._spectator_profile(spectators, full[list(s_r)], group)
                        remaining = [k for k in legs if k not in s_r]
                        for s1 in itertools.combinations(remaining, n1 - 1):
                            count += 1
                            if not np.any(spectator):
                                continue
                            s2 = [k for k in remaining if k not in s1]
                            values, errors = self._source_profile(frozenset({i}), n1, full[list(s1)], frozenset({j}),
                                                                  n2, full[s2], group, reg)
                            acc += values * spectator
                            acc_error += errors * np.abs(spectator)
                    if count:
                        total += sign * n1 * n2 * acc / count
                        error += n1 * n2 * acc_error / count
        return total, error

    def _spectator_profile(self, spectators: Sequence[int], momenta: np.ndarray,
                           group: Tuple[Insertion, ...]) -> np.ndarray:
        """Product of the tree-level CAG's of the spectator insertions on the nodes (1 without spectators)."""
        if not spectators:
            return np.ones(self.grid.size, dtype=complex)
        (r,) = spectators
        insertion = group[r]
        values, _ = self._profile(momenta.shape[0], 0, momenta, insertion.moved(ORIGIN))
        phase = np.exp(1j * float(np.dot(momenta.sum(axis=0), insertion.position))) if momenta.size else 1.0
        return values[:-1] * phase

    def _source_profile(self, left_set: FrozenSet[int], n1: int, rest1: np.ndarray, right_set: FrozenSet[int],
                        n2: int, rest2: np.ndarray, group: Tuple[Insertion, ...],
                        reg: RegTuple) -> Tuple[np.ndarray, np.ndarray]:
        """int_k L_{n1}(O_left; k, rest1) Cdot(k) L_{n2}(O_right; -k, rest2) on every node."""
        values = np.zeros(self.grid.size, dtype=complex)
        errors = np.zeros(self.grid.size)
        for j, lam in enumerate(self.grid.lam):
            lefts = self._side_kernels(left_set, n1, rest1, group, reg, float(lam), 1.0)
            if not lefts:
                return values, errors
            rights = self._side_kernels(right_set, n2, rest2, group, reg, float(lam), -1.0)
            if not rights:
                return values, errors
            for x_a, f_a in lefts:
                for x_b, f_b in rights:
                    value, err = phased_loop_integrate(lambda k, f_a=f_a, f_b=f_b: f_a(k) * f_b(k), x_a + x_b,
                                                       float(lam), self.mass, self.loop_tolerance)
                    values[j] += value
                    errors[j] += err
        return values, errors

    def _side_kernels(self, members: FrozenSet[int], n_legs: int, rest: np.ndarray, group: Tuple[Insertion, ...],
                      reg: RegTuple, lam: float, sign: float) -> List[Tuple[np.ndarray, Callable]]:
        """
        One factor of the source term with its contracted leg at sign * k, as (y_a, h) pairs such that
        the factor is sum_a e^{i k.y_a} h(k). h accepts complex k.
        """
        cut = self.cutoffs(lam)
        if len(members) == 1:
            (index,) = tuple(members)
            insertion = group[index]
            if self._vanishes(n_legs, 0, insertion):
                return []
            x = np.asarray(insertion.position, dtype=float)
            tree = TreeDiagramCag(n_legs, self.coupling, cut, insertion.moved(ORIGIN))
            external = [list(map(float, p)) for p in rest]
            phase = complex(np.exp(1j * float(np.dot(rest.sum(axis=0), x)))) / math.factorial(n_legs)

            def prop(q):
                return propagator_from_complex_square(sum(c * c for c in q), cut)

            def tree_kernel(k: np.ndarray) -> np.ndarray:
                leg = [sign * k[:, mu] for mu in range(4)]
                amp = tree.amplitude([leg] + external, prop=prop)
                return np.broadcast_to(np.asarray(amp, dtype=complex), (k.shape[0],)) * phase

            return [(sign * x, tree_kernel)]
        subgroup = [group[i] for i in sorted(members)]
        if not self._is_gaussian(n_legs, 0, subgroup):
            raise BudgetExceededError(
                f"source factor of {len(members)} insertions with interaction vertices needs nested loop integrals",
                n=n_legs, l=0)
        series = cached_wave_series(group, reg, self.lam0, self.mass).connected(members)
        out = []
        for anchor, monomials in series.anchor_kernels(rest, lam, 0).items():
            def wave_kernel(k: np.ndarray, monomials=monomials) -> np.ndarray:
                leg = sign * k
                acc = np.zeros(k.shape[0], dtype=complex)
                for beta, c in monomials:
                    acc = acc + c * np.prod(leg ** np.asarray(beta), axis=1)
                return acc

            out.append((sign * np.asarray(group[anchor].position, dtype=float), wave_kernel))
        return out

    # ---- identity checks -----------------------------------------------

    def fe_residual(self, key: CagKey, momenta: np.ndarray, lam: float, step: float = 1e-5) -> float:
        """
        |d/dLambda L - RHS| at an interior Lambda, the derivative by central differences of the
        node interpolant and the right-hand side assembled from the lower CAG's.
        """
        grid = self.grid
        if key.n_insertions >= 2:
            p = np.asarray(momenta, dtype=float).reshape(-1, 4)
            if self._is_gaussian(key.n_ext, key.loops, key.insertions):
                series = self.wave_series(key).connected(range(key.n_insertions))
                grid = series.grid
                values = series.profile(p, key.loops)
                rhs = series.profile(p, key.loops, rhs=True)
            else:
                reg = self._regularization(key)
                group = _recentred(key.insertions, np.asarray(key.insertions[-1].position, dtype=float))
                values = self._group_profile(key.n_ext, key.loops, p, group, reg)[0][:-1]
                rhs = self._group_rhs(key.n_ext, p, group, reg)[0]
        else:
            insertion = key.insertions[0].moved(ORIGIN) if key.insertions else None
            full = self._complete(momenta, key.n_ext, insertion)
            values = self._profile(key.n_ext, key.loops, full, insertion)[0][:-1]
            rhs = self._rhs(key.n_ext, key.loops, full, insertion)[0]
        if not (grid.lam_lo < lam * (1 - step) and lam * (1 + step) < self.lam0):
            raise ConfigurationError(f"Lambda={lam:g} is not interior to the flow grid")
        upper = grid.interpolate(values, lam * (1 + step))
        lower = grid.interpolate(values, lam * (1 - step))
        derivative = (upper - lower) / (2 * lam * step)
        return float(abs(derivative - grid.interpolate(rhs, lam)))

    def lowenstein_check(self, rule: int, key: CagKey, momenta: np.ndarray, v: Block,
                         index: int = 0, subset: Optional[Iterable[int]] = None,
                         h: float = FD_BASE_STEP) -> float:
        """
        Residual of a Lowenstein rule: position derivatives of the CAG against derivative insertions.

        rule 1: d^v_x L(O_A(x)) = L(d^v O_A(x))
        rule 2: d^v_{x_j} L_D(... O_j(x_j) ...) = L_D(... d^v O_j(x_j) ...)
        rule 3: (sum_{j in I} d_{x_j})^v L_D = sum_{w} c_w L_{D(I,w)}(prod d^{w_j} O_j), D_J raised by
                sum_{j in J} |w_j| for J inside I
        """
        v = tuple(int(c) for c in v)
        if rule == 1 and key.n_insertions != 1:
            raise ConfigurationError("Lowenstein rule 1 needs exactly one insertion")
        if rule in (2, 3) and key.n_insertions < 1:
            raise ConfigurationError(f"Lowenstein rule {rule} needs insertions")
        if rule not in (1, 2, 3):
            raise ConfigurationError(f"unknown Lowenstein rule {rule}")
        if sum(v) == 0:
            return 0.0
        members = [index] if rule in (1, 2) else sorted(subset if subset is not None else range(key.n_insertions))

        def shifted_value(points: np.ndarray) -> np.ndarray:
            out = []
            for y in points:
                moved = tuple(ins.moved(np.asarray(ins.position) + y) if i in members else ins
                              for i, ins in enumerate(key.insertions))
                out.append(self.evaluate(_replace_insertions(key, moved), momenta)[0])
            return np.array(out)

        lhs = complex(richardson_derivative(shifted_value, np.zeros(4), v, h=h))
        rhs = 0.0 + 0.0j
        for split, weight in leibniz_weights(MultiIndex(v), len(members)):
            insertions = list(key.insertions)
            for member, part in zip(members, split):
                insertions[member] = _derived_insertion(insertions[member], part.entries)
            if any(ins is None for ins in insertions):
                continue
            reg = key.reg
            if rule == 3 and reg is not None:
                raised = {m: sum(part.entries) for m, part in zip(members, split)}
                reg = RegTuple(reg.n_insertions, tuple(
                    (s, d + sum(raised.get(j, 0) for j in s) if s <= set(members) else d) for s, d in reg.values))
            rhs += weight * self.evaluate(_replace_insertions(key, tuple(insertions), reg), momenta)[0]
        return float(abs(lhs - rhs))


def _symmetric_mean(matrix: np.ndarray) -> complex:
    """Mean over assignments of rows to columns of the product of matched entries."""
    n = matrix.shape[0]
    if n == 0:
        return 1.0 + 0.0j
    total = 0.0 + 0.0j
    for perm in itertools.permutations(range(n)):
        total += np.prod(matrix[np.arange(n), perm])
    return total / math.factorial(n)


def _derived_insertion(insertion: Insertion, v: Sequence[int]) -> Optional[Insertion]:
    if sum(v) == 0:
        return insertion
    merged: Dict = {}
    for op, c in insertion.terms:
        for target, weight in operator_derivative(op, tuple(v)):
            merged[target] = merged.get(target, 0.0) + c * weight
    terms = tuple((op, c) for op, c in merged.items() if c != 0)
    return Insertion(terms, insertion.position) if terms else None


def _replace_insertions(key: CagKey, insertions: Tuple[Insertion, ...],
                        reg: Optional[RegTuple] = None) -> CagKey:
    return CagKey(key.n_ext, key.loops, tuple(insertions), reg if reg is not None else key.reg, key.cutoffs)


def _recentred(insertions: Sequence[Insertion], anchor: np.ndarray) -> Tuple[Insertion, ...]:
    return tuple(ins.moved(np.asarray(ins.position, dtype=float) - anchor) for ins in insertions)


def _leg_signature(momenta: np.ndarray) -> Tuple[Tuple[float, ...], ...]:
    """Order-free signature of a set of legs; symmetric kernels agree on equal signatures."""
    return tuple(sorted(tuple(np.round(p, 13).tolist()) for p in np.asarray(momenta, dtype=float).reshape(-1, 4)))


def _moments_at_origin(bottom: Callable[[np.ndarray], np.ndarray], order_max: int,
                       dim: int) -> Dict[Tuple[int, ...], complex]:
    """All derivatives of order <= order_max at the origin of a function of dim momentum components."""
    data: Dict[Tuple[int, ...], complex] = {}
    origin = np.zeros(dim)
    for order in range(order_max + 1):
        for w in multi_indices_of_order(order, dim):
            if order == 0:
                data[w] = complex(bottom(origin[None, :])[0])
            else:
                data[w] = complex(richardson_derivative(bottom, origin, w))
    return data


def _taylor_polynomial(data: Dict[Tuple[int, ...], complex], flat: np.ndarray) -> complex:
    total = 0.0 + 0.0j
    for w, c in data.items():
        total += c * float(np.prod(flat ** np.asarray(w))) / math.prod(math.factorial(e) for e in w)
    return total
