"""
Gaussian-sector backend for CAG's with insertions.

At vanishing coupling every CAG with insertions is a finite sum of symmetrized plane-wave
monomials Sym prod_j p_j^{beta_j} e^{i p_j . x_{a_j}} whose weights depend only on Lambda.
Loop and source integrals of such terms are Gaussian moments of Cdot in closed form, so the
flows reduce to one-dimensional Lambda integrals of the weights on a LambdaGrid.
"""
import itertools
import logging
import math
from functools import lru_cache
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from data.models import (
    Block, ConfigurationError, CutoffPair, Insertion, MultiIndex, RegTuple,
    UnsupportedConfigurationError, multi_indices_of_order,
)
from utils.propagators import LambdaGrid, gaussian_moment

logger = logging.getLogger(__name__)

# (anchor index, momentum power); anchor -1 carries no phase
WaveSlot = Tuple[int, Block]
Slots = Tuple[WaveSlot, ...]
# slots -> weight profile on the grid nodes plus a final Lambda = 0 entry
Terms = Dict[Slots, np.ndarray]
Grade = Tuple[int, int]  # (legs n, loop order l)
Components = Dict[Grade, Terms]


def _add(terms: Terms, slots: Slots, weight: np.ndarray) -> None:
    if slots in terms:
        terms[slots] = terms[slots] + weight
    else:
        terms[slots] = weight


def _permanent(matrix: np.ndarray) -> complex:
    """Permanent by Ryser's formula."""
    n = matrix.shape[0]
    if n == 0:
        return 1.0 + 0.0j
    if n == 1:
        return complex(matrix[0, 0])
    masks = np.array(list(itertools.product((0, 1), repeat=n))[1:], dtype=float)
    sums = matrix @ masks.T
    signs = (-1.0) ** masks.sum(axis=1)
    return complex((-1) ** n * np.dot(signs, np.prod(sums, axis=0)))


class SeriesCag:
    """
    A graded plane-wave series: the (n, l) components of one CAG, F- or G-functional.

    Weights live on the LambdaGrid nodes with one extra trailing entry for Lambda = 0.
    """

    def __init__(self, grid: LambdaGrid, anchors: np.ndarray, components: Components,
                 rhs: Optional[Components] = None, label: str = ""):
        self.grid = grid
        self.anchors = anchors
        self.components = components
        self.rhs = rhs or {}
        self.label = label

    def grades(self) -> List[Grade]:
        return sorted(self.components)

    def terms(self, n: int, l: Optional[int] = None) -> Terms:
        """Component with n legs; all loop orders are summed when l is None."""
        merged: Terms = {}
        for (n_c, l_c), terms in self.components.items():
            if n_c == n and (l is None or l_c == l):
                for slots, weight in terms.items():
                    _add(merged, slots, weight)
        return merged

    def _weights_at(self, terms: Terms, lam: float) -> Tuple[List[Slots], np.ndarray]:
        keys = list(terms)
        if not keys:
            return keys, np.zeros(0, dtype=complex)
        stacked = np.stack([terms[k] for k in keys], axis=-1)
        if lam <= self.grid.lam_lo:
            return keys, stacked[-1]
        return keys, self.grid.interpolate(stacked[:-1], lam)

    def value(self, momenta: np.ndarray, lam: float, l: Optional[int] = None) -> complex:
        """Symmetrized kernel at the given momenta (n, 4) and IR cutoff lam."""
        momenta = np.atleast_2d(np.asarray(momenta, dtype=float)).reshape(-1, 4)
        n = momenta.shape[0] if np.size(momenta) else 0
        keys, weights = self._weights_at(self.terms(n, l), lam)
        total = 0.0 + 0.0j
        for slots, weight in zip(keys, weights):
            matrix = np.empty((n, n), dtype=complex)
            for j, (anchor, beta) in enumerate(slots):
                x = self.anchors[anchor]
                matrix[j] = np.prod(momenta ** np.asarray(beta), axis=1) * np.exp(1j * momenta @ x)
            total += weight * _permanent(matrix) / math.factorial(n)
        return total

    def derivative(self, w: MultiIndex, lam: float, l: Optional[int] = None) -> complex:
        """d^w_p of the n-leg kernel at p = 0, n = w.n_blocks, computed exactly."""
        n = w.n_blocks
        keys, weights = self._weights_at(self.terms(n, l), lam)
        total = 0.0 + 0.0j
        for slots, weight in zip(keys, weights):
            matrix = np.zeros((n, n), dtype=complex)
            for j, (anchor, beta) in enumerate(slots):
                x = self.anchors[anchor]
                for k, u in enumerate(w.blocks):
                    if any(a < b for a, b in zip(u, beta)):
                        continue
                    entry = 1.0 + 0.0j
                    for mu in range(4):
                        e = u[mu] - beta[mu]
                        entry *= math.factorial(u[mu]) / math.factorial(e) * (1j * x[mu]) ** e
                    matrix[j, k] = entry
            total += weight * _permanent(matrix) / math.factorial(n)
        return total

    def values_at(self, momenta: np.ndarray, lams: Sequence[float], l: Optional[int] = None) -> np.ndarray:
        """value() at several Lambda, the permanents computed once."""
        momenta = np.atleast_2d(np.asarray(momenta, dtype=float)).reshape(-1, 4)
        n = momenta.shape[0] if np.size(momenta) else 0
        terms = self.terms(n, l)
        if not terms:
            return np.zeros(len(lams), dtype=complex)
        keys = list(terms)
        perms = np.empty(len(keys), dtype=complex)
        for t, slots in enumerate(keys):
            matrix = np.empty((n, n), dtype=complex)
            for j, (anchor, beta) in enumerate(slots):
                matrix[j] = np.prod(momenta ** np.asarray(beta), axis=1) * np.exp(1j * momenta @ self.anchors[anchor])
            perms[t] = _permanent(matrix) / math.factorial(n)
        stacked = np.stack([terms[k] for k in keys], axis=-1)
        out = np.empty(len(lams), dtype=complex)
        for i, lam in enumerate(lams):
            weights = stacked[-1] if lam <= self.grid.lam_lo else self.grid.interpolate(stacked[:-1], lam)
            out[i] = weights @ perms
        return out

    def anchor_kernels(self, rest: np.ndarray, lam: float,
                       l: Optional[int] = None) -> Dict[int, List[Tuple[Block, complex]]]:
        """
        The kernel with a free first leg k and the remaining legs at `rest`, split by the anchor
        carrying the phase of k: value(k, rest) = sum_a e^{ik.x_a} sum_(beta, c) c k^beta.
        """
        rest = np.asarray(rest, dtype=float).reshape(-1, 4)
        n = rest.shape[0] + 1
        keys, weights = self._weights_at(self.terms(n, l), lam)
        out: Dict[int, List[Tuple[Block, complex]]] = {}
        for slots, weight in zip(keys, weights):
            rows = np.empty((n, n - 1), dtype=complex)
            for j, (anchor, beta) in enumerate(slots):
                rows[j] = np.prod(rest ** np.asarray(beta), axis=1) * np.exp(1j * rest @ self.anchors[anchor])
            for j, (anchor, beta) in enumerate(slots):
                minor = np.delete(rows, j, axis=0)
                c = weight * _permanent(minor) / math.factorial(n)
                if c != 0:
                    out.setdefault(anchor, []).append((beta, complex(c)))
        return out

    def profile(self, momenta: np.ndarray, l: Optional[int] = None, rhs: bool = False) -> np.ndarray:
        """Lambda profile on the grid nodes of the value (or of its flow right-hand side)."""
        momenta = np.atleast_2d(np.asarray(momenta, dtype=float)).reshape(-1, 4)
        n = momenta.shape[0] if np.size(momenta) else 0
        source = self.rhs if rhs else self.components
        total = np.zeros(self.grid.size, dtype=complex)
        for (n_c, l_c), terms in source.items():
            if n_c != n or (l is not None and l_c != l):
                continue
            for slots, weight in terms.items():
                matrix = np.empty((n, n), dtype=complex)
                for j, (anchor, beta) in enumerate(slots):
                    matrix[j] = np.prod(momenta ** np.asarray(beta), axis=1) * np.exp(1j * momenta @ self.anchors[anchor])
                total = total + weight[:-1] * _permanent(matrix) / math.factorial(n)
        return total

    def __add__(self, other: 'SeriesCag') -> 'SeriesCag':
        return SeriesCag(self.grid, self.anchors, _merge(self.components, other.components),
                         label=f"{self.label}+{other.label}")

    def scaled(self, factor: complex) -> 'SeriesCag':
        return SeriesCag(self.grid, self.anchors,
                         {g: {s: w * factor for s, w in t.items()} for g, t in self.components.items()},
                         label=self.label)


def _merge(a: Components, b: Components) -> Components:
    out: Components = {g: dict(t) for g, t in a.items()}
    for grade, terms in b.items():
        target = out.setdefault(grade, {})
        for slots, weight in terms.items():
            _add(target, slots, weight)
    return out


class WaveSeries:
    """
    Flow integration of Gaussian-sector CAG's with one to three insertions.

    Args:
        insertions: the inserted operators with their positions (anchors 0..N-1)
        cutoffs: supplies Lambda0 and the mass
        reg: regularization tuple for N >= 2 (unregularized when omitted)
        grid: LambdaGrid to integrate on (built from the cutoffs when omitted)
    """

    def __init__(self, insertions: Sequence[Insertion], cutoffs: CutoffPair,
                 reg: Optional[RegTuple] = None, grid: Optional[LambdaGrid] = None):
        if not 1 <= len(insertions) <= 3:
            raise UnsupportedConfigurationError(f"{len(insertions)} insertions are not supported")
        self.insertions = tuple(insertions)
        self.n_insertions = len(insertions)
        self.mass = cutoffs.mass
        self.lam0 = cutoffs.lam0
        if reg is None:
            reg = RegTuple.none(self.n_insertions) if self.n_insertions >= 2 else None
        elif reg.n_insertions != self.n_insertions:
            raise ConfigurationError(f"regularization tuple for {reg.n_insertions} insertions, "
                                     f"got {self.n_insertions}")
        self.reg = reg
        self.grid = grid or LambdaGrid(cutoffs.lam0, cutoffs.mass)
        self.anchors = np.asarray([ins.position for ins in insertions], dtype=float)
        self._moments: Dict[Tuple, np.ndarray] = {}
        self._connected: Dict[FrozenSet[int], SeriesCag] = {}
        self._f_functional: Optional[SeriesCag] = None

    # ---- term algebra -------------------------------------------------

    def _constant(self, value: complex) -> np.ndarray:
        return np.full(self.grid.size + 1, value, dtype=complex)

    def _moment(self, beta: Block, a: int, b: int) -> np.ndarray:
        """int_k Cdot(k) k^beta e^{ik.(x_a - x_b)} on the nodes, zero at Lambda = 0."""
        key = (beta, a, b)
        if key not in self._moments:
            d = self.anchors[a] - self.anchors[b]
            values = gaussian_moment(beta, self.grid.lam, self.mass, d)
            self._moments[key] = np.concatenate([values, [0.0]])
        return self._moments[key]

    def _contract(self, first: WaveSlot, second: WaveSlot) -> np.ndarray:
        """Leg k on the first slot, -k on the second: (-1)^{|beta_2|} int Cdot k^{beta_1+beta_2} phase."""
        (a, beta_a), (b, beta_b) = first, second
        beta = tuple(x + y for x, y in zip(beta_a, beta_b))
        return (-1) ** sum(beta_b) * self._moment(beta, a, b)

    def _loop(self, terms: Terms) -> Terms:
        """binom(n+2, 2) times the mean over leg pairs, i.e. the sum over unordered slot pairs."""
        out: Terms = {}
        for slots, weight in terms.items():
            for a, b in itertools.combinations(range(len(slots)), 2):
                rest = slots[:a] + slots[a + 1:b] + slots[b + 1:]
                _add(out, rest, weight * self._contract(slots[a], slots[b]))
        return out

    def _join(self, left: Terms, right: Terms) -> Terms:
        """n_1 n_2 times the mean over the contracted legs: one Cdot line between the factors."""
        out: Terms = {}
        for s1, w1 in left.items():
            for s2, w2 in right.items():
                for a, b in itertools.product(range(len(s1)), range(len(s2))):
                    rest = tuple(sorted(s1[:a] + s1[a + 1:] + s2[:b] + s2[b + 1:]))
                    _add(out, rest, w1 * w2 * self._contract(s1[a], s2[b]))
        return out

    @staticmethod
    def _product(left: Components, right: Components) -> Components:
        out: Components = {}
        for (n1, l1), t1 in left.items():
            for (n2, l2), t2 in right.items():
                target = out.setdefault((n1 + n2, l1 + l2), {})
                for s1, w1 in t1.items():
                    for s2, w2 in t2.items():
                        _add(target, tuple(sorted(s1 + s2)), w1 * w2)
        return out

    def _graded_join(self, left: Components, right: Components) -> Components:
        out: Components = {}
        for (n1, l1), t1 in left.items():
            for (n2, l2), t2 in right.items():
                if n1 == 0 or n2 == 0:
                    continue
                joined = self._join(t1, t2)
                if joined:
                    target = out.setdefault((n1 + n2 - 2, l1 + l2), {})
                    for slots, weight in joined.items():
                        _add(target, slots, weight)
        return out

    def _taylor(self, slots: Slots, budget: int, reference: int) -> Iterable[Tuple[Slots, complex]]:
        """
        Momentum Taylor polynomial of order <= budget of one plane-wave monomial, taken in the frame
        where the reference insertion sits at the origin: the phases are expanded in x_a - x_ref and
        the overall e^{i P.x_ref} is kept.
        """
        used = sum(sum(beta) for _, beta in slots)
        if used > budget:
            return

        def expansions(slot: WaveSlot, limit: int):
            anchor, beta = slot
            d = self.anchors[anchor] - self.anchors[reference]
            for order in range(limit + 1):
                for gamma in multi_indices_of_order(order, 4):
                    coeff = complex(np.prod((1j * d) ** np.asarray(gamma))) / math.prod(
                        math.factorial(g) for g in gamma)
                    if coeff != 0:
                        yield (reference, tuple(b + g for b, g in zip(beta, gamma))), coeff, order

        def recurse(index: int, limit: int):
            if index == len(slots):
                yield (), 1.0 + 0.0j
                return
            for slot, coeff, order in expansions(slots[index], limit):
                for rest, c_rest in recurse(index + 1, limit - order):
                    yield (slot,) + rest, coeff * c_rest

        for expanded, coeff in recurse(0, budget - used):
            yield tuple(sorted(expanded)), coeff

    def _integrate(self, rhs: Terms, threshold: int, n: int, reference: int,
                   datum: Optional[Terms] = None) -> Terms:
        """
        L = X(Lambda) - T^{<= threshold-n}_p X(0) + datum with X(Lambda) = -int_Lambda^{Lambda0} rhs,
        the subtraction taken at the reference insertion.
        """
        out: Terms = {}
        keys = list(rhs)
        if keys:
            stacked = np.stack([rhs[k][:-1] for k in keys], axis=-1)
            cumulative = self.grid.cumulative(-stacked)
            bottom = self.grid.total(-stacked)
            for j, slots in enumerate(keys):
                _add(out, slots, np.concatenate([cumulative[:, j], [bottom[j]]]))
                if threshold - n >= 0:
                    for poly, coeff in self._taylor(slots, threshold - n, reference):
                        _add(out, poly, self._constant(-coeff * bottom[j]))
        for slots, weight in (datum or {}).items():
            _add(out, slots, weight)
        return out

    def _flow(self, sources: Components, threshold: int, reference: int,
              data: Optional[Components] = None) -> SeriesCag:
        """Solve the graded flow level by level in l: rhs_{n,l} = Loop[L_{n+2,l-1}] + sources_{n,l}."""
        data = data or {}
        components: Components = {}
        rhs_all: Components = {}
        levels = {l for _, l in list(sources) + list(data)}
        max_level = max(levels, default=0) + max((n for n, _ in list(sources) + list(data)), default=0) // 2 + 1
        for level in range(max_level + 1):
            rhs_level: Dict[int, Terms] = {}
            for (n, l), terms in sources.items():
                if l == level:
                    rhs_level[n] = {k: v.copy() for k, v in terms.items()}
            for (n, l), terms in components.items():
                if l == level - 1 and n >= 2:
                    target = rhs_level.setdefault(n - 2, {})
                    for slots, weight in self._loop(terms).items():
                        _add(target, slots, weight)
            ns = set(rhs_level) | {n for (n, l) in data if l == level}
            for n in sorted(ns):
                rhs = rhs_level.get(n, {})
                value = self._integrate(rhs, threshold, n, reference, data.get((n, level)))
                if value:
                    components[(n, level)] = value
                if rhs:
                    rhs_all[(n, level)] = rhs
        return SeriesCag(self.grid, self.anchors, components, rhs_all)

    # ---- CAG's ---------------------------------------------------------

    def _datum(self, i: int) -> Components:
        data: Components = {}
        for op, coeff in self.insertions[i].terms:
            slots = tuple(sorted((i, block) for block in op.blocks))
            weight = self._constant(complex(coeff) * 1j ** op.derivative_order)
            _add(data.setdefault((op.n, 0), {}), slots, weight)
        return data

    def connected(self, subset: Iterable[int]) -> SeriesCag:
        """L_S: the CAG of the insertions in S with the regularization restricted to S."""
        s = frozenset(subset)
        if not s or not s <= frozenset(range(self.n_insertions)):
            raise ConfigurationError(f"invalid insertion subset {sorted(s)}")
        if s in self._connected:
            return self._connected[s]
        if len(s) == 1:
            (i,) = tuple(s)
            result = self._flow({}, self.insertions[i].dimension, i, self._datum(i))
        else:
            threshold = self.reg.get(s)
            if threshold is None:
                raise UnsupportedConfigurationError(f"subset {sorted(s)} is not in the regularization collection")
            sources: Components = {}
            for left, right in self.bipartitions(s):
                if not (self.reg.admits(left) and self.reg.admits(right)):
                    continue
                joined = self._graded_join(self.connected(left).components, self.connected(right).components)
                sources = _merge(sources, {g: {k: -v for k, v in t.items()} for g, t in joined.items()})
            result = self._flow(sources, threshold, max(s))
        result.label = "L" + "".join(str(i + 1) for i in sorted(s))
        logger.debug(f"wave series {result.label}: {sum(len(t) for t in result.components.values())} terms")
        self._connected[s] = result
        return result

    @staticmethod
    def bipartitions(s: FrozenSet[int]) -> List[Tuple[FrozenSet[int], FrozenSet[int]]]:
        items = sorted(s)
        first, rest = items[0], items[1:]
        out = []
        for r in range(len(rest)):
            for chosen in itertools.combinations(rest, r):
                left = frozenset((first,) + chosen)
                out.append((left, s - left))
        return out

    def product(self, subsets: Sequence[Iterable[int]]) -> SeriesCag:
        """Product of the connected CAG's of disjoint insertion subsets."""
        components: Components = {(0, 0): {(): self._constant(1.0)}}
        for subset in subsets:
            components = self._product(components, self.connected(subset).components)
        return SeriesCag(self.grid, self.anchors, components)

    def product_of_singles(self) -> SeriesCag:
        result = self.product([{i} for i in range(self.n_insertions)])
        result.label = "prod L_i"
        return result

    def f_functional(self) -> SeriesCag:
        """
        F_D from its own flow: homogeneous loop term plus the source
        -(-1)^N sum_{i<j} <dL_i, Cdot dL_j> prod_{r != i,j} L_r, zero data below D_total.
        """
        if self.n_insertions < 2:
            raise ConfigurationError("the F functional needs at least two insertions")
        if self._f_functional is not None:
            return self._f_functional
        sign = -(-1) ** self.n_insertions
        sources: Components = {}
        for i, j in itertools.combinations(range(self.n_insertions), 2):
            term = self._graded_join(self.connected({i}).components, self.connected({j}).components)
            for r in range(self.n_insertions):
                if r not in (i, j):
                    term = self._product(term, self.connected({r}).components)
            sources = _merge(sources, {g: {k: sign * v for k, v in t.items()} for g, t in term.items()})
        self._f_functional = self._flow(sources, self.reg.total, self.n_insertions - 1)
        self._f_functional.label = "F"
        return self._f_functional

    def amputated(self) -> SeriesCag:
        """G_D = F_D - (-1)^N prod_i L_i (for N = 1 the CAG itself)."""
        if self.n_insertions == 1:
            return self.connected({0})
        result = self.f_functional() + self.product_of_singles().scaled(-(-1) ** self.n_insertions)
        result.label = "G"
        return result

    def assembled_f(self) -> SeriesCag:
        """F assembled from CAG's: L_12 for N = 2, L_123 - sum L_ij L_k for N = 3."""
        full = frozenset(range(self.n_insertions))
        result = self.connected(full)
        if self.n_insertions == 3:
            for k in range(3):
                pair = full - {k}
                if not self.reg.admits(pair):
                    continue
                prod = self._product(self.connected(pair).components, self.connected({k}).components)
                result = result + SeriesCag(self.grid, self.anchors, prod).scaled(-1.0)
        return result


@lru_cache(maxsize=64)
def cached_wave_series(insertions: Tuple[Insertion, ...], reg: Optional[RegTuple], lam0: float,
                       mass: float) -> WaveSeries:
    """Shared WaveSeries per (insertions, regularization, Lambda0, mass)."""
    logger.debug(f"building wave series for {[ins.label for ins in insertions]} at Lambda0={lam0:g}")
    return WaveSeries(insertions, CutoffPair(0.0, lam0, mass), reg)
