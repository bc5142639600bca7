"""
Brute-force oracles: free-theory Wick contractions with normal-ordered composite insertions,
tree-level diagrams of the interacting theory, and the one-loop tadpole.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, special

from config.constants import MAX_WICK_SLOTS
from data.models import (
    Block, BudgetExceededError, CompositeOp, ConfigurationError, CutoffPair, Insertion,
    QuadratureError, ZERO_BLOCK,
)
from utils.multiindex_taylor import exp_remainder
from utils.propagators import free_propagator_derivative, propagator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Slot:
    """One field of a contraction: d^w phi at an insertion, an external point, or an amputated leg."""
    kind: str  # 'field' | 'point' | 'leg'
    owner: int
    block: Block = ZERO_BLOCK
    position: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    momentum: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)


@dataclass
class ContractionPattern:
    """A (partial) pairing of slots with its exact multiplicity."""
    pairs: Tuple[Tuple[int, int], ...]
    unpaired: Tuple[int, ...] = ()
    multiplicity: int = 1


def double_factorial(n: int) -> int:
    return math.prod(range(n, 0, -2)) if n > 0 else 1


def _admissible(a: Slot, b: Slot) -> bool:
    if a.kind == 'field' and b.kind == 'field':
        return a.owner != b.owner
    if a.kind == 'leg' and b.kind == 'leg':
        return False
    if 'leg' in (a.kind, b.kind):
        return 'field' in (a.kind, b.kind)
    return True


def enumerate_pairings(slots: Sequence[Slot],
                       admissible: Callable[[Slot, Slot], bool] = _admissible) -> Iterator[ContractionPattern]:
    """All complete pairings of the slots respecting `admissible`."""
    if len(slots) > MAX_WICK_SLOTS:
        raise BudgetExceededError(f"{len(slots)} field slots exceed the pairing budget of {MAX_WICK_SLOTS}",
                                  slots=len(slots))

    def recurse(free: Tuple[int, ...]) -> Iterator[Tuple[Tuple[int, int], ...]]:
        if not free:
            yield ()
            return
        first, rest = free[0], free[1:]
        for k, other in enumerate(rest):
            if admissible(slots[first], slots[other]):
                for tail in recurse(rest[:k] + rest[k + 1:]):
                    yield ((first, other),) + tail

    if len(slots) % 2:
        return
    for pairs in recurse(tuple(range(len(slots)))):
        yield ContractionPattern(pairs)


def enumerate_partial_contractions(slots: Sequence[Slot], leftover: int) -> Iterator[ContractionPattern]:
    """Pairings among insertion fields (no self-contractions) that leave exactly `leftover` slots."""
    if len(slots) > MAX_WICK_SLOTS:
        raise BudgetExceededError(f"{len(slots)} field slots exceed the pairing budget of {MAX_WICK_SLOTS}",
                                  slots=len(slots))

    def recurse(free: Tuple[int, ...], left: Tuple[int, ...]):
        if len(left) > leftover:
            return
        if not free:
            if len(left) == leftover:
                yield (), left
            return
        first, rest = free[0], free[1:]
        yield from recurse(rest, left + (first,))
        for k, other in enumerate(rest):
            if _admissible(slots[first], slots[other]):
                for pairs, unpaired in recurse(rest[:k] + rest[k + 1:], left):
                    yield ((first, other),) + pairs, unpaired

    for pairs, unpaired in recurse(tuple(range(len(slots))), ()):
        yield ContractionPattern(pairs, tuple(sorted(unpaired)))


def _as_insertions(ops: Sequence, positions: Sequence[Sequence[float]]) -> List[Insertion]:
    result = []
    for op, x in zip(ops, positions):
        result.append(op.moved(x) if isinstance(op, Insertion) else Insertion.of(op, x))
    return result


def _monomial_expansions(insertions: Sequence[Insertion]) -> Iterator[Tuple[complex, List[Tuple[CompositeOp, Tuple]]]]:
    for choice in itertools.product(*(ins.terms for ins in insertions)):
        coeff = complex(np.prod([c for _, c in choice]))
        yield coeff, [(op, ins.position) for (op, _), ins in zip(choice, insertions)]


def _field_slots(monomials) -> List[Slot]:
    return [Slot('field', i, block, tuple(pos)) for i, (op, pos) in enumerate(monomials) for block in op.blocks]


def _pair_value(a: Slot, b: Slot, mass: float, cutoffs: Optional[CutoffPair]) -> complex:
    if a.kind == 'leg' or b.kind == 'leg':
        leg, field = (a, b) if a.kind == 'leg' else (b, a)
        p = np.asarray(leg.momentum)
        return complex(np.prod((1j * p) ** np.asarray(field.block))) * np.exp(1j * np.dot(p, field.position))
    # <d^a phi(x) d^b phi(y)> = (-1)^{|b|} d^{a+b} C(x - y)
    v = tuple(i + j for i, j in zip(a.block, b.block))
    sep = np.asarray(a.position) - np.asarray(b.position)
    return (-1) ** sum(b.block) * free_propagator_derivative(v, sep, mass, cutoffs)


def wick_correlator(ops: Sequence, positions: Sequence[Sequence[float]], mass: float,
                    points: Sequence[Sequence[float]] = (), legs: Sequence[Sequence[float]] = (),
                    cutoffs: Optional[CutoffPair] = None) -> complex:
    """
    Free-theory correlator of normal-ordered insertions with external points or amputated momentum legs.

    Args:
        ops: CompositeOp or Insertion per insertion point
        positions: insertion points
        mass: m
        points: positions of plain phi(y) fields
        legs: momenta of amputated external legs (each must attach to an insertion field)
        cutoffs: cutoff propagator instead of the exact one

    Returns:
        Sum over admissible pairings of the product of propagators
    """
    total = 0.0 + 0.0j
    for coeff, monomials in _monomial_expansions(_as_insertions(ops, positions)):
        slots = _field_slots(monomials)
        slots += [Slot('point', -1 - j, ZERO_BLOCK, tuple(map(float, y))) for j, y in enumerate(points)]
        slots += [Slot('leg', -100 - j, ZERO_BLOCK, momentum=tuple(map(float, p))) for j, p in enumerate(legs)]
        for pattern in enumerate_pairings(slots):
            value = coeff
            for i, j in pattern.pairs:
                value *= _pair_value(slots[i], slots[j], mass, cutoffs)
            total += value
    return total


def amputated_from_moment(moment: complex, n_legs: int, n_insertions: int) -> complex:
    """Physical amputated correlator from a symmetric moment: (-1)^{N+1} n! value."""
    return (-1) ** (n_insertions + 1) * math.factorial(n_legs) * moment


def moment_from_amputated(value: complex, n_legs: int, n_insertions: int) -> complex:
    return value / ((-1) ** (n_insertions + 1) * math.factorial(n_legs))


def _distinct_permutations(items: Sequence) -> List[Tuple]:
    return sorted(set(itertools.permutations(items)))


def free_ope_coefficient(ops: Sequence[CompositeOp], positions: Sequence[Sequence[float]],
                         target: CompositeOp, mass: float,
                         cutoffs: Optional[CutoffPair] = None) -> complex:
    """
    Exact free-theory OPE coefficient of `target` at the last insertion point.

    Partial contractions fix the singular factor; the uncontracted fields are Taylor
    expanded around x_N and matched against the sorted derivative blocks of `target`.
    """
    insertions = _as_insertions(ops, positions)
    x_n = np.asarray(insertions[-1].position)
    total = 0.0 + 0.0j
    for coeff, monomials in _monomial_expansions(insertions):
        slots = _field_slots(monomials)
        if (len(slots) - target.n) % 2:
            continue
        for pattern in enumerate_partial_contractions(slots, target.n):
            value = coeff
            for i, j in pattern.pairs:
                value *= _pair_value(slots[i], slots[j], mass, cutoffs)
            if value == 0:
                continue
            left = [slots[k] for k in pattern.unpaired]
            matched = 0.0
            for assignment in _distinct_permutations(target.blocks):
                term = 1.0
                for slot, u in zip(left, assignment):
                    v = np.asarray(u) - np.asarray(slot.block)
                    if np.any(v < 0):
                        term = 0.0
                        break
                    a = np.asarray(slot.position) - x_n
                    term *= float(np.prod(a ** v)) / math.prod(math.factorial(int(e)) for e in v)
                matched += term
            total += value * matched
    return total


def free_remainder(ops: Sequence[CompositeOp], positions: Sequence[Sequence[float]], D: int,
                   legs: Sequence[Sequence[float]], mass: float,
                   cutoffs: Optional[CutoffPair] = None) -> complex:
    """
    Exact free-theory remainder of the OPE truncated at dimension D, with amputated legs.

    Each contraction pattern contributes its singular factor times the exponential
    remainder of the plane-wave phases expanded around x_N.
    """
    insertions = _as_insertions(ops, positions)
    x_n = np.asarray(insertions[-1].position)
    legs = [np.asarray(p, dtype=float) for p in legs]
    n = len(legs)
    total_momentum = np.sum(legs, axis=0) if legs else np.zeros(4)
    base_phase = np.exp(1j * np.dot(total_momentum, x_n))
    total = 0.0 + 0.0j
    for coeff, monomials in _monomial_expansions(insertions):
        slots = _field_slots(monomials)
        if (len(slots) - n) % 2:
            continue
        for pattern in enumerate_partial_contractions(slots, n):
            value = coeff
            for i, j in pattern.pairs:
                value *= _pair_value(slots[i], slots[j], mass, cutoffs)
            if value == 0:
                continue
            left = [slots[k] for k in pattern.unpaired]
            order = D - n - sum(sum(s.block) for s in left)
            for perm in itertools.permutations(range(n)):
                theta = 0.0
                vertex = 1.0 + 0.0j
                for slot, leg_index in zip(left, perm):
                    p = legs[leg_index]
                    theta += float(np.dot(p, np.asarray(slot.position) - x_n))
                    vertex *= complex(np.prod((1j * p) ** np.asarray(slot.block)))
                total += value * vertex * base_phase * complex(exp_remainder(1j * theta, order))
    return total


def set_partitions(items: Sequence, k: int) -> Iterator[List[List]]:
    """Partitions of `items` into exactly k nonempty unordered blocks."""
    items = list(items)
    if k == 0:
        if not items:
            yield []
        return
    if len(items) < k:
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest, k - 1):
        yield [[first]] + part
    for part in set_partitions(rest, k):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]


class TreeDiagramCag:
    """
    Closed-form tree-level CAG with at most one insertion, by Berends-Giele recursion.

    Internal lines carry C^{Lambda,Lambda0}; the value is the symmetric kernel, i.e. the
    sum over labelled trees divided by n!. Momentum components may be floats or TaylorJets.
    """

    def __init__(self, n_ext: int, coupling: float, cutoffs: CutoffPair,
                 insertion: Optional[Insertion] = None):
        if n_ext % 2 or n_ext < 0:
            raise ConfigurationError(f"tree CAG needs an even number of legs, got {n_ext}")
        self.n_ext = n_ext
        self.coupling = coupling
        self.cutoffs = cutoffs
        self.insertion = insertion

    def _numeric_propagator(self, q):
        return float(propagator(np.asarray(q, dtype=float), self.cutoffs))

    def _currents(self, momenta, prop):
        cache = {}

        def current(block: Tuple[int, ...]):
            if len(block) == 1:
                return 1.0
            if len(block) % 2 == 0:
                return 0.0
            if block not in cache:
                acc = 0.0
                for part in set_partitions(block, 3):
                    acc = acc + self.coupling * current(tuple(part[0])) * current(tuple(part[1])) * current(tuple(part[2]))
                q = [sum(momenta[j][mu] for j in block) for mu in range(4)]
                cache[block] = -1.0 * prop(q) * acc
            return cache[block]

        return current

    def amplitude(self, momenta, prop=None, exp=None):
        """Sum over labelled trees (before division by n!)."""
        prop = prop or self._numeric_propagator
        exp = exp or np.exp
        n = self.n_ext
        current = self._currents(momenta, prop)
        if self.insertion is None:
            if n < 4:
                return 0.0
            total = 0.0
            for part in set_partitions(tuple(range(n - 1)), 3):
                total = total + self.coupling * current(tuple(part[0])) * current(tuple(part[1])) * current(tuple(part[2]))
            return total
        total = 0.0
        for op, c in self.insertion.terms:
            if op.n == 0:
                if n == 0:
                    total = total + c
                continue
            for part in set_partitions(tuple(range(n)), op.n):
                for order in itertools.permutations(part):
                    term = c
                    for block, w in zip(order, op.blocks):
                        q = [sum(momenta[j][mu] for j in block) for mu in range(4)]
                        for mu in range(4):
                            for _ in range(w[mu]):
                                term = term * (1j * q[mu])
                        term = term * current(tuple(block))
                    total = total + term
        x = self.insertion.position
        phase_arg = sum(sum(momenta[j][mu] for j in range(n)) * x[mu] for mu in range(4))
        return total * exp(1j * phase_arg)

    def __call__(self, momenta: np.ndarray) -> complex:
        momenta = np.asarray(momenta, dtype=float)
        if momenta.shape[0] != self.n_ext:
            raise ConfigurationError(f"expected {self.n_ext} momenta, got {momenta.shape[0]}")
        return self.amplitude([list(p) for p in momenta]) / math.factorial(self.n_ext)


def tree_diagram_cag(n_ext: int, coupling: float, cutoffs: CutoffPair,
                     insertion: Optional[Insertion] = None) -> TreeDiagramCag:
    """Closed-form evaluator for the l=0 CAG with n_ext legs and at most one insertion."""
    return TreeDiagramCag(n_ext, coupling, cutoffs, insertion)


def one_loop_tadpole(cutoffs: CutoffPair, coupling: float) -> float:
    """
    BPHZ-subtracted one-loop two-point CAG, -(g/4) int_k C^{0,Lambda}(k), by radial quadrature.
    """
    m, lam = cutoffs.mass, cutoffs.lam

    def integrand(k):
        return k ** 3 * math.exp(-(k * k + m * m) / lam ** 2) / (k * k + m * m)

    value, error = integrate.quad(integrand, 0.0, np.inf, epsabs=0.0, epsrel=1e-12, limit=200)
    if error > 1e-10 * max(abs(value), 1e-300):
        raise QuadratureError("one-loop tadpole", value, error)
    return -coupling / 4.0 * value / (8.0 * math.pi ** 2)


def one_loop_tadpole_closed_form(cutoffs: CutoffPair, coupling: float) -> float:
    m2, lam2 = cutoffs.mass ** 2, cutoffs.lam ** 2
    inner = lam2 * math.exp(-m2 / lam2) - m2 * special.exp1(m2 / lam2)
    return -coupling / 4.0 * inner / (16.0 * math.pi ** 2)
