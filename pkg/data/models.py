"""
Data models for the flow-equation engine.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config.constants import (
    DEFAULT_D1_MAX, DEFAULT_DELTA_MAX, DEFAULT_L_MAX, DEFAULT_LAMBDA0,
    DEFAULT_MASS, DEFAULT_N_MAX, DEFAULT_TOLERANCE, LAMBDA0_LADDER, LAMBDA_FLOOR_SAMPLES,
    MAX_MOMENTUM_NORM_LEGS, FACTORIZATION_RATIO, SPECTATOR_WIDTH,
)

logger = logging.getLogger(__name__)

Vector = Tuple[float, float, float, float]
Block = Tuple[int, int, int, int]

ZERO_BLOCK: Block = (0, 0, 0, 0)


class FlowError(Exception):
    """Base class for all engine errors."""


class ConfigurationError(FlowError):
    """Invalid configuration or violated hypothesis of a formula."""


class BudgetExceededError(FlowError):
    """A combinatorial or recursion budget was exceeded."""

    def __init__(self, message: str, **params):
        super().__init__(message)
        self.params = params


class QuadratureError(FlowError):
    """A quadrature did not reach its tolerance within the node budget."""

    def __init__(self, message: str, best_estimate, error_estimate: float):
        super().__init__(f"{message} (best estimate {best_estimate}, error {error_estimate:.3e})")
        self.best_estimate = best_estimate
        self.error_estimate = error_estimate


class CoincidentPointsError(FlowError):
    """Insertion points coincide where distinct points are required."""


class UnsupportedConfigurationError(FlowError):
    """The request is outside what the engine backends support."""


def as_vector(x: Iterable[float]) -> Vector:
    """Convert any length-4 sequence to a hashable 4-tuple of floats."""
    values = tuple(float(c) for c in x)
    if len(values) != 4:
        raise ConfigurationError(f"expected a 4-vector, got {len(values)} components")
    return values  # type: ignore[return-value]


@dataclass(frozen=True)
class MultiIndex:
    """Multi-index w over n four-dimensional blocks, stored flat as 4n entries."""
    entries: Tuple[int, ...]

    def __post_init__(self):
        if len(self.entries) % 4:
            raise ConfigurationError(f"multi-index length {len(self.entries)} is not a multiple of 4")
        if any(e < 0 for e in self.entries):
            raise ConfigurationError(f"negative multi-index entry in {self.entries}")

    @classmethod
    def zeros(cls, n_blocks: int) -> 'MultiIndex':
        return cls((0,) * (4 * n_blocks))

    @classmethod
    def unit(cls, block: int, mu: int, n_blocks: int) -> 'MultiIndex':
        entries = [0] * (4 * n_blocks)
        entries[4 * block + mu] = 1
        return cls(tuple(entries))

    @classmethod
    def from_blocks(cls, blocks: Sequence[Sequence[int]]) -> 'MultiIndex':
        return cls(tuple(int(e) for b in blocks for e in b))

    @property
    def n_blocks(self) -> int:
        return len(self.entries) // 4

    @property
    def order(self) -> int:
        """|w|"""
        return sum(self.entries)

    @property
    def factorial(self) -> int:
        """w! as an exact integer."""
        return math.prod(math.factorial(e) for e in self.entries)

    def factorial_float(self) -> float:
        """w! as a float; overflow is rejected rather than wrapped."""
        return float(self.factorial)

    def block(self, i: int) -> Block:
        return tuple(self.entries[4 * i:4 * i + 4])  # type: ignore[return-value]

    @property
    def blocks(self) -> Tuple[Block, ...]:
        return tuple(self.block(i) for i in range(self.n_blocks))

    def __add__(self, other: 'MultiIndex') -> 'MultiIndex':
        if len(other.entries) != len(self.entries):
            raise ConfigurationError("multi-index lengths differ")
        return MultiIndex(tuple(a + b for a, b in zip(self.entries, other.entries)))

    def __sub__(self, other: 'MultiIndex') -> 'MultiIndex':
        return MultiIndex(tuple(a - b for a, b in zip(self.entries, other.entries)))

    def dominates(self, other: 'MultiIndex') -> bool:
        """True if every entry is >= the corresponding entry of other."""
        return all(a >= b for a, b in zip(self.entries, other.entries))

    def monomial(self, x: np.ndarray) -> complex:
        """x^w for x of shape (n_blocks, 4) (or broadcastable flat)."""
        flat = np.asarray(x).reshape(-1)
        return np.prod(flat ** np.asarray(self.entries))


def multi_indices_of_order(order: int, size: int) -> List[Tuple[int, ...]]:
    """All tuples of `size` nonnegative integers summing to `order`, in lexicographic order."""
    if size == 0:
        return [()] if order == 0 else []
    result = []
    for bars in itertools.combinations(range(order + size - 1), size - 1):
        parts, prev = [], -1
        for b in bars:
            parts.append(b - prev - 1)
            prev = b
        parts.append(order + size - 2 - prev)
        result.append(tuple(parts))
    return sorted(result)


@dataclass(frozen=True)
class CompositeOp:
    """Composite field d^{w1}phi ... d^{wn}phi with blocks sorted ascending; n=0 is the identity."""
    blocks: Tuple[Block, ...] = ()

    def __post_init__(self):
        ordered = tuple(sorted(tuple(int(c) for c in b) for b in self.blocks))
        if any(len(b) != 4 or min(b) < 0 for b in ordered):
            raise ConfigurationError(f"invalid derivative blocks {self.blocks}")
        object.__setattr__(self, 'blocks', ordered)

    @classmethod
    def power(cls, n: int) -> 'CompositeOp':
        """phi^n without derivatives."""
        return cls((ZERO_BLOCK,) * n)

    @classmethod
    def identity(cls) -> 'CompositeOp':
        return cls(())

    @classmethod
    def from_label(cls, label: str) -> 'CompositeOp':
        """
        Parse 'phi^n:[w1|w2|...]' (or '1' for the identity).

        A block is four digits ('0120') or four comma-separated integers ('0,12,0,0').
        """
        label = label.strip()
        if label in ('1', 'phi^0:[]'):
            return cls.identity()
        try:
            head, body = label.split(':', 1)
            n = int(head.split('^')[1])
            parts = body.strip().strip('[]').split('|')
            blocks = tuple(_parse_block(part) for part in parts)
        except (ValueError, IndexError) as e:
            raise ConfigurationError(f"cannot parse operator label {label!r}: {e}")
        if len(blocks) != n:
            raise ConfigurationError(f"label {label!r} lists {len(blocks)} blocks for n={n}")
        return cls(blocks)

    @property
    def n(self) -> int:
        return len(self.blocks)

    @property
    def derivative_order(self) -> int:
        return sum(sum(b) for b in self.blocks)

    @property
    def dimension(self) -> int:
        return op_dimension(self)

    @property
    def multi_index(self) -> MultiIndex:
        return MultiIndex.from_blocks(self.blocks)

    @property
    def is_identity(self) -> bool:
        return self.n == 0

    @property
    def stabilizer_order(self) -> int:
        """Number of block permutations leaving the sorted block tuple unchanged."""
        counts: Dict[Block, int] = {}
        for b in self.blocks:
            counts[b] = counts.get(b, 0) + 1
        return math.prod(math.factorial(c) for c in counts.values())

    @property
    def label(self) -> str:
        if self.is_identity:
            return "1"
        return f"phi^{self.n}:[" + "|".join(_format_block(b) for b in self.blocks) + "]"

    def __str__(self) -> str:
        return self.label


def _parse_block(part: str) -> Block:
    part = part.strip()
    entries = part.split(',') if ',' in part else list(part)
    if len(entries) != 4:
        raise ValueError(f"block {part!r} does not have four entries")
    return tuple(int(e) for e in entries)


def _format_block(block: Block) -> str:
    if max(block) > 9:
        return ",".join(str(c) for c in block)
    return "".join(str(c) for c in block)


def op_dimension(op: CompositeOp) -> int:
    """Engineering dimension n + sum |w_i|."""
    return op.n + op.derivative_order


def enumerate_ops_up_to(D: int, n_values: Optional[Sequence[int]] = None) -> List[CompositeOp]:
    """
    All even-n composite operators of dimension <= D, identity included.

    Args:
        D: maximal dimension
        n_values: optional restriction on the number of fields

    Returns:
        Operators ordered by (dimension, n, blocks)
    """
    if D < 0:
        raise ConfigurationError(f"enumerate_ops_up_to requires D >= 0, got {D}")
    ops = []
    for n in range(0, D + 1, 2):
        if n_values is not None and n not in n_values:
            continue
        for total in range(0, D - n + 1):
            for flat in multi_indices_of_order(total, 4 * n):
                blocks = tuple(tuple(flat[4 * i:4 * i + 4]) for i in range(n))
                if list(blocks) != sorted(blocks):
                    continue
                ops.append(CompositeOp(blocks))
    return sorted(set(ops), key=lambda a: (a.dimension, a.n, a.blocks))


OperatorTerms = Tuple[Tuple[CompositeOp, complex], ...]


@dataclass(frozen=True)
class Insertion:
    """A finite combination of composite operators of equal dimension placed at one point."""
    terms: OperatorTerms
    position: Vector = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.terms:
            raise ConfigurationError("an insertion needs at least one operator term")
        object.__setattr__(self, 'position', as_vector(self.position))
        dims = {op.dimension for op, _ in self.terms}
        if len(dims) != 1:
            raise ConfigurationError(f"operator combination mixes dimensions {sorted(dims)}")
        if any(op.n % 2 for op, _ in self.terms):
            raise ConfigurationError("only even operators are supported")

    @classmethod
    def of(cls, op: CompositeOp, position: Sequence[float] = (0.0, 0.0, 0.0, 0.0)) -> 'Insertion':
        return cls(((op, 1.0),), as_vector(position))

    @property
    def dimension(self) -> int:
        return self.terms[0][0].dimension

    @property
    def max_fields(self) -> int:
        return max(op.n for op, _ in self.terms)

    @property
    def derivative_order(self) -> int:
        """|v| of the (first) monomial, as entering the bound prefactors."""
        return max(op.derivative_order for op, _ in self.terms)

    def moved(self, position: Sequence[float]) -> 'Insertion':
        return Insertion(self.terms, as_vector(position))

    @property
    def label(self) -> str:
        if len(self.terms) == 1 and self.terms[0][1] == 1.0:
            return self.terms[0][0].label
        return " + ".join(f"({complex(c):g})*{op.label}" for op, c in self.terms)


@dataclass
class MomentumConfig:
    """External momenta p_1..p_n in mass units."""
    momenta: np.ndarray

    def __post_init__(self):
        self.momenta = np.atleast_2d(np.asarray(self.momenta, dtype=float))
        if self.momenta.size == 0:
            self.momenta = np.zeros((0, 4))
        if self.momenta.shape[1] != 4:
            raise ConfigurationError(f"momenta must be 4-vectors, got shape {self.momenta.shape}")

    @property
    def n(self) -> int:
        return self.momenta.shape[0]

    @property
    def norm_n(self) -> float:
        return momentum_norm(self)


def momentum_norm(cfg: MomentumConfig) -> float:
    """sup over subsets J of |sum_{i in J} p_i|, exhaustive for n <= 12."""
    if cfg.n > MAX_MOMENTUM_NORM_LEGS:
        raise BudgetExceededError(f"momentum_norm over {cfg.n} legs exceeds the subset budget",
                                  n=cfg.n)
    if cfg.n == 0:
        return 0.0
    masks = np.array(list(itertools.product((0, 1), repeat=cfg.n)), dtype=float)
    sums = masks @ cfg.momenta
    return float(np.sqrt((sums ** 2).sum(axis=1)).max())


@dataclass(frozen=True)
class RegTuple:
    """Regularization parameters D_I for subsets I of the insertion labels {0..N-1}."""
    n_insertions: int
    values: Tuple[Tuple[FrozenSet[int], int], ...] = ()

    def __post_init__(self):
        full = frozenset(range(self.n_insertions))
        table = dict(self.values)
        if self.n_insertions >= 2 and full not in table:
            raise ConfigurationError("a regularization tuple must contain the full index set")
        for subset, d in table.items():
            if len(subset) < 2 or not subset <= full:
                raise ConfigurationError(f"invalid regularized subset {sorted(subset)}")
            if d < -1:
                raise ConfigurationError(f"D_I must be >= -1, got {d} for {sorted(subset)}")
        ordered = tuple(sorted(table.items(), key=lambda kv: (len(kv[0]), sorted(kv[0]))))
        object.__setattr__(self, 'values', ordered)

    @classmethod
    def build(cls, n_insertions: int, table: Dict[Iterable[int], int]) -> 'RegTuple':
        return cls(n_insertions, tuple((frozenset(k), int(v)) for k, v in table.items()))

    @classmethod
    def none(cls, n_insertions: int) -> 'RegTuple':
        """Unregularized: all subsets of size >= 2 present with D = -1."""
        subsets = [frozenset(c) for r in range(2, n_insertions + 1)
                   for c in itertools.combinations(range(n_insertions), r)]
        return cls(n_insertions, tuple((s, -1) for s in subsets))

    @classmethod
    def two(cls, D: int) -> 'RegTuple':
        return cls.build(2, {(0, 1): D})

    @property
    def table(self) -> Dict[FrozenSet[int], int]:
        return dict(self.values)

    def get(self, subset: Iterable[int]) -> Optional[int]:
        return self.table.get(frozenset(subset))

    def admits(self, subset: Iterable[int]) -> bool:
        """A factor insertion set may appear in the flow if it is a singleton or in the collection."""
        s = frozenset(subset)
        return len(s) <= 1 or s in self.table

    def restricted(self, subset: Iterable[int]) -> Dict[FrozenSet[int], int]:
        s = frozenset(subset)
        return {k: v for k, v in self.table.items() if k <= s}

    @property
    def total(self) -> int:
        return self.table.get(frozenset(range(self.n_insertions)), -1)

    def shifted(self, subset: Iterable[int], amount: int) -> 'RegTuple':
        """Raise D_J by `amount` for every J containing `subset`."""
        s = frozenset(subset)
        return RegTuple(self.n_insertions,
                        tuple((k, v + amount if s <= k else v) for k, v in self.values))

    @property
    def key(self) -> Tuple:
        return tuple((tuple(sorted(k)), v) for k, v in self.values)


THREE_INSERTION_COLLECTIONS: Tuple[FrozenSet[FrozenSet[int]], ...] = tuple(
    frozenset(frozenset(s) for s in coll) for coll in (
        [(0, 1, 2), (0, 1)],
        [(0, 1, 2), (0, 2)],
        [(0, 1, 2), (1, 2)],
        [(0, 1, 2), (0, 1), (1, 2), (0, 2)],
    )
)


@dataclass
class SpacetimeConfig:
    """Insertion points x_1..x_N in units of 1/m."""
    points: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def separations(self) -> List[float]:
        return [float(np.linalg.norm(self.points[i] - self.points[j]))
                for i, j in itertools.combinations(range(self.n), 2)]

    @property
    def max_separation(self) -> float:
        return max(self.separations(), default=0.0)

    @property
    def min_separation(self) -> float:
        return min(self.separations(), default=0.0)

    def require_distinct(self) -> None:
        if self.n > 1 and self.min_separation <= 0.0:
            raise CoincidentPointsError(f"coincident insertion points {self.points.tolist()}")


@dataclass(frozen=True)
class CutoffPair:
    """IR cutoff Lambda, UV cutoff Lambda0 (may be inf) and mass m."""
    lam: float
    lam0: float = DEFAULT_LAMBDA0
    mass: float = DEFAULT_MASS

    def __post_init__(self):
        if self.mass <= 0:
            raise ConfigurationError(f"mass must be positive, got {self.mass}")
        if self.lam < 0:
            raise ConfigurationError(f"Lambda must be nonnegative, got {self.lam}")
        if self.lam0 < self.lam:
            raise ConfigurationError(f"Lambda0={self.lam0} below Lambda={self.lam}")

    @property
    def kappa(self) -> float:
        return max(self.lam, self.mass)

    @property
    def is_admissible(self) -> bool:
        """kappa < Lambda0"""
        return self.kappa < self.lam0

    def with_lambda(self, lam: float) -> 'CutoffPair':
        return CutoffPair(lam, self.lam0, self.mass)

    def with_lambda0(self, lam0: float) -> 'CutoffPair':
        return CutoffPair(self.lam, lam0, self.mass)


@dataclass
class TaylorSpec:
    """Taylor operator T^j_{x -> y} on N points."""
    degree: int
    sources: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.sources = np.atleast_2d(np.asarray(self.sources, dtype=float))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if self.sources.shape != self.targets.shape:
            raise ConfigurationError("Taylor source and target point lists differ in length")
        if self.degree < 0:
            raise ConfigurationError(f"Taylor degree must be >= 0, got {self.degree}")

    @property
    def displacement(self) -> np.ndarray:
        return self.sources - self.targets


@dataclass(frozen=True)
class CagKey:
    """Identifies a CAG node: legs, loop order, insertions, regularization and cutoffs."""
    n_ext: int
    loops: int
    insertions: Tuple[Insertion, ...] = ()
    reg: Optional[RegTuple] = None
    cutoffs: CutoffPair = field(default_factory=lambda: CutoffPair(LAMBDA_FLOOR_SAMPLES[0]))

    def __post_init__(self):
        if self.n_ext < 0 or self.n_ext % 2:
            raise ConfigurationError(f"n_ext must be even and nonnegative, got {self.n_ext}")
        if self.loops < 0:
            raise ConfigurationError(f"loop order must be nonnegative, got {self.loops}")
        if len(self.insertions) > 3:
            raise UnsupportedConfigurationError("at most three insertions are supported")
        if self.reg is not None and len(self.insertions) < 2:
            raise ConfigurationError("a regularization tuple needs at least two insertions")

    @property
    def n_insertions(self) -> int:
        return len(self.insertions)


@dataclass
class BoundSpec:
    """Parameters of one bound evaluation; `legs` is the number of external legs (2n)."""
    identifier: str
    legs: int = 4
    loops: int = 0
    w_order: int = 0
    dims: Tuple[int, ...] = ()
    v_orders: Tuple[int, ...] = ()
    delta: int = 0
    D: int = -1
    D12: int = -1
    lam: float = 1.0
    mass: float = DEFAULT_MASS
    p_norm: float = 0.0
    points: Optional[np.ndarray] = None
    K: float = 1.0
    # sup |f^| of one smeared spectator (ope3conv only)
    f_sup: float = 1.0

    def __post_init__(self):
        if self.legs < 0 or self.legs % 2:
            raise ConfigurationError(f"legs must be even and nonnegative, got {self.legs}")
        if self.points is not None:
            self.points = np.atleast_2d(np.asarray(self.points, dtype=float))

    @property
    def n(self) -> int:
        return self.legs // 2

    @property
    def Dprime(self) -> int:
        return sum(self.dims)

    @property
    def kappa(self) -> float:
        return max(self.lam, self.mass)

    def with_K(self, K: float) -> 'BoundSpec':
        return BoundSpec(**{**self.__dict__, 'K': K})

    def to_dict(self) -> Dict:
        d = dict(self.__dict__)
        d['points'] = None if self.points is None else self.points.tolist()
        d['dims'] = list(self.dims)
        d['v_orders'] = list(self.v_orders)
        return d


def _parse_vectors(text: str) -> List[Vector]:
    return [as_vector(float(c) for c in chunk.split()) for chunk in text.split(';') if chunk.strip()]


@dataclass
class RunConfig:
    """Run configuration; loaded from a flat `key = value` file."""
    experiment: str = "convergence"
    mass: float = DEFAULT_MASS
    coupling: float = 0.0
    lambda_floor: Tuple[float, float] = LAMBDA_FLOOR_SAMPLES
    lambda0_ladder: Tuple[float, ...] = LAMBDA0_LADDER
    l_max: int = DEFAULT_L_MAX
    n_max: int = DEFAULT_N_MAX
    operators: List[str] = None
    points: List[Vector] = None
    spectators: List[Vector] = None
    spectator_width: float = SPECTATOR_WIDTH
    delta_max: int = DEFAULT_DELTA_MAX
    d1_max: int = DEFAULT_D1_MAX
    targets: List[str] = None
    ratio: float = FACTORIZATION_RATIO
    # largest Delta cross-checked against the flow backend in the convergence run; -1 disables
    flow_check_delta: int = 1
    tolerance: float = DEFAULT_TOLERANCE
    threads: int = 1
    output: str = "results"
    seed: int = 0

    def __post_init__(self):
        if self.operators is None:
            self.operators = ["phi^2:[0000|0000]"] * 3
        if self.points is None:
            self.points = [(0.25, 0.0, 0.0, 0.0), (0.0, 0.2, 0.0, 0.0), (0.0, 0.0, 0.0, 0.0)]
        if self.spectators is None:
            self.spectators = [(0.3, 0.1, 0.0, 0.0), (-0.1, 0.2, 0.1, 0.0)]
        if self.targets is None:
            self.targets = ["1", "phi^2:[0000|0000]"]
        self.validate()

    def validate(self) -> None:
        if self.mass <= 0:
            raise ConfigurationError(f"mass must be positive, got {self.mass}")
        if self.tolerance <= 0:
            raise ConfigurationError(f"tolerance must be positive, got {self.tolerance}")
        if self.threads < 1:
            raise ConfigurationError(f"threads must be >= 1, got {self.threads}")
        for rung in self.lambda0_ladder:
            if not max(max(self.lambda_floor), 1.0) * self.mass < rung * self.mass:
                raise ConfigurationError(f"Lambda0 rung {rung} violates kappa < Lambda0")
        for label in self.operators + self.targets:
            CompositeOp.from_label(label)

    @property
    def ops(self) -> List[CompositeOp]:
        return [CompositeOp.from_label(s) for s in self.operators]

    @property
    def target_ops(self) -> List[CompositeOp]:
        return [CompositeOp.from_label(s) for s in self.targets]

    @classmethod
    def from_text(cls, text: str) -> 'RunConfig':
        """Parse `key = value` lines; '#' starts a comment."""
        converters = {
            'experiment': str, 'output': str,
            'mass': float, 'coupling': float, 'tolerance': float, 'ratio': float,
            'spectator_width': float,
            'l_max': int, 'n_max': int, 'delta_max': int, 'd1_max': int, 'threads': int, 'seed': int,
            'flow_check_delta': int,
            'lambda_floor': lambda s: tuple(float(c) for c in s.split(',')),
            'lambda0_ladder': lambda s: tuple(float(c) for c in s.split(',')),
            'operators': lambda s: [c.strip() for c in s.split(',') if c.strip()],
            'targets': lambda s: [c.strip() for c in s.split(',') if c.strip()],
            'points': _parse_vectors,
            'spectators': _parse_vectors,
        }
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split('=', 1))
            if key not in converters:
                raise ConfigurationError(f"line {lineno}: unknown configuration key {key!r}")
            try:
                values[key] = converters[key](value)
            except ValueError as e:
                raise ConfigurationError(f"line {lineno}: bad value for {key}: {e}")
        return cls(**values)

    @classmethod
    def from_file(cls, path: str) -> 'RunConfig':
        with open(path, 'r', encoding='utf-8') as handle:
            return cls.from_text(handle.read())


@dataclass
class OpeTable:
    """OPE coefficients C^C_{A_1..A_N} at one spacetime configuration."""
    ops: List[CompositeOp]
    points: np.ndarray
    max_dimension: int
    entries: Dict[CompositeOp, complex] = field(default_factory=dict)
    diagnostics: Dict[str, float] = field(default_factory=dict)

    def __getitem__(self, op: CompositeOp) -> complex:
        if op.dimension > self.max_dimension:
            raise KeyError(f"{op.label} has dimension above the table's D={self.max_dimension}")
        return self.entries.get(op, 0.0)

    def to_dict(self) -> Dict:
        return {
            'ops': [a.label for a in self.ops],
            'positions': np.asarray(self.points).tolist(),
            'entries': [{'op_label': c.label, 're': float(np.real(v)), 'im': float(np.imag(v))}
                        for c, v in sorted(self.entries.items(),
                                           key=lambda kv: (kv[0].dimension, kv[0].n, kv[0].blocks))],
            'D': self.max_dimension,
            'diagnostics': dict(self.diagnostics),
        }
