"""
gf2.py

Linear algebra over the two-element field for the hidden-subspace money states.

Vectors are packed into Python ints. Bit position 0 is the most significant bit, so the
integer value of a BitVec is also the index of the matching computational basis state.
Subspaces keep a canonical reduced row echelon basis (pivots ascending from the most
significant position), so equality of two subspaces is a tuple compare.
"""
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, List, Sequence, Tuple

import numpy as np

# 2^20 amplitudes is the largest state the simulator builds.
MAX_DIM = 20


class DimensionError(ValueError):
    """Raised when vector lengths or subspace dimensions do not line up."""


class CapacityError(ValueError):
    """Raised when a request exceeds the simulator's size limits."""


def _check_ambient(n: int):
    if not 1 <= n <= MAX_DIM:
        raise CapacityError(f"ambient dimension must lie in [1, {MAX_DIM}], got {n}")


@dataclass(frozen=True)
class BitVec:
    value: int
    n: int

    def __post_init__(self):
        _check_ambient(self.n)
        if not 0 <= self.value < (1 << self.n):
            raise DimensionError(f"value {self.value} does not fit in {self.n} bits")

    @classmethod
    def from_bits(cls, bits: Sequence[int]) -> "BitVec":
        value = 0
        for b in bits:
            if b not in (0, 1):
                raise ValueError(f"bit values must be 0 or 1, got {b}")
            value = (value << 1) | b
        return cls(value, len(bits))

    @classmethod
    def from_str(cls, text: str) -> "BitVec":
        return cls.from_bits([int(c) for c in text.strip()])

    @property
    def bits(self) -> Tuple[int, ...]:
        return tuple((self.value >> (self.n - 1 - i)) & 1 for i in range(self.n))

    def __xor__(self, other: "BitVec") -> "BitVec":
        _same_length(self, other)
        return BitVec(self.value ^ other.value, self.n)

    def __str__(self):
        return format(self.value, f"0{self.n}b")


def _same_length(a: BitVec, b: BitVec):
    if a.n != b.n:
        raise DimensionError(f"length mismatch: {a.n} vs {b.n}")


def dot(a: BitVec, b: BitVec) -> int:
    """Inner product over F2: parity of the bitwise AND."""
    _same_length(a, b)
    return bin(a.value & b.value).count("1") & 1


def _rref(rows: Iterable[int], n: int) -> List[int]:
    """Reduced row echelon form of packed rows; zero rows are dropped."""
    pending = [r for r in rows if r]
    basis: List[int] = []
    for col in range(n):
        bit = 1 << (n - 1 - col)
        pick = next((i for i, r in enumerate(pending) if r & bit), None)
        if pick is None:
            continue
        pivot = pending.pop(pick)
        pending = [r ^ pivot if r & bit else r for r in pending]
        pending = [r for r in pending if r]
        basis = [b ^ pivot if b & bit else b for b in basis]
        basis.append(pivot)
    return basis


@dataclass(frozen=True, eq=False)
class Subspace:
    ambient_dim: int
    generators: Tuple[BitVec, ...]
    basis_rref: Tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        _check_ambient(self.ambient_dim)
        gens = tuple(self.generators)
        for g in gens:
            if g.n != self.ambient_dim:
                raise DimensionError(f"generator length {g.n} != ambient dimension {self.ambient_dim}")
        basis = _rref((g.value for g in gens), self.ambient_dim)
        if len(basis) != len(gens):
            raise DimensionError("generators are linearly dependent")
        object.__setattr__(self, "generators", gens)
        object.__setattr__(self, "basis_rref", tuple(basis))

    @classmethod
    def span(cls, vectors: Iterable[BitVec], n: int) -> "Subspace":
        """Subspace spanned by possibly dependent vectors."""
        vectors = list(vectors)
        for v in vectors:
            if v.n != n:
                raise DimensionError(f"vector length {v.n} != ambient dimension {n}")
        return cls(n, tuple(BitVec(r, n) for r in _rref((v.value for v in vectors), n)))

    @classmethod
    def trivial(cls, n: int) -> "Subspace":
        return cls(n, ())

    @classmethod
    def full(cls, n: int) -> "Subspace":
        return cls(n, tuple(BitVec(1 << (n - 1 - i), n) for i in range(n)))

    @property
    def dim(self) -> int:
        return len(self.basis_rref)

    @property
    def pivots(self) -> Tuple[int, ...]:
        """Pivot columns, counted from the most significant position."""
        return tuple(self.ambient_dim - r.bit_length() for r in self.basis_rref)

    @cached_property
    def member_indices(self) -> np.ndarray:
        """Sorted basis-state indices of every member."""
        members = np.zeros(1, dtype=np.int64)
        for row in self.basis_rref:
            members = np.concatenate([members, members ^ row])
        members.sort()
        members.setflags(write=False)
        return members

    def __eq__(self, other):
        if not isinstance(other, Subspace):
            return NotImplemented
        return self.ambient_dim == other.ambient_dim and self.basis_rref == other.basis_rref

    def __hash__(self):
        return hash((self.ambient_dim, self.basis_rref))

    def __len__(self):
        return 1 << self.dim


def rank(vectors: Iterable[int], n: int) -> int:
    return len(_rref(vectors, n))


def canonicalize(A: Subspace) -> Subspace:
    return Subspace(A.ambient_dim, tuple(BitVec(r, A.ambient_dim) for r in A.basis_rref))


def sample_subspace(n: int, dim: int, rng: np.random.Generator) -> Subspace:
    """
    Draw a uniformly random dim-dimensional subspace of F2^n.

    Random dim x n matrices are drawn until one has full row rank.
    """
    _check_ambient(n)
    if not 0 <= dim <= n:
        raise DimensionError(f"cannot sample a {dim}-dimensional subspace of F2^{n}")
    while True:
        rows = [int(v) for v in rng.integers(0, 1 << n, size=dim)]
        if rank(rows, n) == dim:
            return Subspace(n, tuple(BitVec(r, n) for r in rows))


def _reduce(A: Subspace, value: int) -> int:
    for row in A.basis_rref:
        lead = 1 << (row.bit_length() - 1)
        if value & lead:
            value ^= row
    return value


def membership(A: Subspace, x: BitVec) -> bool:
    if x.n != A.ambient_dim:
        raise DimensionError(f"vector length {x.n} != ambient dimension {A.ambient_dim}")
    return _reduce(A, x.value) == 0


def orthogonal_complement(A: Subspace) -> Subspace:
    """
    The subspace {y : dot(x, y) = 0 for every x in A}.

    One generator per free column f: set y_f = 1 and, for each basis row, set its pivot
    entry to the row's entry in column f.
    """
    n = A.ambient_dim
    pivot_bits = {row.bit_length() - 1: row for row in A.basis_rref}
    gens = []
    for f in range(n - 1, -1, -1):
        if f in pivot_bits:
            continue
        y = 1 << f
        for p, row in pivot_bits.items():
            if row & (1 << f):
                y |= 1 << p
        gens.append(BitVec(y, n))
    return Subspace(n, tuple(gens))


def enumerate_members(A: Subspace) -> List[BitVec]:
    """All 2^dim members of A in ascending (lexicographic) order."""
    if A.dim > MAX_DIM:
        raise CapacityError(f"cannot enumerate a subspace of dimension {A.dim}")
    return [BitVec(int(v), A.ambient_dim) for v in A.member_indices]


def to_hex_rows(A: Subspace) -> List[str]:
    width = (A.ambient_dim + 3) // 4
    return [format(row, f"0{width}x") for row in A.basis_rref]


def from_hex_rows(rows: Iterable[str], n: int) -> Subspace:
    """Inverse of to_hex_rows; rows must be independent."""
    try:
        values = [int(r.strip(), 16) for r in rows if r.strip()]
    except ValueError as e:
        raise DimensionError(f"malformed hex row: {e}") from None
    return Subspace(n, tuple(BitVec(v, n) for v in values))


def dumps(A: Subspace) -> str:
    return "\n".join(to_hex_rows(A))


def loads(text: str, n: int) -> Subspace:
    return from_hex_rows(text.splitlines(), n)
