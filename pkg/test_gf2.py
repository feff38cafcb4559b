#!/usr/bin/env python3
"""
test_gf2.py

Bit-vector and subspace arithmetic over F2, checked against brute-force enumeration
of the ambient space for n <= 8.
"""
import itertools
import sys

import numpy as np
import pytest

from gf2 import (BitVec, CapacityError, DimensionError, Subspace, canonicalize, dot, dumps,
                 enumerate_members, loads, membership, orthogonal_complement, sample_subspace)


def bv(text):
    return BitVec.from_str(text)


def span(*texts):
    return Subspace.span([bv(t) for t in texts], len(texts[0]))


def brute_members(A):
    """Every XOR-combination of the generators, by brute force."""
    out = {0}
    for g in A.generators:
        out |= {x ^ g.value for x in out}
    return sorted(out)


def test_dot_examples():
    assert dot(bv("10"), bv("10")) == 1
    assert dot(bv("10"), bv("01")) == 0
    assert dot(bv("11"), bv("11")) == 0


def test_dot_length_mismatch():
    with pytest.raises(DimensionError):
        dot(bv("10"), bv("100"))


def test_bit_order_is_msb_first():
    x = bv("1000")
    assert x.value == 8
    assert x.bits == (1, 0, 0, 0)
    assert str(x) == "1000"


def test_sample_subspace_examples():
    rng = np.random.default_rng(0)
    assert sample_subspace(2, 0, rng) == Subspace.trivial(2)
    A = sample_subspace(4, 2, rng)
    assert len(enumerate_members(A)) == 4
    assert sample_subspace(8, 4, np.random.default_rng(5)) == sample_subspace(8, 4, np.random.default_rng(5))


def test_sample_subspace_rejects_oversized_dimension():
    with pytest.raises(DimensionError):
        sample_subspace(4, 5, np.random.default_rng(0))


def test_capacity_limit():
    with pytest.raises(CapacityError):
        Subspace.trivial(21)


def test_dependent_generators_are_rejected():
    with pytest.raises(DimensionError):
        Subspace(2, (bv("10"), bv("10")))
    # span() accepts them and drops the dependency
    assert span("10", "10", "00").dim == 1


def test_membership_examples():
    A = span("10")
    assert membership(A, bv("00"))
    assert not membership(A, bv("01"))
    assert membership(A, bv("10"))
    with pytest.raises(DimensionError):
        membership(A, bv("100"))


def test_orthogonal_complement_examples():
    assert orthogonal_complement(span("10")) == span("01")
    assert orthogonal_complement(Subspace.full(5)) == Subspace.trivial(5)
    assert orthogonal_complement(Subspace.trivial(3)) == Subspace.full(3)


def test_enumerate_examples():
    assert enumerate_members(Subspace.trivial(3)) == [bv("000")]
    assert [str(x) for x in enumerate_members(span("10", "01"))] == ["00", "01", "10", "11"]


@pytest.mark.parametrize("n", [2, 4, 6, 8])
def test_brute_force_laws(n):
    rng = np.random.default_rng(100 + n)
    everything = range(1 << n)
    for _ in range(10):
        A = sample_subspace(n, n // 2, rng)
        members = [x.value for x in enumerate_members(A)]
        assert members == brute_members(A)
        assert len(members) == 1 << (n // 2)

        # membership agrees with linear search
        member_set = set(members)
        assert all(membership(A, BitVec(x, n)) == (x in member_set) for x in everything)

        # the complement is exactly the annihilator
        perp = orthogonal_complement(A)
        assert perp.dim == n - A.dim == n // 2
        annihilator = [y for y in everything
                       if all(dot(BitVec(x, n), BitVec(y, n)) == 0 for x in members)]
        assert [y.value for y in enumerate_members(perp)] == annihilator

        assert orthogonal_complement(perp) == A


def test_complement_pairs_are_orthogonal_exhaustively():
    rng = np.random.default_rng(9)
    A = sample_subspace(8, 4, rng)
    perp = orthogonal_complement(A)
    for x, y in itertools.product(enumerate_members(A), enumerate_members(perp)):
        assert dot(x, y) == 0


def test_canonical_form_is_idempotent_and_basis_independent():
    rng = np.random.default_rng(3)
    A = sample_subspace(8, 4, rng)
    once = canonicalize(A)
    assert canonicalize(once).basis_rref == once.basis_rref
    assert once == A

    # a different generating set of the same subspace has the same canonical basis
    g = [x.value for x in A.generators]
    mixed = Subspace(8, tuple(BitVec(v, 8) for v in (g[0] ^ g[1], g[1], g[2] ^ g[0], g[3])))
    assert mixed.basis_rref == A.basis_rref
    assert hash(mixed) == hash(A)


def test_pivots_ascend():
    A = sample_subspace(10, 5, np.random.default_rng(1))
    assert list(A.pivots) == sorted(A.pivots)


def test_hex_rows_text_form():
    A = sample_subspace(8, 4, np.random.default_rng(4))
    assert loads(dumps(A), 8) == A


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
