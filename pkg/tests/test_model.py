import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spectramatch.errors import InputError
from spectramatch.model import (Block, DefectReport, GoodPath, Partition, SequenceSpec, SubsetIndex,
                                TargetSpectrum, centered_energy, centered_half_units, dumps, energy,
                                popcount)


def S(*elems, n=4):
    return SubsetIndex.from_elements(elems, n)


subsets = st.integers(0, 12).flatmap(
    lambda n: st.tuples(st.integers(0, (1 << n) - 1), st.just(n)).map(lambda t: SubsetIndex(*t)))


def test_subset_bits_and_membership():
    x = S(1, 3)
    assert x.bits == 0b101
    assert 1 in x and 3 in x and 2 not in x and 5 not in x
    assert x.elements() == (1, 3)
    assert len(x) == 2


def test_subset_rejects_out_of_range():
    with pytest.raises(InputError):
        SubsetIndex(16, 4)
    with pytest.raises(InputError):
        SubsetIndex(0, 31)
    with pytest.raises(InputError):
        SubsetIndex.from_elements([5], 4)


def test_energy_examples():
    assert energy(SubsetIndex(0, 3), [0.3, 0.4, 0.5]) == 0
    assert energy(S(1, 2, n=2), [1, 1]) == 2
    assert energy(S(1, 3, n=3), [0.1, 0.2, 0.4]) == pytest.approx(0.5, abs=1e-15)


def test_energy_ambient_mismatch():
    with pytest.raises(InputError):
        energy(S(1, n=4), [1.0, 1.0])


def test_centered_energy_examples():
    assert centered_energy(S(1, 3), 4, 1) == 0
    assert centered_energy(SubsetIndex(0, 2), 2, 0.1) == pytest.approx(-0.1)
    assert centered_energy(S(1, 2, n=2), 2, 1) == 1


def test_centered_energy_range():
    with pytest.raises(InputError):
        centered_energy(S(1), 5, 1.0)


@given(subsets, st.data())
def test_complement_negates_partial_energy(x, data):
    n = data.draw(st.integers(0, x.n))
    comp = SubsetIndex(x.bits ^ ((1 << n) - 1), x.n)
    assert centered_half_units(comp, n) == -centered_half_units(x, n)
    assert centered_energy(x, n, 1.0) - centered_energy(comp, n, 1.0) == 2 * centered_energy(x, n, 1.0)


@given(subsets, st.sampled_from([1.0, 0.5, 0.25]))
def test_uniform_energy_is_centered_plus_half(x, delta):
    assert energy(x, [delta] * x.n) == centered_energy(x, x.n, delta) + x.n * delta / 2


@given(st.lists(st.integers(0, 2 ** 30 - 1), max_size=50))
def test_popcount_matches_bin(vals):
    got = popcount(np.array(vals, dtype=np.int64))
    assert list(got) == [bin(v).count("1") for v in vals]


def test_target_spectrum_invariants():
    t = TargetSpectrum(1, (-3, 3), 0.1)
    assert t.bigK == 3
    assert t.mu == pytest.approx((-0.3, 0.3))
    with pytest.raises(InputError):
        TargetSpectrum(1, (-3, 2), 0.1)
    with pytest.raises(InputError):
        TargetSpectrum(2, (-3, 3), 0.1)
    with pytest.raises(InputError):
        TargetSpectrum(1, (3, -3), 0.1)


def test_target_from_json_rejects_off_grid():
    with pytest.raises(InputError):
        TargetSpectrum.from_json({"k": 1, "mu": [-0.25, 0.25], "delta": 0.1})


@given(st.integers(1, 50), st.integers(0, 49), st.booleans(), st.sampled_from([0.1, 1.0, 1 / 3, 0.07]))
def test_target_round_trip(big_k, a, four, delta):
    units = (-big_k, -min(a, big_k), min(a, big_k), big_k) if four else (-big_k, big_k)
    t = TargetSpectrum(2 if four else 1, units, delta)
    assert TargetSpectrum.from_json(json.loads(dumps(t.to_json()))) == t


@given(st.sampled_from(["explicit", "constant", "power", "geometric", "dense-recurrent"]),
       st.floats(0.1, 2.0), st.lists(st.floats(-5, 5), max_size=5))
def test_sequence_round_trip(kind, par, vals):
    params = {"constant": {"c": par}, "power": {"p": par}, "geometric": {"r": par / 3},
              "dense-recurrent": {"bound": par}}.get(kind, {})
    s = SequenceSpec(kind, tuple(vals) if kind == "explicit" else (), params)
    assert SequenceSpec.from_json(json.loads(dumps(s.to_json()))) == s


def test_sequence_terms_and_scaling():
    s = SequenceSpec("power", params={"p": 0.5})
    assert s.term(4) == 0.5
    assert s.scaled(3.0).term(4) == 1.5
    g = SequenceSpec("geometric", params={"r": 0.5})
    assert g.prefix(3) == [0.5, 0.25, 0.125]
    e = SequenceSpec("explicit", (1.0, 2.0))
    assert e.scaled(-1).values == (-1.0, -2.0)
    with pytest.raises(InputError):
        e.term(3)
    with pytest.raises(InputError):
        SequenceSpec("explicit", (math.inf,))
    with pytest.raises(InputError):
        SequenceSpec("power")


def _small_partition():
    t = TargetSpectrum(1, (-1, 1), 1.0)
    blocks = [Block((0, 3), (1, 2), 1.0, True), Block((1, 2), (2, 1), 1.0, False)]
    return Partition.from_blocks(2, t, blocks, good_count=2)


def test_partition_round_trip_and_views():
    p = _small_partition()
    q = Partition.from_json(json.loads(dumps(p.to_json())))
    assert q == p
    assert q.blocks[1] == Block((1, 2), (2, 1), 1.0, False)
    assert p.num_blocks == 2


def test_partition_json_floats_round_trip_exactly():
    t = TargetSpectrum(1, (-3, 3), 0.1)
    p = Partition(2, t, [[0, 3], [1, 2]], [[0, 1], [0, 1]], [0.1 * 3, 1 / 3], [True, False])
    q = Partition.from_json(json.loads(dumps(p.to_json())))
    assert np.array_equal(q.offsets, p.offsets)


def test_partition_rejects_wrong_block_size():
    t = TargetSpectrum(1, (-1, 1), 1.0)
    with pytest.raises(InputError):
        Partition.from_blocks(2, t, [Block((0,), (1,), 0.0, True)])


def test_malformed_partition_json():
    with pytest.raises(InputError):
        Partition.from_json({"n": 2, "blocks": []})


def test_goodpath_monotone():
    p = GoodPath((0, 2, 6), (1, 2, 4), (0, 2, 3))
    assert p.is_monotone_from(0) and p.is_monotone_from(1)
    q = GoodPath((0, 2, 6), (1, 2, 3), (0, 2, 1))
    assert not q.is_monotone_from(0) and q.is_monotone_from(1)


def test_defect_report_json():
    r = DefectReport(np.array([0.0, 2.0]), 2.0, 3.0, True)
    assert r.to_json()["pass"] is True
