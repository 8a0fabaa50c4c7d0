
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectramatch.errors import (ConsistencyError, DegenerateTargetError, GuardError, InputError,
                                 PreconditionError, ResourceExhaustedError, ToleranceTooFineError)
from spectramatch.matcher import (assemble, build_partition, choose_substitutes, collect_good,
                                  gauge_errors, good_path, greedy_good_histogram, midpoint_tree,
                                  normalize_targets, orbit, reflect, repair, scan_good,
                                  verify_partition)
from spectramatch.model import Block, Partition, SubsetIndex, TargetSpectrum, popcount
from spectramatch.oracle import exhaustive_verify

T1 = TargetSpectrum(1, (-1, 1), 1.0)
T2 = TargetSpectrum(2, (-3, -1, 1, 3), 1.0)


def S(*elems, n=4):
    return SubsetIndex.from_elements(elems, n)


def walk(x):
    """E_n(x)/delta for n = 0..N, by direct counting (independent reference)."""
    return [sum(1 for i in x.elements() if i <= n) - n / 2 for n in range(x.n + 1)]


# --- normalization ---------------------------------------------------------

def test_normalize_examples():
    t = normalize_targets((0, 2), 0.3)
    assert (t.units, t.delta, t.bigK) == ((-10, 10), 0.1, 10)
    t = normalize_targets((-1, 1), 3)
    assert (t.units, t.delta, t.bigK) == ((-1, 1), 1.0, 1)


def test_normalize_four_point_snaps_onto_grid():
    t = normalize_targets((-1, -0.5, 0.5, 1), 0.6)
    # 0.5 / 0.2 = 2.5 rounds away from zero
    assert t.units == (-5, -3, 3, 5) and t.delta == pytest.approx(0.2)
    tree = midpoint_tree(t)
    assert tree.units == ((-5, -3, 3, 5), (-4, 4), (0,))


def test_normalize_recenters_and_refines_for_parity():
    t = normalize_targets((10, 11, 12, 14), 2.0)
    # half-width 2, eps/3 = 2/3 -> K starts at 3; 3 snaps to (-3,-2,0,3), odd pair sums, so K grows
    assert t.bigK > 3 and t.delta <= 2.0 / 3
    tree = midpoint_tree(t)
    assert tree.units[-1] == (0,)


def test_normalize_errors():
    with pytest.raises(DegenerateTargetError):
        normalize_targets((1, 1), 0.1)
    with pytest.raises(ToleranceTooFineError):
        normalize_targets((-1, 1), 1e-5)
    with pytest.raises(InputError):
        normalize_targets((-1, 0, 1), 0.1)


@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=4, max_size=4, unique=True),
       st.floats(0.05, 3.0))
@settings(max_examples=60, deadline=None)
def test_normalize_tree_invariants(raw, eps):
    if max(raw) - min(raw) < 1e-3:
        return
    try:
        t = normalize_targets(raw, eps)
    except (ToleranceTooFineError, DegenerateTargetError):
        return
    assert t.delta <= eps / 3 * (1 + 1e-12)
    tree = midpoint_tree(t)
    assert tree.units[-1] == (0,)
    for j in range(1, tree.k + 1):
        for i in range(1, 2 ** (tree.k - j) + 1):
            lo, hi = tree.unit(j - 1, 2 * i - 1), tree.unit(j - 1, 2 * i)
            assert lo < tree.unit(j, i) < hi
            assert 2 * tree.unit(j, i) == t.units[2 ** j * (i - 1)] + t.units[2 ** j * i - 1]
    # snapped values stay within half a step (plus the endpoints' exact placement)
    mid = (min(raw) + max(raw)) / 2
    for r, u in zip(sorted(raw), t.units):
        assert abs((r - mid) - u * t.delta) <= t.delta * 0.5 + 1e-9 or u in (-t.bigK, t.bigK)


# --- tree and paths --------------------------------------------------------

def test_midpoint_tree_examples():
    assert midpoint_tree(T1).levels == ((-1.0, 1.0), (0.0,))
    t = TargetSpectrum(2, (-4, -2, 2, 4), 0.25)
    assert midpoint_tree(t).levels == ((-1.0, -0.5, 0.5, 1.0), (-0.75, 0.75), (0.0,))
    t = TargetSpectrum(2, (-2, 0, 0, 2), 1.0)
    assert midpoint_tree(t).levels[1:] == ((-1.0, 1.0), (0.0,))


def test_good_path_examples():
    tree = midpoint_tree(T1)
    p = good_path(S(1, 2), tree, T1)
    assert (p.n, p.i) == ((0, 2), (1, 2))
    p = good_path(S(1), tree, T1)
    assert (p.n, p.i) == ((0, 4), (1, 1))
    assert good_path(S(1, 3), tree, T1) is None


@given(st.integers(0, 2 ** 10 - 1))
def test_good_path_matches_walk(bits):
    x = SubsetIndex(bits, 10)
    tree = midpoint_tree(T2)
    p = good_path(x, tree)
    w = walk(x)
    if p is None:
        return
    for j, (n, i) in enumerate(zip(p.n, p.i)):
        assert n % 2 == 0
        assert w[n] == tree.unit(tree.k - j, i)
    for j in range(tree.k):
        assert p.i[j + 1] in (2 * p.i[j] - 1, 2 * p.i[j])
        # no earlier even time hits either child
        kids = {tree.unit(tree.k - j - 1, 2 * p.i[j] - 1), tree.unit(tree.k - j - 1, 2 * p.i[j])}
        assert all(w[n] not in kids for n in range(p.n[j] + 2, p.n[j + 1], 2))


# --- reflections -----------------------------------------------------------

def test_reflect_k1_complements_prefix():
    tree = midpoint_tree(T1)
    x = S(1, 2)
    p = good_path(x, tree)
    y = reflect(x, p, 0)
    assert y.bits == 0
    assert walk(y)[2] == -walk(x)[2]
    assert reflect(y, good_path(y, tree), 0) == x


def test_reflect_k2_deepest_node_swaps_sibling():
    tree = midpoint_tree(T2)
    x = S(1, 2, 3, 4, 5, 6, n=8)      # E_4 = 2, E_6 = 3: leaf 4 via node (1,2)
    p = good_path(x, tree)
    assert (p.n, p.i) == ((0, 4, 6), (1, 2, 4))
    y = reflect(x, p, 1)
    assert y == S(1, 2, 3, 4, n=8)
    q = good_path(y, tree)
    assert (q.n, q.i) == ((0, 4, 6), (1, 2, 3))


def test_reflect_requires_monotone_path():
    tree = midpoint_tree(T2)
    x = S(1, 2, 3, 4, n=8)            # path values 0, 2, 1
    p = good_path(x, tree)
    with pytest.raises(PreconditionError):
        reflect(x, p, 0)
    with pytest.raises(PreconditionError):
        reflect(x, p, 2)


def test_reflection_can_change_hitting_times_on_asymmetric_trees():
    t = TargetSpectrum(2, (-6, -2, 4, 6), 1.0)
    tree = midpoint_tree(t)
    # walk climbs to 4, falls to 2, climbs through 5 to 6; mirrored it meets -4 early
    x = SubsetIndex.from_elements([1, 2, 3, 4, 5, 6, 7, 8, 13, 14, 15, 16, 17, 18, 19, 20], 22)
    p = good_path(x, tree)
    assert p is not None and p.leaf == 4 and p.is_monotone_from(0)
    y = reflect(x, p, 0)
    q = good_path(y, tree)
    assert q is None or q.end != p.end or q.leaf != 1
    with pytest.raises(ConsistencyError):
        orbit(x, p, tree, t)


# --- orbits and collection -------------------------------------------------

def test_orbit_k1_example():
    tree = midpoint_tree(T1)
    b = orbit(S(1, 2), good_path(S(1, 2), tree), tree)
    assert b.members == (0, 3) and b.pristine
    assert b.offset == 1.0


@pytest.mark.parametrize("n", [8, 10])
def test_orbits_are_canonical(n):
    tree = midpoint_tree(T2)
    scan = scan_good(n, tree, T2)
    for row in scan.members[:: max(1, len(scan.members) // 25)]:
        blocks = {orbit(SubsetIndex(int(x), n), good_path(SubsetIndex(int(x), n), tree), tree) for x in row}
        assert len(blocks) == 1
        assert next(iter(blocks)).members == tuple(int(v) for v in row)


def test_collect_good_n4():
    tree = midpoint_tree(T1)
    blocks, rem = collect_good(4, tree, T1)
    assert len(blocks) == 6
    assert sorted(tuple(x.elements()) for x in rem) == [(1, 3), (1, 4), (2, 3), (2, 4)]
    assert blocks[0].members == (0, 3)


def test_collect_good_n2():
    tree = midpoint_tree(T1)
    blocks, rem = collect_good(2, tree, T1)
    assert [b.members for b in blocks] == [(0, 3)]
    assert [x.elements() for x in rem] == [(1,), (2,)]


@pytest.mark.parametrize("target,n", [(T1, 6), (T1, 10), (T2, 8), (T2, 12),
                                      (TargetSpectrum(1, (-3, 3), 0.1), 12),
                                      (TargetSpectrum(2, (-4, -2, 2, 4), 1.0), 10)])
def test_scan_invariants(target, n):
    tree = midpoint_tree(target)
    scan = scan_good(n, tree, target)
    m = target.size
    assert len(scan.remainder) % m == 0
    assert scan.members.size + len(scan.remainder) == 2 ** n
    assert len(np.unique(np.concatenate([scan.members.ravel(), scan.remainder]))) == 2 ** n
    for row in scan.members[:: max(1, len(scan.members) // 40)]:
        xs = [SubsetIndex(int(v), n) for v in row]
        paths = [good_path(x, tree) for x in xs]
        assert [p.leaf for p in paths] == list(range(1, m + 1))
        nk = paths[0].end
        assert all(p.end == nk for p in paths)
        assert [walk(x)[nk] for x in xs] == list(target.units)
        assert len({int(v) >> nk for v in row}) == 1
    # non-good subsets stay strictly inside (-K, K)
    for x in scan.remainder[:: max(1, len(scan.remainder) // 200)]:
        sx = SubsetIndex(int(x), n)
        if good_path(sx, tree) is None:
            assert max(abs(v) for v in walk(sx)) < target.bigK


def test_scan_rejects_unclosed_orbits():
    t = TargetSpectrum(2, (-6, -2, 4, 6), 1.0)
    scan = scan_good(16, midpoint_tree(t), t)
    assert scan.rejected > 0
    assert scan.greedy_good == scan.good_count + scan.rejected


@pytest.mark.parametrize("target,n", [(T1, 8), (T2, 10), (TargetSpectrum(1, (-3, 3), 1.0), 12)])
def test_histogram_dp_matches_enumeration(target, n):
    tree = midpoint_tree(target)
    good, rest = greedy_good_histogram(n, tree)
    xs = [SubsetIndex(x, n) for x in range(2 ** n)]
    g_ref, r_ref = {}, {}
    for x in xs:
        e = int(walk(x)[n])
        d = g_ref if good_path(x, tree) is not None else r_ref
        d[e] = d.get(e, 0) + 1
    assert good == dict(sorted(g_ref.items()))
    assert rest == dict(sorted(r_ref.items()))


def test_scan_guards():
    tree = midpoint_tree(T1)
    with pytest.raises(InputError):
        scan_good(5, tree, T1)
    with pytest.raises(GuardError):
        scan_good(28, tree, T1)


# --- substitution and repair -----------------------------------------------

def test_reserve_infeasible_at_n4():
    tree = midpoint_tree(T1)
    scan = scan_good(4, tree, T1)
    assert choose_substitutes(scan.remainder, scan.members, T1, n=4, strategy="reserve") is None
    # only two good subsets sit at centered energy 0
    assert int(np.sum(popcount(scan.members) == 2)) == 2


def test_empty_remainder_gives_empty_plan():
    plan = choose_substitutes([], np.zeros((0, 2), dtype=np.int64), T1, n=4, strategy="reserve")
    assert plan.moves == 0 and plan.substitutes == {}


def test_reserve_first_feasible_level_is_6():
    found = [n for n in range(4, 12, 2) if assemble(n, T1, "reserve") is not None]
    assert found[0] == 6


def test_reserve_sets_are_disjoint_and_cover_the_grid():
    tree = midpoint_tree(T1)
    scan = scan_good(6, tree, T1)
    plan = choose_substitutes(scan.remainder, scan.members, T1, n=6, strategy="reserve")
    seen = set()
    for x, donors in plan.substitutes.items():
        assert sorted(bin(d).count("1") - 3 for d in donors) == [-1, 0, 1]
        assert not seen & set(donors)
        seen |= set(donors)


def test_reserve_cascade_on_first_feasible_level():
    tree = midpoint_tree(T1)
    scan = scan_good(6, tree, T1)
    plan = choose_substitutes(scan.remainder, scan.members, T1, n=6, strategy="reserve")
    p = repair(scan.members, scan.remainder, plan, T1, n=6)
    first = int(scan.remainder[0])
    assert bin(first).count("1") - 3 == 0
    b, i = np.argwhere(p.members == first)[0]
    assert not p.pristine[b]
    err = gauge_errors(p)
    assert err[b, i] == pytest.approx(1.0)
    # batches are filled by donors only, each at its exact energy
    rem = set(scan.remainder.tolist())
    orig = {frozenset(r) for r in scan.members.tolist()}
    batches = [r for r in range(p.num_blocks)
               if frozenset(p.members[r].tolist()) not in orig and not rem & set(p.members[r].tolist())]
    assert batches
    assert all(np.all(err[r] == 0) for r in batches)
    assert verify_partition(p, 3).global_max <= 2.0


def test_repair_without_remainder_is_identity():
    members = np.array([[0, 3]])
    plan = choose_substitutes([], members, T1, n=2)
    p = repair(members, [], plan, T1, n=2)
    assert p.pristine.all() and p.members.tolist() == [[0, 3]]


@pytest.mark.parametrize("strategy", ["transport", "reserve"])
@pytest.mark.parametrize("n", [6, 8, 10])
def test_assembled_partition_properties(strategy, n):
    p = assemble(n, T1, strategy)
    rep = verify_partition(p, 3.0)
    assert rep.structural_ok and rep.global_max <= 2.0
    err = gauge_errors(p)
    assert np.all(np.isclose(err, 0, atol=1e-12) | np.isclose(err, 1.0, atol=1e-12))
    assert np.all(err[p.pristine] == 0)
    assert exhaustive_verify(p).passed


# --- build -----------------------------------------------------------------

def test_build_k1_pins_first_level():
    p, rep = build_partition((-1, 1), 3, 20)
    assert p.n == 4
    assert rep.passed and rep.global_max <= 2.0


def test_build_k1_reserve_pins_first_level():
    p, rep = build_partition((-1, 1), 3, 20, strategy="reserve")
    assert p.n == 6 and rep.global_max <= 2.0


def test_build_k2_pins_first_level():
    p, rep = build_partition((-3, -1, 1, 3), 3, 22)
    assert p.n == 12 and rep.global_max <= 2.0 and rep.passed
    assert p.num_blocks == 2 ** 10


def test_build_k1_k2_grid():
    # K = 2 on a k = 1 target needs N = 8
    p, rep = build_partition((-2, 2), 3, 20)
    assert p.n == 8 and rep.global_max <= 2.0


def test_build_resource_exhausted_with_histogram():
    with pytest.raises(ResourceExhaustedError) as exc:
        build_partition((-1, 1), 0.5, 4)
    d = exc.value.diagnostics
    assert d["target_units"] == [-6, 6]
    assert sum(d["good_histogram"].values()) + d["remainder_size"] == 16


def test_build_guard_on_max_n():
    with pytest.raises(GuardError):
        build_partition((-1, 1), 3, 31)


@given(st.integers(1, 2), st.floats(0.2, 5.0), st.floats(-3, 3))
@settings(max_examples=15, deadline=None)
def test_build_random_k1_targets_pass_structure(big_k, half, center):
    raw = (center - half, center + half)
    eps = 3 * half / big_k
    p, rep = build_partition(raw, eps, 20)
    assert rep.structural_ok and rep.passed
    assert rep.global_max <= 2 * p.target.delta * (1 + 1e-12)


# --- verification ----------------------------------------------------------

def test_verify_examples():
    p = Partition.from_blocks(2, T1, [Block((0, 3), (1, 2), 1.0, True), Block((1, 2), (1, 2), 1.0, False)])
    rep = verify_partition(p, 3)
    assert list(rep.per_block) == [0.0, 2.0]
    assert rep.global_max == 2.0 and rep.passed
    assert not verify_partition(p, 2).passed


def test_verify_flags_structure():
    dup = Partition.from_blocks(2, T1, [Block((0, 3), (1, 2), 1.0, True), Block((0, 2), (1, 2), 1.0, False)])
    rep = verify_partition(dup, 3)
    assert not rep.passed and rep.structural_errors
    bad = Partition.from_blocks(2, T1, [Block((0, 3), (1, 1), 1.0, True), Block((1, 2), (1, 2), 1.0, False)])
    assert any("bijection" in e for e in verify_partition(bad, 3).structural_errors)


def test_verify_is_independent_of_offsets():
    p = assemble(8, T1)
    q = Partition(p.n, p.target, p.members, p.slots, np.zeros(p.num_blocks), p.pristine)
    assert np.array_equal(verify_partition(p, 3).per_block, verify_partition(q, 3).per_block)


def test_determinism():
    a, _ = build_partition((-3, -1, 1, 3), 3, 22)
    b, _ = build_partition((-3, -1, 1, 3), 3, 22)
    assert a == b
