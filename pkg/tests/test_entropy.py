import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from entvol.entropy import (CorrelationTable, TrajectoryRecord, brute_force_counts, correlation_sum,
                            count_family, covering_count, distance_matrix, entropy_monotonicity_audit,
                            epsilon_grid, find_plateau, k2_estimate, pair_counts, separated_count,
                            tent_map_series)
from entvol.model import ValidationError
from entvol.pde import Field


def series_record(x, tau=1.0):
    return TrajectoryRecord.from_series(np.asarray(x, dtype=float), tau)


def brute_separated(P, zeta):
    D = distance_matrix(P)
    n = len(P)
    for size in range(n, 0, -1):
        for sub in itertools.combinations(range(n), size):
            if all(D[i, j] >= zeta for i, j in itertools.combinations(sub, 2)):
                return size
    return 0


def brute_cover(P, eps):
    D = distance_matrix(P)
    n = len(P)
    best = n

    def rec(i, groups):
        nonlocal best
        if len(groups) >= best:
            return
        if i == n:
            best = len(groups)
            return
        for g in groups:
            if all(D[i, j] <= eps for j in g):
                g.append(i)
                rec(i + 1, groups)
                g.pop()
        groups.append([i])
        rec(i + 1, groups)
        groups.pop()

    rec(0, [])
    return best


class TestCorrelationSum:
    def test_identical_snapshots(self):
        rec = series_record(np.full(20, 0.3))
        tab = correlation_sum(rec, [1e-3, 0.1], 5)
        assert np.all(tab.C == 1.0)

    def test_two_snapshots_only_self_pairs(self):
        counts = pair_counts(np.array([[0.0], [0.5]]), [0.4], [1])
        assert counts[0, 0] == 2 and counts[0, 0] / 2 ** 2 == 0.5

    def test_heaviside_is_strict(self):
        counts = pair_counts(np.array([[0.0], [0.5], [1.0]]), [0.5, 0.5000001], [1])
        assert list(counts[:, 0]) == [3, 7]

    def test_matches_brute_force(self, rng):
        for _ in range(20):
            T = int(rng.integers(3, 65))
            X = rng.normal(size=(T, int(rng.integers(1, 4))))
            eps = np.sort(rng.uniform(0.1, 3.0, size=4))
            n = np.arange(1, T)
            assert np.array_equal(pair_counts(X, eps, n), brute_force_counts(X, eps, n))

    def test_partition_independence(self, rng):
        X = rng.normal(size=(300, 2))
        eps, n = [0.5, 1.0, 2.0], np.arange(1, 12)
        ref = pair_counts(X, eps, n, blocks=1)
        for blocks in (2, 3, 7, 16):
            assert np.array_equal(pair_counts(X, eps, n, blocks=blocks), ref)
        uneven = np.array([0, 5, 6, 90, 300])
        assert np.array_equal(pair_counts(X, eps, n, bounds=uneven), ref)

    def test_invariants_hold(self, rng):
        rec = series_record(rng.uniform(size=200))
        tab = correlation_sum(rec, epsilon_grid(0.01, 1.0, 8), 10)
        assert tab.check_invariants() == []
        assert np.all(tab.n_effective == 200 - tab.n_values + 1)

    def test_validation(self, rng):
        rec = series_record(rng.uniform(size=10))
        with pytest.raises(ValidationError):
            correlation_sum(rec, [], 3)
        with pytest.raises(ValidationError):
            correlation_sum(rec, [0.2, 0.1], 3)
        with pytest.raises(ValidationError):
            correlation_sum(rec, [0.1], 9)

    def test_without_self_pairs(self):
        rec = series_record([0.0, 0.5, 0.0, 0.5, 0.0])
        tab = correlation_sum(rec, [0.1], 2)
        assert tab.C_without_self[0, 0] == pytest.approx((13 - 5) / 20)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(1, 3), st.integers(0, 2 ** 31))
def test_fast_counts_equal_brute_force(T, width, seed):
    r = np.random.default_rng(seed)
    X = np.round(r.normal(size=(T, width)), 1)  # ties exercise the strict comparison
    eps = [0.1, 0.3, 1.0]
    n = np.arange(1, T + 1)
    assert np.array_equal(pair_counts(X, eps, n), brute_force_counts(X, eps, n))


class TestRecords:
    def field_series(self, rng, T=12, G=64, L=8.0):
        return [Field(rng.normal(size=(2, G)), L, 0.5 * i) for i in range(T)]

    def test_from_fields_window(self, rng):
        fields = self.field_series(rng)
        rec = TrajectoryRecord.from_fields(fields, 1.0, 0.5)
        assert rec.tau == pytest.approx(0.5) and rec.data.shape == (12, 2, 17)
        assert rec.coordinates("lattice").shape == (12, 2 * 5)

    def test_denser_lattice_matches_fewer_pairs(self, rng):
        fields = self.field_series(rng, T=40)
        rec = TrajectoryRecord.from_fields(fields, 2.0, 1.0)
        eps = epsilon_grid(1.0, 6.0, 8)
        coarse = correlation_sum(rec, eps, 5, "lattice", delta=1.0)
        fine = correlation_sum(rec, eps, 5, "lattice", delta=0.5)
        grid = correlation_sum(rec, eps, 5, "grid")
        assert np.all(fine.pair_counts <= coarse.pair_counts)
        assert np.all(grid.pair_counts <= fine.pair_counts)

    def test_lattice_and_grid_tables_sandwich(self, rng):
        fields = self.field_series(rng, T=40)
        rec = TrajectoryRecord.from_fields(fields, 2.0, 1.0)
        Xg, Xl = rec.coordinates("grid"), rec.coordinates("lattice")
        dg = distance_matrix(Xg)
        dl = distance_matrix(Xl)
        off = ~np.eye(len(Xg), dtype=bool)
        b_hat = float(np.max(dg[off] / dl[off]))
        eps = epsilon_grid(1.0, 6.0, 8)
        lat = correlation_sum(rec, eps, 4, "lattice").pair_counts
        cont = correlation_sum(rec, eps, 4, "grid").pair_counts
        cont_wide = correlation_sum(rec, eps * b_hat * (1 + 1e-12), 4, "grid").pair_counts
        assert np.all(cont <= lat) and np.all(lat <= cont_wide)

    def test_unresolved_lattice(self, rng):
        rec = TrajectoryRecord.from_fields(self.field_series(rng), 1.0, 0.5)
        with pytest.raises(ValidationError, match="not resolved"):
            rec.coordinates("lattice", delta=0.3)

    def test_non_uniform_cadence(self, rng):
        fields = self.field_series(rng)
        fields[3] = Field(fields[3].components, 8.0, 1.7)
        with pytest.raises(ValidationError, match="cadence"):
            TrajectoryRecord.from_fields(fields, 1.0, 0.5)


def synthetic_table(C, tau=1.0, window=1.0, dim=1):
    C = np.asarray(C, dtype=float)
    E, n = C.shape
    ne = np.full(n, 10 ** 6)
    return CorrelationTable(np.logspace(-2, 0, E), np.arange(1, n + 1),
                            np.rint(C * ne[None, :].astype(float) ** 2).astype(np.int64),
                            ne, 10 ** 6, tau, window, dim, 1.0)


class TestK2:
    def test_geometric_table(self):
        rho = 0.5
        n = np.arange(1, 11)
        tab = synthetic_table(np.tile(rho ** n, (4, 1)))
        rep = k2_estimate(tab, (1, 10))
        assert np.allclose(rep.slopes, -math.log(rho), rtol=1e-9)
        assert rep.plateau == (0, 4) and rep.plateau_value == pytest.approx(math.log(2), rel=1e-9)

    def test_flat_table(self):
        tab = synthetic_table(np.full((3, 8), 0.25))
        rep = k2_estimate(tab, (2, 8))
        assert np.allclose(rep.k2, 0.0, atol=1e-12)

    def test_volume_normalisation(self):
        n = np.arange(1, 9)
        tab = synthetic_table(np.tile(0.8 ** n, (3, 1)), tau=0.5, window=2.0)
        rep = k2_estimate(tab, (1, 8))
        assert np.allclose(rep.k2, -math.log(0.8) / (0.5 * 2.0), rtol=1e-9)

    def test_too_few_points(self):
        tab = synthetic_table(np.full((2, 8), 0.5))
        with pytest.raises(ValidationError, match="fewer than 3"):
            k2_estimate(tab, (7, 8))

    def test_no_plateau_reported(self):
        values = np.array([1.0, 2.0, 4.0, 8.0])
        assert find_plateau(values) is None

    def test_plateau_selection(self):
        assert find_plateau(np.array([5.0, 1.0, 1.05, 0.98, 1.02, 3.0])) == (1, 5)


def test_tent_map_orbit():
    x = tent_map_series(5000, seed=3)
    assert np.all((x >= 0) & (x <= 1))
    assert abs(x.mean() - 0.5) < 0.02
    y = np.where(x < 0.5, 2 * x, 2 * (1 - x))
    assert np.max(np.abs(y[:-1] - x[1:])) < 1e-12


class TestCounters:
    def test_identical_points(self):
        P = np.zeros((5, 3))
        assert separated_count(P, 0.1) == 1 and covering_count(P, 0.1) == 1

    def test_two_points(self):
        P = np.array([[0.0], [1.0]])
        assert separated_count(P, 0.5) == 2 and separated_count(P, 2.0) == 1

    def test_collinear_cover(self):
        P = np.array([[0.0], [1.0], [2.0]])
        assert covering_count(P, 1.1) == 2 == brute_cover(P, 1.1)

    def test_single_point_and_empty(self):
        assert covering_count(np.zeros((1, 2)), 0.5) == 1
        assert covering_count(np.zeros((0, 2)), 0.5) == 0

    def test_exact_matches_enumeration(self, rng):
        for _ in range(10):
            P = rng.uniform(size=(12, 2))
            for z in (0.1, 0.3, 0.6):
                assert separated_count(P, z) == brute_separated(P, z)
                assert covering_count(P, z) == brute_cover(P, z)
                assert separated_count(P, z, "greedy") <= separated_count(P, z)
                assert covering_count(P, z, "greedy") >= covering_count(P, z)

    def test_sandwich(self, rng):
        for _ in range(20):
            P = rng.uniform(size=(int(rng.integers(1, 17)), 2))
            for z in (0.05, 0.2, 0.5):
                assert covering_count(P, 2 * z) <= separated_count(P, z) <= covering_count(P, z / 2)

    def test_exact_size_limit(self):
        with pytest.raises(ValidationError, match="greedy"):
            separated_count(np.zeros((30, 1)), 0.1)
        assert separated_count(np.arange(30.0)[:, None], 0.5, "greedy") == 30


class TestAudit:
    def test_clean_family(self, rng):
        segs = np.cumsum(rng.normal(size=(10, 8, 2)) * 0.3, axis=1)
        tab = count_family(segs, [0.25, 0.5, 1.0], splits=[(0, 4), (4, 8)])
        rep = entropy_monotonicity_audit(tab)
        assert rep.passed and rep.checks > 0
        for kind in ("cover", "separated"):
            assert tab.counts[(kind, 1.0, "full")] <= tab.counts[(kind, 0.5, "full")]

    def test_two_plus_two_split(self, rng):
        segs = rng.normal(size=(12, 4, 1))
        tab = count_family(segs, [0.5, 1.0], splits=[(0, 2), (2, 4)])
        for e in (0.5, 1.0):
            whole = tab.counts[("cover", e, "full")]
            assert whole <= tab.counts[("cover", e, "0:2")] * tab.counts[("cover", e, "2:4")]
        assert entropy_monotonicity_audit(tab).passed

    def test_empty_family(self):
        tab = count_family(np.zeros((0, 8, 1)), [0.5], splits=[(0, 4), (4, 8)])
        assert all(v == 0 for v in tab.counts.values())
        assert entropy_monotonicity_audit(tab).passed

    def test_violation_is_reported(self, rng):
        tab = count_family(rng.normal(size=(6, 4, 1)), [0.5, 1.0])
        tab.counts[("cover", 1.0, "full")] = tab.counts[("cover", 0.5, "full")] + 1
        rep = entropy_monotonicity_audit(tab)
        assert not rep.passed and rep.violations[0]["check"] == "epsilon-monotone"

    def test_greedy_refused(self, rng):
        tab = count_family(rng.normal(size=(5, 4, 1)), [0.5], mode="greedy")
        with pytest.raises(ValidationError, match="exact"):
            entropy_monotonicity_audit(tab)
