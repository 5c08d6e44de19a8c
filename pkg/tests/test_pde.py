import io
import math
import struct

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from entvol.model import ModelSpec, ValidationError, derive_scales
from entvol.pde import (CGLSolver, DivergenceError, Field, TwinPair, bump, dealias_mask,
                        evolve, evolve_twin, fit_growth_rate, lattice_indices, load_snapshots,
                        lyapunov_rate, make_twin, random_initial_field, read_snapshots,
                        save_snapshots, stability_limit, step, write_snapshots)

GL = ModelSpec.cgl(0.0, 0.0, 2.0)


def uniform(value, G=64, L=10.0):
    return Field(np.vstack([np.full(G, value), np.zeros(G)]), L)


class TestField:
    def test_grid_must_be_power_of_two(self):
        with pytest.raises(ValidationError, match="power of two"):
            Field(np.zeros((2, 100)), 1.0)

    def test_norms(self):
        c = np.zeros((2, 8))
        c[0, 3], c[1, 3] = 3.0, -4.0
        f = Field(c, 2.0)
        assert f.sup_norm() == 4.0 and f.modulus_max() == 5.0 and f.h == 0.25


class TestStep:
    def test_zero_is_fixed_point(self):
        f = Field(np.zeros((2, 64)), 10.0)
        g = step(f, 0.01, GL)
        assert np.all(g.components == 0) and g.time == pytest.approx(0.01)

    def test_uniform_state_follows_logistic_ode(self):
        out = evolve(uniform(0.5), 1.0, 0.01, None, GL)[-1]
        exact = 1 / math.sqrt(1 + (1 / 0.25 - 1) * math.exp(-2))
        assert np.max(np.abs(out.components[0] - exact)) < 1e-6
        assert np.max(np.abs(out.components[1])) < 1e-12

    def test_uniform_state_cgl_against_ode_solver(self):
        spec = ModelSpec.cgl(0.7, 1.3, 2.0)
        dt = 0.2 / 7 / 4
        out = evolve(uniform(0.5), 200 * dt, dt, None, spec)[-1]
        rhs = lambda t, y: [(complex(*y) - (1 + 1.3j) * complex(*y) * abs(complex(*y)) ** 2).real,
                            (complex(*y) - (1 + 1.3j) * complex(*y) * abs(complex(*y)) ** 2).imag]
        ref = solve_ivp(rhs, (0, 200 * dt), [0.5, 0.0], rtol=1e-12, atol=1e-14).y[:, -1]
        assert np.max(np.abs(out.components[:, 0] - ref)) < 1e-8

    @pytest.mark.parametrize("mode", [1, 5, 17])
    def test_linear_sector_is_exact(self, mode):
        alpha, G, L, dt = 1.5, 128, 2 * math.pi * 3, 0.01
        spec = ModelSpec.cgl(alpha, 0.0, 2.0)
        k = 2 * math.pi * mode / L
        x = np.arange(G) * L / G
        v0 = 0.3 * np.exp(1j * k * x)
        solver = CGLSolver(spec, G, L, dt, cubic=False)
        v1 = solver.step(Field.from_complex(v0, L, 0.0)).as_complex()
        exact = v0 * np.exp((1 - (1 + 1j * alpha) * k * k) * dt)
        assert np.max(np.abs(v1 - exact)) < 1e-12

    def test_stability_limit_enforced(self):
        with pytest.raises(ValidationError, match="stability limit"):
            CGLSolver(GL, 64, 10.0, 1.1 * stability_limit(GL))

    def test_divergence_reported_with_time(self):
        f = uniform(0.5)
        f.components[0, 3] = np.nan
        with pytest.raises(DivergenceError) as exc:
            evolve(f, 0.05, 0.01, None, GL)
        assert exc.value.time == pytest.approx(0.01)

    def test_dealias_mask_keeps_two_thirds(self):
        m = dealias_mask(96)
        assert m.sum() == 2 * 32 + 1


class TestEvolve:
    def test_empty_evolution(self):
        f = uniform(0.2)
        out = evolve(f, f.time, 0.01, 0.1, GL)
        assert len(out) == 1 and np.array_equal(out[0].components, f.components)

    def test_zero_field_stays_zero(self):
        out = evolve(Field(np.zeros((2, 32)), 5.0), 0.5, 0.01, 0.1, GL)
        assert len(out) == 6 and all(np.all(o.components == 0) for o in out)

    def test_cadence_and_final_snapshot(self):
        out = evolve(uniform(0.2), 0.3, 0.01, 0.1, GL)
        assert [o.time for o in out] == pytest.approx([0.0, 0.1, 0.2, 0.3])

    def test_non_multiple_duration_rejected(self):
        with pytest.raises(ValidationError, match="multiple of dt"):
            evolve(uniform(0.2), 0.015, 0.01, None, GL)

    def test_deterministic(self, chaotic_spec, chaotic_setup):
        s = chaotic_setup
        a = s["solver"].evolve(s["field"], 40 * s["dt"], None)[-1]
        b = s["solver"].evolve(s["field"], 40 * s["dt"], None)[-1]
        assert np.array_equal(a.components, b.components)

    def test_halving_dt_changes_little(self, chaotic_spec, chaotic_scales, chaotic_setup):
        s, sc = chaotic_setup, chaotic_scales
        a = CGLSolver(chaotic_spec, s["G"], s["L"], sc.tau_star / 8).evolve(s["field"], 10 * sc.tau_star)[-1]
        b = CGLSolver(chaotic_spec, s["G"], s["L"], sc.tau_star / 16).evolve(s["field"], 10 * sc.tau_star)[-1]
        assert abs(a.sup_norm() - b.sup_norm()) < 1e-6
        assert np.max(np.abs(a.components - b.components)) < 1e-6


class TestMakeTwin:
    def test_zero_amplitude(self, chaotic_spec, chaotic_scales, chaotic_setup):
        p = make_twin(chaotic_setup["field"], chaotic_spec, 0.0, seed=3, delta=chaotic_scales.delta_star)
        assert np.array_equal(p.u.components, p.v.components)
        assert np.all(p.difference == 0)

    def test_everywhere_amplitude(self, chaotic_spec, chaotic_scales, chaotic_setup):
        p = make_twin(chaotic_setup["field"], chaotic_spec, 1e-4, "everywhere", 3,
                      delta=chaotic_scales.delta_star)
        assert np.max(np.abs(p.difference)) == pytest.approx(1e-4, rel=1e-12)
        assert np.max(np.abs(p.u.components - p.v.components)) == pytest.approx(1e-4, rel=1e-6)

    def test_lattice_only_vanishes_on_lattice(self, chaotic_spec, chaotic_scales, chaotic_setup):
        f = chaotic_setup["field"]
        p = make_twin(f, chaotic_spec, 1e-4, "lattice-only", 3, delta=chaotic_scales.delta_star)
        w = p.difference
        idx = lattice_indices(f.grid_points, f.domain_length, chaotic_scales.delta_star, f.domain_length / 4)
        assert np.max(np.abs(w[:, idx])) == 0.0
        assert np.max(np.abs(w)) == pytest.approx(1e-4, rel=1e-12)
        row = p.record()
        assert row[2] == 0.0 and row[1] == pytest.approx(1e-4)

    def test_amplitude_limit(self, chaotic_spec, chaotic_scales, chaotic_setup):
        with pytest.raises(ValidationError, match="Q"):
            make_twin(chaotic_setup["field"], chaotic_spec, 2.0, delta=chaotic_scales.delta_star)

    def test_bump_profile(self):
        r = np.array([0.0, 0.5, 1.0, 2.0])
        assert np.allclose(bump(r, 1.0), [1.0, 0.421875, 0.0, 0.0])


class TestEvolveTwin:
    def test_identical_pair_stays_identical(self, chaotic_spec, chaotic_scales, chaotic_setup):
        s = chaotic_setup
        p = make_twin(s["field"], chaotic_spec, 0.0, delta=chaotic_scales.delta_star)
        s["solver"].evolve_twin(p, 20 * s["dt"], 4 * s["dt"])
        h = p.history_array()
        assert h.shape == (6, 3) and np.all(h[:, 1:] == 0)

    def test_offset_form_matches_separate_members(self, chaotic_spec, chaotic_scales, chaotic_setup):
        s = chaotic_setup
        p = make_twin(s["field"], chaotic_spec, 1e-3, seed=5, delta=chaotic_scales.delta_star)
        u0, v0 = p.u.copy(), p.v.copy()
        s["solver"].evolve_twin(p, 16 * s["dt"], 16 * s["dt"])
        u1 = s["solver"].evolve(u0, 16 * s["dt"])[-1]
        v1 = s["solver"].evolve(v0, 16 * s["dt"])[-1]
        assert np.array_equal(p.u.components, u1.components)
        assert np.max(np.abs(p.difference - (u1.components - v1.components))) < 1e-12

    def test_linear_regime_scaling(self, chaotic_spec, chaotic_scales, chaotic_setup):
        s, sc = chaotic_setup, chaotic_scales
        hist = []
        for eps in (1e-6, 2e-6):
            p = make_twin(s["field"], chaotic_spec, eps, seed=7, delta=sc.delta_star)
            s["solver"].evolve_twin(p, 5 * sc.tau_star, sc.tau_star)
            hist.append(p.history_array())
        ratio = hist[1][:, 1] / hist[0][:, 1]
        assert np.all(np.abs(ratio - 2) < 0.1)

    def test_growth_rate_below_expansion_bound(self, chaotic_spec, chaotic_scales, chaotic_setup):
        s, sc = chaotic_setup, chaotic_scales
        p = make_twin(s["field"], chaotic_spec, 1e-6, seed=2, delta=sc.delta_star)
        s["solver"].evolve_twin(p, 320 * sc.tau_star, sc.tau_star)
        fit = fit_growth_rate(p.history_array(), ceiling=1e-3, t_min=2.0)
        assert 0 < fit.rate <= sc.m_star


class TestLyapunov:
    def test_rate_is_positive_and_bounded(self, chaotic_spec, chaotic_scales, chaotic_setup):
        s, sc = chaotic_setup, chaotic_scales
        est = lyapunov_rate(s["field"], chaotic_spec, s["dt"], 200 * sc.tau_star,
                            renorm_every=sc.tau_star, discard=20 * sc.tau_star)
        assert 0 < est.rate < sc.m_star and est.intervals == 180

    def test_needs_intervals(self, chaotic_spec, chaotic_setup):
        s = chaotic_setup
        with pytest.raises(ValidationError):
            lyapunov_rate(s["field"], chaotic_spec, s["dt"], s["dt"], renorm_every=s["dt"])


class TestSnapshots:
    def test_round_trip_is_bitwise(self, tmp_path, chaotic_setup):
        f = chaotic_setup["field"]
        fields = [f, Field(f.components * 0.5, f.domain_length, 1.25)]
        path = tmp_path / "a.entv"
        assert save_snapshots(path, fields) == 2
        back = load_snapshots(path)
        for a, b in zip(fields, back):
            assert np.array_equal(a.components, b.components)
            assert a.time == b.time and a.domain_length == b.domain_length

    def test_header_layout(self):
        f = Field(np.arange(8.0).reshape(2, 4), 3.5, 0.25)
        buf = io.BytesIO()
        write_snapshots(buf, [f])
        raw = buf.getvalue()
        assert raw[:4] == b"ENTV"
        assert struct.unpack("<III", raw[4:16]) == (1, 2, 4)
        assert struct.unpack("<dd", raw[16:32]) == (3.5, 0.25)
        assert np.array_equal(np.frombuffer(raw[32:], "<f8"), np.arange(8.0))

    def test_rejects_bad_magic_and_truncation(self):
        f = Field(np.zeros((2, 4)), 1.0)
        buf = io.BytesIO()
        write_snapshots(buf, [f])
        raw = buf.getvalue()
        with pytest.raises(ValidationError, match="magic"):
            read_snapshots(io.BytesIO(b"XXXX" + raw[4:]))
        with pytest.raises(ValidationError, match="truncated"):
            read_snapshots(io.BytesIO(raw[:-3]))


def test_initial_data_reproducible(chaotic_spec):
    a = random_initial_field(chaotic_spec, 256, 20.0, 9, 0.05)
    b = random_initial_field(chaotic_spec, 256, 20.0, 9, 0.05)
    assert np.array_equal(a.components, b.components) and a.sup_norm() <= 0.5


def test_absorbing_set_after_transient(chaotic_spec, chaotic_scales, chaotic_setup):
    s = chaotic_setup
    snaps = s["solver"].evolve(s["field"], 400 * s["dt"], 8 * s["dt"])
    assert max(f.sup_norm() for f in snaps) <= chaotic_spec.q_star


@pytest.mark.slow
def test_domain_doubling_changes_growth_rate_by_under_five_percent(chaotic_spec, chaotic_scales):
    """Finite-domain check at the default 128 delta*: the seed-averaged
    separation growth rate on twice the domain agrees within 5%."""
    sc = chaotic_scales
    dt = sc.tau_star / 8
    rates = {}
    for cells, G in ((128, 2048), (256, 4096)):
        L = cells * sc.delta_star
        solver = CGLSolver(chaotic_spec, G, L, dt)
        per_seed = []
        for seed in (1, 2):
            f = solver.evolve(random_initial_field(chaotic_spec, G, L, seed, sc.tau_star),
                              4000 * dt, None)[-1]
            est = lyapunov_rate(Field(f.components, L, 0.0), chaotic_spec, dt, 16000 * sc.tau_star,
                                renorm_every=sc.tau_star, discard=100 * sc.tau_star, seed=seed)
            per_seed.append(est.rate)
        rates[cells] = float(np.mean(per_seed))
    change = abs(rates[256] - rates[128]) / rates[128]
    assert rates[128] > 0 and change < 0.05, rates
