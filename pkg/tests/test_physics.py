import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from comptonimager import physics
from comptonimager.physics import (CONSTANTS, AttenuationTable, analytic_p_absorb, compton_angle,
                                   deposit_from_angle, kn_antiderivative, kn_deposit_density, kn_normalizer,
                                   max_deposit)

MC2 = 0.511
E0 = 0.6617


def kn_phi(E0, E1):
    """Klein-Nishina cross section per unit deposit, written from the scattering angle."""
    Ep = E0 - E1
    cos = 1.0 - MC2 * (1.0 / Ep - 1.0 / E0)
    ratio = Ep / E0
    dcos_dE = MC2 / Ep**2
    return ratio**2 * (ratio + 1.0 / ratio - (1.0 - cos**2)) * dcos_dE


def test_constants():
    assert CONSTANTS.mc2 == 0.511
    assert CONSTANTS.r_e == pytest.approx(2.8179)
    with pytest.raises(Exception):
        CONSTANTS.mc2 = 1.0


class TestComptonAngle:
    def test_zero_deposit_no_deflection(self):
        assert compton_angle(E0, 0.0) == 0.0

    def test_backscatter_endpoint(self):
        assert compton_angle(E0, max_deposit(E0)) == pytest.approx(math.pi, abs=1e-6)

    def test_value_at_0_2(self):
        expected = math.acos(1.0 - MC2 * (1.0 / (E0 - 0.2) - 1.0 / E0))
        assert compton_angle(E0, 0.2) == pytest.approx(expected, rel=1e-14)
        assert compton_angle(E0, 0.2) == pytest.approx(0.842, abs=1e-3)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            compton_angle(E0, max_deposit(E0) + 1e-3)

    def test_monotone(self):
        e1 = np.linspace(0, float(max_deposit(E0)), 500)
        assert np.all(np.diff(compton_angle(E0, e1)) > 0)

    @given(st.floats(0.1, 1.5), st.floats(0.0, 1.0))
    def test_round_trip(self, e0, frac):
        e1 = frac * float(max_deposit(e0))
        omega = compton_angle(e0, e1)
        assert 0.0 <= omega <= math.pi
        assert float(deposit_from_angle(e0, omega)) == pytest.approx(e1, abs=1e-9)


class TestMaxDeposit:
    def test_identity(self):
        for e in (0.1, 0.6617, 1.3):
            ref = e * (1 - 1 / (1 + 2 * e / MC2))
            assert abs(float(max_deposit(e)) - ref) <= 2 * np.spacing(ref)

    def test_cs137(self):
        assert float(max_deposit(E0)) == pytest.approx(0.4774, abs=1e-4)

    def test_increasing_and_bounded(self):
        e = np.linspace(0.05, 2.0, 100)
        m = max_deposit(e)
        assert np.all(np.diff(m) > 0)
        assert np.all((0 < m) & (m < e))


class TestKleinNishina:
    def test_outside_support(self):
        assert kn_deposit_density(E0, E0) == 0.0
        assert kn_deposit_density(E0, -0.01) == 0.0

    def test_matches_angle_form(self):
        e1 = np.linspace(0.0, float(max_deposit(E0)), 50)
        np.testing.assert_allclose(kn_deposit_density(E0, e1) * kn_normalizer(E0), kn_phi(E0, e1), rtol=1e-12)

    @pytest.mark.parametrize("e0", np.linspace(0.1, 1.5, 15))
    def test_unit_mass(self, e0):
        e1 = np.linspace(0.0, float(max_deposit(e0)), 10_000)
        assert np.trapezoid(kn_deposit_density(e0, e1), e1) == pytest.approx(1.0, abs=1e-3)

    def test_normalizer_is_antiderivative_difference(self):
        m = float(max_deposit(E0))
        val, _ = integrate.quad(lambda e: kn_phi(E0, e), 0.0, m, epsabs=0, epsrel=1e-13)
        assert kn_normalizer(E0) == pytest.approx(val, rel=1e-10)

    def test_antiderivative_self_difference(self):
        assert kn_antiderivative(E0, 0.3) - kn_antiderivative(E0, 0.3) == 0.0

    def test_antiderivative_vs_million_node_trapezoid(self):
        m = float(max_deposit(E0))
        e = np.linspace(0.0, m, 1_000_001)
        quad = np.trapezoid(kn_phi(E0, e), e)
        F = kn_antiderivative(E0, m) - kn_antiderivative(E0, 0.0)
        assert abs(F - quad) / quad <= 1e-6

    def test_differences_positive(self, rng):
        m = float(max_deposit(E0))
        pts = np.sort(rng.uniform(0, m, (100, 2)), axis=1)
        pts = pts[pts[:, 1] > pts[:, 0]]
        d = kn_antiderivative(E0, pts[:, 1]) - kn_antiderivative(E0, pts[:, 0])
        assert np.all(d > 0)

    def test_singularity_guard(self):
        with pytest.raises(ValueError):
            kn_antiderivative(E0, E0)

    def test_sampler_matches_density(self, rng):
        from scipy import stats
        x = physics.sample_kn_deposit(E0, rng, size=20_000)
        edges = np.linspace(0, float(max_deposit(E0)), 31)
        obs, _ = np.histogram(x, edges)
        probs = np.diff(kn_antiderivative(E0, edges)) / kn_normalizer(E0)
        assert stats.chisquare(obs, probs * len(x)).pvalue > 0.01


class TestAttenuation:
    def test_table_invariants(self, table):
        assert np.all(np.diff(table.energy) > 0)
        assert np.all(table.mu_total > 0) and np.all(table.mu_photo > 0) and np.all(table.mu_compton > 0)
        assert np.all(table.mu_photo + table.mu_compton <= table.mu_total * (1 + 1e-12))
        assert table.e_min <= 0.05 and table.e_max >= 1.5

    def test_exact_at_nodes(self, table):
        for i in (3, 10, 20):
            assert table.mu("total", float(table.energy[i])) == pytest.approx(table.mu_total[i], rel=1e-12)

    def test_geometric_midpoint(self, table):
        i = 12
        e = math.sqrt(table.energy[i] * table.energy[i + 1])
        expected = math.sqrt(table.mu_photo[i] * table.mu_photo[i + 1])
        assert table.mu("photo", e) == pytest.approx(expected, rel=1e-12)

    def test_components_below_total(self, table):
        e = np.geomspace(table.e_min, table.e_max, 400)
        assert np.all(table.mu("photo", e) + table.mu("compton", e) <= table.mu("total", e) * (1 + 1e-9))

    def test_out_of_range(self, table):
        with pytest.raises(ValueError):
            table.mu("total", 10.0)
        with pytest.raises(ValueError):
            physics.mu(table, "total", np.array([0.001]))

    def test_csv_round_trip(self, table, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text(table.to_csv())
        back = AttenuationTable.from_csv(p)
        np.testing.assert_allclose(back.mu_total, table.mu_total, rtol=1e-8)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("e,mu\n1,2\n")
        with pytest.raises(ValueError, match="header"):
            AttenuationTable.from_csv(p)


def synthetic_table(ratio_fn):
    e = np.geomspace(0.02, 2.0, 60)
    total = 0.1 * e**-0.5
    photo = ratio_fn(e) * total
    return AttenuationTable(e, total, photo, total - photo)


class TestAnalyticPAbsorb:
    def test_constant_ratio(self):
        tab = synthetic_table(lambda e: np.full_like(e, 0.3))
        assert analytic_p_absorb(tab, E0) == pytest.approx(0.3, abs=1e-9)

    def test_ratio_falling_with_energy_lifts_p_above_ratio_at_E0(self):
        # remaining energies lie below E0, where this ratio is larger
        tab = synthetic_table(lambda e: 0.9 * np.exp(-2 * e))
        p = analytic_p_absorb(tab, E0)
        e1 = np.linspace(0, float(max_deposit(E0)), 200_001)
        oracle = np.trapezoid(tab.absorb_fraction(E0 - e1) * kn_deposit_density(E0, e1), e1)
        assert p == pytest.approx(oracle, rel=1e-6)
        assert tab.absorb_fraction(E0) < p < tab.absorb_fraction(E0 - float(max_deposit(E0)))

    def test_ratio_rising_with_energy_keeps_p_below_ratio_at_E0(self):
        tab = synthetic_table(lambda e: 0.2 + 0.3 * e)
        assert analytic_p_absorb(tab, E0) < tab.absorb_fraction(E0)

    def test_complement(self, table):
        p = analytic_p_absorb(table, E0)
        assert 0 < p < 1
        assert p + (1 - p) == 1.0

    @pytest.mark.xfail(strict=True, reason="bundled LYSO cross sections give p_A near 0.49; see notes")
    def test_lyso_absorb_fraction_near_0_84(self, table):
        assert analytic_p_absorb(table, E0) == pytest.approx(1 - 0.1615, abs=0.05)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 1.5))
def test_density_unit_mass_property(e0):
    e1 = np.linspace(0.0, float(max_deposit(e0)), 10_000)
    assert abs(np.trapezoid(kn_deposit_density(e0, e1), e1) - 1.0) <= 1e-3
