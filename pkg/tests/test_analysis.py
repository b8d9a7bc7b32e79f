import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bispike import analysis as an
from bispike import neurons as nr
from bispike.calibration import calibrate_alpha, measure_firing_rate
from bispike.model import ModelConfig, SpikingTransformer
from bispike.train import toy_model_config


def toy(**changes):
    base = dict(n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab=16, n_classes=2, max_len=16, init_std=None)
    base.update(changes)
    return SpikingTransformer(ModelConfig(**base))


TOKENS = np.random.default_rng(0).integers(0, 16, size=(8, 12))


class TestJacobianMoments:
    def test_direct_moments(self):
        phi, varphi = an.jacobian_stats_empirical([1, 1, 0, 1])
        assert phi == 0.75 and varphi == pytest.approx(0.1875, abs=1e-15)

    def test_identity_jacobian(self):
        assert an.jacobian_stats_empirical(np.ones(10)) == (1.0, 0.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            an.jacobian_stats_empirical([])

    @pytest.mark.parametrize("k", [1.0, 2.0, 3.0])
    def test_gaussian_convergence(self, k):
        m = np.random.default_rng(int(k)).normal(size=100_000).astype(np.float32)
        alpha = calibrate_alpha(m, k)
        r = measure_firing_rate(nr.elastic_spike_forward(m, alpha)).r
        phi, varphi = an.jacobian_stats_empirical(nr.elastic_spike_grad(m, alpha))
        phi_a, var_a = an.spike_isometry_analytic(r)
        assert abs(phi - phi_a) < 0.02 and abs(varphi - var_a) < 0.02


class TestAnalyticIsometry:
    @pytest.mark.parametrize("p, expected", [(0.5, (0.5, 0.25)), (1.0, (1.0, 0.0)), (0.0, (0.0, 0.0))])
    def test_relu(self, p, expected):
        assert an.relu_isometry_analytic(p) == expected

    @pytest.mark.parametrize("r, expected", [(0.2, (0.8, 0.16)), (0.0, (1.0, 0.0)), (0.5, (0.5, 0.25))])
    def test_spike(self, r, expected):
        np.testing.assert_allclose(an.spike_isometry_analytic(r), expected, rtol=1e-15)

    @pytest.mark.parametrize("fn", [an.relu_isometry_analytic, an.spike_isometry_analytic])
    def test_domain(self, fn):
        with pytest.raises(ValueError):
            fn(1.5)


class TestTheorem:
    def test_typical_rate(self):
        cmp = an.theorem1_compare(0.5, 0.2)
        assert cmp.better and cmp.phi_margin == pytest.approx(0.3) and cmp.varphi_margin == pytest.approx(0.09)

    def test_equality_is_not_better(self):
        assert not an.theorem1_compare(0.5, 0.5)

    def test_near_boundary(self):
        assert an.theorem1_compare(0.5, 0.45)

    def test_region(self):
        for r in np.round(np.arange(0.05, 0.46, 0.05), 10):
            assert an.theorem1_compare(0.5, r), r

    def test_high_rate_fails(self):
        assert not an.theorem1_compare(0.5, 0.7)


class TestEnergyLinear:
    def test_ann(self):
        assert an.energy_linear(128, 256, "ann") == 150_732.8

    def test_snn(self):
        assert an.energy_linear(128, 256, "snn", T=4, r=0.25) == 29_491.2

    def test_silent(self):
        assert an.energy_linear(128, 256, "snn", T=4, r=0.0) == 0.0

    def test_fp16(self):
        assert an.energy_linear(10, 10, "ann", precision="fp16") == 150.0
        assert an.energy_linear(10, 10, "snn", T=1, r=1.0, precision="fp16") == pytest.approx(40.0)

    @pytest.mark.parametrize("kwargs", [dict(mode="snn"), dict(mode="snn", T=4), dict(mode="snn", T=0, r=0.1),
                                        dict(mode="snn", T=1, r=2.0), dict(mode="gpu"),
                                        dict(mode="ann", precision="int8")])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            an.energy_linear(4, 4, **kwargs)

    @given(st.integers(1, 512), st.integers(1, 512), st.integers(1, 8), st.floats(0, 1),
           st.integers(0, 64), st.integers(0, 64), st.integers(0, 4), st.floats(0, 1))
    def test_monotone(self, m, n, T, r, dm, dn, dT, dr):
        lo = an.energy_linear(m, n, "snn", T=T, r=r)
        hi = an.energy_linear(m + dm, n + dn, "snn", T=T + dT, r=min(1.0, r + dr))
        assert hi >= lo


class TestModelEnergy:
    def test_constants(self):
        assert an.ENERGY_CONSTANTS == {"fp32": {"E_AC": 0.9, "E_MAC": 4.6}, "fp16": {"E_AC": 0.4, "E_MAC": 1.5}}

    def test_mac_sites_are_query_and_head(self):
        prof = an.model_energy_report(toy(), TOKENS)
        assert sorted(l.name for l in prof.layers if l.kind == "mac") == ["block0.q", "block1.q", "head"]
        assert all(l.mac_count == 0 for l in prof.layers if l.kind == "ac")

    def test_silenced_network(self):
        model = toy()
        model(TOKENS, calibrate=True)
        for name in ("tok_emb", "pos_emb"):
            model.params[name].data[...] = 0
        prof = an.model_energy_report(model, TOKENS)
        assert prof.ac_count == 0
        assert prof.spike_pj == {"fp32": 0.0, "fp16": 0.0}
        assert prof.total_pj == prof.mac_pj and prof.mac_pj["fp32"] > 0

    def test_doubling_T_doubles_spike_energy(self):
        # memoryless sites repeat the same codes at every timestep
        one = an.model_energy_report(toy(T=1, beta_linear=0.0), TOKENS)
        two = an.model_energy_report(toy(T=2, beta_linear=0.0), TOKENS)
        assert two.ac_count == 2 * one.ac_count
        for p in an.PRECISIONS:
            assert two.spike_pj[p] == pytest.approx(2 * one.spike_pj[p], rel=1e-12)

    def test_recompose_from_counts(self):
        prof = an.model_energy_report(toy(T=2), TOKENS)
        assert prof.recompute() == prof.total_pj
        for p, c in an.ENERGY_CONSTANTS.items():
            total = 0.0
            for l in prof.layers:
                total += l.mac_count * c["E_MAC"] + l.ac_count * c["E_AC"]
            assert total == prof.total_pj[p]

    def test_recompose_from_layer_formula(self):
        prof = an.model_energy_report(toy(T=2), TOKENS)
        for p in an.PRECISIONS:
            total = 0.0
            for l in prof.layers:
                if l.kind == "ac":
                    total += an.energy_linear(l.rows * l.in_dim, l.out_dim, "snn", T=l.T, r=l.r, precision=p)
                else:
                    total += l.T * an.energy_linear(l.rows * l.in_dim, l.out_dim, "ann", precision=p)
            assert total == pytest.approx(prof.total_pj[p], rel=1e-9)

    def test_spiking_cheaper_than_dense(self):
        prof = an.model_energy_report(toy(), TOKENS)
        assert prof.total_pj["fp32"] < prof.dense_equivalent_pj["fp32"]

    def test_empty_sample(self):
        with pytest.raises(ValueError):
            an.model_energy_report(toy(), np.zeros((0, 4), int))


class TestReports:
    def test_isometry_report(self):
        rep = an.isometry_report(toy(), TOKENS)
        assert len(rep.rows) == 12
        for row in rep.rows:
            assert 0 <= row.phi_emp <= 1 and row.varphi_emp >= 0
            assert abs(row.phi_emp - (1 - row.r)) < 0.02
        d = rep.to_dict()
        assert d["relu_reference"] == {"p": 0.5, "phi": 0.5, "varphi": 0.25}

    def test_firing_report_decreases_with_k(self):
        # at k = 4 smaller batches leave a whole site silent, which calibration rejects
        tokens = np.random.default_rng(1).integers(0, 16, size=(512, 16))
        rates = [an.firing_report(SpikingTransformer(toy_model_config(k=k)), tokens)["mean_firing_rate"]
                 for k in (2.0, 3.0, 4.0)]
        assert rates[0] > rates[1] > rates[2]

    def test_binomial_bound(self):
        assert an.binomial_bound(100_000) == pytest.approx(4 * np.sqrt(0.25 / 100_000))
