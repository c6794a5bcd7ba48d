import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urbanchan.arrays import LinkState, Mpc, SoundingConfig
from urbanchan.errors import InputError
from urbanchan.lsp import angle_spread, angle_spread_detail, delay_spread, k_factor, lsp_record, path_loss
from urbanchan.synthetic import rician_ctf, urban_mpcs

CFG = SoundingConfig()


def mpc(power, tau=0.0, phi_r=0.0, phi_t=0.0):
    return Mpc(math.sqrt(power), tau, phi_t, phi_r)


# ---- oracles ---------------------------------------------------------------------

def ds_oracle(mpcs):
    p = [abs(m.gamma) ** 2 for m in mpcs]
    tot = sum(p)
    m1 = sum(pi * m.tau for pi, m in zip(p, mpcs)) / tot
    var = sum(pi * (m.tau - m1) ** 2 for pi, m in zip(p, mpcs)) / tot
    return math.sqrt(var)


def as_oracle(phis, powers):
    tot = sum(powers)
    re = sum(p * math.cos(a) for p, a in zip(powers, phis)) / tot
    im = sum(p * math.sin(a) for p, a in zip(powers, phis)) / tot
    r = min(max(math.hypot(re, im), 1e-12), 1.0)
    return math.degrees(math.sqrt(-2 * math.log(r)))


# ---- path loss -------------------------------------------------------------------

def test_path_loss_examples():
    assert path_loss([mpc(1e-10)]) == pytest.approx(100.0)
    assert path_loss([mpc(1e-10), mpc(1e-10)]) == pytest.approx(96.99, abs=0.005)
    assert path_loss([mpc(1.0)]) == 0.0


def test_path_loss_errors():
    with pytest.raises(InputError, match="no detected power"):
        path_loss([mpc(0.0)])
    with pytest.raises(InputError):
        path_loss([])


@given(st.lists(st.floats(1e-12, 1.0), min_size=1, max_size=8), st.integers(0, 7), st.floats(1.01, 10))
def test_path_loss_monotone(powers, idx, factor):
    ms = [mpc(p) for p in powers]
    i = idx % len(ms)
    boosted = list(ms)
    boosted[i] = Mpc(ms[i].gamma * factor, 0.0, 0.0, 0.0)
    assert path_loss(boosted) < path_loss(ms)


# ---- delay spread ----------------------------------------------------------------

def test_delay_spread_examples():
    assert delay_spread([mpc(1.0, 100e-9)]) == 0.0
    assert delay_spread([mpc(1.0, 0.0), mpc(1.0, 100e-9)]) == pytest.approx(50e-9, rel=1e-9)
    assert delay_spread([mpc(3.0, 0.0), mpc(1.0, 100e-9)]) == pytest.approx(math.sqrt(1875) * 1e-9, rel=1e-9)
    assert delay_spread([mpc(3.0, 0.0), mpc(1.0, 100e-9)]) == pytest.approx(43.30e-9, abs=0.005e-9)


mpc_lists = st.lists(
    st.builds(Mpc,
              st.complex_numbers(min_magnitude=1e-6, max_magnitude=1.0, allow_nan=False, allow_infinity=False),
              st.floats(0, 2e-6), st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi)),
    min_size=1, max_size=20)


@settings(max_examples=50)
@given(mpc_lists, st.floats(1e-3, 1e3), st.floats(0, 1e-6), st.floats(-math.pi, math.pi))
def test_spread_invariances(ms, c, t0, theta):
    ds = delay_spread(ms)
    scaled = [Mpc(m.gamma * c, m.tau, m.phi_t, m.phi_r) for m in ms]
    shifted = [Mpc(m.gamma, m.tau + t0, m.phi_t + theta, m.phi_r + theta) for m in ms]
    tol = 1e-9 * max(ds, 1e-12)
    assert delay_spread(scaled) == pytest.approx(ds, abs=tol, rel=1e-9)
    assert delay_spread(shifted) == pytest.approx(ds, abs=1e-18 + 1e-6 * ds, rel=1e-6)
    for side in ("arrival", "departure"):
        a = angle_spread(ms, side)
        assert angle_spread(scaled, side) == pytest.approx(a, rel=1e-9, abs=1e-6)
        assert angle_spread(shifted, side) == pytest.approx(a, rel=1e-6, abs=1e-5)


# ---- angle spread ----------------------------------------------------------------

def test_angle_spread_examples():
    assert angle_spread([mpc(1.0, phi_r=0.4)], "arrival") == 0.0
    two = [mpc(1.0, phi_r=0.0), mpc(1.0, phi_r=math.radians(60))]
    closed = math.degrees(math.sqrt(-2 * math.log(math.cos(math.radians(30)))))
    assert closed == pytest.approx(30.731, abs=5e-4)
    assert angle_spread(two, "arrival") == pytest.approx(closed, rel=1e-9)


@given(st.complex_numbers(min_magnitude=1e-6, max_magnitude=1e3, allow_nan=False, allow_infinity=False),
       st.floats(-math.pi, math.pi), st.integers(1, 5))
def test_coherent_paths_have_rounding_level_spread(g, phi, n):
    # sqrt(-2 ln r) would turn r = 1 - 1e-16 into ~1e-6 deg; stay at rounding level
    ms = [Mpc(g, 1e-7 * k, phi, phi) for k in range(n)]
    assert 0.0 <= angle_spread(ms, "arrival") <= 1e-12
    assert 0.0 <= angle_spread(ms, "departure") <= 1e-12


def test_angle_spread_saturation():
    three = [mpc(1.0, phi_r=math.radians(a)) for a in (0, 120, 240)]
    d = angle_spread_detail(three, "arrival")
    assert d.saturated
    assert math.radians(d.degrees) == pytest.approx(math.sqrt(-2 * math.log(1e-12)), rel=1e-9)
    assert math.radians(d.degrees) == pytest.approx(7.43, abs=0.005)


def test_angle_spread_side_selector():
    ms = [Mpc(1.0, 0.0, 0.0, 0.0), Mpc(1.0, 0.0, math.radians(60), 0.0)]
    assert angle_spread(ms, "departure") == pytest.approx(30.731, abs=5e-4)
    assert angle_spread(ms, "arrival") == 0.0
    with pytest.raises(InputError):
        angle_spread(ms, "up")


def test_lsp_oracle_1000_sets():
    rng = np.random.default_rng(7)
    worst_ds = worst_as = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        ms = [Mpc(complex(rng.normal(), rng.normal()), rng.uniform(0, 2e-6),
                  rng.uniform(-math.pi, math.pi), rng.uniform(-math.pi, math.pi)) for _ in range(n)]
        o = ds_oracle(ms)
        if o > 0:
            worst_ds = max(worst_ds, abs(delay_spread(ms) - o) / o)
        o = as_oracle([m.phi_r for m in ms], [m.power for m in ms])
        if o > 0:
            worst_as = max(worst_as, abs(angle_spread(ms, "arrival") - o) / o)
    assert worst_ds <= 1e-12
    assert worst_as <= 1e-12


# ---- K-factor --------------------------------------------------------------------

def test_k_factor_constant_is_infinite():
    est = k_factor(np.full(510, 0.3 + 0.4j))
    assert est.g_v == pytest.approx(0.0, abs=1e-15)
    assert est.k_linear == math.inf


def test_k_factor_errors():
    with pytest.raises(InputError):
        k_factor(np.zeros(10))
    with pytest.raises(InputError):
        k_factor([1.0])


def test_k_factor_invalid_regime_flagged():
    # two very different magnitudes: G_v exceeds G_a^2
    h = np.array([0.0] * 9 + [10.0])
    est = k_factor(h)
    assert est.g_a ** 2 < est.g_v
    assert not est.valid and est.k_db is None


def test_k_factor_formula_matches_moments():
    rng = np.random.default_rng(3)
    h = rician_ctf(rng, 3.0)
    p = np.abs(h) ** 2
    ga = p.mean()
    gv = (np.sum(p ** 2) - h.size * ga ** 2) / (h.size - 1)
    k = math.sqrt(ga ** 2 - gv) / (ga - math.sqrt(ga ** 2 - gv))
    est = k_factor(h)
    assert est.k_linear == pytest.approx(k, rel=1e-12)


def test_k_factor_rayleigh_median_low():
    ks = []
    for s in range(200):
        est = k_factor(rician_ctf(np.random.default_rng(s), 0.0))
        ks.append(est.k_db if est.valid else -math.inf)
    assert np.median(ks) <= -5.0


@pytest.mark.slow
def test_k_factor_bias_shrinks_with_n():
    true_db = 5.0
    bias = []
    for n in (128, 510, 2048):
        vals = [k_factor(rician_ctf(np.random.default_rng(s), 10 ** (true_db / 10), n,
                                    tone_spacing=195e3 * 510 / n)).k_db for s in range(200)]
        vals = [v if v is not None else -math.inf for v in vals]
        bias.append(abs(np.median(vals) - true_db))
    assert bias[2] <= bias[0]
    assert bias[2] < 1.0


# ---- records ---------------------------------------------------------------------

def test_lsp_record_single_path():
    rec = lsp_record([Mpc(1e-4, 300e-9, 0.1, 0.2)], CFG, d3d=50.0, state="LoS")
    assert rec.ds == 0.0 and rec.asa_deg == 0.0 and rec.asd_deg == 0.0
    assert rec.k_db == math.inf and rec.k_valid
    assert rec.pl_db == pytest.approx(80.0)


def test_lsp_record_nlos_has_no_k():
    rec = lsp_record([Mpc(1e-4, 300e-9, 0.1, 0.2)], CFG, d3d=50.0, state=LinkState.NLOS)
    assert rec.k_db is None
    assert math.isnan(rec.value("k"))


def test_lsp_record_urban_matches_oracles():
    ms = urban_mpcs(np.random.default_rng(11))
    rec = lsp_record(ms, CFG, d3d=100.0, state="LoS")
    assert rec.ds == pytest.approx(ds_oracle(ms), rel=1e-12)
    assert rec.asa_deg == pytest.approx(as_oracle([m.phi_r for m in ms], [m.power for m in ms]), rel=1e-12)
    assert rec.asd_deg == pytest.approx(as_oracle([m.phi_t for m in ms], [m.power for m in ms]), rel=1e-12)
    assert rec.pl_db == pytest.approx(-10 * math.log10(sum(m.power for m in ms)), rel=1e-12)
    assert rec.log10_ds == pytest.approx(math.log10(rec.ds))
