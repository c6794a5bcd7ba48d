import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urbanchan.arrays import CtfSnapshot, Mpc, SoundingConfig, synthesize_ctf, wrap_angle
from urbanchan.errors import InputError
from urbanchan.sage import ExtractionConfig, cluster_kpm, extract_mpcs, reconstruct_and_residual
from urbanchan.synthetic import measurement_arrays, separated_mpcs

CFG = SoundingConfig()
TX, RX = measurement_arrays(CFG)


def db(x):
    return 10 * math.log10(x)


def test_single_noiseless_mpc_recovered():
    truth = Mpc(1.0, 200e-9, math.radians(10), math.radians(-20))
    res = extract_mpcs(synthesize_ctf([truth], TX, RX, CFG), TX, RX, CFG)
    assert len(res.mpcs) >= 1
    m = res.mpcs[0]
    assert abs(m.tau - truth.tau) <= 1e-9
    assert abs(math.degrees(m.phi_t - truth.phi_t)) <= 0.5
    assert abs(math.degrees(wrap_angle(m.phi_r - truth.phi_r))) <= 0.5
    assert abs(db(m.power) - db(truth.power)) <= 0.05
    assert res.residual_power_ratio < 1e-4


def test_zero_snapshot_yields_no_paths():
    res = extract_mpcs(synthesize_ctf([], TX, RX, CFG), TX, RX, CFG)
    assert res.mpcs == [] and res.residual_power_ratio == 0.0


def test_shape_mismatch_rejected():
    with pytest.raises(InputError):
        extract_mpcs(CtfSnapshot(np.ones((8, 8, 10))), TX, RX, CFG)


def test_config_validation():
    with pytest.raises(InputError):
        ExtractionConfig(max_paths=0)
    with pytest.raises(InputError):
        ExtractionConfig(residual_target=1.5)


@pytest.mark.parametrize("seed", [1, 2])
def test_residual_history_non_increasing(seed):
    rng = np.random.default_rng(seed)
    mpcs = separated_mpcs(rng, 5, CFG)
    res = extract_mpcs(synthesize_ctf(mpcs, TX, RX, CFG), TX, RX, CFG,
                       ExtractionConfig(max_paths=8, residual_target=1e-6))
    h = res.residual_history
    assert all(b <= a * (1 + 1e-9) for a, b in zip(h, h[1:]))
    assert res.residual_power_ratio < 1e-4


# ---- reconstruction ----------------------------------------------------------------

def _two_path_snapshot():
    mpcs = [Mpc(1e-3, 100e-9, 0.0, 0.0), Mpc(1e-3, 1500e-9, 0.3, 2.0)]
    return mpcs, synthesize_ctf(mpcs, TX, RX, CFG)


def test_residual_exact_and_empty():
    mpcs, snap = _two_path_snapshot()
    rec, r = reconstruct_and_residual(snap, mpcs, TX, RX, CFG)
    assert r == 0.0
    assert np.array_equal(rec.h, snap.h)
    _, r = reconstruct_and_residual(snap, [], TX, RX, CFG)
    assert r == 1.0


def test_residual_half_power_subset():
    tx1 = type(TX).ula(1, frequency=CFG.center_frequency)
    mpcs = [Mpc(1.0, 100 * CFG.delay_step, 0.0, 0.0), Mpc(1.0, 300 * CFG.delay_step, 0.0, 0.0)]
    snap = synthesize_ctf(mpcs, tx1, tx1, CFG)
    _, r = reconstruct_and_residual(snap, mpcs[:1], tx1, tx1, CFG)
    assert r == pytest.approx(0.5, abs=1e-6)


def test_residual_of_zero_snapshot_errors():
    with pytest.raises(InputError, match="undefined residual ratio"):
        reconstruct_and_residual(synthesize_ctf([], TX, RX, CFG), [], TX, RX, CFG)


# ---- clustering ----------------------------------------------------------------------

def _two_groups():
    a = [Mpc(1.0 * (1 + 0.1 * i), 100e-9 + i * 2e-9, math.radians(-30 + i), math.radians(10 + i)) for i in range(4)]
    b = [Mpc(0.5 * (1 + 0.1 * i), 900e-9 + i * 2e-9, math.radians(30 - i), math.radians(100 - i)) for i in range(5)]
    return a + b


def test_kpm_recovers_two_groups():
    mpcs = _two_groups()
    res = cluster_kpm(mpcs, k=2)
    assert res.k == 2
    assert len(set(res.labels[:4])) == 1 and len(set(res.labels[4:])) == 1
    assert res.labels[0] != res.labels[4]


def test_kpm_auto_finds_two_groups():
    assert cluster_kpm(_two_groups(), k="auto").k == 2


def test_kpm_single_and_duplicate():
    m = Mpc(0.5 + 0.5j, 123e-9, 0.2, -1.1)
    res = cluster_kpm([m], k=1)
    tau, pt, pr, p = res.centroids[0]
    assert (tau, pt, pr) == pytest.approx((m.tau, m.phi_t, m.phi_r))
    res = cluster_kpm([m, m, m], k=1)
    assert res.centroids[0][3] == pytest.approx(3 * m.power)
    assert res.centroids[0][:3] == pytest.approx((m.tau, m.phi_t, m.phi_r))


def test_kpm_errors():
    with pytest.raises(InputError):
        cluster_kpm([], k=1)
    with pytest.raises(InputError):
        cluster_kpm([Mpc(1.0, 0.0, 0.0, 0.0)], k=2)


def _partition(labels):
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, set()).add(i)
    return {frozenset(g) for g in groups.values()}


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_kpm_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 15))
    mpcs = [Mpc(complex(rng.uniform(0.1, 1)), rng.uniform(0, 1e-6), rng.uniform(-1, 1), rng.uniform(-3, 3))
            for _ in range(n)]
    perm = rng.permutation(n)
    a = cluster_kpm(mpcs, k=min(3, n))
    b = cluster_kpm([mpcs[i] for i in perm], k=min(3, n))
    back = np.empty(n, dtype=int)
    back[perm] = b.labels  # label of original index perm[j] is b.labels[j]
    assert _partition(a.labels) == _partition(back)
