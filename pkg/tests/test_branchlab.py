import math

import numpy as np
import pytest

from csl_lab.branchlab import (
    BranchOverlapError,
    LatticeWave,
    cross_element,
    default_wave,
    evolve_unitary,
    hamiltonian_apply,
    init_two_packets,
    isolation_suite,
    linearity_residual,
    mean_position,
)
from csl_lab.core import ValidationError


def small_wave(a_plus=math.sqrt(0.5), a_minus=math.sqrt(0.5), n=1024, momenta=(0.0, 0.0)):
    return init_two_packets(n, 1.0, (0.1 * n, 0.9 * n), (10.0, 10.0), momenta, a_plus, a_minus)


def test_symmetric_region_norms():
    np.testing.assert_allclose(small_wave().region_norms(), (0.5, 0.5), atol=1e-12)


def test_two_thirds_region_norms():
    w = small_wave(math.sqrt(2 / 3), math.sqrt(1 / 3))
    np.testing.assert_allclose(w.region_norms(), (2 / 3, 1 / 3), atol=1e-10)
    assert w.norm() == pytest.approx(1.0, abs=1e-12)


def test_close_packets_rejected():
    with pytest.raises(BranchOverlapError, match="branches not disjoint"):
        init_two_packets(512, 1.0, (200.0, 203.0), (10.0, 10.0), (0.0, 0.0), math.sqrt(0.5), math.sqrt(0.5))


def test_unnormalized_amplitudes_rejected():
    with pytest.raises(ValidationError):
        init_two_packets(512, 1.0, (100.0, 400.0), (10.0, 10.0), (0.0, 0.0), 1.0, 1.0)


def test_laplacian_of_constant_is_zero_inside():
    out = hamiltonian_apply(np.ones(64, dtype=complex), dx=0.5)
    assert np.all(out[1:-1] == 0)


def test_stencil_locality():
    w = small_wave()
    plus = w.branch("plus")
    out = hamiltonian_apply(plus)
    lo, hi = plus.region_plus
    outside = np.ones(w.size, dtype=bool)
    outside[max(0, lo - 1):hi + 1] = False
    assert np.all(out[outside] == 0)


def test_single_site_impulse():
    dx = 0.5
    v = np.zeros(9, dtype=complex)
    v[4] = 1.0
    out = hamiltonian_apply(v, dx=dx)
    c = 0.5 / dx**2
    np.testing.assert_allclose(out[3:6], [-c, 2 * c, -c], rtol=1e-15)
    assert np.count_nonzero(out) == 3


def test_norm_and_region_norms_conserved():
    w = small_wave(math.sqrt(2 / 3), math.sqrt(1 / 3), n=4096, momenta=(0.1, -0.1))
    out = evolve_unitary(w, 0.1, 1000)
    assert not out.collided
    assert out.norm() == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(out.region_norms(), (2 / 3, 1 / 3), atol=1e-10)


def test_free_packet_group_velocity():
    k, dt, steps = 0.3, 0.1, 1000
    w = init_two_packets(4096, 1.0, (800.0, 3800.0), (20.0, 20.0), (k, 0.0), 1.0, 0.0)
    start = mean_position(w, w.region_plus)
    out = evolve_unitary(w, dt, steps)
    moved = mean_position(out, out.region_plus) - start
    assert moved == pytest.approx(k * dt * steps, rel=0.05)


def test_cross_element_fresh_is_exact_zero():
    w = small_wave()
    assert cross_element(w.branch("plus"), w.branch("minus")) == 0


def test_cross_element_after_evolution():
    w = small_wave(momenta=(0.2, -0.2))
    out = evolve_unitary(w, 0.1, 500)
    assert out.region_gap() >= 2
    assert abs(cross_element(out.branch("plus"), out.branch("minus"))) < 1e-12


def test_cross_element_detects_overlap():
    x = np.arange(256.0)
    a = np.exp(-((x - 120) ** 2) / 50).astype(complex)
    b = np.exp(-((x - 128) ** 2) / 50).astype(complex)
    pot = np.zeros(256)
    wa = LatticeWave(a, 1.0, pot, (0, 256), (0, 256))
    wb = LatticeWave(b, 1.0, pot, (0, 256), (0, 256))
    assert abs(cross_element(wa, wb, check_gap=False)) > 1e-3
    with pytest.raises(BranchOverlapError, match="stencil reach violated"):
        cross_element(wa, wb)


def test_linearity_residual_small():
    w = small_wave(momenta=(0.2, -0.2))
    res = linearity_residual(w.branch("plus"), w.branch("minus"), 0.6, 0.8j, 0.1, 100)
    assert res <= 1e-12


def test_linearity_residual_identity():
    w = small_wave()
    assert linearity_residual(w.branch("plus"), w.branch("minus"), 1.0, 0.0, 0.1, 20) == 0.0


def test_linearity_detects_nonlinear_term():
    w = small_wave()
    res = linearity_residual(w.branch("plus"), w.branch("minus"), 0.6, 0.8, 0.1, 100, nonlinear_strength=5.0)
    assert res > 1e-6


def test_collision_halts_evolution():
    out = evolve_unitary(default_wave(), 0.1, 2000)
    assert out.collided
    assert out.steps_taken < 2000
    assert out.region_gap() >= 2


def test_isolation_suite_passes():
    report, _ = isolation_suite(small_wave(math.sqrt(2 / 3), math.sqrt(1 / 3), momenta=(0.1, -0.1)), 0.1, 150,
                                check_every=50)
    assert report.passed, report.to_dict()


def test_wave_csv_header():
    assert small_wave(n=512).to_csv().splitlines()[0] == "site,x,re,im,abs2"
