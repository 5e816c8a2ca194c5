import math

import numpy as np
import pytest

from gpswarm.errors import CapacityError, InputError
from gpswarm.kernel import (KernelParams, basis_eval, build_basis, kernel_eval,
                            kernel_gram, nystrom_eigenpairs, truncated_gram,
                            truncated_kernel)


def test_kernel_zero_distance_is_signal_variance():
    p = KernelParams(1.0, [2.0, 3.0])
    x = np.array([0.3, -1.2])
    assert kernel_eval(p, x, x) == 1.0


def test_kernel_symmetry_random_pairs():
    p = KernelParams(1.7, [0.5, 2.0, 1.0])
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b = rng.normal(size=3), rng.normal(size=3)
        assert kernel_eval(p, a, b) == kernel_eval(p, b, a)


def test_kernel_value_1d():
    p = KernelParams(2.0, [1.0])
    got = kernel_eval(p, [0.0], [1.0])
    assert got == pytest.approx(2.0 * math.exp(-0.5), rel=1e-12)
    assert got == pytest.approx(1.2130613194252668, rel=1e-10)


def test_kernel_dimension_mismatch():
    p = KernelParams(1.0, [1.0, 1.0])
    with pytest.raises(InputError):
        kernel_eval(p, [0.0, 0.0, 0.0], [0.0, 0.0, 0.0])


def test_kernel_rejects_nondiagonal_matrix():
    with pytest.raises(InputError):
        KernelParams(1.0, [[1.0, 0.1], [0.1, 1.0]])


def test_kernel_accepts_diagonal_matrix():
    p = KernelParams(1.0, [[2.0, 0.0], [0.0, 3.0]])
    assert p.length_scale.tolist() == [2.0, 3.0]


def test_leading_eigenvalue_matches_nystrom():
    p = KernelParams(1.3, [0.7])
    basis = build_basis(p, 1.1, 1, measure_center=0.2)
    lam, _, _ = nystrom_eigenpairs(p, 1.1, 1, measure_center=0.2, n_grid=2000)
    assert basis.eigenvalues[0] == pytest.approx(lam[0], rel=1e-4)


def test_eigenvalues_sorted_nonincreasing_2d():
    p = KernelParams(1.0, [1.0, 4.0])
    basis = build_basis(p, [2.0, 2.0], 50)
    lam = basis.eigenvalues
    assert np.all(np.diff(lam) <= 0)
    assert lam[-1] > 0


def test_eigen_integral_relation_under_quadrature(kernel_1d, basis_1d):
    # quadrature oracle for the defining integral: int k(x, .) phi_e dmu = lam_e phi_e(x)
    nodes, wts = np.polynomial.hermite.hermgauss(180)
    w = basis_1d.measure_width[0]
    c = basis_1d.measure_center[0]
    xq = c + w * np.sqrt(2.0) * nodes
    ww = wts / np.sqrt(np.pi)
    phi_q = basis_eval(basis_1d, xq[:, None])
    xs = np.linspace(2.0, 18.0, 20)
    phi_x = basis_eval(basis_1d, xs[:, None])
    Kxq = kernel_gram(kernel_1d, xs[:, None], xq[:, None])
    for e in range(10):
        lhs = Kxq @ (ww * phi_q[:, e])
        rhs = basis_1d.eigenvalues[e] * phi_x[:, e]
        rel = np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs))
        assert rel < 1e-3


def test_basis_eval_deterministic(basis_2d):
    x = np.array([3.7, 12.1])
    a = basis_eval(basis_2d, x)
    b = basis_eval(basis_2d, x)
    assert np.array_equal(a, b)


def test_basis_eval_rejects_nonfinite(basis_2d):
    with pytest.raises(InputError):
        basis_eval(basis_2d, [np.nan, 1.0])


def test_truncated_diagonal_never_exceeds_kernel(kernel_2d, basis_2d):
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = rng.uniform(0, 20, 2)
        diag = float(np.sum(basis_2d.eigenvalues * basis_eval(basis_2d, x) ** 2))
        assert diag <= kernel_eval(kernel_2d, x, x) + 1e-9


def test_truncated_kernel_symmetric(basis_2d):
    rng = np.random.default_rng(4)
    a, b = rng.uniform(0, 20, 2), rng.uniform(0, 20, 2)
    assert truncated_kernel(basis_2d, a, b) == truncated_kernel(basis_2d, b, a)


def test_truncation_error_monotone_in_E(kernel_2d):
    rng = np.random.default_rng(5)
    pairs = [(rng.uniform(4, 16, 2), rng.uniform(4, 16, 2)) for _ in range(10)]
    prev = None
    for E in (5, 10, 20, 40, 80):
        basis = build_basis(kernel_2d, [5.0, 5.0], E, measure_center=[10.0, 10.0])
        err = max(abs(kernel_eval(kernel_2d, a, b) - truncated_kernel(basis, a, b))
                  for a, b in pairs)
        if prev is not None:
            assert err <= prev + 1e-12
        prev = err


def test_truncated_approaches_kernel_in_measure(kernel_1d):
    basis = build_basis(kernel_1d, 5.0, 40, measure_center=10.0)
    rng = np.random.default_rng(6)
    xs = 10.0 + 5.0 * rng.normal(size=(30, 1))
    for a in xs:
        for b in xs[:5]:
            assert abs(kernel_eval(kernel_1d, a, b)
                       - truncated_kernel(basis, a, b)) < 1e-3


def test_simulation1_settings_match_within_two_percent(kernel_2d):
    # 20 m x 20 m map, E = 80, default measure (center, half-width / 2)
    basis = build_basis(kernel_2d, [5.0, 5.0], 80, measure_center=[10.0, 10.0])
    rng = np.random.default_rng(7)
    sig = kernel_2d.signal_variance
    for _ in range(200):
        a, b = rng.uniform(0, 20, 2), rng.uniform(0, 20, 2)
        err = abs(kernel_eval(kernel_2d, a, b) - truncated_kernel(basis, a, b))
        assert err <= 0.02 * sig


def test_truncated_gram_is_psd(basis_2d):
    rng = np.random.default_rng(8)
    X = rng.uniform(0, 20, (40, 2))
    G = truncated_gram(basis_2d, X)
    eigs = np.linalg.eigvalsh(0.5 * (G + G.T))
    assert eigs.min() >= -1e-9 * basis_2d.params.signal_variance


def test_basis_ordering_deterministic_with_ties():
    # equal per-dimension spectra force ties; lexicographic multi-index breaks them
    p = KernelParams(1.0, [2.0, 2.0])
    b1 = build_basis(p, [1.5, 1.5], 30)
    b2 = build_basis(p, [1.5, 1.5], 30)
    assert np.array_equal(b1.multi_index, b2.multi_index)
    lam = b1.eigenvalues
    for e in range(1, 30):
        if lam[e] == lam[e - 1]:
            assert tuple(b1.multi_index[e - 1]) < tuple(b1.multi_index[e])


def test_capacity_error_on_exhausted_spectrum(kernel_1d):
    with pytest.raises(CapacityError):
        build_basis(kernel_1d, 5.0, 70, measure_center=10.0)


def test_build_rejects_bad_args(kernel_1d):
    with pytest.raises(InputError):
        build_basis(kernel_1d, 5.0, 0)
    with pytest.raises(InputError):
        build_basis(kernel_1d, -1.0, 5)


def test_basis_summary_round_trips_settings(basis_2d):
    s = basis_2d.summary()
    assert s["E"] == 25
    assert s["measure_width"] == [5.0, 5.0]
    assert s["signal_variance"] == 1.0
    assert s["length_scale"] == [8.0, 8.0]
