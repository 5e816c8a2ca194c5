import numpy as np
import pytest

from gpswarm.errors import EmptyStateError, InputError
from gpswarm.gp import (GpState, MergedGpState, NoiseModel, Posterior,
                        centralized_edim_posterior, centralized_gp_posterior,
                        gp_state_update, load_state, merge_trajectories,
                        merged_variance, posterior_mean, posterior_variance,
                        save_state, state_from_bytes, state_to_bytes, zero_state)
from gpswarm.kernel import basis_eval, build_basis, kernel_eval
from gpswarm.planner import Trajectory


def _random_state(basis, rng, m, n=1):
    st = zero_state(basis.E, n)
    X = rng.uniform(0, 20, (m, basis.dim))
    y = rng.normal(size=m)
    for t in range(m):
        st = gp_state_update(st, basis, X[t], y[t], 1.0 / (t + 1))
    return st, X, y


def test_single_update_from_zero_is_outer_product(basis_1d):
    st = zero_state(basis_1d.E, 1)
    x = np.array([4.2])
    st = gp_state_update(st, basis_1d, x, 2.5, 1.0)
    phi = basis_eval(basis_1d, x)
    assert np.array_equal(st.alpha, np.outer(phi, phi))
    assert np.array_equal(st.beta, phi * 2.5)
    assert st.m == 1


def test_running_mean_matches_batch_average(basis_1d):
    # r_t = 1/t reproduces the batch averages to 1e-12 (oracle: direct sums)
    rng = np.random.default_rng(0)
    for _ in range(5):
        m = int(rng.integers(3, 40))
        st, X, y = _random_state(basis_1d, rng, m)
        G = basis_eval(basis_1d, X)
        alpha_batch = G.T @ G / m
        beta_batch = G.T @ y / m
        assert np.abs(st.alpha - alpha_batch).max() < 1e-12
        assert np.abs(st.beta - beta_batch).max() < 1e-12


def test_fixed_r_unrolled_by_hand(basis_1d):
    st = zero_state(basis_1d.E, 1)
    x = np.array([9.0])
    st = gp_state_update(st, basis_1d, x, 0.0, 0.5)
    st = gp_state_update(st, basis_1d, x, 1.0, 0.5)
    phi = basis_eval(basis_1d, x)
    assert np.allclose(st.beta, 0.5 * phi, atol=1e-15)


def test_update_validates_inputs(basis_1d):
    st = zero_state(basis_1d.E, 1)
    with pytest.raises(InputError):
        gp_state_update(st, basis_1d, [np.inf], 0.0, 0.5)
    with pytest.raises(InputError):
        gp_state_update(st, basis_1d, [1.0], np.nan, 0.5)
    with pytest.raises(InputError):
        gp_state_update(st, basis_1d, [1.0], 0.0, 0.0)


def test_posterior_mean_zero_beta_is_zero(basis_1d, noise):
    st = zero_state(basis_1d.E, 1)
    st = gp_state_update(st, basis_1d, [5.0], 0.0, 1.0)   # measured zero
    for x in ([2.0], [10.0], [17.5]):
        assert posterior_mean(st, basis_1d, noise, x) == 0.0


def test_posterior_mean_requires_data(basis_1d, noise):
    with pytest.raises(EmptyStateError):
        posterior_mean(zero_state(basis_1d.E, 1), basis_1d, noise, [3.0])


def test_posterior_matches_centralized_edim_n1(basis_1d, noise):
    rng = np.random.default_rng(1)
    st, X, y = _random_state(basis_1d, rng, 25)
    grid = np.linspace(0, 20, 50)[:, None]
    mean_o, var_o = centralized_edim_posterior(X, y, basis_1d, noise, grid)
    post = Posterior(st, basis_1d, noise)
    assert np.abs(post.mean(grid) - mean_o).max() < 1e-10
    assert np.abs(post.variance(grid) - var_o).max() < 1e-10


def test_posterior_matches_exact_gp_with_large_E(kernel_1d, noise):
    # E >= 60-grade accuracy: in 1-D the spectrum decays fast enough at E=40
    basis = build_basis(kernel_1d, 5.0, 40, measure_center=10.0)
    rng = np.random.default_rng(2)
    st, X, y = _random_state(basis, rng, 20)
    grid = np.linspace(0, 20, 100)[:, None]
    mean_o, var_o = centralized_gp_posterior(X, y, kernel_1d, noise, grid)
    post = Posterior(st, basis, noise)
    sig = np.sqrt(kernel_1d.signal_variance)
    assert np.abs(post.mean(grid) - mean_o).max() < 0.05 * sig
    assert np.abs(post.variance(grid) - var_o).max() < 0.05 * kernel_1d.signal_variance


def test_prior_variance_at_zero_data(basis_1d, kernel_1d, noise):
    st = zero_state(basis_1d.E, 1)
    assert posterior_variance(st, basis_1d, noise, [7.0]) == kernel_1d.signal_variance


def test_variance_shrinks_at_sampled_point(basis_1d, noise):
    st = zero_state(basis_1d.E, 1)
    st = gp_state_update(st, basis_1d, [8.0], 1.3, 1.0)
    v = posterior_variance(st, basis_1d, noise, [8.0])
    assert v < basis_1d.params.signal_variance


def test_variance_bounds(basis_1d, noise):
    rng = np.random.default_rng(3)
    st, _, _ = _random_state(basis_1d, rng, 30)
    grid = rng.uniform(0, 20, (50, 1))
    v = Posterior(st, basis_1d, noise).variance(grid)
    assert np.all(v >= 0.0)
    assert np.all(v <= basis_1d.params.signal_variance + 1e-12)


# --- trajectory merging -------------------------------------------------------


def test_merge_empty_is_identity(basis_2d, noise):
    rng = np.random.default_rng(4)
    st, _, _ = _random_state(basis_2d, rng, 10, n=3)
    merged = merge_trajectories(st, [], basis_2d)
    assert merged.alpha_hat is st.alpha
    assert merged.effective_count == st.m * st.n


def test_merge_single_point_as_printed(basis_2d):
    rng = np.random.default_rng(5)
    st, _, _ = _random_state(basis_2d, rng, 10, n=3)
    pt = np.array([[4.0, 4.0]])
    merged = merge_trajectories(st, [Trajectory(agent_id=1, points=pt)], basis_2d)
    phi = basis_eval(basis_2d, pt[0])
    mn = st.m * st.n
    expect = (mn * st.alpha + np.outer(phi, phi)) / (mn + 1)
    assert np.abs(merged.alpha_hat - expect).max() < 1e-12
    assert merged.effective_count == mn + 1


def test_merge_consistent_mode_weights(basis_2d):
    rng = np.random.default_rng(6)
    st, _, _ = _random_state(basis_2d, rng, 10, n=3)
    pts = rng.uniform(0, 20, (4, 2))
    trajs = [Trajectory(agent_id=1, points=pts[:2]),
             Trajectory(agent_id=2, points=pts[2:])]
    merged = merge_trajectories(st, trajs, basis_2d, mode="consistent")
    phi = basis_eval(basis_2d, pts)
    mn = st.m * st.n
    expect = (mn * st.alpha + phi.T @ phi) / (mn + 4)
    assert np.abs(merged.alpha_hat - expect).max() < 1e-12


def test_merged_alpha_symmetric(basis_2d):
    rng = np.random.default_rng(7)
    st, _, _ = _random_state(basis_2d, rng, 8, n=2)
    trajs = [Trajectory(agent_id=1, points=rng.uniform(0, 20, (5, 2)))]
    merged = merge_trajectories(st, trajs, basis_2d)
    assert np.abs(merged.alpha_hat - merged.alpha_hat.T).max() < 1e-12


def test_merged_variance_prior_single_point(basis_2d, kernel_2d, noise):
    st = zero_state(basis_2d.E, 4)
    merged = merge_trajectories(st, [], basis_2d)
    cov = merged_variance(merged, basis_2d, noise, [[3.0, 3.0]])
    assert cov.shape == (1, 1)
    assert cov[0, 0] == kernel_2d.signal_variance


def test_merged_variance_reduces_to_posterior_variance(kernel_1d, noise):
    # high-E basis makes the truncated-diagonal gap negligible
    basis = build_basis(kernel_1d, 5.0, 40, measure_center=10.0)
    rng = np.random.default_rng(8)
    st, _, _ = _random_state(basis, rng, 15)
    merged = merge_trajectories(st, [], basis)
    for x in (3.0, 9.5, 16.0):
        cov = merged_variance(merged, basis, noise, [[x]])
        direct = posterior_variance(st, basis, noise, [x])
        assert cov[0, 0] == pytest.approx(direct, abs=1e-8)


def test_merged_variance_symmetric_output(basis_2d, noise):
    rng = np.random.default_rng(9)
    st, _, _ = _random_state(basis_2d, rng, 12, n=2)
    trajs = [Trajectory(agent_id=1, points=rng.uniform(0, 20, (3, 2)))]
    merged = merge_trajectories(st, trajs, basis_2d)
    cov = merged_variance(merged, basis_2d, noise, rng.uniform(0, 20, (5, 2)))
    assert np.array_equal(cov, cov.T)


def test_merging_reduces_variance_at_merged_points_consistent_mode(basis_2d, noise):
    rng = np.random.default_rng(10)
    worse = 0
    for _ in range(200):
        m = int(rng.integers(1, 20))
        st, _, _ = _random_state(basis_2d, rng, m, n=2)
        pt = rng.uniform(0, 20, (1, 2))
        before = merged_variance(merge_trajectories(st, [], basis_2d, "consistent"),
                                 basis_2d, noise, pt)[0, 0]
        after = merged_variance(
            merge_trajectories(st, [Trajectory(agent_id=1, points=pt)], basis_2d,
                               "consistent"),
            basis_2d, noise, pt)[0, 0]
        if after > before + 1e-9:
            worse += 1
    assert worse == 0


# --- centralized oracles --------------------------------------------------


def test_exact_gp_single_sample_closed_form(kernel_1d):
    noise = NoiseModel(0.25)
    x0, y0 = np.array([5.0]), 1.8
    mean, var = centralized_gp_posterior([x0], [y0], kernel_1d, noise, x0)
    sig = kernel_1d.signal_variance
    assert mean == pytest.approx(y0 * sig / (sig + 0.25), rel=1e-12)
    assert var == pytest.approx(sig - sig ** 2 / (sig + 0.25), rel=1e-10)


def test_exact_gp_far_query_recovers_prior(kernel_1d, noise):
    X = np.array([[1.0], [2.0]])
    y = np.array([1.0, -1.0])
    mean, var = centralized_gp_posterior(X, y, kernel_1d, noise, [200.0])
    assert abs(mean) < 1e-6
    assert var == pytest.approx(kernel_1d.signal_variance, abs=1e-6)


def test_exact_gp_variance_bounded_by_prior(kernel_1d, noise):
    rng = np.random.default_rng(11)
    X = rng.uniform(0, 20, (15, 1))
    y = rng.normal(size=15)
    grid = np.linspace(0, 20, 60)[:, None]
    _, var = centralized_gp_posterior(X, y, kernel_1d, noise, grid)
    assert np.all(var <= kernel_1d.signal_variance + 1e-12)


def test_edim_zero_measurements_zero_mean(basis_1d, noise):
    X = np.array([[3.0], [4.0], [5.0]])
    mean, _ = centralized_edim_posterior(X, np.zeros(3), basis_1d, noise,
                                         np.linspace(0, 20, 9)[:, None])
    assert np.abs(mean).max() == 0.0


# --- serialization ----------------------------------------------------------


def test_state_round_trip(basis_2d, tmp_path):
    rng = np.random.default_rng(12)
    st, _, _ = _random_state(basis_2d, rng, 7, n=5)
    buf = state_to_bytes(st)
    assert buf[:4] == b"DGPS"
    assert len(buf) == 16 + 16 + 8 * (basis_2d.E ** 2 + basis_2d.E)
    back = state_from_bytes(buf)
    assert np.array_equal(back.alpha, st.alpha)
    assert np.array_equal(back.beta, st.beta)
    assert (back.m, back.n) == (st.m, st.n)
    save_state(st, tmp_path / "st.bin")
    disk = load_state(tmp_path / "st.bin")
    assert np.array_equal(disk.alpha, st.alpha)


def test_state_bytes_reject_corruption(basis_1d):
    st = zero_state(basis_1d.E, 1)
    buf = state_to_bytes(st)
    with pytest.raises(InputError):
        state_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(InputError):
        state_from_bytes(buf[:-8])
