import numpy as np
import pytest
from scipy.integrate import solve_ivp

from rafda.dynamics import (
    DatasetConfig,
    IntegrationDiverged,
    ObservationModel,
    TimeSeries,
    fixed_points,
    generate_dataset,
    integrate,
    lorenz63_rhs,
    load_series,
    observe,
    read_csv,
    simulate,
    symmetric_sqrt,
    write_csv,
)


def test_rhs_vanishes_at_fixed_points():
    for p in fixed_points():
        np.testing.assert_allclose(lorenz63_rhs(p), 0.0, atol=1e-12)


def test_rhs_known_value():
    np.testing.assert_allclose(lorenz63_rhs(np.array([1.0, 2.0, 3.0])), [10.0, 23.0, -6.0])


def test_rhs_accepts_batches():
    states = np.random.default_rng(0).normal(size=(3, 5))
    batch = lorenz63_rhs(states)
    for k in range(5):
        np.testing.assert_allclose(batch[:, k], lorenz63_rhs(states[:, k]))


def test_integrate_exponential_decay():
    out = integrate(lambda u: -u, [1.0], 0.1, 20, substeps=4)
    t = 0.1 * np.arange(21)
    np.testing.assert_allclose(out[:, 0], np.exp(-t), rtol=1e-8)


def test_rk4_is_fourth_order():
    u0 = np.array([1.0, 1.0, 20.0])
    ref = solve_ivp(lambda t, u: lorenz63_rhs(u), (0, 0.5), u0, rtol=1e-13, atol=1e-13, method="DOP853").y[:, -1]
    errs = [np.linalg.norm(integrate(lorenz63_rhs, u0, 0.5, 1, substeps=s)[-1] - ref) for s in (50, 100, 200)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(orders - 4) < 0.3)


def test_integrate_matches_reference_solver():
    u0 = np.array([-3.0, 2.0, 15.0])
    ours = integrate(lorenz63_rhs, u0, 0.02, 50)
    ref = solve_ivp(lambda t, u: lorenz63_rhs(u), (0, 1.0), u0, rtol=1e-12, atol=1e-12, t_eval=0.02 * np.arange(51))
    np.testing.assert_allclose(ours, ref.y.T, atol=1e-6)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_integrate_raises_on_blow_up():
    with pytest.raises(IntegrationDiverged) as info:
        integrate(lambda u: u * u, [1.0], 0.5, 10, substeps=1000)
    assert info.value.step >= 1


@pytest.mark.parametrize("kwargs", [dict(dt_out=0.0), dict(substeps=0), dict(n_steps=-1)])
def test_integrate_rejects_bad_arguments(kwargs):
    args = dict(rhs=lorenz63_rhs, initial=[1.0, 1.0, 1.0], dt_out=0.02, n_steps=3)
    args.update(kwargs)
    with pytest.raises(ValueError):
        integrate(**args)


def test_largest_lyapunov_exponent():
    # Benettin's method on the tangent-linear RK4 system.
    def jac(u):
        x, y, z = u
        return np.array([[-10.0, 10.0, 0.0], [28.0 - z, -1.0, -x], [y, x, -8.0 / 3.0]])

    def rhs(s):
        u, v = s[:3], s[3:]
        return np.concatenate([lorenz63_rhs(u), jac(u) @ v])

    state = np.concatenate([integrate(lorenz63_rhs, [1.0, 1.0, 1.0], 0.02, 2000)[-1], [1.0, 0.0, 0.0]])
    total, n = 0.0, 10000
    for _ in range(n):
        state = integrate(rhs, state, 0.02, 1, substeps=2)[-1]
        norm = np.linalg.norm(state[3:])
        total += np.log(norm)
        state[3:] /= norm
    assert abs(total / (n * 0.02) - 0.91) < 0.06


def test_observation_model_validation():
    with pytest.raises(ValueError):
        ObservationModel(np.eye(3)[:1], -np.eye(1))
    with pytest.raises(ValueError):
        ObservationModel(np.eye(3)[:1], np.eye(2))
    with pytest.raises(ValueError):
        ObservationModel(np.eye(3)[:2], np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_observation_model_scalar():
    model = ObservationModel.scalar(0.2)
    assert model.d == 1
    assert model.noise_strength == pytest.approx(0.2)
    np.testing.assert_array_equal(model.projection, [[1.0, 0.0, 0.0]])


def test_symmetric_sqrt():
    A = np.random.default_rng(1).normal(size=(4, 4))
    cov = A @ A.T
    S = symmetric_sqrt(cov)
    np.testing.assert_allclose(S @ S, cov, atol=1e-10)
    np.testing.assert_allclose(S, S.T)


def test_observe_noise_statistics():
    traj = np.zeros((200000, 3))
    ts = observe(traj, ObservationModel.scalar(0.2), np.random.default_rng(2), dt=0.02)
    assert ts.d == 1
    assert abs(ts.values.mean()) < 0.005
    assert ts.values.var() == pytest.approx(0.2, rel=0.02)


def test_observe_zero_noise_is_projection():
    traj = np.random.default_rng(3).normal(size=(10, 3))
    ts = observe(traj, ObservationModel.scalar(0.0), np.random.default_rng(0))
    np.testing.assert_array_equal(ts.values[:, 0], traj[:, 0])


def test_observe_rejects_dimension_mismatch():
    with pytest.raises(ValueError):
        observe(np.zeros((5, 2)), ObservationModel.scalar(0.1), np.random.default_rng(0))


def test_timeseries_times_and_scalar():
    ts = TimeSeries(np.arange(4.0), 0.5)
    np.testing.assert_allclose(ts.times, [0.0, 0.5, 1.0, 1.5])
    np.testing.assert_array_equal(ts.scalar(), np.arange(4.0))
    assert len(ts) == 4


def test_generate_dataset_shapes_and_determinism():
    cfg = DatasetConfig(n_train=100, n_valid=50, transient=1.0)
    a = generate_dataset(cfg, np.random.default_rng(5))
    b = generate_dataset(cfg, np.random.default_rng(5))
    assert a.train.values.shape == (100, 1) and a.validation.values.shape == (50, 1)
    assert a.truth_train.shape == (100, 3)
    np.testing.assert_array_equal(a.train.values, b.train.values)
    assert not np.allclose(a.truth_train[0], a.initial_conditions[0])


def test_simulate_discards_transient():
    cfg = DatasetConfig(transient=1.0)
    u0 = np.array([1.0, 2.0, 3.0])
    full = integrate(lorenz63_rhs, u0, 0.02, 60)
    np.testing.assert_allclose(simulate(cfg, u0, 11), full[50:], rtol=1e-12)


def test_csv_round_trip_is_exact(tmp_path):
    values = np.random.default_rng(4).normal(size=(7, 3)) * 1e3
    write_csv(tmp_path / "s.csv", values, 0.02)
    back, dt, names = read_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(back, values)
    assert dt == pytest.approx(0.02)
    assert names == ["x", "y", "z"]
    x = load_series(tmp_path / "s.csv", column="y")
    np.testing.assert_array_equal(x.values[:, 0], values[:, 1])
    with pytest.raises(ValueError):
        load_series(tmp_path / "s.csv", column="q")
