import csv
import math

import numpy as np
import pytest

from psdebnn import autodiff as ad
from psdebnn.autodiff import Tensor
from psdebnn.dynamics import FunctionDrift, HiddenDrift, MlpDrift, MlpSpec, OUPrior, Partition, init_mlp
from psdebnn.errors import ConfigError, NumericsError
from psdebnn.solvers import (
    JointSystem,
    RegimeSchedule,
    em_step,
    euler_step,
    integrate_joint,
    midpoint_step,
    rk4_step,
    sample_brownian,
)
from psdebnn.toys import horizontal_toy, sample_paths, vertical_toy


def cos_drift(t, w):
    return Tensor(np.array([math.cos(20.0 * t)]))


def integrate_scalar(stepper, drift, w0, t_end, n):
    w, dt = Tensor(np.array([w0])), t_end / n
    for k in range(n):
        w = stepper(k * dt, w, dt, drift)
    return w.item()


def test_em_step_degenerates_to_euler():
    w = em_step(0.0, Tensor(np.array([1.0])), 0.1, Tensor(np.array([2.5])), 0.0, np.array([0.7]))
    assert w.item() == pytest.approx(1.25, abs=1e-15)


def test_em_step_pure_diffusion():
    w = em_step(0.0, Tensor(np.zeros(1)), 0.1, Tensor(np.zeros(1)), 1.0, np.array([0.3]))
    assert w.item() == pytest.approx(0.3, abs=1e-15)


def test_em_step_ou_hand_arithmetic():
    w0 = Tensor(np.array([1.0]))
    w = em_step(0.0, w0, 0.1, -w0, 0.2, np.array([-0.05]))
    assert w.item() == pytest.approx(0.89, abs=1e-15)


def test_em_step_noise_only_on_S():
    part = Partition.leading(3, 1)
    w = em_step(0.0, Tensor(np.zeros(3)), 0.5, Tensor(np.ones(3)), 2.0, np.array([0.1]), part)
    np.testing.assert_allclose(w.data, [0.5 + 0.2, 0.5, 0.5], rtol=1e-15)
    with pytest.raises(ConfigError):
        em_step(0.0, Tensor(np.zeros(3)), 0.5, Tensor(np.ones(3)), 2.0, np.zeros(3), part)


def test_midpoint_constant_drift():
    out = midpoint_step(0.0, Tensor(np.array([1.0, 2.0])), 0.25, lambda t, w: Tensor(np.array([3.0, -1.0])))
    np.testing.assert_allclose(out.data, [1.75, 1.75], rtol=1e-15)


def test_midpoint_cosine_antiderivative():
    w = integrate_scalar(midpoint_step, cos_drift, 0.0, 0.3, 60)
    assert abs(w - math.sin(6.0) / 20.0) < 1e-4
    assert math.sin(6.0) / 20.0 == pytest.approx(-0.013971, abs=1e-6)


def test_midpoint_linear_growth_one_step():
    out = midpoint_step(0.0, Tensor(np.array([1.0])), 0.1, lambda t, h: h)
    assert out.item() == pytest.approx(1.105, abs=1e-15)
    assert abs(out.item() - math.exp(0.1)) < 2e-4


@pytest.mark.parametrize("stepper,order", [(euler_step, 1), (midpoint_step, 2), (rk4_step, 4)])
def test_step_halving_convergence_order(stepper, order):
    exact = math.sin(20.0) / 20.0
    e1 = abs(integrate_scalar(stepper, cos_drift, 0.0, 1.0, 60) - exact)
    e2 = abs(integrate_scalar(stepper, cos_drift, 0.0, 1.0, 120) - exact)
    assert 0.8 * 2**order < e1 / e2 < 1.2 * 2**order


def test_tuple_state_with_none_passes_through():
    h, w = midpoint_step(0.0, (None, Tensor(np.ones(1))), 0.1, lambda t, s: (None, s[1]))
    assert h is None
    assert w.item() == pytest.approx(1.105)


def test_sample_brownian_contract():
    empty = sample_brownian(1, 0, 3, 0.1)
    assert empty.increments.shape == (0, 3) and empty.num_draws == 0
    a = sample_brownian(42, 10**5, 1, 0.01)
    b = sample_brownian(42, 10**5, 1, 0.01)
    assert a.increments.tobytes() == b.increments.tobytes()
    x = a.increments.ravel()
    assert abs(x.mean()) < 3 * math.sqrt(0.01) / math.sqrt(10**5)
    assert abs(x.var() - 0.01) < 0.05 * 0.01


def test_schedule_step_allocation():
    s = RegimeSchedule(0.9, 1.0, num_steps=60)
    assert s.step_counts() == [54, 6, 0]
    times, k1, k2 = s.grid()
    assert (k1, k2) == (54, 60) and times[k1] == 0.9 and times[-1] == 1.0
    assert s.window_steps == 6 and s.stochasticity_ratio == pytest.approx(0.1)
    s = RegimeSchedule(0.3, 0.6, num_steps=100)
    times, k1, k2 = s.grid()
    assert times[k1] == pytest.approx(0.3) and times[k2] == pytest.approx(0.6)
    assert RegimeSchedule(0.0, 0.999, num_steps=5).step_counts() == [0, 4, 1]  # nonempty regime gets a step


def test_schedule_validation_and_round_trip():
    with pytest.raises(ConfigError):
        RegimeSchedule(0.6, 0.3)
    with pytest.raises(ConfigError):
        RegimeSchedule(0.0, 1.0, jump_mode="teleport")
    with pytest.raises(ConfigError):
        RegimeSchedule(0.0, 1.0, scheme="heun")
    s = RegimeSchedule(0.0, 0.1, "learnable", Partition.leading(5, 2), 30, "rk4")
    assert RegimeSchedule.from_dict(s.to_dict()) == s
    assert s.jumps and not RegimeSchedule(0.0, 1.0, "fixed_a_priori").jumps


def test_fixed_jump_makes_tail_seed_invariant():
    system, schedule, params = vertical_toy("fixed_a_priori")
    paths = sample_paths(system, schedule, params, range(10))
    _, k1, k2 = schedule.grid()
    assert np.max(np.abs(paths[:, k2:] - paths[0, k2:])) == 0.0
    assert np.max(np.abs(paths[:, : k1 + 1] - paths[0, : k1 + 1])) == 0.0  # before t1 too
    assert paths[:, k2 - 1, 0].std() > 0.0
    assert np.all(paths[:, k2, 0] == 0.0)  # default jump target is zero


def test_continue_jump_keeps_tail_random():
    system, schedule, params = vertical_toy("continue")
    paths = sample_paths(system, schedule, params, range(100))
    assert paths[:, -1, 0].std(ddof=1) > 0.01


def test_horizontal_split_D_is_seed_invariant():
    system, schedule, params = horizontal_toy(split=True)
    paths = sample_paths(system, schedule, params, range(8))
    assert paths[:, :, 1].tobytes() == np.tile(paths[0, :, 1], (8, 1)).tobytes()
    assert paths[:, -1, 0].std() > 0
    t = schedule.grid()[0]
    np.testing.assert_allclose(paths[0, :, 1], (0.0 + 1.0) * np.exp(t) - t - 1.0, atol=1e-3)


def test_horizontal_coupled_D_is_random():
    system, schedule, params = horizontal_toy(split=False)
    paths = sample_paths(system, schedule, params, range(8))
    assert paths[:, -1, 1].var() > 0


def _ode_system(sigma):
    f_h = HiddenDrift(MlpSpec((2, 4, 2)))
    f_q = MlpDrift(f_h.d_w, (3,))
    rng = np.random.default_rng(0)
    params = {"w0": Tensor(init_mlp(f_h.spec, rng)), **{k: Tensor(v) for k, v in f_q.init_params(rng).items()}}
    return JointSystem(f_q, f_h, OUPrior(), sigma), params, f_h.d_w


def test_sigma_to_zero_matches_ode():
    x = Tensor(np.array([[0.5, -1.0], [2.0, 0.1]]))
    system, params, d_w = _ode_system(1e-8)
    sched = RegimeSchedule(0.2, 0.8, num_steps=40)
    noise = sample_brownian(3, sched.window_steps, d_w, sched.window_dt)
    h_sde, _, rec_sde = integrate_joint(system, x, params, sched, noise, record=True, compute_kl=False)
    # same drift, same grid, no noise: Euler inside the window, midpoint outside
    ode_system, _, _ = _ode_system(0.0)
    zero = sample_brownian(3, sched.window_steps, d_w, sched.window_dt)
    zero.increments[:] = 0.0
    h_ode, _, rec_ode = integrate_joint(ode_system, x, params, sched, zero, record=True, compute_kl=False)
    assert np.max(np.abs(rec_sde.w - rec_ode.w)) < 1e-4
    assert np.max(np.abs(h_sde.data - h_ode.data)) < 1e-4


def test_sigma_to_zero_matches_deterministic_schedule():
    x = Tensor(np.array([[0.5, -1.0], [2.0, 0.1]]))
    system, params, d_w = _ode_system(1e-8)
    sched = RegimeSchedule(0.2, 0.8, num_steps=40, scheme="euler")
    noise = sample_brownian(5, sched.window_steps, d_w, sched.window_dt)
    h_sde, _, rec_sde = integrate_joint(system, x, params, sched, noise, record=True, compute_kl=False)
    ode = RegimeSchedule(1.0, 1.0, num_steps=40, scheme="euler")
    h_ode, _, rec_ode = integrate_joint(system, x, params, ode, None, record=True, compute_kl=False)
    assert np.max(np.abs(rec_sde.w - rec_ode.w)) < 1e-4
    assert np.max(np.abs(h_sde.data - h_ode.data)) < 1e-4


def test_zero_sigma_inside_window_rejected():
    system, params, d_w = _ode_system(0.0)
    sched = RegimeSchedule(0.0, 0.5, num_steps=10)
    noise = sample_brownian(0, sched.window_steps, d_w, sched.window_dt)
    with pytest.raises(ConfigError):
        integrate_joint(system, Tensor(np.zeros((1, 2))), params, sched, noise)


def test_noise_shape_must_match_window():
    system, params, d_w = _ode_system(0.5)
    sched = RegimeSchedule(0.0, 0.5, num_steps=10)
    with pytest.raises(ConfigError):
        integrate_joint(system, Tensor(np.zeros((1, 2))), params, sched, sample_brownian(0, 4, d_w, 0.1))
    with pytest.raises(ConfigError):
        integrate_joint(system, Tensor(np.zeros((1, 2))), params, sched, None)


def test_kl_integrand_only_inside_window():
    system, params, d_w = _ode_system(0.5)
    sched = RegimeSchedule(0.3, 0.6, num_steps=30)
    noise = sample_brownian(0, sched.window_steps, d_w, sched.window_dt)
    _, kl, rec = integrate_joint(system, Tensor(np.zeros((1, 2))), params, sched, noise, record=True)
    _, k1, k2 = sched.grid()
    assert np.all(rec.kl_integrand[:k1] == 0) and np.all(rec.kl_integrand[k2:] == 0)
    assert np.all(rec.kl_integrand[k1:k2] > 0)
    assert kl.item() == pytest.approx(rec.kl_integrand.sum() * sched.window_dt, rel=1e-12)
    assert rec.num_u_evals == sched.window_steps
    assert rec.num_brownian_draws == sched.window_steps * d_w


def test_constant_drift_mismatch_kl_closed_form():
    c, t1, t2 = 0.7, 0.25, 0.75
    # f_q - f_p = -c everywhere along the path: choose prior rate 0 so f_p = 0
    system = JointSystem(FunctionDrift(lambda t, w: Tensor(np.full(1, c)), 1), None, OUPrior(0.0), 1.0)
    sched = RegimeSchedule(t1, t2, num_steps=40)
    noise = sample_brownian(0, sched.window_steps, 1, sched.window_dt)
    _, kl, _ = integrate_joint(system, None, {"w0": Tensor(np.zeros(1))}, sched, noise)
    assert kl.item() == pytest.approx(c * c * (t2 - t1), rel=1e-12)


def test_path_record_csv(tmp_path):
    system, params, d_w = _ode_system(0.5)
    sched = RegimeSchedule(0.0, 0.5, num_steps=6)
    noise = sample_brownian(0, sched.window_steps, d_w, sched.window_dt)
    _, _, rec = integrate_joint(system, Tensor(np.zeros((3, 2))), params, sched, noise, record=True)
    path = tmp_path / "path.csv"
    rec.to_csv(path, example=1)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t"] + [f"w_{i + 1}" for i in range(d_w)] + ["h_1", "h_2", "kl_integrand"]
    assert len(rows) == sched.num_steps + 2
    np.testing.assert_array_equal(np.array(rows[-1][1:1 + d_w], float), rec.w[-1])


def test_nonfinite_state_reports_step():
    def explode(t, w):
        return ad.exp(ad.scale(w, 400.0))

    system = JointSystem(FunctionDrift(explode, 1), None, OUPrior(), 1.0)
    sched = RegimeSchedule(1.0, 1.0, num_steps=10)
    with pytest.raises(NumericsError) as err:
        integrate_joint(system, None, {"w0": Tensor(np.ones(1))}, sched, None, compute_kl=False)
    assert err.value.step is not None
    assert "solver step" in str(err.value)
