import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from contnav import nn
from contnav.datasets import generate_dataset, sample_hier_batch
from contnav.maze_sim import OBS_DIM, Action, get_maze
from contnav.policies import (
    COND_DIM, HALF_LOG_2PI, LOG_STD_MAX, LOG_STD_MIN, GCBCModel, HGCBCModel, NonFiniteLossError,
    TrainConfig, act, action_nll, condition, decode_actions, flat_loss, gaussian_nll, high_loss, low_loss,
    load_model, make_gcbc, make_hgcbc, nll_floor, policy_from_model, save_model, subgoal_nll, train,
)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(get_maze("S-BASE"), 8, 0.05, seed=2)


def small_models(seed=0):
    return (make_hgcbc("SimpleTown", seed, width=8, n_blocks=2),
            make_gcbc("SimpleTown", seed, width=8, n_blocks=2))


# -- heads ----------------------------------------------------------------------

def test_subgoal_nll_at_mean():
    out = np.array([[0.3, 0.7, 0.0, 0.0]])
    loss, _, per = subgoal_nll(out, np.array([[0.3, 0.7]]))
    assert loss == pytest.approx(math.log(2 * math.pi), abs=1e-15)
    lo = subgoal_nll(np.array([[0.3, 0.7, 0.3, 0.3]]), np.array([[0.3, 0.7]]))[0]
    hi = subgoal_nll(np.array([[0.3, 0.7, 0.6, 0.6]]), np.array([[0.3, 0.7]]))[0]
    assert hi - lo == pytest.approx(2 * 0.3, abs=1e-15)


def test_bernoulli_examples():
    out = np.zeros((3, 7))
    act_ = np.zeros((3, 6))
    act_[:, :5] = np.random.default_rng(0).integers(0, 2, (3, 5))
    _, _, _, (bern, _) = action_nll(out, act_)
    assert bern == pytest.approx(5 * math.log(2), abs=1e-14)
    out = np.zeros((1, 7))
    out[0, 0] = 20.0
    a = np.zeros((1, 6))
    a[0, 0] = 1.0
    z = out[:, :5]
    term = np.logaddexp(0, z) - a[:, :5] * z
    assert term[0, 0] < 1e-8
    loss, _, per, (b, g) = action_nll(out, a)
    assert per[0] == pytest.approx(b + g)


def test_log_std_clamp_floor_and_gradient_mask():
    raw = np.array([-50.0, 50.0, 0.5])
    nll, g_mu, g_ls = gaussian_nll(np.zeros(3), raw, np.zeros(3))
    assert nll[0] == LOG_STD_MIN + HALF_LOG_2PI
    assert nll[1] == LOG_STD_MAX + HALF_LOG_2PI
    assert g_ls[0] == 0.0 and g_ls[1] == 0.0 and g_ls[2] != 0.0
    assert nll_floor("subgoal") == 2 * (LOG_STD_MIN + HALF_LOG_2PI)
    assert nll_floor("action") == LOG_STD_MIN + HALF_LOG_2PI


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_nll_decomposition_bounds(seed):
    rng = np.random.default_rng(seed)
    out = rng.normal(0, 10, (16, 7))
    a = np.concatenate([rng.integers(0, 2, (16, 5)), rng.uniform(-1, 1, (16, 1))], axis=1)
    loss, _, per, (b, g) = action_nll(out, a)
    assert b >= 0.0
    assert g >= nll_floor("action")
    assert loss == pytest.approx(b + g, rel=1e-12, abs=1e-12)
    s = subgoal_nll(rng.normal(0, 10, (16, 4)), rng.uniform(0, 1, (16, 2)))[2]
    assert (s >= nll_floor("subgoal")).all()


def test_non_finite_reports_batch_index():
    out = np.zeros((4, 7))
    out[2, 5] = np.nan
    with pytest.raises(NonFiniteLossError, match="batch index 2"):
        action_nll(out, np.zeros((4, 6)))
    out = np.zeros((3, 4))
    out[1, 0] = np.inf
    with pytest.raises(NonFiniteLossError, match="batch index 1"):
        subgoal_nll(out, np.zeros((3, 2)))


def test_decode_example():
    out = np.array([[3.0, -3.0, -3.0, -3.0, -3.0, 0.2, 0.0]])
    a = Action.from_array(decode_actions(out)[0])
    assert a == Action(True, False, False, False, False, 0.2)
    assert decode_actions(np.array([[0, 0, 0, 0, 0, 7.0, 0]]))[0, 5] == 1.0


# -- conditioning ---------------------------------------------------------------

@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(-math.pi, math.pi),
       st.floats(0.0, 20.0), st.floats(0.0, 20.0))
@settings(max_examples=100, deadline=None)
def test_condition_bearing(px, py, heading, gx, gy):
    obs = np.zeros((1, OBS_DIM))
    obs[0, :4] = px, py, math.cos(heading), math.sin(heading)
    x = condition(obs, np.array([[gx, gy]]), (20.0, 20.0))
    assert x.shape == (1, COND_DIM)
    dx, dy = gx - px * 20.0, gy - py * 20.0
    r = math.hypot(dx, dy)
    assert x[0, OBS_DIM:OBS_DIM + 2] == pytest.approx([gx / 20.0, gy / 20.0])
    assert x[0, -1] == pytest.approx(min(r, 10.0) / 10.0, abs=1e-12)
    if r > 1e-6:
        bearing = math.atan2(dy, dx) - heading
        assert x[0, OBS_DIM + 2] == pytest.approx(math.cos(bearing), abs=1e-9)
        assert x[0, OBS_DIM + 3] == pytest.approx(math.sin(bearing), abs=1e-9)


# -- gradients --------------------------------------------------------------------

def _rel_err(a, b):
    # normwise: coordinates with near-zero gradient would otherwise measure FD truncation noise
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b))


def _fd(loss_fn, params, h=1e-4):
    out = np.empty_like(params)
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = h
        out[i] = (loss_fn(params + e) - loss_fn(params - e)) / (2 * h)
    return out


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_gradients_fd(data, seed):
    hg, gc = small_models(seed)
    b = sample_hier_batch(data, 6, 5, 15.0, 0.5, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 10)
    hg.high_params = hg.high_params + 0.05 * rng.standard_normal(hg.high_params.shape)
    _, g = high_loss(hg, b.high)
    fd = _fd(lambda p: high_loss(HGCBCModel(hg.high_spec, p, hg.low_spec, hg.low_params), b.high)[0],
             hg.high_params)
    assert _rel_err(g, fd) < 1e-4
    _, g = low_loss(hg, b.low)
    fd = _fd(lambda p: low_loss(HGCBCModel(hg.high_spec, hg.high_params, hg.low_spec, p), b.low)[0],
             hg.low_params)
    assert _rel_err(g, fd) < 1e-4
    _, g = flat_loss(gc, b)
    fd = _fd(lambda p: flat_loss(GCBCModel(gc.spec, p), b)[0], gc.params)
    assert _rel_err(g, fd) < 1e-4


# -- acting ---------------------------------------------------------------------

def test_act_deterministic_and_replan(data):
    hg, gc = small_models(3)
    obs = data.episodes[0].obs[:3]
    goal = np.array(data.episodes[0].goal)
    assert act(hg, obs[0], goal, 0) == act(hg, obs[0], goal, 0)
    assert act(gc, obs[0], goal, 4) == act(gc, obs[0], goal, 4)
    mem = {}
    act(hg, obs[0], goal, 0, mem)
    first = mem["subgoal"].copy()
    act(hg, obs[1], goal, 1, mem)
    assert np.array_equal(mem["subgoal"], first)  # replan_every = k = 5
    every = HGCBCModel(hg.high_spec, hg.high_params, hg.low_spec, hg.low_params, k=5, replan_every=1)
    mem = {}
    act(every, obs[0], goal, 0, mem)
    act(every, obs[1], goal, 1, mem)
    assert not np.array_equal(mem["subgoal"], first)


def test_batched_policy_matches_act(data):
    hg, gc = small_models(4)
    ep = data.episodes[1]
    goal = np.array(ep.goal)
    for model in (hg, gc):
        pol = policy_from_model(model)
        pol.reset(1)
        mem = {}
        for t in range(7):
            a = pol.act_batch(ep.obs[t][None], goal[None], t)[0]
            assert Action.from_array(a) == act(model, ep.obs[t], goal, t, mem)


def test_k_validation():
    hg, _ = small_models()
    with pytest.raises(ValueError):
        HGCBCModel(hg.high_spec, hg.high_params, hg.low_spec, hg.low_params, k=0)


# -- training -------------------------------------------------------------------

def test_train_zero_steps_noop(data):
    hg, gc = small_models(5)
    new, trace = train(hg, data, steps=0, seed=1)
    assert np.array_equal(new.high_params, hg.high_params) and np.array_equal(new.low_params, hg.low_params)
    assert trace == {"high": [], "low": []}
    new, _ = train(gc, data, steps=0)
    assert np.array_equal(new.params, gc.params)


def test_train_deterministic(data):
    hg, _ = small_models(6)
    a, ta = train(hg, data, steps=30, seed=4, config=TrainConfig(trace_every=10))
    b, tb = train(hg, data, steps=30, seed=4, config=TrainConfig(trace_every=10))
    assert a.high_params.tobytes() == b.high_params.tobytes()
    assert a.low_params.tobytes() == b.low_params.tobytes()
    assert ta == tb and len(ta["low"]) == 3
    c, _ = train(hg, data, steps=30, seed=5)
    assert not np.array_equal(a.low_params, c.low_params)


def test_training_reduces_loss(data):
    _, gc = small_models(7)
    hg = make_hgcbc("SimpleTown", 7)
    _, trace = train(hg, data, steps=600, seed=0, config=TrainConfig(trace_every=100))
    for level in ("high", "low"):
        assert trace[level][-1] < trace[level][0]


def test_train_empty_dataset_rejected(data):
    from contnav.datasets import Dataset

    hg, _ = small_models()
    with pytest.raises(ValueError):
        train(hg, Dataset("S-BASE", []), steps=1)


def test_save_load_roundtrip(tmp_path, data):
    hg, gc = small_models(8)
    for model, name in ((hg, "h"), (gc, "g")):
        save_model(model, tmp_path / name)
        back = load_model(tmp_path / name)
        assert type(back) is type(model)
        obs = data.episodes[0].obs[0]
        goal = data.episodes[0].goal
        assert act(back, obs, goal, 0) == act(model, obs, goal, 0)
    back = load_model(tmp_path / "h")
    assert back.k == hg.k and back.replan_every == hg.replan_every
    assert np.array_equal(back.high_params, hg.high_params)
