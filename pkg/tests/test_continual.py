import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from contnav import continual as cl
from contnav.continual import (
    KINDS, LEVELS, PNNNet, StrategyError, StreamSpec, cosine_diversity, cosine_diversity_grad,
    empirical_fisher, estimate_fisher_diag, hispo_sample_alphas, level_params_for_task, load_strategy,
    mix, new_state, pnn_column_output, policy_for_task, policy_model, save_strategy, task_seed, train_next,
)
from contnav.datasets import generate_dataset, sample_hier_batch
from contnav.maze_sim import get_maze
from contnav.metrics import SuccessMatrix, compute_bwt, evaluate_success
from contnav.policies import TrainConfig, make_hgcbc, policy_from_model, train

CFG = TrainConfig(steps=30, batch_size=16)
TINY = dict(width=8, n_blocks=2)
HYPER = {"fisher_samples": 64, "val_samples": 64, "M": 8}


@pytest.fixture(scope="module")
def stream_data():
    names = ("S-BASE", "S-OXO", "S-BASE", "S-OOX")
    cache = {n: generate_dataset(get_maze(n), 12, 0.05, seed=1) for n in set(names)}
    return [cache[n] for n in names]


def run(kind, datasets, seed=0, hyper=None, cfg=CFG, n=None):
    s = new_state(kind, "SimpleTown", seed, {**HYPER, **(hyper or {})}, **TINY)
    for i, d in enumerate(datasets[:n]):
        s = train_next(s, i, d, cfg)
    return s


@pytest.fixture(scope="module")
def probes():
    rng = np.random.default_rng(0)
    obs = rng.uniform(0, 1, (100, 13))
    ang = rng.uniform(-math.pi, math.pi, 100)
    obs[:, 2], obs[:, 3] = np.cos(ang), np.sin(ang)
    return obs, rng.uniform(0, 20, (100, 2))


def outputs(policy, probes):
    obs, goals = probes
    policy.reset(len(obs))
    return policy.act_batch(obs, goals, 0), policy._sub.copy()


# -- seeds, streams -------------------------------------------------------------

def test_task_seed_distinct():
    seeds = {task_seed(s, t) for s in range(5) for t in range(5)}
    assert len(seeds) == 25 and task_seed(3, 1) == task_seed(3, 1)


def test_stream_spec_validation():
    assert StreamSpec("x", ("S-BASE", "S-OXO")).family == "SimpleTown"
    with pytest.raises(KeyError):
        StreamSpec("x", ("S-NOPE",))
    with pytest.raises(ValueError):
        StreamSpec("x", ("S-BASE", "A-HOOO")).family
    with pytest.raises(ValueError):
        new_state("XYZ")
    with pytest.raises(ValueError):
        new_state("EWC", hyper={"lambda": 1})


# -- simplex / diversity --------------------------------------------------------

@given(st.integers(1, 8), st.integers(1, 40), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_alphas_on_simplex(n, M, seed):
    a = hispo_sample_alphas(n, M, seed)
    assert a.shape == (M + n + 1, n)
    assert (a >= 0).all()
    assert np.all(np.abs(a.sum(axis=1) - 1.0) <= 1e-12)


def test_alpha_mean_is_barycenter():
    a = hispo_sample_alphas(4, 20000, 1)[:20000]
    assert np.allclose(a.mean(axis=0), 0.25, atol=0.005)


def test_cosine_examples():
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 2.0])
    assert cosine_diversity([e1, e2]) == 0.0
    assert cosine_diversity([e1, 3 * e1]) == pytest.approx(1.0)
    assert cosine_diversity([e1, -e1]) == pytest.approx(-1.0)
    assert cosine_diversity([e1, e2, e1]) == pytest.approx(1.0 / 3.0)
    with pytest.raises(ValueError):
        cosine_diversity([e1])
    with pytest.raises(ValueError):
        cosine_diversity([e1, np.zeros(2)])


def test_cosine_gradient_fd():
    rng = np.random.default_rng(3)
    anchors = [rng.standard_normal(6) for _ in range(4)]
    for idx in range(4):
        g = cosine_diversity_grad(anchors, idx)
        fd = np.empty(6)
        for k in range(6):
            up = [a.copy() for a in anchors]
            dn = [a.copy() for a in anchors]
            up[idx][k] += 1e-6
            dn[idx][k] -= 1e-6
            fd[k] = (cosine_diversity(up) - cosine_diversity(dn)) / 2e-6
        assert np.allclose(g, fd, atol=1e-8)


def test_mix_convex_combination():
    a = [np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([2.0, 2.0])]
    assert np.array_equal(mix(a, [1.0]), a[0])
    assert np.allclose(mix(a, [0.2, 0.3, 0.5]), [1.2, 1.3])


# -- Fisher -----------------------------------------------------------------------

def test_gaussian_fisher_toy():
    """Closed form for N(mu, sigma): F_mu = 1/sigma^2, F_sigma = 2/sigma^2."""
    mu, sigma = 0.7, 1.6
    x = np.random.default_rng(0).normal(mu, sigma, 100_000)

    def grad(i):
        d = x[i] - mu
        return np.array([-d / sigma ** 2, 1.0 / sigma - d * d / sigma ** 3])

    f = empirical_fisher(grad, len(x))
    assert f[0] == pytest.approx(1.0 / sigma ** 2, rel=0.05)
    assert f[1] == pytest.approx(2.0 / sigma ** 2, rel=0.05)


def test_model_fisher_is_mean_squared_sample_grad(stream_data):
    from contnav.policies import high_loss, low_loss

    model = make_hgcbc("SimpleTown", 0, **TINY)
    f = estimate_fisher_diag(model, stream_data[0], 16, seed=5)
    assert (f["high"] >= 0).all() and (f["low"] >= 0).all()
    assert f["high"].shape == model.high_params.shape
    b = sample_hier_batch(cl._index(stream_data[0]), 16, model.k, 15.0, 0.5, np.random.default_rng([5, 3]))
    acc_h = sum(high_loss(model, (b.obs[i:i + 1], b.goal[i:i + 1], b.high_subgoal[i:i + 1]))[1] ** 2
                for i in range(16)) / 16
    acc_l = sum(low_loss(model, (b.obs[i:i + 1], b.low_subgoal[i:i + 1], b.action[i:i + 1]))[1] ** 2
                for i in range(16)) / 16
    assert np.allclose(f["high"], acc_h, rtol=1e-12, atol=1e-15)
    assert np.allclose(f["low"], acc_l, rtol=1e-12, atol=1e-15)


def test_quadratic_penalty_zero_at_anchor():
    rng = np.random.default_rng(0)
    center = rng.standard_normal(50)
    pen = cl._quadratic_penalty(0.7, rng.uniform(0, 3, 50), center)
    v, g = pen(center.copy())
    assert v == 0.0 and not g.any()
    theta = center + rng.standard_normal(50)
    v, g = pen(theta)
    h = 1e-6
    e = np.zeros(50)
    e[4] = h
    assert g[4] == pytest.approx((pen(theta + e)[0] - pen(theta - e)[0]) / (2 * h), rel=1e-6)


# -- strategy behavior --------------------------------------------------------------

def test_frz_never_changes(stream_data, probes):
    s = run("FRZ", stream_data)
    first = run("FRZ", stream_data, n=1)
    for lv in LEVELS:
        assert s.current[lv].tobytes() == first.current[lv].tobytes()
    assert s.train_minutes[1:] == [0.0, 0.0, 0.0]
    out = [outputs(policy_for_task(s, j, i), probes)[0] for i in range(1, 5) for j in range(4)]
    assert all(np.array_equal(out[0], o) for o in out)


def test_frz_bwt_zero(stream_data):
    s = run("FRZ", stream_data)
    m = SuccessMatrix(4)
    names = ("S-BASE", "S-OXO", "S-BASE", "S-OOX")
    for i in range(4):
        for j in range(i + 1):
            m.sigma[i, j] = evaluate_success(policy_for_task(s, j, i + 1), get_maze(names[j]), 5, 100)
    assert compute_bwt(m) == 0.0


def test_ewc_unit_fisher_equals_l2(stream_data):
    ewc = run("EWC", stream_data, hyper={"fisher": "unit", "lam": 2.5}, n=3)
    l2 = run("L2", stream_data, hyper={"lam": 2.5}, n=3)
    for lv in LEVELS:
        assert ewc.current[lv].tobytes() == l2.current[lv].tobytes()
        assert (ewc.fisher_diag[lv] == 1.0).all()


def test_ewc_regularizes_toward_anchor(stream_data):
    ft = run("FT1", stream_data, n=2)
    ewc = run("EWC", stream_data, hyper={"fisher": "unit", "lam": 1e4}, n=2)
    first = run("FT1", stream_data, n=1)
    for lv in LEVELS:
        d_ft = np.linalg.norm(ft.current[lv] - first.current[lv])
        d_ewc = np.linalg.norm(ewc.current[lv] - first.current[lv])
        assert d_ewc < d_ft


def test_pnn_columns_immutable(stream_data, probes):
    states = [run("PNN", stream_data, n=k) for k in (1, 2, 3, 4)]
    final = states[-1]
    obs, goals = probes
    from contnav.policies import condition

    x = condition(obs, goals, (20.0, 20.0))
    for c in range(3):
        for lv in LEVELS:
            before = states[c].columns[lv]
            after = final.columns[lv]
            assert after[c].tobytes() == before[c].tobytes()
            assert not after[c].flags.writeable
            spec = final.specs[lv]
            y0 = pnn_column_output(spec, before, c, x)
            y1 = pnn_column_output(spec, after, c, x)
            assert y0.tobytes() == y1.tobytes()
    assert [len(final.columns[lv]) for lv in LEVELS] == [4, 4]


def test_pnn_gradient_fd(stream_data):
    s = run("PNN", stream_data, n=2)
    spec = s.specs["low"]
    net = PNNNet(spec, s.columns["low"][:1])
    params = s.columns["low"][1].copy()
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, spec.input_dim))
    gout = rng.standard_normal((3, spec.output_dim))
    out, tape = net.forward(params, x)
    g = net.backward(params, tape, gout)
    idx = rng.choice(params.size, 40, replace=False)
    idx = np.append(idx, np.arange(params.size - 5, params.size))  # lateral weights
    for i in idx:
        e = np.zeros_like(params)
        e[i] = 1e-6
        fd = ((net.predict(params + e, x) - net.predict(params - e, x)) * gout).sum() / 2e-6
        assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_scn_snapshot_equals_standalone(stream_data):
    cl._FRESH_CACHE.clear()
    s = run("SCN", stream_data)
    for j in (0, 1, 3):
        ts = task_seed(0, j)
        model = make_hgcbc("SimpleTown", ts, **TINY)
        alone, _ = train(model, stream_data[j], seed=ts, config=CFG)
        assert s.snapshots[j]["high"].tobytes() == alone.high_params.tobytes()
        assert s.snapshots[j]["low"].tobytes() == alone.low_params.tobytes()


def test_fresh_memo_is_transparent(stream_data):
    cl._FRESH_CACHE.clear()
    a = run("SC1", stream_data, n=2)
    b = run("SC1", stream_data, n=2)  # served from the memo
    cl._FRESH_CACHE.clear()
    c = run("SCN", stream_data, n=2)
    for lv in LEVELS:
        assert a.current[lv].tobytes() == b.current[lv].tobytes() == c.snapshots[1][lv].tobytes()
    # a memo hit is charged the minutes of the original fit
    assert all(abs(x - y) < 0.01 for x, y in zip(a.train_minutes, b.train_minutes))
    assert all(y > 0 for y in b.train_minutes)


def test_task_identity_mapping(stream_data):
    s = run("SCN", stream_data, n=3)
    assert level_params_for_task(s, 1, 3)["low"] is s.snapshots[1]["low"]
    assert level_params_for_task(s, 3, 3)["low"] is s.snapshots[2]["low"]  # unseen task: latest
    assert level_params_for_task(s, 2, 1)["low"] is s.snapshots[0]["low"]
    with pytest.raises(StrategyError):
        level_params_for_task(s, 0, 4)


def test_hispo_prune_always_with_eps_one(stream_data):
    s = run("HiSPO", stream_data, hyper={"eps_h": 1.0, "eps_l": 1.0})
    assert len(s.anchors_high) == 1 and len(s.anchors_low) == 1
    for entry in s.hispo_log[1:]:
        assert not entry["high"]["retained"] and not entry["low"]["retained"]
    assert s.param_ledger[-1]["inference"] == s.reference_count


def test_hispo_retains_strictly_better_with_eps_zero(stream_data):
    cfg = TrainConfig(steps=80, batch_size=32)
    s = run("HiSPO", stream_data, hyper={"eps_h": 0.0, "eps_l": 0.0}, cfg=cfg, n=2)
    for lv in LEVELS:
        e = s.hispo_log[1][lv]
        assert e["L_new"] < e["L_old"]
        assert e["retained"]
        assert len(s.anchors[lv]) == 2


def test_hispo_alphas_and_threshold(stream_data):
    s = run("HiSPO", stream_data, hyper={"eps_h": 0.05, "eps_l": 0.05})
    for lv in LEVELS:
        assert len(s.retained_alphas[lv]) == 4
        for a in s.retained_alphas[lv]:
            assert (a >= 0).all() and abs(a.sum() - 1.0) <= 1e-12
            assert len(a) <= len(s.anchors[lv])
        for entry in s.hispo_log[1:]:
            e = entry[lv]
            assert e["L_new"] <= e["L_old"]  # the old best alpha stays available
            assert e["retained"] == (e["L_new"] < 0.95 * e["L_old"])


def test_mem_ledger(stream_data):
    P = new_state("SC1", **TINY).reference_count
    want = {"SC1": (1, 1), "FT1": (1, 1), "FRZ": (1, 1), "RPL": (1, 1), "EWC": (1, 3), "L2": (1, 2),
            "SCN": (4, 4), "FTN": (4, 4)}
    for kind, (inf, trn) in want.items():
        s = run(kind, stream_data)
        assert s.param_ledger[-1] == {"inference": inf * P, "training": trn * P}
        assert len(s.param_ledger) == len(s.train_minutes) == 4
    pnn = run("PNN", stream_data)
    assert pnn.param_ledger[-1]["inference"] > 4 * P


def test_train_next_is_pure(stream_data):
    s0 = run("FT1", stream_data, n=1)
    snap = {lv: s0.current[lv].copy() for lv in LEVELS}
    s1 = train_next(s0, 1, stream_data[1], CFG)
    assert s0.tasks_seen == 1 and s1.tasks_seen == 2
    for lv in LEVELS:
        assert np.array_equal(s0.current[lv], snap[lv])
    with pytest.raises(StrategyError):
        train_next(s1, 1, stream_data[1], CFG)
    from contnav.datasets import Dataset

    with pytest.raises(StrategyError):
        train_next(s1, 2, Dataset("S-BASE", []), CFG)


def test_rpl_trains_on_union(stream_data):
    s = run("RPL", stream_data, n=3)
    assert [d.maze_name for d in s.replay] == ["S-BASE", "S-OXO", "S-BASE"]


@pytest.mark.parametrize("kind", KINDS)
def test_checkpoint_roundtrip(tmp_path, stream_data, probes, kind):
    s = run(kind, stream_data, n=2)
    save_strategy(s, tmp_path / kind)
    back = load_strategy(tmp_path / kind)
    assert back.param_ledger == s.param_ledger and back.train_minutes == s.train_minutes
    assert back.hyper == s.hyper and back.tasks_seen == 2
    for j in range(3):
        a = outputs(policy_for_task(s, j), probes)
        b = outputs(policy_for_task(back, j), probes)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    if kind in ("EWC", "L2"):
        for lv in LEVELS:
            assert np.array_equal(back.anchor_params[lv], s.anchor_params[lv])
    if kind == "FT1":
        # a restored state keeps training exactly like the original
        n1 = train_next(s, 2, stream_data[2], CFG)
        n2 = train_next(back, 2, stream_data[2], CFG)
        assert n1.current["low"].tobytes() == n2.current["low"].tobytes()
