import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import truncnorm

from contnav import nn


def naive_forward(spec, flat, x):
    """Row-by-row transcription of the residual block network."""
    v = nn.unflatten(flat, nn.mlp_layout(spec))
    out = []
    for row in x:
        h = row @ v["in.W"] + v["in.b"]
        for i in range(spec.n_hidden_blocks):
            p = f"blk{i}."
            z = h @ v[p + "W1"] + v[p + "b1"]
            if spec.layernorm:
                z = (z - z.mean()) / math.sqrt(z.var() + nn.LN_EPS) * v[p + "ln.g"] + v[p + "ln.b"]
            a = np.array([t * 0.5 * (1.0 + math.erf(t / math.sqrt(2.0))) for t in z])
            o = a @ v[p + "W2"] + v[p + "b2"]
            h = h + o if spec.residual else o
        out.append(h @ v["out.W"] + v["out.b"])
    return np.array(out)


def _random_params(spec, seed):
    p = nn.init_params(spec, seed, scale=1.0)
    rng = np.random.default_rng(seed + 1)
    # perturb biases and LN params so every path carries gradient
    return p.data + 0.1 * rng.standard_normal(p.data.shape)


SPECS = [
    nn.MLPSpec(5, 3, 8, 2),
    nn.MLPSpec(4, 2, 6, 1, residual=False),
    nn.MLPSpec(3, 4, 7, 2, layernorm=False),
    nn.MLPSpec(6, 1, 5, 0),
]


@pytest.mark.parametrize("spec", SPECS)
def test_forward_matches_naive(spec):
    flat = _random_params(spec, 3)
    x = np.random.default_rng(0).standard_normal((9, spec.input_dim))
    y, _ = nn.forward(spec, flat, x)
    assert np.allclose(y, naive_forward(spec, flat, x), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("spec", SPECS)
def test_backward_finite_differences(spec):
    flat = _random_params(spec, 7)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, spec.input_dim))
    gout = rng.standard_normal((4, spec.output_dim))
    y, tape = nn.forward(spec, flat, x)
    grad = nn.backward(spec, flat, tape, gout)
    h = 1e-5
    fd = np.empty_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        fd[i] = ((nn.forward(spec, flat + e, x)[0] - nn.forward(spec, flat - e, x)[0]) * gout).sum() / (2 * h)
    assert np.allclose(grad, fd, rtol=1e-6, atol=1e-8)


def test_lateral_gradients_finite_differences():
    spec = nn.MLPSpec(3, 2, 5, 2)
    flat = _random_params(spec, 2)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 3))
    lat = [rng.standard_normal((3, 5)) for _ in range(2)]
    gout = rng.standard_normal((3, 2))
    _, tape = nn.forward(spec, flat, x, lat)
    _, gz = nn.backward(spec, flat, tape, gout, return_lateral_grads=True)
    h = 1e-6
    for b in range(2):
        for idx in [(0, 0), (2, 4), (1, 2)]:
            up = [l.copy() for l in lat]
            dn = [l.copy() for l in lat]
            up[b][idx] += h
            dn[b][idx] -= h
            fd = ((nn.forward(spec, flat, x, up)[0] - nn.forward(spec, flat, x, dn)[0]) * gout).sum() / (2 * h)
            assert gz[b][idx] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_gelu_values():
    assert nn.gelu(np.array(1.0)) == pytest.approx(0.8413447460685429, abs=1e-15)
    assert nn.gelu(np.array(0.0)) == 0.0
    x = np.linspace(-4, 4, 81)
    h = 1e-6
    assert np.allclose(nn.gelu_grad(x), (nn.gelu(x + h) - nn.gelu(x - h)) / (2 * h), atol=1e-8)


def test_layer_norm_backward_fd():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 6))
    gain, bias = rng.standard_normal(6), rng.standard_normal(6)
    gy = rng.standard_normal((3, 6))
    _, xhat, inv = nn.layer_norm(x, gain, bias)
    gx, _, _ = nn.layer_norm_backward(gy, xhat, inv, gain)
    h = 1e-6
    for idx in [(0, 0), (1, 3), (2, 5)]:
        e = np.zeros_like(x)
        e[idx] = h
        fd = ((nn.layer_norm(x + e, gain, bias)[0] - nn.layer_norm(x - e, gain, bias)[0]) * gy).sum() / (2 * h)
        assert gx[idx] == pytest.approx(fd, rel=1e-6)


def test_init_statistics():
    spec = nn.MLPSpec(200, 50, 256, 1)
    p = nn.init_params(spec, 0).views()
    trunc_std = truncnorm(-2, 2).std()
    for name in ("in.W", "blk0.W1", "out.W"):
        w = p[name]
        want = math.sqrt(nn.INIT_SCALE / w.shape[0]) * trunc_std
        assert w.std() == pytest.approx(want, rel=0.03)
        assert np.abs(w).max() <= 2 * math.sqrt(nn.INIT_SCALE / w.shape[0])
    assert (p["blk0.ln.g"] == 1).all() and (p["blk0.b1"] == 0).all()


def test_init_deterministic():
    spec = nn.MLPSpec(4, 2, 8, 2)
    assert np.array_equal(nn.init_params(spec, [3, 1]).data, nn.init_params(spec, [3, 1]).data)
    assert not np.array_equal(nn.init_params(spec, 1).data, nn.init_params(spec, 2).data)


def test_param_count():
    spec = nn.MLPSpec(13, 7, 64, 3)
    H = 64
    want = 13 * H + H + 3 * (2 * H * H + 4 * H) + H * 7 + 7
    assert nn.param_count(spec) == want


def test_adam_matches_transcription():
    rng = np.random.default_rng(0)
    p = rng.standard_normal(10)
    st_ = nn.AdamState.zeros(10, lr=1e-2)
    m = np.zeros(10)
    v = np.zeros(10)
    ref = p.copy()
    for t in range(1, 6):
        g = rng.standard_normal(10)
        p, st_ = nn.adam_step(p, g, st_)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p, ref, rtol=1e-14, atol=1e-15)
    assert st_.step == 5


def test_adam_rejects_non_finite():
    p = np.zeros(4)
    g = np.array([0.0, np.nan, 1.0, 0.0])
    with pytest.raises(nn.NonFiniteError, match="coordinate 1"):
        nn.adam_step(p, g, nn.AdamState.zeros(4))


def test_adam_leaves_inputs():
    p = np.ones(3)
    s = nn.AdamState.zeros(3)
    nn.adam_step(p, np.ones(3), s)
    assert (p == 1).all() and s.step == 0 and (s.m == 0).all()


def test_checkpoint_roundtrip(tmp_path):
    spec = nn.MLPSpec(4, 3, 8, 2)
    p = nn.init_params(spec, 5)
    path = tmp_path / "w.cnpv"
    nn.save_params(path, p, {"k": 1})
    back, meta = nn.load_params(path)
    assert np.array_equal(back.data, p.data) and back.layout == p.layout and meta == {"k": 1}
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        nn.load_params(path)


def test_layout_views_write_through():
    layout = nn.Layout.build([("a", (2, 3)), ("b", (4,))])
    flat = np.zeros(layout.size)
    layout.views(flat)["b"][:] = 7
    assert layout.size == 10 and (flat[6:] == 7).all()
    with pytest.raises(ValueError):
        layout.views(np.zeros(9))
    d = nn.unflatten(np.arange(10.0), layout)
    assert np.array_equal(nn.flatten(d, layout), np.arange(10.0))


def test_bad_input_shape():
    spec = nn.MLPSpec(4, 3, 8, 1)
    with pytest.raises(ValueError):
        nn.forward(spec, nn.init_params(spec, 0), np.zeros((2, 5)))
    with pytest.raises(ValueError):
        nn.MLPSpec(0, 1)


@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_batch_rows_independent(n, seed):
    spec = nn.MLPSpec(3, 2, 6, 2)
    flat = _random_params(spec, 11)
    x = np.random.default_rng(seed).standard_normal((n, 3))
    y, _ = nn.forward(spec, flat, x)
    for i in range(n):
        assert np.allclose(y[i], nn.forward(spec, flat, x[i:i + 1])[0][0], rtol=1e-13, atol=1e-13)
