import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oarl import net
from oarl.net import AdamState, MlpArch, MlpParams


def linear(w, b):
    return MlpParams([np.asarray(w, np.float64)], [np.asarray(b, np.float64)])


def test_init_deterministic_and_seeded():
    arch = MlpArch(5, 2, (8,))
    a, b, c = net.init(arch, 1), net.init(arch, 1), net.init(arch, 2)
    assert a.digest() == b.digest() != c.digest()
    assert all(np.all(bias == 0) for bias in a.biases)
    bound = np.sqrt(6 / 5)
    assert np.abs(a.weights[0]).max() <= bound


def test_init_shapes():
    p = net.init(MlpArch(4, 3, ()), 0)
    assert p.weights[0].shape == (3, 4) and p.biases[0].shape == (3,)
    assert p.arch == MlpArch(4, 3, ())


def test_zero_width_rejected():
    with pytest.raises(net.ShapeError):
        MlpArch(4, 0)
    with pytest.raises(net.ShapeError):
        MlpArch(4, 2, (8, 0))


def test_forward_zero_params():
    p = net.init(MlpArch(3, 2, (4,)), 0)
    p = MlpParams([np.zeros_like(w) for w in p.weights], [np.zeros_like(b) for b in p.biases])
    assert np.all(net.forward(p, np.ones((5, 3))) == 0)


def test_forward_single_layer_hand_computation():
    p = linear([[1.0, 2.0], [3.0, -1.0]], [0.5, -0.5])
    q = net.forward(p, np.array([[1.0, 1.0], [2.0, 0.0]]))
    assert np.allclose(q, [[3.5, 1.5], [2.5, 5.5]])


def test_forward_identical_rows():
    p = net.init(MlpArch(6, 3), 4)
    x = np.tile(np.random.default_rng(0).normal(size=6), (4, 1)).astype(np.float32)
    q = net.forward(p, x)
    assert np.all(q == q[0])


def test_forward_shape_error():
    p = net.init(MlpArch(6, 3), 4)
    with pytest.raises(net.ShapeError):
        net.forward(p, np.zeros((2, 5)))


def test_final_bias_shift():
    p = net.init(MlpArch(6, 3, (8,)), 4, np.float64)
    x = np.random.default_rng(1).normal(size=(7, 6))
    q0 = net.forward(p, x)
    p.biases[-1] += 2.5
    assert np.allclose(net.forward(p, x) - q0, 2.5, atol=1e-12)


def test_backward_zero_upstream():
    p = net.init(MlpArch(6, 3, (8,)), 4)
    grads = net.backward(p, np.ones((2, 6)), np.zeros((2, 3)))
    assert all(np.all(g == 0) for g in grads)


def test_backward_outer_product():
    p = linear(np.random.default_rng(0).normal(size=(3, 4)), np.zeros(3))
    x = np.array([[1.0, -2.0, 0.5, 3.0]])
    up = np.array([[0.2, -1.0, 4.0]])
    gw, gb = net.backward(p, x, up)
    assert np.allclose(gw, np.outer(up[0], x[0]))
    assert np.allclose(gb, up[0])


def test_backward_shape_error():
    p = net.init(MlpArch(6, 3), 0)
    with pytest.raises(net.ShapeError):
        net.backward(p, np.zeros((2, 6)), np.zeros((2, 4)))


def finite_difference(params, x, upstream, h=1e-4):
    out = []
    for arr in params.arrays():
        g = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + h
            plus = np.sum(upstream * net.forward(params, x))
            arr[i] = old - h
            minus = np.sum(upstream * net.forward(params, x))
            arr[i] = old
            g[i] = (plus - minus) / (2 * h)
        out.append(g)
    return out


def max_relative_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    arch = MlpArch(int(rng.integers(1, 7)), int(rng.integers(1, 5)), tuple(int(h) for h in rng.integers(1, 9, size=rng.integers(0, 3))))
    p = net.init(arch, seed, np.float64)
    for b in p.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    x = rng.normal(size=(int(rng.integers(1, 5)), arch.input_dim))
    up = rng.normal(size=(len(x), arch.output_dim))
    assert max_relative_error(net.backward(p, x, up), finite_difference(p, x, up)) < 1e-4


def test_clip_examples():
    g = [np.array([6.0, 8.0])]
    clipped = net.clip_global_norm(g, 5.0)
    assert net.global_norm(clipped) == pytest.approx(5.0)
    assert np.allclose(clipped[0], [3.0, 4.0])
    small = [np.array([0.6, 0.8])]
    assert net.clip_global_norm(small, 5.0)[0] is small[0]
    zero = [np.zeros(3)]
    assert np.all(net.clip_global_norm(zero, 5.0)[0] == 0)
    with pytest.raises(ValueError):
        net.clip_global_norm(g, 0.0)


@settings(max_examples=50, deadline=None)
@given(
    arrays=st.lists(hnp.arrays(np.float64, st.integers(1, 5), elements=st.floats(-1e3, 1e3)), min_size=1, max_size=4),
    max_norm=st.floats(1e-3, 1e3),
)
def test_clip_idempotent_and_bounded(arrays, max_norm):
    once = net.clip_global_norm(arrays, max_norm)
    twice = net.clip_global_norm(once, max_norm)
    assert net.global_norm(once) <= max_norm * (1 + 1e-9)
    for a, b in zip(once, twice):
        assert np.allclose(a, b, rtol=1e-9, atol=1e-12)


def test_adam_zero_gradient():
    p = net.init(MlpArch(3, 2, (4,)), 0)
    before = p.digest()
    s = AdamState.zeros_like(p)
    net.adam_step(p, [np.zeros_like(a) for a in p.arrays()], s, 0.1)
    assert p.digest() == before and s.t == 1


def test_adam_first_step_is_signed_lr():
    p = net.init(MlpArch(3, 2, ()), 0, np.float64)
    w0 = p.weights[0].copy()
    g = np.random.default_rng(0).normal(size=w0.shape)
    s = AdamState.zeros_like(p)
    net.adam_step(p, [g, np.zeros(2)], s, 0.01)
    assert np.allclose(p.weights[0] - w0, -0.01 * np.sign(g), atol=1e-7)


def test_adam_is_stateful():
    g = [np.full((2, 3), 0.5), np.full(2, -0.2)]
    a = net.init(MlpArch(3, 2, ()), 0, np.float64)
    b = a.copy()
    sa, sb = AdamState.zeros_like(a), AdamState.zeros_like(b)
    net.adam_step(a, g, sa, 0.01)
    net.adam_step(a, g, sa, 0.01)
    net.adam_step(b, [2 * x for x in g], sb, 0.01)
    assert not np.allclose(a.weights[0], b.weights[0])


def test_adam_rejects_non_finite():
    p = net.init(MlpArch(3, 2), 0)
    bad = [np.array([[np.nan, 0, 0], [0, 0, 0]], np.float32), np.zeros(2, np.float32)]
    with pytest.raises(net.NonFiniteGradientError, match="1 non-finite"):
        net.adam_step(p, bad, AdamState.zeros_like(p), 0.1)


def test_envelope_round_trip(tmp_path):
    arrays = [np.arange(6, dtype=np.float32).reshape(2, 3), np.array([1.5, -2.0], np.float64)]
    net.write_envelope(tmp_path / "x", {"kind": "test", "n": 2}, arrays)
    assert (tmp_path / "x").read_bytes()[:5] == b"OARLQ"
    meta, back = net.read_envelope(tmp_path / "x")
    assert meta == {"kind": "test", "n": 2}
    for a, b in zip(arrays, back):
        assert a.dtype == b.dtype and np.array_equal(a, b)
