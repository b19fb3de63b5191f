import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spavatar.deformation import apply_delta, euler_rotation_tensor
from spavatar.nn import autograd as ag
from spavatar.nn import (AdamState, AutoencoderSpec, CheckpointError, MlpSpec, NotScalar, ShapeMismatch, Tensor,
                         adam_step, autoencoder_forward, init_autoencoder, init_mlp, load_checkpoint,
                         mlp_forward, mlp_from_arrays, positional_encoding, save_checkpoint, scaled_softmax,
                         tree_softmax)
from spavatar.nn.checkpoint import pack_json, unpack_json


def fd_rel_error(f, x, h=1e-6, seed=0):
    """Largest relative gap between the autograd gradient and central differences."""
    x = np.array(x, dtype=np.float64)
    t = Tensor(x.copy(), requires_grad=True)
    (g,) = ag.grad(f(t), [t])
    num = np.zeros_like(x)
    flat, nflat = x.reshape(-1), num.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(Tensor(x)).item()
        flat[i] = old - h
        down = f(Tensor(x)).item()
        flat[i] = old
        nflat[i] = (up - down) / (2 * h)
    return np.abs(g - num).max() / max(np.abs(num).max(), 1e-8)


rng = np.random.default_rng(0)
A = rng.normal(size=(4, 3))
B = rng.normal(size=(4, 3))
W = rng.normal(size=(3, 5))
POS = rng.uniform(0.5, 2.0, size=(4, 3))

M62 = rng.normal(size=(6, 2))
M41 = rng.normal(size=(4, 1))

PRIMITIVES = {
    "add": lambda t: ag.tsum((t + B) * B),
    "sub": lambda t: ag.tsum((B - t) * B),
    "mul": lambda t: ag.tsum(t * t * B),
    "div": lambda t: ag.tsum(B / (t * t + 1.0)),
    "power": lambda t: ag.tsum((t * t + 1.0) ** 1.5),
    "exp": lambda t: ag.tsum(ag.exp(t) * B),
    "log": lambda t: ag.tsum(ag.log(t * t + 0.5)),
    "sqrt": lambda t: ag.tsum(ag.sqrt(t * t + 0.5)),
    "sin": lambda t: ag.tsum(ag.sin(t) * B),
    "cos": lambda t: ag.tsum(ag.cos(t) * B),
    "tanh": lambda t: ag.tsum(ag.tanh(t) * B),
    "sigmoid": lambda t: ag.tsum(ag.sigmoid(t) * B),
    "softplus": lambda t: ag.tsum(ag.softplus(t) * B),
    "affine": lambda t: ag.tsum(ag.tanh(t @ W + 0.3)),
    "mean": lambda t: ag.mean(t * t),
    "axis_sum": lambda t: ag.tsum(ag.tsum(t, axis=1) ** 2.0),
    "concat": lambda t: ag.tsum(ag.concat([t, t * t], axis=1) @ M62),
    "stack": lambda t: ag.tsum(ag.stack([t, ag.sin(t)], axis=0) ** 2.0),
    "getitem": lambda t: ag.tsum(t[1:3, :2] * t[[0, 0, 3]][:2, :2]),
    "transpose": lambda t: ag.tsum(ag.transpose(t) @ t),
    "reshape": lambda t: ag.tsum(ag.reshape(t, (3, 4)) @ M41),
    "broadcast": lambda t: ag.tsum(ag.broadcast_to(t[:1], (4, 3)) * B),
    "norm": lambda t: ag.tsum(ag.norm(t, axis=1)),
    "softmax": lambda t: ag.tsum(ag.softmax(t, axis=1, scale=3.0) * B),
    "encoding": lambda t: ag.tsum(positional_encoding(t, 3) ** 2.0),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradient(name):
    x = POS if name in ("log", "sqrt") else A
    assert fd_rel_error(PRIMITIVES[name], x) < 1e-6


def test_relu_gradient_away_from_kink():
    x = np.where(np.abs(A) < 0.1, 0.5, A)
    assert fd_rel_error(lambda t: ag.tsum(ag.relu(t) * B), x) < 1e-6


def test_matrix_blend_gradient():
    # rotation from Euler angles applied to normals, the blend used by the offset field
    n = rng.normal(size=(4, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)

    def f(theta):
        x, nn = apply_delta(Tensor(POS), Tensor(n), Tensor(np.zeros((4, 3))), theta)
        return ag.tsum(nn * B)

    assert fd_rel_error(f, 0.3 * A) < 1e-6
    assert fd_rel_error(lambda t: ag.tsum(euler_rotation_tensor(t) * 1.7), A) < 1e-6


def test_tree_softmax_gradient():
    parents = [-1, 0, 1, 1, 0]
    coeff = rng.normal(size=(3, 5))
    f = lambda t: ag.tsum(tree_softmax(t, parents, scale=2.0) * coeff)
    assert fd_rel_error(f, rng.normal(size=(3, 5))) < 1e-6


def test_tree_softmax_rows_sum_to_one():
    w = tree_softmax(Tensor(rng.normal(size=(50, 6))), [-1, 0, 0, 1, 1, 2]).data
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_grad_of_linear_form():
    x = rng.normal(size=5)
    w = Tensor(np.ones(5), requires_grad=True)
    (g,) = ag.grad(ag.tsum(w * x), [w])
    np.testing.assert_array_equal(g, x)


def test_unreachable_parameter_gets_zero():
    a, b = Tensor(np.ones(3), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    ga, gb = ag.grad(ag.tsum(a * a), [a, b])
    np.testing.assert_array_equal(gb, 0.0)


def test_backward_needs_scalar():
    with pytest.raises(NotScalar):
        (Tensor(np.ones(3), requires_grad=True) * 2.0).backward()


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_reused_node_accumulates():
    a = Tensor(np.array([2.0]), requires_grad=True)
    b = a * a
    (g,) = ag.grad(ag.tsum(b + b * b), [a])
    np.testing.assert_allclose(g, 2 * 2.0 + 4 * 2.0 ** 3)


# -- positional encoding -----------------------------------------------------

def test_encoding_at_origin():
    e = positional_encoding(np.zeros(3), 4)
    assert e.shape == (27,)
    np.testing.assert_array_equal(e[:3], 0.0)
    sins = np.concatenate([e[3 + 6 * l:6 + 6 * l] for l in range(4)])
    coss = np.concatenate([e[6 + 6 * l:9 + 6 * l] for l in range(4)])
    np.testing.assert_array_equal(sins, 0.0)
    np.testing.assert_array_equal(coss, 1.0)


def test_encoding_levels_zero_is_identity():
    x = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(positional_encoding(x, 0), x)


def test_encoding_closed_form():
    assert positional_encoding(np.array([0.5, 0, 0]), 1)[3] == pytest.approx(1.0)


def test_encoding_tensor_matches_array():
    x = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(positional_encoding(Tensor(x), 4).data, positional_encoding(x, 4))


# -- MLP -----------------------------------------------------------------------

def test_depth_one_zero_weights_outputs_bias():
    spec = MlpSpec(3, 2, 1, 8)
    net = mlp_from_arrays(spec, [np.zeros((3, 2)), np.array([1.5, -2.0])])
    np.testing.assert_array_equal(net(rng.normal(size=(4, 3))).data, np.tile([1.5, -2.0], (4, 1)))


def test_identity_linear_net():
    spec = MlpSpec(3, 3, 2, 3, activation="none")
    net = mlp_from_arrays(spec, [np.eye(3), np.zeros(3), np.eye(3), np.zeros(3)])
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(net(x).data, x)


def test_mlp_matches_straight_line_oracle():
    spec = MlpSpec(4, 2, 3, 6, skip_layers=(2,))
    net = init_mlp(spec, np.random.default_rng(1))
    x = rng.normal(size=(5, 4))
    w = net.arrays()
    h = np.logaddexp(0, x @ w[0] + w[1])
    h = np.logaddexp(0, h @ w[2] + w[3])
    out = np.concatenate([h, x], axis=1) @ w[4] + w[5]
    np.testing.assert_allclose(net(x).data, out, atol=1e-12)


def test_mlp_shape_errors():
    spec = MlpSpec(3, 2, 2, 4)
    net = init_mlp(spec, np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        net(np.zeros((2, 4)))
    with pytest.raises(ShapeMismatch):
        mlp_forward(spec, net.params[:2], np.zeros((2, 3)))
    with pytest.raises(ShapeMismatch):
        mlp_from_arrays(spec, [np.zeros((3, 4)), np.zeros(4), np.zeros((5, 2)), np.zeros(2)])


def test_mlp_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec(3, 2, 0, 4)
    with pytest.raises(ValueError):
        MlpSpec(3, 2, 3, 4, skip_layers=(3,))


def test_mlp_parameter_gradient():
    spec = MlpSpec(3, 2, 3, 5, skip_layers=(1,))
    net = init_mlp(spec, np.random.default_rng(2))
    x = rng.normal(size=(4, 3))
    w0 = net.params[0]

    def f(t):
        params = [t] + net.params[1:]
        return ag.tsum(mlp_forward(spec, params, x) ** 2.0)

    assert fd_rel_error(f, w0.data) < 1e-6


# -- softmax -------------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(scaled_softmax(np.full(7, 3.3), 20.0), 1 / 7)


def test_softmax_closed_form():
    assert scaled_softmax(np.array([1.0, 0.0]), 20.0)[0] == pytest.approx(1 / (1 + np.exp(-20.0)), abs=1e-15)


def test_softmax_rows_sum_to_one():
    p = scaled_softmax(rng.normal(scale=10, size=(1000, 17)), 20.0)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=10), st.floats(-100, 100))
def test_softmax_shift_invariance(logits, c):
    x = np.array(logits)
    a, b = scaled_softmax(x, 20.0), scaled_softmax(x + c, 20.0)
    assert np.argmax(a) == np.argmax(b) or np.isclose(a.max(), a[np.argmax(b)])


# -- Adam --------------------------------------------------------------------

def test_adam_zero_gradient():
    p = [Tensor(np.ones(3), requires_grad=True)]
    adam_step(AdamState.for_params(p), p, [np.zeros(3)])
    np.testing.assert_array_equal(p[0].data, 1.0)


def test_adam_first_step():
    p = [Tensor(np.zeros(2), requires_grad=True)]
    state = AdamState.for_params(p, lr=0.001)
    adam_step(state, p, [np.ones(2)])
    np.testing.assert_allclose(p[0].data, -0.001, rtol=1e-6)
    assert state.step == 1


def test_adam_per_parameter_rates():
    p = [Tensor(np.zeros(1), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)]
    adam_step(AdamState.for_params(p, lr=[1e-3, 1e-4]), p, [np.ones(1), np.ones(1)])
    np.testing.assert_allclose([p[0].data[0], p[1].data[0]], [-1e-3, -1e-4], rtol=1e-6)


def test_adam_converges_on_square():
    p = [Tensor(np.ones(1), requires_grad=True)]
    state = AdamState.for_params(p, lr=0.01)
    for _ in range(100):
        adam_step(state, p, ag.grad(ag.tsum(p[0] * p[0]), p))
    assert abs(p[0].data[0]) < 0.5


def test_adam_shape_mismatch():
    p = [Tensor(np.ones(2), requires_grad=True)]
    with pytest.raises(ShapeMismatch):
        adam_step(AdamState.for_params(p), p, [np.ones(3)])


# -- autoencoder -------------------------------------------------------------

def test_autoencoder_range_and_composition():
    enc, dec = init_autoencoder(AutoencoderSpec(decoder_width=32), np.random.default_rng(0))
    c = rng.random((50, 3))
    out = autoencoder_forward(enc, dec, c).data
    assert out.min() >= 0 and out.max() <= 1
    np.testing.assert_array_equal(dec(enc(c)).data, out)
    single = autoencoder_forward(enc, dec, c[0])
    np.testing.assert_allclose(single, out[0], atol=1e-14)


def test_autoencoder_overfits_palette():
    from spavatar.appearance import pretrain_autoencoder

    palette = np.random.default_rng(3).random((64, 3))
    model, _ = pretrain_autoencoder(palette, epochs=400, lr=1e-3, batch_size=8, seed=0,
                                    spec=AutoencoderSpec(decoder_width=64))
    err = np.abs(model.decode(model.encode(palette)) - palette).mean(axis=0)
    assert np.all(err < 0.02)


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip_bit_identical(tmp_path):
    spec = MlpSpec(3, 2, 3, 8, skip_layers=(1,))
    net = init_mlp(spec, np.random.default_rng(4))
    save_checkpoint(tmp_path / "n.spav", {f"p{i}": a for i, a in enumerate(net.arrays())}
                    | {"spec": pack_json(spec.to_dict())})
    sec = load_checkpoint(tmp_path / "n.spav")
    back = mlp_from_arrays(MlpSpec.from_dict(unpack_json(sec["spec"])),
                           [sec[f"p{i}"] for i in range(2 * spec.depth)])
    x = rng.normal(size=(6, 3))
    assert back(x).data.tobytes() == net(x).data.tobytes()


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "bad.spav"
    p.write_bytes(b"NOPE")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    save_checkpoint(p, {"a": np.arange(10.0)})
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
