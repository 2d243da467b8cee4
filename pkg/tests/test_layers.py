import numpy as np
import pytest

import maskwright.autodiff as ad
import maskwright.layers as L
from maskwright.autodiff import Tensor, backward, finite_diff_check, tape
from maskwright.errors import BatchError, ConfigError, ShapeError


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# Activations


def test_activation_values():
    x = Tensor(np.array([0.0]))
    assert L.apply_activation("sigmoid", x).item() == 0.5
    assert abs(L.apply_activation("softplus", x).item() - np.log(2.0)) < 1e-12
    assert L.apply_activation("tanh", x).item() == 0.0
    assert L.apply_activation("relu", Tensor(np.array([-3.0]))).item() == 0.0


def test_selu_constants():
    # selu(x) = lambda*x for x>0; lambda*alpha*(e^x - 1) for x<=0
    x = Tensor(np.array([1.0, -1.0]))
    out = L.apply_activation("selu", x).data
    np.testing.assert_allclose(out[0], 1.0507009873554805, rtol=1e-12)
    np.testing.assert_allclose(
        out[1], 1.0507009873554805 * 1.6732632423543772 * (np.exp(-1.0) - 1.0), rtol=1e-12
    )


def test_identity_returns_same_tensor():
    x = Tensor(np.array([1.0, 2.0]))
    assert L.apply_activation("identity", x) is x


# ---------------------------------------------------------------------------
# Dense


def test_dense_identity():
    x = Tensor(rng(1).standard_normal((4, 3)))
    out = L.forward_dense(x, Tensor(np.eye(3)), Tensor(np.zeros(3)), "identity")
    np.testing.assert_array_equal(out.data, x.data)


def test_dense_zero_input_gives_bias_rows():
    b = np.array([1.0, -2.0])
    out = L.forward_dense(
        Tensor(np.zeros((3, 4))), Tensor(np.zeros((4, 2))), Tensor(b), "identity"
    )
    np.testing.assert_array_equal(out.data, np.tile(b, (3, 1)))


def test_dense_matches_loop_oracle():
    g = rng(2)
    x, W, b = g.standard_normal((5, 3)), g.standard_normal((3, 4)), g.standard_normal(4)
    out = L.forward_dense(Tensor(x), Tensor(W), Tensor(b), "relu")
    ref = np.zeros((5, 4))
    for i in range(5):
        for j in range(4):
            acc = b[j]
            for k in range(3):
                acc += x[i, k] * W[k, j]
            ref[i, j] = max(acc, 0.0)
    np.testing.assert_allclose(out.data, ref, rtol=1e-12)


# ---------------------------------------------------------------------------
# GRU


def test_gru_zero_weights_fixed_point():
    p = L.GRUParams(
        W=Tensor(np.zeros((3, 9))), U=Tensor(np.zeros((3, 9))), b=Tensor(np.zeros(9))
    )
    x = Tensor(rng(3).standard_normal((5, 3)))
    out = L.forward_gru(x, None, p)
    assert out.shape == (5, 3)
    assert np.all(out.data == 0.0)


def gru_cell_oracle(x_t, h_prev, W, U, b):
    h = len(h_prev)

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    z = sig(x_t @ W[:, :h] + h_prev @ U[:, :h] + b[:h])
    r = sig(x_t @ W[:, h : 2 * h] + h_prev @ U[:, h : 2 * h] + b[h : 2 * h])
    c = np.tanh(x_t @ W[:, 2 * h :] + (r * h_prev) @ U[:, 2 * h :] + b[2 * h :])
    return (1.0 - z) * h_prev + z * c


def test_gru_single_step_matches_cell_oracle():
    g = rng(4)
    p = L.init_gru_params(g, 3, 2)
    x = g.standard_normal((1, 3))
    out = L.forward_gru(Tensor(x), None, p)
    ref = gru_cell_oracle(x[0], np.zeros(2), p.W.data, p.U.data, p.b.data)
    np.testing.assert_allclose(out.data[0], ref, rtol=1e-12)


def test_gru_multistep_matches_unrolled_oracle():
    g = rng(5)
    p = L.init_gru_params(g, 3, 4)
    x = g.standard_normal((6, 3))
    out = L.forward_gru(Tensor(x), None, p)
    h = np.zeros(4)
    for t in range(6):
        h = gru_cell_oracle(x[t], h, p.W.data, p.U.data, p.b.data)
        np.testing.assert_allclose(out.data[t], h, rtol=1e-10)


def test_gru_gradients_match_finite_differences():
    g = rng(6)
    p = L.init_gru_params(g, 2, 3)
    x = g.standard_normal((5, 2))

    def f_of(which):
        def f(t):
            q = L.GRUParams(
                W=t if which == "W" else p.W,
                U=t if which == "U" else p.U,
                b=t if which == "b" else p.b,
            )
            out = L.forward_gru(Tensor(x), None, q)
            return ad.reduce_sum(ad.mul(out, out))

        return f

    for which, ref in (("W", p.W), ("U", p.U), ("b", p.b)):
        err = finite_diff_check(f_of(which), Tensor(ref.data.copy()), h=1e-5)
        assert err < 1e-4, f"{which}: {err}"


def test_gru_batched_matches_loop_over_examples():
    g = rng(7)
    p = L.init_gru_params(g, 3, 4)
    xb = g.standard_normal((3, 5, 3))
    out = L.forward_gru(Tensor(xb), None, p)
    for n in range(3):
        single = L.forward_gru(Tensor(xb[n]), None, p)
        np.testing.assert_allclose(out.data[n], single.data, rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# BiGRU


def test_bigru_output_shape():
    g = rng(8)
    layer = L.BiGRULayer(3, 4, layers=2, rng=g)
    out = layer.forward(Tensor(g.standard_normal((2, 6, 3))))
    assert out.shape == (2, 6, 8)


def test_bigru_forward_half_equals_forward_gru():
    g = rng(9)
    fwd = L.init_gru_params(g, 3, 4)
    bwd = L.init_gru_params(g, 3, 4)
    x = Tensor(g.standard_normal((5, 3)))
    out = L.forward_bigru(x, fwd, bwd)
    ref = L.forward_gru(x, None, fwd)
    np.testing.assert_array_equal(out.data[:, :4], ref.data)


def test_bigru_matches_composition_of_gru_and_reversals():
    g = rng(10)
    fwd = L.init_gru_params(g, 2, 3)
    bwd = L.init_gru_params(g, 2, 3)
    x = g.standard_normal((4, 2))
    out = L.forward_bigru(Tensor(x), fwd, bwd)
    hf = L.forward_gru(Tensor(x), None, fwd).data
    hb = L.forward_gru(Tensor(x[::-1].copy()), None, bwd).data[::-1]
    np.testing.assert_array_equal(out.data, np.concatenate([hf, hb], axis=1))


def test_bigru_palindrome_with_tied_weights_is_time_symmetric():
    g = rng(11)
    p = L.init_gru_params(g, 2, 3)
    half = g.standard_normal((3, 2))
    x = np.concatenate([half, half[::-1]], axis=0)  # palindrome, T=6
    out = L.forward_bigru(Tensor(x), p, p).data
    T = 6
    for t in range(T):
        np.testing.assert_allclose(out[t, :3], out[T - 1 - t, 3:], rtol=1e-12)


# ---------------------------------------------------------------------------
# Embedding


def test_embedding_repeated_ids():
    table = Tensor(rng(12).standard_normal((4, 3)))
    out = L.forward_embedding(np.array([0, 0]), table)
    np.testing.assert_array_equal(out.data[0], table.data[0])
    np.testing.assert_array_equal(out.data[1], table.data[0])


def test_embedding_matches_loop_oracle():
    g = rng(13)
    table = Tensor(g.standard_normal((6, 4)))
    ids = g.integers(0, 6, size=(2, 5))
    out = L.forward_embedding(ids, table)
    for n in range(2):
        for t in range(5):
            np.testing.assert_array_equal(out.data[n, t], table.data[ids[n, t]])


# ---------------------------------------------------------------------------
# BatchNorm


def test_batchnorm_normalizes_in_train_mode():
    g = rng(14)
    x = Tensor(g.standard_normal((64, 3)) * 4.0 + 2.0)
    y = L.forward_batchnorm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), "train")
    np.testing.assert_allclose(y.data.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.data.var(axis=0), 1.0, atol=1e-3)  # eps effect


def test_batchnorm_zero_gamma_gives_beta():
    x = Tensor(rng(15).standard_normal((8, 2)))
    beta = np.array([3.0, -1.0])
    y = L.forward_batchnorm(x, Tensor(np.zeros(2)), Tensor(beta), "train")
    np.testing.assert_array_equal(y.data, np.tile(beta, (8, 1)))


def test_batchnorm_running_stats_hand_formula():
    g = rng(16)
    layer = L.BatchNorm(2)
    x = g.standard_normal((10, 2))
    layer.forward(Tensor(x), mode="train")
    mu, var = x.mean(axis=0), x.var(axis=0)
    np.testing.assert_allclose(layer.running_mean.data, 0.9 * 0.0 + 0.1 * mu, rtol=1e-12)
    np.testing.assert_allclose(layer.running_var.data, 0.9 * 1.0 + 0.1 * var, rtol=1e-12)


def test_batchnorm_train_requires_two_rows():
    with pytest.raises(BatchError):
        L.forward_batchnorm(
            Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), "train"
        )


def test_batchnorm_infer_uses_running_stats():
    layer = L.BatchNorm(2)
    layer.running_mean.data[:] = [1.0, 2.0]
    layer.running_var.data[:] = [4.0, 9.0]
    x = np.array([[3.0, 5.0]])
    y = layer.forward(Tensor(x), mode="infer")
    expected = (x - [1.0, 2.0]) / np.sqrt(np.array([4.0, 9.0]) + 1e-5)
    np.testing.assert_allclose(y.data, expected, rtol=1e-12)


# ---------------------------------------------------------------------------
# Upsample / residual block


def test_upsample_definition_and_constant():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    out = L.forward_upsample2x(x)
    np.testing.assert_array_equal(
        out.data, [[[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]]
    )
    const = L.forward_upsample2x(Tensor(np.full((2, 3, 3), 7.0)))
    assert np.all(const.data == 7.0)


def test_residual_block_zero_kernels_tanh_gives_zero():
    block = L.ResidualBlock("2d", 1, 4, n_layers=4, k=3, act="tanh")
    for c in block.convs:
        c.K.data[:] = 0.0
        c.b.data[:] = 0.0
    out = block.forward(Tensor(rng(17).standard_normal((2, 1, 5, 5))))
    assert np.all(out.data == 0.0)


def test_residual_block_single_layer_doubles():
    g = rng(18)
    block = L.ResidualBlock("2d", 2, 3, n_layers=1, k=3, act="tanh", rng=g)
    x = Tensor(g.standard_normal((1, 2, 4, 4)))
    out = block.forward(x)
    y1 = L.apply_activation("tanh", block.convs[0].forward(x))
    np.testing.assert_allclose(out.data, np.tanh(2.0 * y1.data), rtol=1e-12)


def test_residual_block_matches_explicit_composition():
    g = rng(19)
    block = L.ResidualBlock("2d", 1, 4, n_layers=4, k=3, act="tanh", rng=g)
    x = Tensor(g.standard_normal((2, 1, 6, 6)))
    out = block.forward(x)
    h = x
    outs = []
    for c in block.convs:
        h = ad.tanh(c.forward(h))
        outs.append(h)
    ref = ad.tanh(ad.add(outs[0], outs[-1]))
    np.testing.assert_array_equal(out.data, ref.data)


def test_residual_block_1d_shapes():
    g = rng(20)
    block = L.ResidualBlock("1d", 3, 5, n_layers=2, k=3, act="selu", rng=g)
    out = block.forward(Tensor(g.standard_normal((2, 7, 3))))
    assert out.shape == (2, 7, 5)


# ---------------------------------------------------------------------------
# Graph


def test_graph_forward_empty_is_identity():
    m = L.ModelGraph([])
    x = rng(21).standard_normal((3, 2))
    np.testing.assert_array_equal(m.forward(x).data, x)


def test_graph_forward_identity_dense():
    layer = L.Dense(3, 3, "identity")
    layer.W.data[:] = np.eye(3)
    layer.b.data[:] = 0.0
    m = L.ModelGraph([layer])
    x = rng(22).standard_normal((4, 3))
    np.testing.assert_array_equal(m.forward(x).data, x)


def test_graph_error_carries_layer_index():
    m = L.ModelGraph([L.Dense(3, 2)])
    with pytest.raises(ShapeError, match="layer 0"):
        m.forward(np.zeros((2, 5)))


def test_graph_shape_contract_matches_forward():
    g = rng(23)
    graphs = {
        (1, 8, 8): L.ModelGraph(
            [
                L.Conv2d(1, 4, 3, 3, "valid", rng=g),
                L.Activation("relu"),
                L.ResidualBlock("2d", 4, 6, 2, 3, "tanh", rng=g),
                L.Upsample2x(),
                L.Conv2d(6, 2, 1, 1, "same", rng=g),
                L.Reshape((2 * 12 * 12,)),
                L.Dense(2 * 12 * 12, 5, "relu", rng=g),
            ]
        ),
        (6,): L.ModelGraph([L.Dense(6, 4, "tanh", rng=g), L.Dense(4, 2, rng=g)]),
        (7, 3): L.ModelGraph(
            [
                L.BiGRULayer(3, 4, 1, rng=g),
                L.Conv1d(8, 5, 3, "same", rng=g),
                L.BatchNorm(5),
                L.MeanOverTime(),
            ]
        ),
    }
    for in_shape, m in graphs.items():
        predicted = m.output_shape(in_shape)
        out = m.forward(Tensor(g.standard_normal((2,) + in_shape)), mode="train")
        assert out.shape == (2,) + predicted


def test_graph_embedding_front():
    g = rng(24)
    m = L.ModelGraph([L.Embedding(10, 4, rng=g), L.MeanOverTime(), L.Dense(4, 2, rng=g)])
    ids = g.integers(0, 10, size=(3, 6))
    assert m.forward(ids).shape == (3, 2)


def test_infer_mode_determinism_bitwise():
    g = rng(25)
    m = L.ModelGraph(
        [L.Dense(4, 8, "tanh", rng=g), L.BatchNorm(8), L.Dense(8, 2, rng=g)], mode="infer"
    )
    x = g.standard_normal((5, 4))
    a = m.forward(x).data.tobytes()
    b = m.forward(x).data.tobytes()
    assert a == b


def test_word_dropout_infer_passthrough_train_drops():
    layer = L.WordDropout(0.5)
    x = Tensor(np.ones((2, 10, 3)))
    out_infer = layer.forward(x, mode="infer")
    assert out_infer is x
    out_train = layer.forward(x, mode="train", rng=rng(26))
    dropped = np.all(out_train.data == 0.0, axis=2)
    assert dropped.any()
    kept = out_train.data[~dropped]
    np.testing.assert_allclose(kept, 2.0)  # inverted scaling at rate 0.5


# ---------------------------------------------------------------------------
# Specs / serialization round trip at the spec level


def test_layer_specs_rebuild_same_shapes():
    g = rng(27)
    layers = [
        L.Dense(3, 4, "relu", rng=g),
        L.Conv2d(2, 3, 3, 3, "same", rng=g),
        L.Conv1d(3, 2, 3, "valid", rng=g),
        L.GRULayer(3, 5, rng=g),
        L.BiGRULayer(4, 3, 2, rng=g),
        L.Embedding(7, 3, rng=g),
        L.BatchNorm(4),
        L.Upsample2x(),
        L.ResidualBlock("1d", 2, 4, 3, 3, "selu", rng=g),
        L.Activation("sigmoid"),
        L.MeanOverTime(),
        L.Reshape((2, 2)),
        L.WordDropout(0.3),
    ]
    for layer in layers:
        spec = layer.spec()
        rebuilt = L.layer_from_spec(spec)
        assert rebuilt.spec() == spec
        for (n1, t1), (n2, t2) in zip(layer.param_items(), rebuilt.param_items()):
            assert n1 == n2 and t1.shape == t2.shape


def test_invalid_specs_rejected():
    with pytest.raises(ConfigError):
        L.layer_from_spec(L.LayerSpec("dense", {"in": 3, "out": 0, "act": "relu"}))
    with pytest.raises(ConfigError):
        L.layer_from_spec(L.LayerSpec("dense", {"in": 3, "act": "relu"}))
    with pytest.raises(ConfigError):
        L.layer_from_spec(L.LayerSpec("warp", {}))
    with pytest.raises(ConfigError):
        L.layer_from_spec(L.LayerSpec("activation", {"act": "swish"}))


# ---------------------------------------------------------------------------
# Gradient checks across layer kinds (more instances run in the acceptance suite)


def layer_case(name, g):
    if name == "dense":
        return L.Dense(3, 4, "tanh", rng=g), (3,)
    if name == "conv2d":
        return L.Conv2d(2, 3, 3, 3, "same", rng=g), (2, 4, 4)
    if name == "conv1d":
        return L.Conv1d(2, 3, 3, "same", rng=g), (5, 2)
    if name == "gru":
        return L.GRULayer(2, 3, rng=g), (4, 2)
    if name == "bigru":
        return L.BiGRULayer(2, 2, 2, rng=g), (4, 2)
    if name == "batchnorm":
        return L.BatchNorm(3), (3,)
    if name == "upsample2x":
        return L.Upsample2x(), (2, 3, 3)
    if name == "residual_block":
        return L.ResidualBlock("2d", 1, 3, 2, 3, "tanh", rng=g), (1, 4, 4)
    if name == "mean_over_time":
        return L.MeanOverTime(), (4, 3)
    raise KeyError(name)


@pytest.mark.parametrize(
    "name",
    ["dense", "conv2d", "conv1d", "gru", "bigru", "batchnorm", "upsample2x", "residual_block", "mean_over_time"],
)
def test_layer_gradient_checks(name):
    for seed in range(3):
        g = rng(100 + seed)
        layer, in_shape = layer_case(name, g)
        x = Tensor(g.standard_normal((4,) + in_shape))

        def f(t):
            out = layer.forward(t, mode="train")
            return ad.reduce_sum(ad.mul(out, out))

        err = finite_diff_check(f, Tensor(x.data.copy()), h=1e-5)
        assert err < 1e-4, f"{name} input grads: {err}"
        # For parameters, pass the live parameter tensor; the closure reruns
        # the forward pass, which reads (and is perturbed through) it.
        for pname, p in layer.param_items():
            err = finite_diff_check(lambda _t: f(Tensor(x.data.copy())), p, h=1e-5)
            assert err < 1e-4, f"{name}.{pname} grads: {err}"
