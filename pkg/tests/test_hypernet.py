import numpy as np
import pytest

from hyperfusion import tensor as T
from hyperfusion.hypernet import (
    EmbeddingNet,
    HyperConv2d,
    HyperHead,
    HyperInitSpec,
    HyperLinear,
    embed,
    embedding_variance,
    generate_params,
    hyper_forward,
    init_heads,
    standardize_embedding,
)
from hyperfusion.tensor import ShapeError


def test_sex_one_hot_embeds_to_scalar():
    net = EmbeddingNet("z", 2, 1)
    e = embed(np.array([1.0, 0.0]), net)
    assert e.shape == (1,)


def test_zero_parameters_identity_embedding_is_zero():
    net = EmbeddingNet("z", 3, 2, activation="identity")
    for p in net.parameters():
        p.data[...] = 0.0
    np.testing.assert_array_equal(embed(np.array([1.0, -2.0, 3.0]), net).data, 0.0)


def test_distinct_one_hots_get_distinct_embeddings():
    for seed in range(100):
        net = EmbeddingNet("z", 2, 1, seed=seed)
        a = embed(np.array([1.0, 0.0]), net).data
        b = embed(np.array([0.0, 1.0]), net).data
        assert not np.array_equal(a, b)


def test_embed_length_mismatch():
    net = EmbeddingNet("z", 3, 2)
    with pytest.raises(ShapeError):
        embed(np.ones(4), net)


def test_embedding_must_compress():
    with pytest.raises(ValueError):
        EmbeddingNet("z", 4, 6)
    EmbeddingNet("z", 1, 1)


def test_zero_embedding_generates_zero_parameters():
    head = HyperHead("h", (3, 2), 3, d_k=4, fan_in=2)
    W, B = generate_params(np.zeros((1, 4)), head)
    np.testing.assert_array_equal(W.data, 0.0)
    np.testing.assert_array_equal(B.data, 0.0)
    assert W.shape == (1, 3, 2) and B.shape == (1, 3)
    assert W.partition == "theta_H" and B.partition == "theta_H"


def test_generate_is_deterministic():
    head = HyperHead("h", (2, 5), 2, d_k=3, fan_in=5, seed=1)
    e = np.random.default_rng(0).standard_normal((4, 3))
    W1, B1 = generate_params(e, head)
    W2, B2 = generate_params(e, head)
    np.testing.assert_array_equal(W1.data, W2.data)
    np.testing.assert_array_equal(B1.data, B2.data)


def test_generate_rejects_wrong_embedding_width():
    head = HyperHead("h", (2, 2), 2, d_k=3, fan_in=2)
    with pytest.raises(ShapeError):
        generate_params(np.zeros((1, 4)), head)


@pytest.mark.parametrize("d_j,d_k,var_e,bound", [(4, 8, 1.0, np.sqrt(3 / 32)), (1, 1, 1.0, np.sqrt(3))])
def test_head_sampling_bounds(d_j, d_k, var_e, bound):
    spec = HyperInitSpec(d_j, d_k, var_e)
    assert np.isclose(np.sqrt(3 * spec.weight_variance), bound, rtol=0, atol=1e-15)
    head = HyperHead("h", (50, d_j), 50, d_k=d_k, fan_in=d_j)
    init_heads(spec, head, seed=3)
    w = head.weight_head.data
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.95 * bound
    np.testing.assert_array_equal(head.weight_head_bias.data, 0.0)
    np.testing.assert_array_equal(head.bias_head_bias.data, 0.0)


def test_sqrt_three_over_32():
    assert round(np.sqrt(3 * HyperInitSpec(4, 8, 1.0).weight_variance), 5) == 0.30619


def test_degenerate_embedding_variance():
    with pytest.raises(ValueError, match="degenerate embedding variance"):
        HyperInitSpec(4, 8, 1e-13)


def test_embedding_variance_needs_32_rows():
    net = EmbeddingNet("z", 3, 2)
    with pytest.raises(ValueError):
        embedding_variance(net, np.ones((31, 3)))
    T_train = np.random.default_rng(0).standard_normal((40, 3))
    e = net(T.Tensor(T_train)).data
    assert embedding_variance(net, T_train) == pytest.approx(e.var(), abs=0)


def test_constant_embedding_rejected_at_init():
    layer = HyperLinear("hl", 3, 2, d=2, embed_dim=1, activation="identity")
    with pytest.raises(ValueError, match="degenerate"):
        layer.init_from_data(np.ones((40, 2)), seed=0)


def test_monte_carlo_head_and_generated_variance():
    # 10,000 independent heads (d_j=4, d_k=8, var_e=1)
    spec = HyperInitSpec(4, 8, 1.0)
    rng = np.random.default_rng(0)
    head = HyperHead("h", (10_000, 1), 1, d_k=8, fan_in=4)
    init_heads(spec, head, rng)
    Hw = head.weight_head.data
    assert abs(Hw.var() / (1 / 32) - 1) < 0.15
    # generated entries W = H e with unit-variance e have variance d_k / 32 = 1/4
    e = rng.standard_normal((1, 8))
    e = (e - e.mean()) / e.std()
    W = Hw @ e[0]
    assert abs(W.var() / 0.25 - 1) < 0.15


def test_hyperlayer_variance_at_init_matches_analysis():
    # weights alone keep Var(out) ~ Var(x); the generated bias adds about Var(x) again
    rng = np.random.default_rng(1)
    w_ratios, full_ratios, predicted = [], [], []
    for seed in range(20):
        layer = HyperLinear("hl", 64, 64, d=12, embed_dim=8, embed_hidden=(16,), seed=seed)
        T_train = rng.standard_normal((256, 12))
        layer.init_from_data(T_train, seed=seed)
        x = rng.standard_normal((256, 64))
        W, B = layer.params_for(T_train)
        wx = np.einsum("bij,bj->bi", W.data, x)
        w_ratios.append(wx.var() / x.var())
        full_ratios.append(hyper_forward(x, T_train, layer).data.var() / x.var())
        e = layer.embedding(T.Tensor(T_train)).data
        predicted.append(2 * (e**2).mean() / layer.var_e)
    assert 0.5 <= np.mean(w_ratios) <= 2.0
    assert abs(np.mean(w_ratios) - 1) < 0.15
    assert abs(np.mean(full_ratios) / np.mean(predicted) - 1) < 0.15


def test_init_standardizes_an_off_centre_embedding():
    # a scalar embedding of a one-hot attribute with both outputs near -0.33
    layer = HyperLinear("hl", 8, 8, d=2, embed_dim=1, seed=0)
    fc = layer.embedding.layers[-1]
    fc.weight.data[...] = [[-0.345, -0.322]]
    fc.bias.data[...] = 0.0
    tab = np.eye(2)[np.arange(64) % 2]
    layer.init_from_data(tab, seed=0)
    e = layer.embedding(T.Tensor(tab)).data
    np.testing.assert_allclose(e.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(e.var(axis=0), 1.0, atol=1e-12)
    assert layer.var_e == pytest.approx(1.0, abs=1e-12)
    x = np.random.default_rng(0).standard_normal((64, 8))
    ratio = hyper_forward(x, tab, layer).data.var() / x.var()
    assert ratio < 4.0


def test_standardize_embedding_leaves_constant_components_centred():
    net = EmbeddingNet("e", 3, 2, seed=0)
    net.layers[-1].weight.data[1] = 0.0
    net.layers[-1].bias.data[1] = 5.0
    tab = np.random.default_rng(1).standard_normal((40, 3))
    standardize_embedding(net, tab)
    e = net(T.Tensor(tab)).data
    np.testing.assert_allclose(e.mean(axis=0), 0.0, atol=1e-12)
    assert e[:, 0].var() == pytest.approx(1.0, abs=1e-12) and np.all(e[:, 1] == 0.0)


def test_forced_identity_parameters_pass_input_through():
    layer = HyperLinear("hl", 4, 4, d=3)
    layer.override = (np.eye(4), np.zeros(4))
    x = np.random.default_rng(2).standard_normal((5, 4))
    np.testing.assert_array_equal(hyper_forward(x, np.ones((5, 3)), layer).data, x)


def test_equal_rows_get_equal_parameters():
    layer = HyperConv2d("hc", 2, 3, k=3, d=4, embed_dim=2, embed_hidden=(5,), seed=1)
    Tb = np.tile(np.random.default_rng(3).standard_normal((1, 4)), (2, 1))
    W, B = layer.params_for(Tb)
    np.testing.assert_array_equal(W.data[0], W.data[1])
    np.testing.assert_array_equal(B.data[0], B.data[1])


def test_distinct_rows_get_distinct_parameters():
    for seed in range(20):
        layer = HyperLinear("hl", 3, 2, d=4, embed_dim=2, seed=seed)
        W, _ = layer.params_for(np.random.default_rng(seed).standard_normal((2, 4)))
        assert not np.array_equal(W.data[0], W.data[1])


@pytest.mark.parametrize("kind", ["linear", "conv"])
def test_batched_matches_per_sample_loop(kind):
    rng = np.random.default_rng(4)
    if kind == "linear":
        layer = HyperLinear("hl", 6, 3, d=5, embed_dim=3, embed_hidden=(4,), seed=2)
        x = rng.standard_normal((7, 6))
    else:
        layer = HyperConv2d("hc", 3, 4, k=3, stride=2, d=5, embed_dim=3, embed_hidden=(4,), seed=2)
        x = rng.standard_normal((7, 3, 6, 6))
    Tb = rng.standard_normal((7, 5))
    batched = hyper_forward(x, Tb, layer).data
    for i in range(7):
        single = hyper_forward(x[i : i + 1], Tb[i : i + 1], layer).data
        np.testing.assert_allclose(batched[i : i + 1], single, rtol=0, atol=1e-12)


def test_batch_size_mismatch():
    layer = HyperLinear("hl", 3, 2, d=2)
    with pytest.raises(ShapeError):
        hyper_forward(np.ones((4, 3)), np.ones((3, 2)), layer)


def test_gradients_reach_embedding_through_generated_weights():
    rng = np.random.default_rng(5)
    layer = HyperConv2d("hc", 2, 2, k=1, d=4, embed_dim=2, embed_hidden=(3,), seed=4)
    layer.init_from_data(rng.standard_normal((64, 4)), seed=4)
    x = rng.standard_normal((3, 2, 4, 4))
    Tb = rng.standard_normal((3, 4))
    R = rng.standard_normal((3, 2, 4, 4))
    params = layer.parameters()
    assert params and all(p.partition == "phi" for p in params)
    grads = T.backward(T.tsum(hyper_forward(x, Tb, layer) * R))
    assert any(np.abs(g).sum() > 0 for n, g in grads.items() if "embedding" in n)
    assert T.grad_check(lambda: T.tsum(hyper_forward(x, Tb, layer) * R), params) < 1e-4


def test_hyper_linear_full_grad_check():
    rng = np.random.default_rng(6)
    layer = HyperLinear("hl", 5, 3, d=4, embed_dim=2, embed_hidden=(3,), seed=7)
    x = rng.standard_normal((4, 5))
    Tb = rng.standard_normal((4, 4))
    R = rng.standard_normal((4, 3))
    assert T.grad_check(lambda: T.tsum(hyper_forward(x, Tb, layer) * R), layer.parameters()) < 1e-4


def test_generated_slots_are_not_optimizer_parameters():
    layer = HyperLinear("hl", 5, 3, d=4, embed_dim=2)
    names = {p.name for p in layer.parameters()}
    assert "hl.weight" not in names and "hl.bias" not in names
    generated = [p for p in layer.parameters(include_generated=True) if p.partition == "theta_H"]
    assert {p.name for p in generated} == {"hl.weight", "hl.bias"}
    assert not any(p.trainable or p.regularized for p in generated)
