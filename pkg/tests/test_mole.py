import numpy as np
import pytest

from multidistill import numerics as nx
from multidistill import oracles
from multidistill.gradcheck import check_gradients, max_rel_error
from multidistill.mole import (
    LoRAExpert,
    MoLELayer,
    RouterParams,
    init_mole_layer,
    mole_forward,
    mole_param_count,
    route,
)
from multidistill.numerics import Tensor
from multidistill.vit import ConfigError, EncoderConfig, encode, init_encoder


def test_zero_router_with_bias_picks_that_expert(rng):
    layer = init_mole_layer(6, 3, 2, rng)
    layer.router.weight.data[:] = 0
    layer.router.bias.data[:] = [0, 1, 0]
    assert (route(layer.router, rng.standard_normal((7, 6))) == 1).all()


def test_hand_set_logits():
    router = RouterParams(Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(route(router, np.array([[2.0, 1.0], [0.0, 3.0]])), [0, 1])


def test_argmax_agrees_with_softmax(rng):
    z = rng.standard_normal((1000, 4)) * 3
    np.testing.assert_array_equal(nx.argmax(z), nx.argmax(nx.softmax(Tensor(z)).data))


def test_ties_go_to_lowest_index():
    router = RouterParams(Tensor(np.zeros((3, 4))), Tensor(np.array([1.0, 2.0, 2.0, 2.0])))
    assert (route(router, np.ones((5, 3))) == 1).all()


def test_identity_when_up_is_zero(rng):
    layer = init_mole_layer(8, 3, 2, rng)
    f = Tensor(rng.standard_normal((5, 8)))
    out = mole_forward(layer, f, Tensor(rng.standard_normal((5, 8))))
    np.testing.assert_array_equal(out.data, f.data)


def test_single_expert_matches_matmul_oracle(rng):
    layer = init_mole_layer(6, 1, 2, rng)
    layer.experts[0].up.data[:] = rng.standard_normal((2, 6))
    x = rng.standard_normal((4, 6)).astype(np.float32)
    f = rng.standard_normal((4, 6)).astype(np.float32)
    want = f + oracles.matmul_loop(oracles.matmul_loop(x, layer.experts[0].down.data), layer.experts[0].up.data)
    np.testing.assert_allclose(mole_forward(layer, Tensor(f), Tensor(x)).data, want, atol=1e-6)


def test_rows_use_their_own_expert(rng):
    d = 4
    experts = [LoRAExpert(Tensor(rng.standard_normal((d, 2))), Tensor(rng.standard_normal((2, d)))) for _ in range(2)]
    router = RouterParams(Tensor(np.zeros((d, 2))), Tensor(np.zeros(2)))
    router.weight.data[0] = [1.0, -1.0]
    layer = MoLELayer(router, experts)
    x = np.array([[1.0, 0, 0, 0], [-1.0, 0.5, 0, 0]], dtype=np.float32)
    f = rng.standard_normal((2, d)).astype(np.float32)
    assert route(router, x).tolist() == [0, 1]
    out = mole_forward(layer, Tensor(f), Tensor(x)).data
    for row, e in ((0, 0), (1, 1)):
        want = f[row] + (x[row] @ experts[e].down.data) @ experts[e].up.data
        np.testing.assert_allclose(out[row], want, atol=1e-6)


def test_tally_counts_tokens(rng):
    layer = init_mole_layer(8, 3, 2, rng)
    tally = np.zeros(3, dtype=np.int64)
    x = Tensor(rng.standard_normal((11, 8)))
    mole_forward(layer, x, x, tally)
    assert tally.sum() == 11


def test_gradients_reach_only_the_routed_expert(f64, rng):
    layer = init_mole_layer(6, 3, 2, rng)
    for e in layer.experts:
        e.up.data[:] = rng.standard_normal(e.up.shape)
    layer.router.weight.data[:] = 0
    layer.router.bias.data[:] = [0, 0, 1]
    x = Tensor(rng.standard_normal((4, 6)))
    params = {n: t for n, t in layer.named_parameters("")}
    for t in params.values():
        t.requires_grad = True
    nx.backward(nx.sum(mole_forward(layer, Tensor(np.zeros((4, 6))), x)), leaves=list(params.values()))
    assert not params["experts.0.down"].grad.any() and not params["experts.1.up"].grad.any()
    assert params["experts.2.down"].grad.any() and params["experts.2.up"].grad.any()
    assert not params["router.weight"].grad.any()


def test_mole_forward_gradients(f64, rng):
    layer = init_mole_layer(8, 3, 3, rng)
    for e in layer.experts:
        e.up.data[:] = rng.standard_normal(e.up.shape) * 0.5
    x = Tensor(rng.standard_normal((10, 8)))
    f = Tensor(rng.standard_normal((10, 8)))
    t = Tensor(rng.standard_normal((10, 8)))
    params = {n: p for n, p in layer.named_parameters("") if "router" not in n}
    params["f"] = f
    samples = check_gradients(lambda: nx.mse(mole_forward(layer, f, x), t), params, count=60)
    assert max_rel_error(samples) <= 1e-4


def test_hand_count():
    cfg = EncoderConfig(image_size=16, patch_size=8, depth=1, embed_dim=4, num_heads=1, ffn_hidden_dim=8)
    mole, _, _ = mole_param_count(cfg, 1, 1)
    assert mole == 2 * 1 * 4 + 4 + 1 == 13


def test_count_matches_enumeration(rng):
    cfg = EncoderConfig(image_size=32, patch_size=8, depth=4, embed_dim=256, num_heads=4, ffn_hidden_dim=512)
    mole, total, ratio = mole_param_count(cfg, 3, 32)
    named = list(init_encoder(cfg, rng).named_parameters())
    layers = [init_mole_layer(256, 3, 32, rng) for _ in range(4)]
    m_named = [kv for i, lyr in enumerate(layers) for kv in lyr.named_parameters(f"m{i}.")]
    assert oracles.count_parameters(m_named) == mole
    assert oracles.count_parameters(named + m_named) == total
    assert ratio == mole / total or float(ratio) == pytest.approx(mole / total)


def test_ratio_grows_with_rank():
    cfg = EncoderConfig(depth=4, embed_dim=256, num_heads=4, ffn_hidden_dim=512)
    r32 = mole_param_count(cfg, 3, 32)[2]
    r64 = mole_param_count(cfg, 3, 64)[2]
    assert r64 > r32


def test_invalid_layers(rng):
    with pytest.raises(ConfigError):
        init_mole_layer(8, 0, 2, rng)
    with pytest.raises(ConfigError):
        init_mole_layer(8, 2, 8, rng)


def test_encoder_identity_with_fresh_mole(rng):
    cfg = EncoderConfig(image_size=16, patch_size=8, depth=2, embed_dim=8, num_heads=2, ffn_hidden_dim=16)
    p = init_encoder(cfg, rng)
    layers = [init_mole_layer(8, 3, 2, rng) for _ in range(2)]
    img = rng.standard_normal((16, 16, 3))
    assert encode(p, img, layers).tokens.data.tobytes() == encode(p, img).tokens.data.tobytes()
