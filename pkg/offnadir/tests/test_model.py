import numpy as np
import pytest

from offnadir.functional import bilinear_upsample
from offnadir.model import (ConfigError, LayerBuilder, ModelConfig, ParameterStore, acm_inject,
                            build_model, encode, meta_mlp, metaacm_decode, metacat_inject)
from offnadir.tensor import Rng, ShapeError, Tensor, no_grad

from .conftest import (GRADIENT_SEEDS, TINY_SIZE, gradient_check, reference_conv, tiny_config,
                       tiny_model)


def tiny_inputs(config, n=2, seed=0, dtype=np.float32):
    rng = Rng(seed, (42,))
    image = rng.normal((n, config.input_channels, config.input_size, config.input_size), dtype)
    metadata = rng.spawn(1).normal((n, config.metadata_dim), dtype)
    return image, metadata


def conv_count(in_ch, out_ch, kernel):
    return out_ch * (in_ch * kernel * kernel + 1)


def test_parameter_count_matches_layer_shapes():
    model = tiny_model(uncertainty_mode="none", injection_mode="none")
    widths = [4, 8, 16]
    expected = conv_count(4, 4, 3) + 2 * 4
    for stage in (1, 2):
        in_ch, out_ch = widths[stage - 1], widths[stage]
        expected += conv_count(in_ch, out_ch, 4) + conv_count(out_ch, out_ch, 3)
        expected += conv_count(in_ch, out_ch, 2) + 3 * 2 * out_ch
    expected += conv_count(16, 16, 3) + 2 * 16
    expected += conv_count(16 + 8, 8, 3) + 2 * 8
    expected += conv_count(8 + 4, 4, 3) + 2 * 4
    expected += conv_count(4, 1, 3)
    assert model.params.num_parameters() == expected
    assert model.graph.num_parameters() == expected


def test_same_seed_builds_identical_parameters():
    first = tiny_model(seed=3)
    second = tiny_model(seed=3)
    assert list(first.params) == list(second.params)
    for name, param in first.params.items():
        np.testing.assert_array_equal(param.data, second.params[name].data)
    assert not np.array_equal(first.params["stem.conv.weight"].data,
                              tiny_model(seed=4).params["stem.conv.weight"].data)


def test_initialization():
    params = tiny_model().params
    np.testing.assert_array_equal(params["stem.bn.gamma"].data, 1.0)
    np.testing.assert_array_equal(params["stem.bn.beta"].data, 0.0)
    np.testing.assert_array_equal(params["decoder.1.conv.bias"].data, 0.0)
    assert params["stem.conv.weight"].dtype == np.float32
    assert params.decays("stem.conv.weight")
    assert not params.decays("stem.conv.bias")
    assert not params.decays("stem.bn.gamma")


@pytest.mark.parametrize(
    "mode, has_log_var",
    [
        pytest.param("none", False, id="none"),
        pytest.param("aleatoric", True, id="aleatoric"),
        pytest.param("epistemic", False, id="epistemic"),
        pytest.param("both", True, id="both"),
    ],
)
def test_log_var_head_follows_mode(mode, has_log_var):
    model = tiny_model(uncertainty_mode=mode)
    assert ("head.log_var.weight" in model.params) == has_log_var
    image, metadata = tiny_inputs(model.config)
    output = model.forward(image, metadata)
    assert (output.log_var is not None) == has_log_var


def test_dropout_only_in_first_three_decoder_levels():
    config = ModelConfig(base_channels=4, encoder_depth=4, input_size=32)
    graph = build_model(config, Rng(0)).graph
    assert len(graph.decoder) == 5
    assert graph.dropout_levels == [1, 2, 3]
    assert not any("encoder" in name and "dropout" in name for name in graph.layers)

    no_dropout = ModelConfig(base_channels=4, encoder_depth=4, input_size=32,
                             uncertainty_mode="aleatoric")
    assert build_model(no_dropout, Rng(0)).graph.dropout_levels == []


def test_encoder_widths_are_capped():
    config = ModelConfig(base_channels=16, encoder_depth=4)
    assert config.encoder_channels == [16, 32, 64, 64, 64]
    assert config.bottleneck_channels == 64


@pytest.mark.parametrize("size", [32, 64])
def test_output_matches_input_resolution(size):
    model = tiny_model(input_size=size)
    image, metadata = tiny_inputs(model.config, n=1)
    output = model.forward(image, metadata)
    assert output.logits.shape == (1, 1, size, size)
    assert output.log_var.shape == (1, 1, size, size)
    assert output.logits.dtype == np.float32


def test_forward_is_pure_without_dropout():
    model = tiny_model()
    image, metadata = tiny_inputs(model.config)
    with no_grad():
        reference = model.forward(image, metadata).logits.data
        for _ in range(100):
            np.testing.assert_array_equal(model.forward(image, metadata).logits.data, reference)


def test_dropout_masks_are_sampled():
    model = tiny_model()
    image, metadata = tiny_inputs(model.config)
    quiet = model.forward(image, metadata)
    noisy = model.forward(image, metadata, rng=Rng(1), dropout_active=True)
    assert quiet.dropout_layers == 0
    assert noisy.dropout_layers == 3
    assert not np.array_equal(quiet.logits.data, noisy.logits.data)
    again = model.forward(image, metadata, rng=Rng(1), dropout_active=True)
    np.testing.assert_array_equal(noisy.logits.data, again.logits.data)


def test_zero_rate_dropout_is_inactive():
    model = tiny_model(dropout_rate=0.0)
    image, metadata = tiny_inputs(model.config)
    active = model.forward(image, metadata, rng=Rng(1), dropout_active=True)
    np.testing.assert_array_equal(active.logits.data, model.forward(image, metadata).logits.data)


def test_no_injection_ignores_metadata():
    model = tiny_model(injection_mode="none")
    image, metadata = tiny_inputs(model.config)
    with_meta = model.forward(image, metadata).logits.data
    np.testing.assert_array_equal(with_meta, model.forward(image, None).logits.data)
    np.testing.assert_array_equal(with_meta, model.forward(image, metadata * 100).logits.data)


@pytest.mark.parametrize("injection", ["metacat", "metaacm"])
def test_injection_requires_metadata(injection):
    model = tiny_model(injection_mode=injection)
    image, metadata = tiny_inputs(model.config)
    with pytest.raises(ValueError, match="Metadata is required"):
        model.forward(image)
    with pytest.raises(ShapeError):
        model.forward(image, metadata[:, :1])


def test_wrong_image_size():
    model = tiny_model()
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 4, 8, 8), dtype=np.float32), np.zeros((1, 2), np.float32))


def test_meta_mlp_output_width():
    for base in (8, 16):
        model = build_model(tiny_config(base_channels=base), Rng(0))
        out = meta_mlp(Tensor(np.ones((3, 2), dtype=np.float32)), model.params)
        assert out.shape == (3, model.config.bottleneck_channels)


def test_meta_mlp_zero_weights_give_zero():
    model = tiny_model()
    for name, param in model.params.items():
        if name.startswith("meta_mlp"):
            param.data[...] = 0
    out = meta_mlp(Tensor(np.ones((2, 2), dtype=np.float32)), model.params)
    np.testing.assert_array_equal(out.data, 0.0)


@pytest.mark.parametrize("seed", GRADIENT_SEEDS)
def test_meta_mlp_gradient(seed):
    params = tiny_model(seed=seed, dtype=np.float64).params
    metadata = Rng(seed, (8,)).normal((2, 2))
    assert gradient_check(lambda m: meta_mlp(m, params), [metadata], seed=seed) < 1e-4


def test_meta_mlp_dimension_mismatch():
    with pytest.raises(ShapeError):
        meta_mlp(Tensor(np.ones((2, 3), dtype=np.float32)), tiny_model().params)


def metacat_params(weight):
    params = ParameterStore()
    params.add("metacat.proj.weight", weight[:, :, None, None], decay=True)
    params.add("metacat.proj.bias", np.zeros(weight.shape[0]), decay=False)
    return params


def test_metacat_identity_projections():
    rng = Rng(9)
    image = rng.spawn(0).normal((2, 16, 4, 4))
    meta = rng.spawn(1).normal((2, 16))
    eye, zero = np.eye(16), np.zeros((16, 16))

    keep_image = metacat_inject(Tensor(image), Tensor(meta),
                                metacat_params(np.hstack([eye, zero])))
    assert keep_image.shape == (2, 16, 4, 4)
    np.testing.assert_allclose(keep_image.data, image)

    keep_meta = metacat_inject(Tensor(image), Tensor(meta),
                               metacat_params(np.hstack([zero, eye])))
    np.testing.assert_allclose(keep_meta.data, np.broadcast_to(meta[:, :, None, None],
                                                               (2, 16, 4, 4)))


def test_metacat_channel_mismatch():
    params = metacat_params(np.zeros((16, 32)))
    with pytest.raises(ShapeError):
        metacat_inject(Tensor(np.ones((2, 16, 4, 4))), Tensor(np.ones((2, 8))), params)


def acm_params(v_channels, h_channels, seed=0):
    params = ParameterStore()
    LayerBuilder(params, Rng(seed)).acm("acm.1", v_channels, h_channels)
    return params.astype(np.float64)


def scalar_acm(v, h, params):
    """v' = h * W(v) + b(v), evaluated with loop convolutions."""
    if "acm.1.adapter.weight" in params:
        adapter = params["acm.1.adapter.weight"].data[:, :, 0, 0]
        h = np.einsum("oc,nchw->nohw", adapter, h)
        h = h + params["acm.1.adapter.bias"].data[None, :, None, None]

    def conv(name):
        return reference_conv(v, params[f"{name}.weight"].data, params[f"{name}.bias"].data, 1, 1)

    w_v = conv("acm.1.w_conv")
    b_v = conv("acm.1.b_conv")
    out = np.empty_like(w_v)
    for index in np.ndindex(out.shape):
        out[index] = h[index] * w_v[index] + b_v[index]
    return out, b_v


@pytest.mark.parametrize("seed", range(100))
@pytest.mark.parametrize("h_channels", [3, 5], ids=["same_width", "adapter"])
def test_acm_matches_scalar_oracle(h_channels, seed):
    params = acm_params(3, h_channels, seed=seed)
    rng = Rng(seed, (10,))
    v = rng.spawn(0).normal((2, 3, 4, 4)) * 0.1
    h = rng.spawn(1).normal((2, h_channels, 4, 4)) * 0.1
    v_prime, product = acm_inject(Tensor(v), Tensor(h), params)
    expected, b_v = scalar_acm(v, h, params)
    np.testing.assert_allclose(v_prime.data, expected, atol=1e-6)
    np.testing.assert_allclose(v_prime.data - b_v, product.data, atol=1e-6)


def test_acm_zero_h_or_zero_w_leaves_bias_path():
    params = acm_params(3, 3)
    v = Rng(11).normal((1, 3, 4, 4))
    _, b_v = scalar_acm(v, np.zeros((1, 3, 4, 4)), params)

    v_prime, _ = acm_inject(Tensor(v), Tensor(np.zeros((1, 3, 4, 4))), params)
    np.testing.assert_allclose(v_prime.data, b_v, atol=1e-12)

    params["acm.1.w_conv.weight"].data[...] = 0
    params["acm.1.w_conv.bias"].data[...] = 0
    v_prime, _ = acm_inject(Tensor(v), Tensor(Rng(12).normal((1, 3, 4, 4))), params)
    np.testing.assert_allclose(v_prime.data, b_v, atol=1e-12)


def test_acm_spatial_mismatch():
    params = acm_params(3, 3)
    with pytest.raises(ShapeError):
        acm_inject(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((1, 3, 2, 2))), params)


def test_acm_products_are_coarse_to_fine():
    model = tiny_model(injection_mode="metaacm")
    image, metadata = tiny_inputs(model.config)
    output = model.forward(image, metadata)
    sizes = [product.shape[-1] for product in output.acm_products]
    assert sizes == [TINY_SIZE // 4, TINY_SIZE // 2, TINY_SIZE]
    assert tiny_model(injection_mode="metacat").forward(image, metadata).acm_products is None


def test_metadata_enters_only_at_first_acm():
    model = tiny_model(injection_mode="metaacm")
    image, metadata = tiny_inputs(model.config, n=1)
    zero = model.forward(image, np.zeros_like(metadata), record_activations=True).activations
    real = model.forward(image, metadata, record_activations=True).activations

    np.testing.assert_array_equal(zero["meta_mlp"].data, 0.0)
    for depth in range(3):
        np.testing.assert_array_equal(zero[f"encoder.{depth}"].data,
                                      real[f"encoder.{depth}"].data)
    assert not np.array_equal(zero["acm.1.h"].data, real["acm.1.h"].data)
    for activations in (zero, real):
        for level in (2, 3):
            upsampled = bilinear_upsample(activations[f"decoder.{level - 1}"], 2)
            np.testing.assert_array_equal(activations[f"acm.{level}.h"].data, upsampled.data)


def test_metaacm_decode_matches_forward():
    model = tiny_model(injection_mode="metaacm")
    image, metadata = tiny_inputs(model.config)
    features = encode(model, image)
    meta_feats = meta_mlp(Tensor(metadata), model.params)
    decoded = metaacm_decode(model, features, meta_feats)
    np.testing.assert_array_equal(decoded.logits.data,
                                  model.forward(image, metadata).logits.data)


@pytest.mark.parametrize("seed", GRADIENT_SEEDS)
def test_metaacm_decode_gradient_through_stacked_acms(seed):
    model = tiny_model(seed=seed, dtype=np.float64, injection_mode="metaacm",
                       uncertainty_mode="none")
    image, metadata = tiny_inputs(model.config, n=1, seed=seed, dtype=np.float64)
    features = [Tensor(feature.data) for feature in encode(model, image)]
    meta_feats = meta_mlp(Tensor(metadata), model.params).data

    def fn(meta):
        return metaacm_decode(model, features, meta).logits

    assert gradient_check(fn, [meta_feats], seed=seed) < 1e-4


def test_metaacm_decode_requires_metaacm():
    model = tiny_model(injection_mode="metacat")
    image, metadata = tiny_inputs(model.config)
    with pytest.raises(ConfigError):
        metaacm_decode(model, encode(model, image), meta_mlp(Tensor(metadata), model.params))


@pytest.mark.parametrize(
    "kwargs",
    [
        pytest.param(dict(input_size=18), id="indivisible_size"),
        pytest.param(dict(base_channels=2), id="narrow"),
        pytest.param(dict(uncertainty_mode="bayes"), id="uncertainty"),
        pytest.param(dict(injection_mode="film"), id="injection"),
        pytest.param(dict(dropout_rate=1.0), id="dropout"),
        pytest.param(dict(encoder_depth=0), id="depth"),
    ],
)
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        tiny_config(**kwargs)


def test_config_dict_round_trip():
    config = tiny_config(injection_mode="metaacm")
    assert ModelConfig.from_dict(config.to_dict()) == config
    with pytest.raises(ConfigError, match="Unknown"):
        ModelConfig.from_dict(dict(config.to_dict(), width=3))
