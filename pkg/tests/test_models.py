import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from texiris import layers as L
from texiris.errors import CapabilityError, ConfigurationError, DimensionError, ShapeMismatchError, StateError
from texiris.models import (DESK_RESOLUTION, FULL_RESOLUTION, VARIANTS, CombNetVariant, DecoderSpec,
                            EncoderSpec, build_autoencoder, build_combnet, combnet_spec, count_params,
                            encoder_state, load_state)
from texiris.tensor import Tensor, no_grad

TEL = CombNetVariant(pool="eap", head="tel", init="random")
TWO_FC = CombNetVariant(pool="max", head="fc", init="random")


def test_param_count_tel_227():
    report = count_params(combnet_spec(TEL, 227))
    assert report.total == 2_984_355
    assert report.by_kind == {"conv": 2_748_672, "bn": 3_008, "fc": 232_675}


def test_param_count_two_fc_227():
    report = count_params(combnet_spec(TWO_FC, 227))
    # 32768*4096 + 4096 + 4096*227 + 227 on top of the encoder
    assert report.by_kind["fc"] == 32768 * 4096 + 4096 + 4096 * 227 + 227
    assert report.total == 135_541_155
    assert report.total == pytest.approx(135.5e6, rel=0.005)


def test_param_ratio_bracket():
    ratio = count_params(combnet_spec(TWO_FC, 227)).total / count_params(combnet_spec(TEL, 227)).total
    assert 44 <= ratio <= 47


def test_flatten_width():
    flat = [r for r in combnet_spec(TWO_FC, 227) if r.kind == "flatten"][0]
    assert flat.in_channels == 256 * 4 * 32


@pytest.mark.parametrize("variant", list(VARIANTS.values()) + [TEL])
@pytest.mark.parametrize("classes", [2, 16])
def test_analytic_count_matches_built_model(variant, classes):
    model = build_combnet(CombNetVariant(variant.pool, variant.head, "random"), classes, DESK_RESOLUTION)
    spec_total = count_params(combnet_spec(variant, classes, DESK_RESOLUTION)).total
    built = count_params(model)
    assert built.total == spec_total == sum(p.size for p in model.parameters())


def test_report_total_is_sum_of_parts():
    report = count_params(combnet_spec(TEL, 10))
    assert report.total == sum(report.by_kind.values()) == sum(n for *_, n in report.layers)
    assert "2,984,355" in count_params(combnet_spec(TEL, 227)).table()


def test_variant_names():
    assert set(VARIANTS) == {"CombNet_R", "CombNet_E", "CombNet_E^EAP", "CombNet_E^EAP+TEL"}
    for name, v in VARIANTS.items():
        assert v.name == name


def test_combnet_needs_two_classes():
    with pytest.raises(ConfigurationError):
        combnet_spec(TEL, 1)


def test_decoder_has_no_parameters():
    enc, dec = build_autoencoder("eap")
    assert dec.parameters() == []
    assert DecoderSpec().stages == 4


@pytest.mark.parametrize("hw, bottleneck", [(FULL_RESOLUTION, (4, 32)), (DESK_RESOLUTION, (2, 8))])
def test_autoencoder_shapes(hw, bottleneck):
    enc, dec = build_autoencoder("eap")
    enc.eval()
    with no_grad():
        z = enc(Tensor(np.zeros((1, 1) + hw)))
        assert z.shape == (1, 256) + bottleneck
        assert dec(z).shape == (1, 1) + hw


@settings(max_examples=8)
@given(st.integers(1, 3), st.integers(1, 4), st.sampled_from(["eap", "max"]))
def test_encoder_shape_contract(hm, wm, pool):
    enc, _ = build_autoencoder(pool)
    with no_grad():
        out = enc.eval()(Tensor(np.zeros((1, 1, 16 * hm, 16 * wm))))
    assert out.shape == (1, 256, hm, wm)


def test_encoder_rejects_indivisible_input():
    enc, _ = build_autoencoder("eap")
    with pytest.raises((DimensionError, ConfigurationError)):
        enc(Tensor(np.zeros((2, 1, 24, 64))))


def test_encoder_block_order():
    kinds = [row.kind for row in EncoderSpec().layer_specs()]
    assert kinds[:4] == ["conv", "bn", "relu", "pool"] and len(kinds) == 16


def test_tel_model_full_resolution_outputs():
    model = build_combnet(TEL, 227, FULL_RESOLUTION).eval()
    with no_grad():
        logits = model(Tensor(np.random.default_rng(0).random((1, 1) + FULL_RESOLUTION)))
    assert logits.shape == (1, 227)
    assert model.intermediates["tel"].shape == (1, 1024)
    np.testing.assert_allclose(L.softmax(logits).data.sum(axis=1), 1.0, atol=1e-6)


def test_fc_model_has_no_signature():
    model = build_combnet(TWO_FC, 4, DESK_RESOLUTION)
    with pytest.raises(CapabilityError):
        model.signature(Tensor(np.zeros((1, 1) + DESK_RESOLUTION)))


def test_pretrained_without_weights():
    with pytest.raises(StateError):
        build_combnet(CombNetVariant(init="pretrained"), 4)


@pytest.mark.parametrize("pool", ["eap", "max"])
@pytest.mark.parametrize("head", ["tel", "fc"])
def test_stage1_weights_load_into_every_variant(pool, head):
    enc, dec = build_autoencoder(pool, seed=5)
    state = {f"encoder.{k}": v for k, v in enc.state_dict().items()}
    model = build_combnet(CombNetVariant(pool, head, "pretrained"), 3, DESK_RESOLUTION, state)
    for name, value in encoder_state(model).items():
        np.testing.assert_array_equal(value, state[name])


def test_load_state_shape_mismatch_names_tensor_and_writes_nothing():
    model = build_combnet(TEL, 5)
    before = {k: np.array(v) for k, v in model.state_dict().items()}
    other = build_combnet(TEL, 7, seed=3).state_dict()
    with pytest.raises(ShapeMismatchError, match="head.fc.weight"):
        load_state(model, other)
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_tel_logits_translation_invariance():
    """Global averaging forgets position: a texture patch on a blank field,
    shifted by multiples of 16 px (the encoder stride), gives the same logits.
    The patch keeps a wide margin so zero padding at the borders never sees it."""
    model = build_combnet(TEL, 5, (32, 256), seed=1).eval()
    rng = np.random.default_rng(0)
    x = np.zeros((2, 1, 32, 256))
    x[..., 64:128] = rng.random((2, 1, 32, 64))
    with no_grad():
        base = model(Tensor(x)).data
        for shift in (16, 32, 48, -16):
            moved = model(Tensor(np.roll(x, shift, axis=3))).data
            np.testing.assert_allclose(moved, base, atol=1e-4)
