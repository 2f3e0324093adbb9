"""
ViT 编码器与辅助编码器测试
"""

import numpy as np
import pytest

from modules import tensor_core as tc
from modules.errors import ConfigError, ShapeError
from modules.patch_mask import patchify, sample_batch_masks, split_by_mask
from modules.tensor_core import DiffTensor
from modules.vit_encoder import (
    AUX_MODES,
    AuxiliaryEncoder,
    TokenDisruption,
    VitEncoder,
    build_encoder_config,
    encode_full_with_taps,
    expected_encoder_parameters,
)


def tiny_cfg(**overrides):
    fields = dict(num_layers=2, hidden_size=16, num_attention_heads=2, patch_size=4, image_size=16)
    fields.update(overrides)
    return build_encoder_config(**fields)


@pytest.fixture
def images():
    return np.random.default_rng(0).random((3, 16, 16, 3)).astype(np.float32)


def test_parameter_count_matches_closed_form():
    cfg = tiny_cfg()
    assert VitEncoder(cfg).num_parameters() == expected_encoder_parameters(cfg)


@pytest.mark.parametrize("overrides", [
    {"num_attention_heads": 3},
    {"image_size": 18},
    {"dropout": 0.1},
])
def test_build_encoder_config_rejects_invalid(overrides):
    with pytest.raises(ConfigError):
        tiny_cfg(**overrides)


def test_encode_visible_shape(images):
    encoder = VitEncoder(tiny_cfg())
    batch = patchify(images, 4)
    split = split_by_mask(batch, sample_batch_masks(3, 16, 0.75, seed=1))
    latent = encoder.encode_visible(split.visible, split.ids_keep)
    assert latent.shape == (3, 4, 16)


def test_encode_visible_rejects_out_of_range_position(images):
    encoder = VitEncoder(tiny_cfg())
    visible = patchify(images, 4).patches[:, :2]
    with pytest.raises(ShapeError):
        encoder.encode_visible(visible, np.array([[0, 16]] * 3))


def test_encode_full_returns_one_tap_per_layer(images):
    encoder = VitEncoder(tiny_cfg())
    encoded, taps = encoder.encode_full(patchify(images, 4).patches)
    assert encoded.shape == (3, 16, 16)
    assert len(taps) == 2
    assert all(tap.shape == (3, 16, 16) for tap in taps)


def test_same_seed_builds_identical_encoders():
    a, b = VitEncoder(tiny_cfg(), seed=3), VitEncoder(tiny_cfg(), seed=3)
    for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(pa.data, pb.data), name


def test_pooled_features_match_differentiable_path(images):
    encoder = VitEncoder(tiny_cfg())
    frozen = encoder.pooled_features(images, batch_size=2)
    assert frozen.shape == (3, 16)
    np.testing.assert_allclose(frozen, encoder.encode_pooled(images).data, rtol=1e-5, atol=1e-6)


def test_disruption_keeping_every_token_changes_nothing(images):
    encoder = VitEncoder(tiny_cfg())
    keep_all = TokenDisruption(layer=1, keep=np.ones(16, dtype=np.int8))
    assert np.array_equal(encoder.pooled_features(images, disruption=keep_all), encoder.pooled_features(images))


def test_disruption_zeroes_tokens_at_the_given_layer(images):
    encoder = VitEncoder(tiny_cfg())
    keep = np.ones(16, dtype=np.int8)
    keep[:8] = 0
    _, taps = encoder.run_blocks(
        encoder.embed_tokens(patchify(images, 4).patches, np.broadcast_to(np.arange(16), (3, 16))),
        TokenDisruption(layer=1, keep=keep),
    )
    assert np.all(taps[0].data[:, :8] == 0)
    assert np.any(taps[0].data[:, 8:] != 0)


def test_aux_mode_is_case_insensitive():
    aux = AuxiliaryEncoder(VitEncoder(tiny_cfg()), "iwg")
    assert aux.mode == "IWG"


def test_aux_unknown_mode_raises():
    with pytest.raises(ConfigError):
        AuxiliaryEncoder(VitEncoder(tiny_cfg()), "frozen")


@pytest.mark.parametrize("mode, shared, provenance", [
    ("shared_with_grad_detached", True, "detached"),
    ("SOG", True, "detached"),
    ("IWG", False, "attached"),
    ("IOG", False, "detached"),
    ("IE", False, "detached"),
])
def test_aux_modes(images, mode, shared, provenance):
    primary = VitEncoder(tiny_cfg())
    aux = AuxiliaryEncoder(primary, mode)
    assert (aux.encoder is primary) == shared
    features = aux.encode_full_with_taps(patchify(images, 4).patches)
    assert features.provenance == provenance
    assert features.num_layers == 2
    assert all(tap.requires_grad == (provenance == "attached") for tap in features.features)
    assert bool(aux.trainable_parameters()) == (mode == "IWG")
    assert (aux.state_dict() == {}) == shared


def test_iwg_trainable_parameters_stop_at_tapped_layer():
    aux = AuxiliaryEncoder(VitEncoder(tiny_cfg()), "IWG")
    ids = {id(p) for p in aux.trainable_parameters(up_to_layer=1)}
    assert all(id(p) in ids for p in aux.encoder.blocks[0].parameters())
    assert not any(id(p) in ids for p in aux.encoder.blocks[1].parameters())
    assert not any(id(p) in ids for p in aux.encoder.norm.parameters())


def test_independent_copy_ignores_primary_updates(images):
    primary = VitEncoder(tiny_cfg())
    aux = AuxiliaryEncoder(primary, "IOG")
    patches = patchify(images, 4).patches
    before = aux.encode_full_with_taps(patches)[2].data.copy()
    primary.patch_embed.weight.data = primary.patch_embed.weight.data + 1.0
    assert np.array_equal(aux.encode_full_with_taps(patches)[2].data, before)


def test_ema_update_moves_towards_primary():
    primary = VitEncoder(tiny_cfg())
    aux = AuxiliaryEncoder(primary, "IE", ema_decay=0.9)
    old = aux.encoder.pos_embed.data.copy()
    primary.pos_embed.data = primary.pos_embed.data + 1.0
    aux.update()
    np.testing.assert_allclose(aux.encoder.pos_embed.data, old + 0.1, rtol=1e-5, atol=1e-6)


def test_detached_taps_give_same_gradient_as_constant_targets(images, float64):
    patches = patchify(images, 4).patches
    masks = sample_batch_masks(3, 16, 0.5, seed=2)

    def encoder_grads(use_aux: bool):
        encoder = VitEncoder(tiny_cfg(), seed=9)
        split = split_by_mask(patches, masks)
        latent = encoder.encode_visible(split.visible, split.ids_keep)
        if use_aux:
            target = encode_full_with_taps(encoder, patches)[1]
        else:
            with tc.no_grad():
                target = DiffTensor(encoder.encode_full(patches)[1][0].data.copy())
        target_visible = tc.gather_rows(target, split.ids_keep)
        tc.mse(latent, target_visible).backward()
        return {name: p.grad.copy() for name, p in encoder.named_parameters() if p.grad is not None}

    with_aux, constant = encoder_grads(True), encoder_grads(False)
    assert with_aux.keys() == constant.keys()
    for name in constant:
        np.testing.assert_allclose(with_aux[name], constant[name], rtol=1e-12, atol=1e-14)


def test_all_aux_modes_listed():
    assert set(AUX_MODES) == {"shared_with_grad_detached", "IWG", "IOG", "IE", "SOG"}


def test_ema_with_unit_decay_keeps_aux_weights():
    primary = VitEncoder(tiny_cfg())
    aux = AuxiliaryEncoder(primary, "IE", ema_decay=1.0)
    before = aux.encoder.state_dict()
    for param in primary.parameters():
        param.data = param.data + 1.0
    aux.update()
    for name, value in aux.encoder.state_dict().items():
        np.testing.assert_array_equal(value, before[name])


def test_shared_aux_sees_primary_weight_edits(images):
    primary = VitEncoder(tiny_cfg())
    aux = AuxiliaryEncoder(primary, "shared_with_grad_detached")
    patches = patchify(images, 4).patches
    before = aux.encode_full_with_taps(patches)[1].data.copy()
    primary.patch_embed.weight.data = primary.patch_embed.weight.data + 1.0
    assert not np.allclose(aux.encode_full_with_taps(patches)[1].data, before)


def test_permuting_visible_tokens_permutes_latent(images, float64):
    encoder = VitEncoder(tiny_cfg(), seed=6)
    split = split_by_mask(patchify(images, 4), sample_batch_masks(3, 16, 0.5, seed=4))
    latent = encoder.encode_visible(split.visible, split.ids_keep).data
    perm = np.random.default_rng(1).permutation(split.visible.shape[1])
    permuted = encoder.encode_visible(split.visible[:, perm], split.ids_keep[:, perm]).data
    np.testing.assert_allclose(permuted, latent[:, perm], rtol=1e-12, atol=1e-12)


def test_visible_pass_over_all_patches_equals_full_pass(images, float64):
    encoder = VitEncoder(tiny_cfg(), seed=6)
    patches = patchify(images, 4).patches
    every = np.tile(np.arange(16), (3, 1))
    encoded, _ = encoder.encode_full(patches)
    np.testing.assert_array_equal(encoder.encode_visible(patches, every).data, encoded.data)


@pytest.mark.parametrize("mode", ["shared_with_grad_detached", "IWG"])
def test_truncated_tap_pass_matches_full_pass(images, mode):
    aux = AuxiliaryEncoder(VitEncoder(tiny_cfg(), seed=2), mode)
    patches = patchify(images, 4).patches
    full = aux.encode_full_with_taps(patches)
    first = aux.encode_full_with_taps(patches, up_to_layer=1)
    assert first.num_layers == 1
    np.testing.assert_array_equal(first[1].data, full[1].data)
