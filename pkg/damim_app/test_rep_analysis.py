"""
表示分析测试：CKA 性质、跨域相似度、扰动与逐层目标探针、对比实验
"""

import numpy as np
import pytest

from modules.errors import ConfigError, ContractError, DataError, NumericError, ShapeError
from modules.rep_analysis import (
    ABLATION_VARIANTS,
    ComparisonRow,
    FeatureMatrix,
    ProbeReport,
    ablation_study,
    aux_encoder_study,
    cka,
    disruption_mask,
    disruption_probe,
    disruption_sweep,
    domain_similarity,
    layer_target_probe,
)
from modules.vit_encoder import VitEncoder, build_encoder_config


def random_pair(n=20, p=6, q=4, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, p)), rng.standard_normal((n, q))


def cka_by_features(x: np.ndarray, y: np.ndarray) -> float:
    """特征空间形式: ‖Y_cᵀX_c‖² / (‖X_cᵀX_c‖ ‖Y_cᵀY_c‖)"""
    xc, yc = x - x.mean(axis=0), y - y.mean(axis=0)
    cross = np.linalg.norm(yc.T @ xc, "fro") ** 2
    return cross / (np.linalg.norm(xc.T @ xc, "fro") * np.linalg.norm(yc.T @ yc, "fro"))


def test_self_similarity_is_one():
    x, _ = random_pair()
    assert cka(x, x) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("scale", [3.0, -0.5, 1e3])
def test_isotropic_scaling_invariance(scale):
    x, y = random_pair(seed=1)
    assert cka(scale * x, x) == pytest.approx(1.0, abs=1e-6)
    assert cka(scale * x, y) == pytest.approx(cka(x, y), abs=1e-6)


def test_orthogonal_invariance():
    x, y = random_pair(seed=2)
    q, _ = np.linalg.qr(np.random.default_rng(3).standard_normal((6, 6)))
    assert cka(x @ q, y) == pytest.approx(cka(x, y), abs=1e-6)


def test_symmetry_and_range_over_random_pairs():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        n = int(rng.integers(3, 12))
        x = rng.standard_normal((n, int(rng.integers(1, 5))))
        y = rng.standard_normal((n, int(rng.integers(1, 5))))
        value = cka(x, y)
        assert 0.0 <= value <= 1.0 + 1e-9
        assert abs(value - cka(y, x)) < 1e-10


def test_matches_feature_space_formula():
    for seed in range(20):
        x, y = random_pair(n=15, seed=seed)
        assert abs(cka(x, y) - cka_by_features(x, y)) < 1e-8


def test_constant_features_give_zero(caplog):
    x, _ = random_pair()
    with caplog.at_level("WARNING"):
        assert cka(np.ones((20, 3)), x) == 0.0
    assert "常数特征" in caplog.text


def test_cka_rejects_sample_count_mismatch():
    with pytest.raises(ShapeError):
        cka(np.zeros((4, 2)) + np.arange(4)[:, None], np.ones((5, 2)))


@pytest.mark.parametrize("array, error", [
    (np.zeros((1, 3)), ContractError),
    (np.zeros((2, 3, 4)), ShapeError),
    (np.array([[0.0, np.nan], [1.0, 2.0]]), NumericError),
])
def test_feature_matrix_validation(array, error):
    with pytest.raises(error):
        FeatureMatrix(array)


@pytest.fixture(scope="module")
def tiny_encoder():
    cfg = build_encoder_config(num_layers=2, hidden_size=16, num_attention_heads=2, patch_size=4, image_size=16)
    return VitEncoder(cfg, seed=2)


def test_identical_domains_have_similarity_one(tiny_encoder, tiny_domains):
    images = tiny_domains.domain_a.images
    assert domain_similarity(tiny_encoder, images, images, n=10, seed=3) == pytest.approx(1.0, abs=1e-6)


def test_domain_similarity_is_seeded(tiny_encoder, tiny_domains):
    a, b = tiny_domains.domain_a.images, tiny_domains.domain_b.images
    first = domain_similarity(tiny_encoder, a, b, n=10, seed=1)
    assert domain_similarity(tiny_encoder, a, b, n=10, seed=1) == first
    assert 0.0 <= first <= 1.0 + 1e-9


def test_domain_similarity_errors(tiny_encoder, tiny_domains):
    images = tiny_domains.domain_a.images
    with pytest.raises(ContractError):
        domain_similarity(tiny_encoder, images, images, n=1)
    with pytest.raises(DataError):
        domain_similarity(tiny_encoder, images[:5], images, n=10)


def test_domain_similarity_accepts_plain_embedders(tiny_domains):
    flatten = lambda x: x.reshape(len(x), -1)  # noqa: E731
    images = tiny_domains.domain_a.images
    assert domain_similarity(flatten, images, images, n=8) == pytest.approx(1.0, abs=1e-6)


def test_disruption_mask_count_and_seed():
    keep = disruption_mask(16, 0.5, seed=1)
    assert int((keep == 0).sum()) == 8
    assert np.array_equal(keep, disruption_mask(16, 0.5, seed=1))
    assert disruption_mask(16, 0.0, seed=1).all()
    assert not disruption_mask(16, 1.0, seed=1).any()


def test_zero_fraction_matches_undisrupted(tiny_encoder, tiny_domains):
    a, b = tiny_domains.domain_a.images, tiny_domains.domain_b.images
    plain = domain_similarity(tiny_encoder, a, b, n=10, seed=4)
    assert disruption_probe(tiny_encoder, a, b, layer=1, fraction=0.0, seed=4, n=10) == plain


@pytest.mark.parametrize("layer, fraction", [(0, 0.5), (3, 0.5), (1, -0.1), (1, 1.5)])
def test_disruption_probe_rejects_invalid(tiny_encoder, tiny_domains, layer, fraction):
    images = tiny_domains.domain_a.images
    with pytest.raises(ConfigError):
        disruption_probe(tiny_encoder, images, images, layer=layer, fraction=fraction, n=10)


def test_disruption_sweep_reports_every_layer(tiny_encoder, tiny_domains):
    a, b = tiny_domains.domain_a.images, tiny_domains.domain_b.images
    report = disruption_sweep(tiny_encoder, a, b, seeds=(0, 1), n=10)
    assert report.kind == "disrupt"
    assert report.layers == [1, 2]
    assert len(report.values) == 2
    assert report.to_rows()[0][0] == 1


def test_layer_target_probe(tiny_config, tiny_domains):
    losses, similarities = layer_target_probe(
        tiny_config(), tiny_domains.domain_a, tiny_domains.domain_b, layers=[2, 1], steps=2, seeds=(1,), n=10,
    )
    assert (losses.kind, similarities.kind) == ("layer-loss", "layer-cka")
    assert losses.layers == similarities.layers == [1, 2]
    assert all(np.isfinite(losses.values))


def test_layer_target_probe_is_deterministic_across_workers(tiny_config, tiny_domains):
    args = (tiny_config(), tiny_domains.domain_a, tiny_domains.domain_b)
    serial = layer_target_probe(*args, layers=[1, 2], steps=1, seeds=(1, 2), n=10, workers=1)
    pooled = layer_target_probe(*args, layers=[1, 2], steps=1, seeds=(1, 2), n=10, workers=3)
    assert serial[0].values == pooled[0].values
    assert serial[1].values == pooled[1].values


def test_ablation_study_runs_every_variant(tiny_config, tiny_domains):
    rows = ablation_study(
        tiny_config(steps=1), tiny_domains.domain_a, tiny_domains.domain_b,
        seeds=(1,), n=10, episodes=2, ways=2, shots=1, queries=1,
    )
    assert [row.variant for row in rows] == list(ABLATION_VARIANTS)
    assert all(len(row.cka) == 1 and len(row.accuracy) == 1 for row in rows)


def test_aux_encoder_study(tiny_config, tiny_domains):
    rows = aux_encoder_study(
        tiny_config(steps=1), tiny_domains.domain_a, tiny_domains.domain_b, modes=("IOG", "SOG"),
        seeds=(1,), n=10, episodes=2, ways=2, shots=1, queries=1,
    )
    assert [row.variant for row in rows] == ["IOG", "SOG"]


def test_comparison_row_formatting():
    row = ComparisonRow(variant="BL", cka=[0.1, 0.2], accuracy=[40.0, 50.0])
    assert row.to_row() == ("BL", 2, "0.150000", "45.0000", "0.100000 0.200000", "40.0000 50.0000")
    assert ProbeReport("disrupt", [1], [0.5]).to_rows() == [(1, "0.50000000")]


# 桌面规模的趋势复现，耗时较长，默认不运行（pytest -m slow）

@pytest.fixture(scope="module")
def desk_domains():
    from modules.synthetic_data import SyntheticSpec, generate_synthetic
    return generate_synthetic(SyntheticSpec(), seed=1)


@pytest.mark.slow
def test_shallow_layer_targets_are_easier_to_reconstruct(desk_domains, record_property):
    from modules import TrainConfig
    losses, _ = layer_target_probe(
        TrainConfig(), desk_domains.domain_a, desk_domains.domain_b, layers=[1, 6], steps=500, seeds=(1, 2, 3), workers=3,
    )
    record_property("layer_losses", [float(v) for v in losses.values])
    assert losses.values[0] < losses.values[-1]


@pytest.mark.slow
def test_disrupting_shallow_layers_raises_domain_similarity(desk_domains):
    from modules import TrainConfig
    from modules.trainer import train
    encoder = train(TrainConfig(regime="pixel"), desk_domains.domain_a).model.encoder
    report = disruption_sweep(
        encoder, desk_domains.domain_a.images, desk_domains.domain_b.images, seeds=(0, 1, 2, 3, 4), layers=[1, 6],
    )
    assert report.values[0] > report.values[-1]


@pytest.mark.slow
def test_damim_beats_pixel_baseline(desk_domains, record_property):
    from modules import TrainConfig
    from modules.rep_analysis import compare_variants
    rows = compare_variants(
        {"pixel": {"regime": "pixel"}, "damim": {"regime": "damim"}},
        TrainConfig(), desk_domains.domain_a, desk_domains.domain_b, seeds=(1, 2, 3, 4, 5),
    )
    pixel, damim = rows
    record_property("cka_margin", damim.cka_mean - pixel.cka_mean)
    record_property("accuracy_margin", damim.accuracy_mean - pixel.accuracy_mean)
    assert damim.cka_mean > pixel.cka_mean
    assert damim.accuracy_mean > pixel.accuracy_mean
