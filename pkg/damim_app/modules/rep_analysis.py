"""
表示分析模块
线性 CKA、跨域相似度、逐层扰动探针、逐层目标探针，以及组件消融与辅助编码器对比实验
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .config_loader import build_config
from .dataset import LabeledDataset
from .errors import ConfigError, ContractError, DataError, NumericError, ShapeError
from .fewshot_eval import evaluate
from .patch_mask import round_half_up
from .trainer import TrainConfig, Trainer
from .vit_encoder import AUX_MODES, TokenDisruption, VitEncoder

logger = logging.getLogger(__name__)

# ‖K_c‖² 相对 ‖K‖² 低于该比例视为常数特征
DEGENERATE_RATIO = 1e-20
DEFAULT_SAMPLES = 100

ABLATION_VARIANTS: Dict[str, Dict[str, str]] = {
    "BL": {"regime": "pixel", "decoder_preset": "mae"},
    "+AFR": {"regime": "damim", "decoder_preset": "mae"},
    "+LD": {"regime": "pixel", "decoder_preset": "ld"},
    "+AFR+LD": {"regime": "damim", "decoder_preset": "ld"},
}


@dataclass
class FeatureMatrix:
    """n 个样本 × p 维特征"""
    X: np.ndarray
    domain: str = ""
    layer: Optional[int] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ShapeError(f"特征矩阵必须是二维，实际 {self.X.shape}")
        if self.X.shape[0] < 2:
            raise ContractError(f"特征矩阵至少需要 2 个样本，实际 {self.X.shape[0]}")
        if np.isnan(self.X).any():
            raise NumericError(f"特征矩阵 {self.domain} 含 NaN")

    @property
    def n(self) -> int:
        return int(self.X.shape[0])


@dataclass
class ProbeReport:
    """逐层探针结果，layers 从 1 开始"""
    kind: str
    layers: List[int]
    values: List[float]
    seeds: List[int] = field(default_factory=list)

    CSV_HEADER = ("layer", "value")

    def to_rows(self) -> List[Tuple[int, str]]:
        return [(layer, f"{value:.8f}") for layer, value in zip(self.layers, self.values)]


@dataclass
class ComparisonRow:
    """一个实验变体在多个配对种子上的 CKA 与准确率"""
    variant: str
    cka: List[float]
    accuracy: List[float]

    CSV_HEADER = ("variant", "seeds", "cka_mean", "acc_mean", "cka_per_seed", "acc_per_seed")

    @property
    def cka_mean(self) -> float:
        return float(np.mean(self.cka))

    @property
    def accuracy_mean(self) -> float:
        return float(np.mean(self.accuracy))

    def to_row(self) -> Tuple:
        return (
            self.variant,
            len(self.cka),
            f"{self.cka_mean:.6f}",
            f"{self.accuracy_mean:.4f}",
            " ".join(f"{v:.6f}" for v in self.cka),
            " ".join(f"{v:.4f}" for v in self.accuracy),
        )


def _matrix(value: Union[FeatureMatrix, np.ndarray]) -> np.ndarray:
    return value.X if isinstance(value, FeatureMatrix) else FeatureMatrix(value).X


def centering_matrix(n: int) -> np.ndarray:
    return np.eye(n) - np.ones((n, n)) / n


def cka(X: Union[FeatureMatrix, np.ndarray], Y: Union[FeatureMatrix, np.ndarray]) -> float:
    """
    线性 CKA: Tr(K_c L_c) / √(Tr(K_c²) Tr(L_c²))，K = XXᵀ，L = YYᵀ，K_c = HKH

    Raises:
        ShapeError: 样本数不一致
    """
    x, y = _matrix(X), _matrix(Y)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"CKA 样本数不一致: {x.shape[0]} vs {y.shape[0]}")
    H = centering_matrix(x.shape[0])
    K, L = x @ x.T, y @ y.T
    Kc, Lc = H @ K @ H, H @ L @ H
    hsic_xy = float(np.sum(Kc * Lc))
    hsic_xx = float(np.sum(Kc * Kc))
    hsic_yy = float(np.sum(Lc * Lc))
    if hsic_xx <= DEGENERATE_RATIO * float(np.sum(K * K)) or hsic_yy <= DEGENERATE_RATIO * float(np.sum(L * L)):
        logger.warning("CKA 中心化后范数为 0（常数特征），按定义返回 0")
        return 0.0
    return hsic_xy / np.sqrt(hsic_xx * hsic_yy)


def _features(encoder, images: np.ndarray, disruption: Optional[TokenDisruption]) -> np.ndarray:
    if isinstance(encoder, VitEncoder):
        return encoder.pooled_features(images, disruption=disruption)
    if disruption is not None:
        raise ContractError("扰动探针需要 VitEncoder")
    return np.asarray(encoder(images))


def _take(images: np.ndarray, n: int, rng: np.random.Generator, what: str) -> np.ndarray:
    if images.shape[0] < n:
        raise DataError(f"{what} 只有 {images.shape[0]} 个样本，少于 n={n}")
    if images.shape[0] == n:
        return images
    return images[np.sort(rng.choice(images.shape[0], size=n, replace=False))]


def domain_similarity(
    encoder,
    source: np.ndarray,
    target: np.ndarray,
    n: int = DEFAULT_SAMPLES,
    seed: int = 0,
    disruption: Optional[TokenDisruption] = None,
) -> float:
    """
    源域与目标域各 n 个样本最终特征的 CKA；样本多于 n 时按种子子采样

    Raises:
        ContractError: n < 2
        DataError: 样本数少于 n
    """
    if n < 2:
        raise ContractError(f"domain_similarity 需要 n ≥ 2，实际 {n}")
    # 两个域用同一种子独立子采样，相同输入得到相同子集
    source = _take(np.asarray(source), n, np.random.default_rng(seed), "源域")
    target = _take(np.asarray(target), n, np.random.default_rng(seed), "目标域")
    fx = FeatureMatrix(_features(encoder, source, disruption), domain="source")
    fy = FeatureMatrix(_features(encoder, target, disruption), domain="target")
    return cka(fx, fy)


def disruption_mask(num_patches: int, fraction: float, seed: int) -> np.ndarray:
    """按种子选 round(N·fraction) 个 token 置零，返回 keep 向量"""
    count = round_half_up(num_patches * fraction)
    keep = np.ones(num_patches, dtype=np.int8)
    if count > 0:
        keep[np.random.default_rng(seed).choice(num_patches, size=count, replace=False)] = 0
    return keep


def disruption_probe(
    encoder: VitEncoder,
    source: np.ndarray,
    target: np.ndarray,
    layer: int,
    fraction: float = 0.5,
    seed: int = 0,
    n: int = DEFAULT_SAMPLES,
) -> float:
    """
    在第 layer 个 block 输出处置零一部分 token（所有样本位置相同），再测最终特征的跨域 CKA

    Raises:
        ConfigError: 层号越界或 fraction 不在 [0, 1]
    """
    if not 1 <= layer <= encoder.num_layers:
        raise ConfigError(f"扰动层号必须在 1..{encoder.num_layers}，实际 {layer}")
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"扰动比例必须在 [0, 1]，实际 {fraction}")
    keep = disruption_mask(encoder.cfg.num_patches, fraction, seed)
    disruption = TokenDisruption(layer=layer, keep=keep) if not keep.all() else None
    return domain_similarity(encoder, source, target, n=n, seed=seed, disruption=disruption)


def disruption_sweep(
    encoder: VitEncoder,
    source: np.ndarray,
    target: np.ndarray,
    fraction: float = 0.5,
    seeds: Sequence[int] = (0,),
    n: int = DEFAULT_SAMPLES,
    layers: Optional[Iterable[int]] = None,
) -> ProbeReport:
    """逐层扰动，每层取多个种子的平均 CKA"""
    layers = list(layers) if layers is not None else list(range(1, encoder.num_layers + 1))
    values = []
    for layer in tqdm(layers, desc="disrupt", leave=False):
        per_seed = [disruption_probe(encoder, source, target, layer, fraction, seed, n) for seed in seeds]
        values.append(float(np.mean(per_seed)))
        logger.info(f"扰动第 {layer} 层 (fraction={fraction}): CKA={values[-1]:.6f}")
    return ProbeReport(kind="disrupt", layers=layers, values=values, seeds=list(seeds))


def _variant_config(template: TrainConfig, **updates) -> TrainConfig:
    return build_config(TrainConfig, **{**template.model_dump(), **updates})


def layer_target_probe(
    template: TrainConfig,
    source: LabeledDataset,
    target: LabeledDataset,
    layers: Iterable[int],
    steps: int,
    seeds: Sequence[int] = (1,),
    n: int = DEFAULT_SAMPLES,
    workers: int = 1,
) -> Tuple[ProbeReport, ProbeReport]:
    """
    每个 l 以 layer_l 目标训练一个模型（相同步数与种子），
    记录末窗口重建损失与训练后的跨域 CKA

    Returns:
        (损失报告, 相似度报告)
    """
    layers = sorted(set(layers))
    jobs = [(layer, seed) for layer in layers for seed in seeds]

    def run(job: Tuple[int, int]) -> Tuple[float, float]:
        layer, seed = job
        config = _variant_config(template, regime=f"layer_{layer}", steps=steps, seed=seed)
        result = Trainer(config, source).train()
        similarity = domain_similarity(result.model.encoder, source.images, target.images, n=n, seed=seed)
        return result.window_loss("final"), similarity

    with ThreadPoolExecutor(max_workers=workers) as pool:
        outcomes = list(tqdm(pool.map(run, jobs), total=len(jobs), desc="layer-probe", leave=False))

    losses, similarities = [], []
    for i, layer in enumerate(layers):
        chunk = outcomes[i * len(seeds):(i + 1) * len(seeds)]
        losses.append(float(np.mean([loss for loss, _ in chunk])))
        similarities.append(float(np.mean([sim for _, sim in chunk])))
        logger.info(f"layer_{layer}: 末窗口损失 {losses[-1]:.6f}, CKA {similarities[-1]:.6f}")
    return (
        ProbeReport(kind="layer-loss", layers=layers, values=losses, seeds=list(seeds)),
        ProbeReport(kind="layer-cka", layers=layers, values=similarities, seeds=list(seeds)),
    )


def _train_and_measure(
    config: TrainConfig,
    source: LabeledDataset,
    target: LabeledDataset,
    n: int,
    episodes: int,
    ways: int,
    shots: int,
    queries: int,
) -> Tuple[float, float]:
    encoder = Trainer(config, source).train().model.encoder
    similarity = domain_similarity(encoder, source.images, target.images, n=n, seed=config.seed)
    report = evaluate(encoder, target, ways=ways, shots=shots, queries=queries, episodes=episodes, seed=config.seed)
    return similarity, report.mean_accuracy


def compare_variants(
    variants: Dict[str, Dict],
    template: TrainConfig,
    source: LabeledDataset,
    target: LabeledDataset,
    seeds: Sequence[int] = (1, 2, 3, 4, 5),
    n: int = DEFAULT_SAMPLES,
    episodes: int = 100,
    ways: int = 5,
    shots: int = 5,
    queries: int = 15,
) -> List[ComparisonRow]:
    """每个变体用同一组种子训练，报告 CKA 与目标域原型准确率"""
    rows = []
    for name, updates in variants.items():
        ckas, accs = [], []
        for seed in tqdm(seeds, desc=name, leave=False):
            config = _variant_config(template, seed=seed, **updates)
            similarity, accuracy = _train_and_measure(config, source, target, n, episodes, ways, shots, queries)
            ckas.append(similarity)
            accs.append(accuracy)
        row = ComparisonRow(variant=name, cka=ckas, accuracy=accs)
        logger.info(f"{name}: CKA={row.cka_mean:.6f}, acc={row.accuracy_mean:.2f}%")
        rows.append(row)
    for row in rows[1:]:
        logger.info(
            f"{row.variant} 相对 {rows[0].variant}: ΔCKA={row.cka_mean - rows[0].cka_mean:+.6f}, "
            f"Δacc={row.accuracy_mean - rows[0].accuracy_mean:+.2f}"
        )
    return rows


def ablation_study(template: TrainConfig, source: LabeledDataset, target: LabeledDataset, **kwargs) -> List[ComparisonRow]:
    """基线 / +AFR / +LD / +AFR+LD 组件消融"""
    return compare_variants(ABLATION_VARIANTS, template, source, target, **kwargs)


def aux_encoder_study(
    template: TrainConfig,
    source: LabeledDataset,
    target: LabeledDataset,
    modes: Sequence[str] = AUX_MODES,
    **kwargs,
) -> List[ComparisonRow]:
    """damim 目标下各辅助编码器模式的对比"""
    variants = {mode: {"regime": "damim", "aux_mode": mode} for mode in modes}
    return compare_variants(variants, template, source, target, **kwargs)
