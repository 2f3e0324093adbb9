"""
小样本评估模块
k-way n-shot 任务采样、原型分类、支持集微调与带置信区间的准确率汇总
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from . import tensor_core as tc
from .dataset import LabeledDataset
from .errors import ConfigError, DataError, ShapeError
from .layers import Linear, normal_init
from .optim import SGD
from .presets import get_optimizer_preset
from .vit_encoder import VitEncoder

logger = logging.getLogger(__name__)

# 图像 (B×H×W×C) -> 特征 (B×d)
Embedder = Callable[[np.ndarray], np.ndarray]

CI_Z = 1.96
NORM_EPS = 1e-12
DEFAULT_FINETUNE_LR = 0.01


class EvalConfig(BaseModel):
    """小样本评估配置"""
    model_config = ConfigDict(extra="forbid")

    ways: int = Field(default=5, ge=1, description="k")
    shots: int = Field(default=5, ge=1, description="n")
    queries: int = Field(default=15, ge=1, description="每类查询数 q")
    episodes: int = Field(default=600, ge=1, description="任务数 E")
    mode: Literal["proto", "finetune"] = Field(default="proto", description="评估方式")
    distance: Literal["euclidean", "cosine"] = Field(default="euclidean", description="原型距离")
    finetune_steps: int = Field(default=50, ge=0, description="微调步数")
    finetune_lr: Optional[float] = Field(default=None, gt=0.0, description="微调分类器学习率（覆盖预设）")
    optimizer_preset: Optional[str] = Field(default=None, description="微调学习率预设: desk / paper-finetune（分类器与主干分组）")
    workers: int = Field(default=4, ge=1, description="并行评估线程数")
    seed: int = Field(default=1, description="随机种子")

    def finetune_lrs(self) -> Tuple[float, float]:
        """
        (分类器, 编码器) 学习率

        finetune_lr 优先，其次预设的 classifier / encoder 组，都没有时两者均为 0.01。
        """
        if self.optimizer_preset is None:
            lr = DEFAULT_FINETUNE_LR if self.finetune_lr is None else self.finetune_lr
            return lr, lr
        preset = get_optimizer_preset(self.optimizer_preset)
        lr = preset.lr.classifier if self.finetune_lr is None else self.finetune_lr
        return lr, preset.lr.encoder


def format_half_up(value: float, places: int = 4) -> str:
    """按十进制表示四舍五入（0.5 向上）"""
    quantum = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(value))).quantize(quantum, rounding=ROUND_HALF_UP))


@dataclass
class Episode:
    """
    一个 k-way n-shot 任务；标签已重映射到 0..k−1，classes[i] 为原始类别
    """
    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    classes: np.ndarray
    support_indices: np.ndarray
    query_indices: np.ndarray

    @property
    def ways(self) -> int:
        return int(self.classes.shape[0])

    @property
    def shots(self) -> int:
        return int(self.support_labels.shape[0] // max(self.ways, 1))


@dataclass
class EpisodeResult:
    predictions: np.ndarray
    accuracy: float


@dataclass
class EvalReport:
    mean_accuracy: float
    ci95: float
    episodes: int
    accuracies: np.ndarray
    ways: int = 5
    shots: int = 5
    queries: int = 15
    mode: str = "proto"
    distance: str = "euclidean"

    CSV_HEADER = ("k", "n", "q", "episodes", "mode", "distance", "mean_acc", "ci95")

    def to_row(self) -> Tuple:
        return (
            self.ways, self.shots, self.queries, self.episodes, self.mode, self.distance,
            format_half_up(self.mean_accuracy), format_half_up(self.ci95),
        )


@dataclass
class FinetuneResult:
    encoder: VitEncoder
    classifier: Linear
    support_accuracy: float
    losses: List[float] = field(default_factory=list)


def sample_episode(dataset: LabeledDataset, ways: int, shots: int, queries: int, seed: int) -> Episode:
    """
    无放回均匀采样 k 个类别，每类 n 个支持样本与 q 个查询样本

    Raises:
        ConfigError: k / n / q 非正
        DataError: 类别数或每类样本数不足
    """
    if ways < 1 or shots < 1 or queries < 1:
        raise ConfigError(f"k, n, q 必须为正: k={ways}, n={shots}, q={queries}")
    by_class = dataset.indices_by_class()
    need = shots + queries
    eligible = sorted(c for c, idx in by_class.items() if len(idx) >= need)
    if len(eligible) < ways:
        short = {c: len(idx) for c, idx in by_class.items() if len(idx) < need}
        raise DataError(
            f"需要 {ways} 个每类至少 {need} 个样本的类别，只有 {len(eligible)} 个满足"
            f"（共 {len(by_class)} 个类别，缺少 {ways - len(eligible)} 个；样本不足的类别: {short}）"
        )
    rng = np.random.default_rng(seed)
    classes = rng.choice(np.asarray(eligible), size=ways, replace=False)
    support, query = [], []
    for cls in classes:
        picked = rng.choice(by_class[int(cls)], size=need, replace=False)
        support.append(picked[:shots])
        query.append(picked[shots:])
    support_idx = np.concatenate(support)
    query_idx = np.concatenate(query)
    return Episode(
        support_images=dataset.images[support_idx],
        support_labels=np.repeat(np.arange(ways), shots),
        query_images=dataset.images[query_idx],
        query_labels=np.repeat(np.arange(ways), queries),
        classes=classes,
        support_indices=support_idx,
        query_indices=query_idx,
    )


def prototypes(features: np.ndarray, labels: np.ndarray, ways: int) -> np.ndarray:
    """每类支持特征的均值"""
    return np.stack([features[labels == i].mean(axis=0) for i in range(ways)])


def prototype_distances(query: np.ndarray, protos: np.ndarray, distance: str = "euclidean") -> np.ndarray:
    """查询到各原型的距离矩阵（欧氏距离取平方，不影响 argmin）"""
    query = np.asarray(query, dtype=np.float64)
    protos = np.asarray(protos, dtype=np.float64)
    if distance == "euclidean":
        diff = query[:, None, :] - protos[None, :, :]
        return (diff * diff).sum(axis=-1)
    if distance == "cosine":
        qn = query / np.maximum(np.linalg.norm(query, axis=1, keepdims=True), NORM_EPS)
        pn = protos / np.maximum(np.linalg.norm(protos, axis=1, keepdims=True), NORM_EPS)
        return 1.0 - qn @ pn.T
    raise ConfigError(f"未知距离类型: {distance}")


def classify_features(
    support: np.ndarray,
    query: np.ndarray,
    episode: Episode,
    distance: str = "euclidean",
) -> EpisodeResult:
    """
    在已提取的特征上做最近原型分类，距离相同取较小类别序号

    Args:
        support: 支持集特征，行顺序与 episode.support_labels 一致
        query: 查询集特征，行顺序与 episode.query_labels 一致
    """
    support = np.asarray(support, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    protos = prototypes(support, episode.support_labels, episode.ways)
    predictions = np.argmin(prototype_distances(query, protos, distance), axis=1)
    accuracy = 100.0 * float(np.mean(predictions == episode.query_labels))
    return EpisodeResult(predictions=predictions, accuracy=accuracy)


def classify_prototype(embedder: Embedder, episode: Episode, distance: str = "euclidean") -> EpisodeResult:
    """最近原型分类：先提取支持集与查询集特征"""
    return classify_features(embedder(episode.support_images), embedder(episode.query_images), episode, distance)


def finetune_episode(
    encoder: VitEncoder,
    episode: Episode,
    steps: int = 50,
    lr: float = 0.01,
    seed: int = 0,
    momentum: float = 0.9,
    encoder_lr: Optional[float] = None,
) -> FinetuneResult:
    """
    在支持集上微调编码器副本与 k 类线性分类器（SGD momentum），原编码器不变

    Args:
        lr: 分类器学习率
        encoder_lr: 编码器副本学习率，默认与 lr 相同

    Raises:
        ConfigError: 学习率 ≤ 0
        DataError: 支持集为空
    """
    encoder_lr = lr if encoder_lr is None else encoder_lr
    if lr <= 0 or encoder_lr <= 0:
        raise ConfigError(f"微调学习率必须为正: lr={lr}, encoder_lr={encoder_lr}")
    if len(episode.support_labels) == 0:
        raise DataError("支持集为空，无法微调")
    adapted = encoder.copy()
    rng = np.random.default_rng(seed)
    classifier = Linear(encoder.cfg.hidden_size, episode.ways, rng)
    classifier.weight.data = normal_init(rng, classifier.weight.shape)

    losses = []
    if steps > 0:
        groups = [
            {"name": "encoder", "params": adapted.parameters(), "lr": encoder_lr},
            {"name": "classifier", "params": classifier.parameters(), "lr": lr},
        ]
        optimizer = SGD(groups, lr=lr, momentum=momentum)
        for _ in range(steps):
            logits = classifier(adapted.encode_pooled(episode.support_images))
            loss = tc.cross_entropy(logits, episode.support_labels)
            tc.check_finite(loss, "微调损失")
            loss.backward()
            optimizer.step()
            losses.append(loss.item())

    predictions = predict_finetuned(adapted, classifier, episode.support_images)
    support_accuracy = 100.0 * float(np.mean(predictions == episode.support_labels))
    return FinetuneResult(encoder=adapted, classifier=classifier, support_accuracy=support_accuracy, losses=losses)


def predict_finetuned(encoder: VitEncoder, classifier: Linear, images: np.ndarray) -> np.ndarray:
    with tc.no_grad():
        logits = classifier(tc.as_tensor(encoder.pooled_features(images)))
    return np.argmax(logits.data, axis=1)


def summarize(accuracies: Sequence[float]) -> Tuple[np.ndarray, float, float]:
    """排序后计算均值与 95% 置信半宽 1.96·std/√E"""
    ordered = np.sort(np.asarray(accuracies, dtype=np.float64))
    mean = float(ordered.mean())
    ci = CI_Z * float(ordered.std()) / np.sqrt(len(ordered))
    return ordered, mean, ci


def evaluate(
    encoder,
    dataset: LabeledDataset,
    ways: int = 5,
    shots: int = 5,
    queries: int = 15,
    episodes: int = 600,
    seed: int = 1,
    mode: str = "proto",
    distance: str = "euclidean",
    finetune_steps: int = 50,
    finetune_lr: float = 0.01,
    workers: int = 4,
    finetune_encoder_lr: Optional[float] = None,
) -> EvalReport:
    """
    多任务评估，第 i 个任务使用种子 seed + i

    proto 模式先对整个数据集提取一次特征，各任务按样本下标取用。

    Args:
        encoder: proto 模式下任意 Embedder；finetune 模式需要 VitEncoder
        finetune_lr: 微调分类器学习率
        finetune_encoder_lr: 微调编码器学习率，默认同 finetune_lr

    Raises:
        ConfigError: episodes < 1 或模式非法
        DataError: 采样失败
        ShapeError: 特征行数与数据集大小不一致
    """
    if episodes < 1:
        raise ConfigError(f"任务数必须 ≥ 1: {episodes}")
    if mode not in ("proto", "finetune"):
        raise ConfigError(f"未知评估模式: {mode}")
    if mode == "finetune" and not isinstance(encoder, VitEncoder):
        raise ConfigError("finetune 模式需要 VitEncoder")

    def run(index: int) -> float:
        episode = sample_episode(dataset, ways, shots, queries, seed + index)
        if mode == "proto":
            support = features[episode.support_indices]
            query = features[episode.query_indices]
            return classify_features(support, query, episode, distance).accuracy
        adapted = finetune_episode(
            encoder, episode, finetune_steps, finetune_lr, seed=seed + index, encoder_lr=finetune_encoder_lr,
        )
        predictions = predict_finetuned(adapted.encoder, adapted.classifier, episode.query_images)
        return 100.0 * float(np.mean(predictions == episode.query_labels))

    logger.info(f"开始评估: {ways}-way {shots}-shot, q={queries}, E={episodes}, mode={mode}, distance={distance}")
    # 先在主线程采样一次，让数据不足的错误直接抛出
    sample_episode(dataset, ways, shots, queries, seed)
    features = None
    if mode == "proto":
        features = np.asarray(encoder(dataset.images), dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != len(dataset):
            raise ShapeError(f"特征形状 {features.shape} 与数据集大小 {len(dataset)} 不符")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        accuracies = list(tqdm(pool.map(run, range(episodes)), total=episodes, desc=f"eval[{mode}]", leave=False))

    ordered, mean, ci = summarize(accuracies)
    report = EvalReport(
        mean_accuracy=mean, ci95=ci, episodes=episodes, accuracies=ordered,
        ways=ways, shots=shots, queries=queries, mode=mode, distance=distance,
    )
    logger.info(f"✅ 评估完成: {mean:.2f}% ± {ci:.2f}")
    return report


def evaluate_with_config(encoder, dataset: LabeledDataset, config: EvalConfig) -> EvalReport:
    classifier_lr, encoder_lr = config.finetune_lrs()
    return evaluate(
        encoder, dataset,
        ways=config.ways, shots=config.shots, queries=config.queries, episodes=config.episodes,
        seed=config.seed, mode=config.mode, distance=config.distance,
        finetune_steps=config.finetune_steps, finetune_lr=classifier_lr, finetune_encoder_lr=encoder_lr,
        workers=config.workers,
    )
