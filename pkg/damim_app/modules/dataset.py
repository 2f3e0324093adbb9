"""
带标签图像数据集
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import DataError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class LabeledDataset:
    """
    images: M×H×W×C，取值 [0,1]；labels: 长度 M 的类别序号
    """
    images: np.ndarray
    labels: np.ndarray
    domain: str = ""
    filenames: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"图像数 {self.images.shape[0]} 与标签数 {self.labels.shape[0]} 不一致")
        if self.images.size and not np.all(np.isfinite(self.images)):
            raise DataError(f"数据集 {self.domain} 含非有限像素值")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def indices_by_class(self) -> Dict[int, np.ndarray]:
        return {int(c): np.flatnonzero(self.labels == c) for c in self.classes}

    def subset(self, indices: np.ndarray, domain: Optional[str] = None) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        names = [self.filenames[i] for i in indices] if self.filenames else []
        return LabeledDataset(self.images[indices], self.labels[indices], domain or self.domain, names)
