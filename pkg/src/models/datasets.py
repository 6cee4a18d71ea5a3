import hashlib

import numpy as np
from pydantic import model_validator

from src.models.tensors import ArrayModel


class Dataset(ArrayModel):
    images: np.ndarray  # N,C,H,W
    labels: np.ndarray  # N class indices
    num_classes: int
    split: str = "train"
    name: str = "dataset"
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    @model_validator(mode="after")
    def check_fields(self) -> "Dataset":
        if self.images.ndim != 4:
            raise ValueError("images must be an N,C,H,W array")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise ValueError("labels must hold one class index per image")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        return self

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        _, channels, height, width = self.images.shape
        return (int(channels), int(height), int(width))

    def digest(self) -> str:
        """SHA-256 over labels and raw image bytes; pins teacher logits to a dataset."""
        hasher = hashlib.sha256()
        hasher.update(np.ascontiguousarray(self.labels.astype("<i8")).tobytes())
        hasher.update(np.ascontiguousarray(self.images.astype("<f4")).tobytes())
        return hasher.hexdigest()

    def take(self, index: np.ndarray, split: str | None = None) -> "Dataset":
        return self.model_copy(
            update={
                "images": self.images[index],
                "labels": self.labels[index],
                "split": split or self.split,
            }
        )
