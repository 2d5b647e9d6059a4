from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODALITIES = ("visual", "text", "audio")
PROVIDERS = ("remote", "synthetic")


@dataclass(frozen=True)
class FeatureKey:
    conv_id: str
    index: int
    modality: str
    provider_tag: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")


@dataclass(frozen=True, eq=False)
class FeatureRecord:
    """One per-utterance feature vector of a single modality."""

    key: FeatureKey
    vector: np.ndarray
    provider: str = "synthetic"
    corrupted: bool = False

    def __post_init__(self):
        vec = np.ascontiguousarray(self.vector, dtype=np.float32)
        if vec.ndim != 1 or vec.size == 0:
            raise ValueError("feature vector must be a non-empty 1-D array")
        if not np.isfinite(vec).all():
            raise ValueError(f"non-finite feature for {self.key}")
        if self.provider not in PROVIDERS:
            raise ValueError(f"unknown provider {self.provider!r}")
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return int(self.vector.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureRecord):
            return NotImplemented
        return (self.key == other.key and self.provider == other.provider
                and self.corrupted == other.corrupted
                and self.vector.tobytes() == other.vector.tobytes())
