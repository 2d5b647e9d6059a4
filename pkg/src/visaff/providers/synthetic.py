"""Synthetic per-utterance features standing in for frozen encoders.

Each modality draws from class centers on the unit sphere; an
``informativeness`` weight mixes the true class center with a distractor
class center, and visual features can be corrupted (blur, swap, dropout) at a
configured rate. Every vector is a pure function of (spec, key, seed).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .._rng import named_rng
from ..datamodel import Conversation, Dataset, EmotionLabel, Utterance
from .cache import FeatureCache
from .records import MODALITIES, FeatureKey, FeatureRecord

SYNTHETIC_TAG = "synth"
CORRUPTION_MODES = ("blur", "swap", "dropout")
BLUR_SHRINK = 0.1
DEFAULT_DIMS = {"visual": 64, "text": 48, "audio": 48}


@dataclass(frozen=True)
class SyntheticSpec:
    K: int = 4
    dims: dict = field(default_factory=lambda: dict(DEFAULT_DIMS))
    class_centers_seed: int = 0
    noise_sigma: float = 0.1
    corruption_rate: float = 0.0
    corruption_mode: str = "blur"
    modality_informativeness: dict = field(default_factory=lambda: {"visual": 1.0, "text": 1.0, "audio": 1.0})

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if set(self.dims) != set(MODALITIES) or min(self.dims.values()) < 2:
            raise ValueError("dims must give every modality a size >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ValueError("corruption_rate must lie in [0, 1]")
        if self.corruption_mode not in CORRUPTION_MODES:
            raise ValueError(f"corruption_mode must be one of {CORRUPTION_MODES}")
        if set(self.modality_informativeness) != set(MODALITIES) or not all(
                0.0 <= w <= 1.0 for w in self.modality_informativeness.values()):
            raise ValueError("modality_informativeness needs a weight in [0, 1] per modality")

    def to_dict(self) -> dict:
        return asdict(self)


def class_centers(spec: SyntheticSpec, modality: str) -> np.ndarray:
    rng = named_rng(spec.class_centers_seed, "centers", modality)
    centers = rng.standard_normal((spec.K, spec.dims[modality]))
    return centers / np.linalg.norm(centers, axis=1, keepdims=True)


def synthesize_features(spec: SyntheticSpec, label: int, modality: str, seed: int,
                        conv_id: str = "", index: int = 0, centers: np.ndarray | None = None) -> FeatureRecord:
    if not 0 <= label < spec.K:
        raise ValueError(f"label {label} outside [0, {spec.K})")
    if centers is None:
        centers = class_centers(spec, modality)
    rng = named_rng(seed, conv_id, index, modality)
    w = spec.modality_informativeness[modality]
    others = [k for k in range(spec.K) if k != label]
    distractor = others[int(rng.integers(len(others)))]
    noise = rng.standard_normal(spec.dims[modality]) * spec.noise_sigma
    corrupted = modality == "visual" and bool(rng.random() < spec.corruption_rate)
    signal = w * centers[label] + (1.0 - w) * centers[distractor]
    if corrupted:
        if spec.corruption_mode == "blur":
            signal = BLUR_SHRINK * signal
        elif spec.corruption_mode == "swap":
            signal = w * centers[distractor] + (1.0 - w) * centers[label]
    if corrupted and spec.corruption_mode == "dropout":
        vector = np.zeros(spec.dims[modality])
    else:
        vector = signal + noise
    return FeatureRecord(FeatureKey(conv_id, index, modality, SYNTHETIC_TAG), vector,
                         provider="synthetic", corrupted=corrupted)


@dataclass(frozen=True)
class CorpusShape:
    """How many synthetic conversations to lay out, and how labels evolve along them."""

    n_train: int = 60
    n_val: int = 15
    n_test: int = 15
    min_len: int = 4
    max_len: int = 12
    label_persistence: float = 0.5

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_train < 1:
            raise ValueError("conversation counts must be non-negative with at least one train conversation")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if not 0.0 <= self.label_persistence <= 1.0:
            raise ValueError("label_persistence must lie in [0, 1]")


def generate_dataset(spec: SyntheticSpec, shape: CorpusShape, seed: int, name: str = "synthetic") -> Dataset:
    rng = named_rng(seed, "corpus")
    labels = tuple(EmotionLabel(k, f"emotion_{k}") for k in range(spec.K))
    convs = []
    for split, count in (("train", shape.n_train), ("val", shape.n_val), ("test", shape.n_test)):
        for c in range(count):
            conv_id = f"{split}_{c:04d}"
            n = int(rng.integers(shape.min_len, shape.max_len + 1))
            y = int(rng.integers(spec.K))
            utts = []
            for i in range(n):
                if i and rng.random() >= shape.label_persistence:
                    y = int(rng.integers(spec.K))
                speaker = "A" if i % 2 == 0 else "B"
                utts.append(Utterance(conv_id, i, speaker, f"synthetic utterance {i} of {conv_id}", y))
            convs.append(Conversation(conv_id, tuple(utts), split))
    return Dataset(labels, tuple(convs), name)


def populate_caches(dataset: Dataset, spec: SyntheticSpec, seed: int, directory: str | Path
                    ) -> dict[str, FeatureCache]:
    directory = Path(directory)
    caches = {}
    for modality in MODALITIES:
        path = directory / f"{modality}.vaff"
        if path.exists():
            path.unlink()
        cache = FeatureCache(path, dim=spec.dims[modality], modality=modality)
        centers = class_centers(spec, modality)
        for utt in dataset.utterances():
            cache.put(synthesize_features(spec, utt.label, modality, seed, utt.conv_id, utt.index, centers))
        caches[modality] = cache
    return caches


def synthesize_arrays(dataset: Dataset, spec: SyntheticSpec, seed: int) -> dict[str, dict[tuple[str, int], FeatureRecord]]:
    """In-memory counterpart of :func:`populate_caches`, keyed by ``(conv_id, index)``."""
    out: dict[str, dict] = {}
    for modality in MODALITIES:
        centers = class_centers(spec, modality)
        out[modality] = {
            utt.key: synthesize_features(spec, utt.label, modality, seed, utt.conv_id, utt.index, centers)
            for utt in dataset.utterances()
        }
    return out


def load_spec_file(path: str | Path) -> tuple[SyntheticSpec, CorpusShape]:
    """Read ``{"spec": {...}, "corpus": {...}}``; both sections optional, unknown keys rejected."""
    raw = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    extra = set(raw) - {"spec", "corpus"}
    if extra:
        raise ValueError(f"unknown top-level keys {sorted(extra)}")
    try:
        return SyntheticSpec(**raw.get("spec", {})), CorpusShape(**raw.get("corpus", {}))
    except TypeError as exc:
        raise ValueError(str(exc)) from None


def standard_benchmark(name: str) -> tuple[SyntheticSpec, CorpusShape]:
    """The two fixed synthetic benchmarks used for end-to-end checks."""
    if name == "separable":
        return SyntheticSpec(noise_sigma=0.05), CorpusShape()
    if name == "corrupted":
        return SyntheticSpec(
            noise_sigma=0.3,
            corruption_rate=0.3,
            corruption_mode="blur",
            modality_informativeness={"visual": 1.0, "text": 0.8, "audio": 0.7},
        ), CorpusShape(n_train=120, n_val=30, n_test=60)
    raise ValueError(f"unknown benchmark {name!r}; expected 'separable' or 'corrupted'")
