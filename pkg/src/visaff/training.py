"""Downstream training on cached features, evaluation and trace export."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from . import numcore as nc
from ._rng import named_rng
from .datamodel import Dataset
from .fusion import (MODALITY_KEYS, FusionOptions, FusionParams, GateTrace, forward_batch, traces_from_output)
from .losses import LossTerms, loss_total
from .metrics import MetricsReport, weighted_f1

log = logging.getLogger(__name__)

EVAL_CHUNK = 64


class MissingFeaturesError(LookupError):
    def __init__(self, missing: Sequence[tuple[str, int, str]]):
        self.missing = list(missing)
        shown = ", ".join(f"{c}#{i}/{m}" for c, i, m in self.missing[:10])
        more = f" (+{len(self.missing) - 10} more)" if len(self.missing) > 10 else ""
        super().__init__(f"{len(self.missing)} missing features: {shown}{more}")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda_cl: float = 0.1
    lambda_aux: float = 0.5
    tau_infonce: float = 0.07
    tau_supcon: float = 0.1
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 30
    patience: int = 10
    seed: int = 0
    hidden: int = 128
    proj_dim: int = 64
    stop_grad_reliability: bool = True
    retrieval: str = "sequence"
    gate: str = "reliability"
    use_text: bool = True
    use_audio: bool = True
    use_infonce: bool = True
    use_supcon: bool = True

    def __post_init__(self):
        if self.lambda_cl < 0 or self.lambda_aux < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau_infonce <= 0 or self.tau_supcon <= 0:
            raise ValueError("temperatures must be positive")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ValueError("learning_rate > 0, batch_size >= 1, epochs >= 0 and patience >= 1 required")
        self.options()  # validates gate / retrieval

    def options(self) -> FusionOptions:
        return FusionOptions(use_text=self.use_text, use_audio=self.use_audio, gate=self.gate,
                             stop_grad_reliability=self.stop_grad_reliability, retrieval=self.retrieval)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**raw)

    @classmethod
    def load(cls, path: str | Path | None, **overrides) -> "TrainConfig":
        raw = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
        if not isinstance(raw, dict):
            raise ValueError("config file must hold a JSON object")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(raw)


# ----------------------------------------------------------------- features


class FeatureLookup(Protocol):
    def find(self, conv_id: str, index: int): ...


class RecordStore:
    """In-memory stand-in for a cache: ``(conv_id, index) -> FeatureRecord``."""

    def __init__(self, records: Mapping[tuple[str, int], object]):
        self._records = dict(records)

    def find(self, conv_id: str, index: int):
        return self._records.get((conv_id, index))


@dataclass
class ConversationArrays:
    conv_id: str
    features: dict[str, np.ndarray]
    labels: np.ndarray | None
    corrupted: np.ndarray | None = None

    def __len__(self) -> int:
        return self.features["visual"].shape[0]


def gather_conversations(dataset: Dataset, split: str, caches: Mapping[str, FeatureLookup]
                         ) -> list[ConversationArrays]:
    """Read every feature of ``split`` through the caches, upcast to float64."""
    missing = []
    out = []
    for conv in dataset.split(split):
        feats: dict[str, list] = {m: [] for m in MODALITY_KEYS}
        corrupted = []
        for utt in conv:
            for m in MODALITY_KEYS:
                cache = caches.get(m)
                rec = cache.find(utt.conv_id, utt.index) if cache is not None else None
                if rec is None:
                    missing.append((utt.conv_id, utt.index, m))
                    continue
                feats[m].append(rec.vector)
                if m == "visual":
                    corrupted.append(rec.corrupted)
        if missing:
            continue
        labels = [u.label for u in conv]
        out.append(ConversationArrays(
            conv.conv_id,
            {m: np.asarray(feats[m], dtype=np.float64) for m in MODALITY_KEYS},
            None if any(y is None for y in labels) else np.asarray(labels, dtype=np.int64),
            np.asarray(corrupted, dtype=bool),
        ))
    if missing:
        raise MissingFeaturesError(missing)
    return out


def infer_dims(convs: Sequence[ConversationArrays]) -> dict[str, int]:
    return {m: int(convs[0].features[m].shape[1]) for m in MODALITY_KEYS}


@dataclass
class Batch:
    features: dict[str, np.ndarray]
    lengths: list[int]
    labels: np.ndarray | None
    keys: list[tuple[str, int]]
    corrupted: np.ndarray | None


def stack(convs: Sequence[ConversationArrays]) -> Batch:
    feats = {m: np.concatenate([c.features[m] for c in convs], axis=0) for m in MODALITY_KEYS}
    labels = None
    if all(c.labels is not None for c in convs):
        labels = np.concatenate([c.labels for c in convs])
    corrupted = None
    if all(c.corrupted is not None for c in convs):
        corrupted = np.concatenate([c.corrupted for c in convs])
    keys = [(c.conv_id, i) for c in convs for i in range(len(c))]
    return Batch(feats, [len(c) for c in convs], labels, keys, corrupted)


# ---------------------------------------------------------------- optimiser


class Adam:
    def __init__(self, params: Iterable[nc.Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    params: FusionParams
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_wf1: float | None = None
    config: TrainConfig = field(default_factory=TrainConfig)
    label_names: list[str] = field(default_factory=list)

    def checkpoint_text(self) -> str:
        return self.params.to_checkpoint({
            "config": self.config.to_dict(),
            "labels": self.label_names,
            "best_epoch": self.best_epoch,
        })

    def log_text(self) -> str:
        return "".join(json.dumps(rec, sort_keys=False) + "\n" for rec in self.log)


def predict_batches(convs: Sequence[ConversationArrays], params: FusionParams,
                    options: FusionOptions, chunk: int = EVAL_CHUNK) -> list[GateTrace]:
    traces: list[GateTrace] = []
    for start in range(0, len(convs), chunk):
        batch = stack(convs[start : start + chunk])
        out = forward_batch(batch.features, batch.lengths, params, options)
        labels = None if batch.labels is None else [int(y) for y in batch.labels]
        corrupted = None if batch.corrupted is None else [bool(x) for x in batch.corrupted]
        traces.extend(traces_from_output(out, params, batch.keys, labels, corrupted))
    return traces


def fit_conversations(train_convs: Sequence[ConversationArrays], val_convs: Sequence[ConversationArrays],
                      config: TrainConfig, n_classes: int, label_names: Sequence[str] | None = None
                      ) -> TrainResult:
    """Adam on the head only, mini-batches of whole conversations, early stopping on val W-F1."""
    if not train_convs:
        raise ValueError("no training conversations")
    if any(c.labels is None for c in train_convs):
        raise ValueError("training conversations must be fully labelled")
    dims = infer_dims(train_convs)
    params = FusionParams(dims, config.hidden, n_classes, config.proj_dim, seed=config.seed)
    label_names = list(label_names) if label_names else [str(k) for k in range(n_classes)]
    options = config.options()
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    shuffle_rng = named_rng(config.seed, "shuffle")
    result = TrainResult(params.copy(), [], 0, None, config, label_names)
    best_wf1 = -math.inf
    stale = 0
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train_convs))
        sums = np.zeros(4)
        n_steps = 0
        for start in range(0, len(order), config.batch_size):
            batch = stack([train_convs[j] for j in order[start : start + config.batch_size]])
            step += 1
            out = forward_batch(batch.features, batch.lengths, params, options)
            try:
                total, terms = loss_total(out, params, batch.labels, config.lambda_cl, config.lambda_aux,
                                          config.tau_infonce, config.tau_supcon, config.use_infonce,
                                          config.use_supcon)
            except FloatingPointError as exc:
                raise TrainingDivergedError(f"epoch {epoch}, step {step}: {exc}") from None
            opt.zero_grad()
            nc.backward(total)
            opt.step()
            sums += (terms.total, terms.cls, terms.cl, terms.aux)
            n_steps += 1
        mean = sums / max(n_steps, 1)
        val_wf1 = None
        if val_convs:
            traces = predict_batches(val_convs, params, options)
            val_wf1 = weighted_f1([t.prediction for t in traces], [t.label for t in traces], n_classes)
        result.log.append({
            "epoch": epoch,
            "loss": LossTerms(*map(float, mean)).as_dict(),
            "val_wf1": val_wf1,
        })
        score = val_wf1 if val_wf1 is not None else -float(mean[0])
        if score > best_wf1:
            best_wf1 = score
            stale = 0
            result.params = params.copy()
            result.best_epoch = epoch
            result.best_val_wf1 = val_wf1
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                break
    return result


def train(config: TrainConfig, dataset: Dataset, caches: Mapping[str, FeatureLookup]) -> TrainResult:
    train_convs = gather_conversations(dataset, "train", caches)
    val_convs = gather_conversations(dataset, "val", caches)
    return fit_conversations(train_convs, val_convs, config, dataset.num_labels, dataset.label_names)


def evaluate_conversations(convs: Sequence[ConversationArrays], params: FusionParams, options: FusionOptions,
                           label_names: Sequence[str]) -> tuple[MetricsReport, list[GateTrace]]:
    traces = predict_batches(convs, params, options)
    labelled = [t for t in traces if t.label is not None]
    report = MetricsReport.compute([t.prediction for t in labelled], [t.label for t in labelled], label_names)
    return report, traces


def evaluate(params: FusionParams, dataset: Dataset, split: str, caches: Mapping[str, FeatureLookup],
             options: FusionOptions = FusionOptions()) -> tuple[MetricsReport, list[GateTrace]]:
    convs = gather_conversations(dataset, split, caches)
    return evaluate_conversations(convs, params, options, dataset.label_names)


def dumps_traces(traces: Iterable) -> str:
    return "".join(json.dumps(t.to_json()) + "\n" for t in traces)


def load_traces(path: str | Path):
    from .fusion import TraceRow

    with open(path, encoding="utf-8") as fh:
        return [TraceRow.from_json(json.loads(line)) for line in fh if line.strip()]
