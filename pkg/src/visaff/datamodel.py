"""Conversations, utterances, labels and the JSONL dataset format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

DATASET_SCHEMA = "visaff-dataset/1"
SPLITS = ("train", "val", "test")
AUDIO_CATEGORIES = {
    "pitch": ("low", "mid", "high"),
    "energy": ("low", "mid", "high"),
    "rate": ("slow", "mid", "fast"),
}


class DatasetError(ValueError):
    """Raised when a dataset file or object violates the format contract."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class EmotionLabel:
    id: int
    name: str


@dataclass(frozen=True)
class AudioDescriptors:
    pitch: str
    energy: str
    rate: str

    def __post_init__(self):
        for key, allowed in AUDIO_CATEGORIES.items():
            if getattr(self, key) not in allowed:
                raise ValueError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")

    def as_dict(self) -> dict[str, str]:
        return {"pitch": self.pitch, "energy": self.energy, "rate": self.rate}


@dataclass(frozen=True)
class Utterance:
    conv_id: str
    index: int
    speaker_id: str
    transcript: str
    label: int | None = None
    video_path: str | None = None
    audio_path: str | None = None
    reference_image_path: str | None = None
    audio_descriptors: AudioDescriptors | None = None

    @property
    def key(self) -> tuple[str, int]:
        return (self.conv_id, self.index)


@dataclass(frozen=True)
class Conversation:
    conv_id: str
    utterances: tuple[Utterance, ...]
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")
        for pos, utt in enumerate(self.utterances):
            if utt.conv_id != self.conv_id:
                raise DatasetError(f"utterance of {utt.conv_id!r} inside conversation {self.conv_id!r}")
            if utt.index != pos:
                raise DatasetError(f"gapless ordering violated in {self.conv_id!r}: expected index {pos}, got {utt.index}")

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.utterances)


@dataclass(frozen=True)
class Dataset:
    labels: tuple[EmotionLabel, ...]
    conversations: tuple[Conversation, ...]
    name: str = "dataset"
    _by_id: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        names = [lab.name for lab in self.labels]
        if len(self.labels) < 2:
            raise DatasetError("need at least two labels")
        if [lab.id for lab in self.labels] != list(range(len(self.labels))):
            raise DatasetError("label ids must be dense 0..K-1")
        if len(set(names)) != len(names):
            raise DatasetError("label names must be unique")
        by_id = {}
        for conv in self.conversations:
            if conv.conv_id in by_id:
                raise DatasetError(f"conversation {conv.conv_id!r} appears twice")
            by_id[conv.conv_id] = conv
            for utt in conv:
                if utt.label is not None and not 0 <= utt.label < self.num_labels:
                    raise DatasetError(f"label id {utt.label} out of range at {utt.key}")
        object.__setattr__(self, "_by_id", by_id)

    @property
    def num_labels(self) -> int:
        return len(self.labels)

    @property
    def label_names(self) -> list[str]:
        return [lab.name for lab in self.labels]

    def conversation(self, conv_id: str) -> Conversation:
        return self._by_id[conv_id]

    def split(self, name: str) -> list[Conversation]:
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}")
        return [c for c in self.conversations if c.split == name]

    def utterances(self, split: str | None = None) -> Iterator[Utterance]:
        for conv in self.conversations:
            if split is None or conv.split == split:
                yield from conv

    def __len__(self) -> int:
        return sum(len(c) for c in self.conversations)


def history_view(conv: Conversation, i: int) -> tuple[Utterance, ...]:
    """Utterances ``0..i`` of ``conv``; nothing later than ``i`` is ever exposed."""
    if not 0 <= i < len(conv):
        raise IndexError(f"utterance index {i} out of range for conversation of length {len(conv)}")
    return conv.utterances[: i + 1]


# ------------------------------------------------------------------- JSONL IO

_FIELDS = ("conv_id", "index", "split", "speaker_id", "transcript", "label",
           "video_path", "audio_path", "reference_image_path")
_OPTIONAL_FIELDS = ("audio_descriptors",)


def _utterance_record(utt: Utterance, split: str) -> dict:
    rec = {
        "conv_id": utt.conv_id,
        "index": utt.index,
        "split": split,
        "speaker_id": utt.speaker_id,
        "transcript": utt.transcript,
        "label": utt.label,
        "video_path": utt.video_path,
        "audio_path": utt.audio_path,
        "reference_image_path": utt.reference_image_path,
    }
    if utt.audio_descriptors is not None:
        rec["audio_descriptors"] = utt.audio_descriptors.as_dict()
    return rec


def dumps_dataset(dataset: Dataset) -> str:
    lines = [json.dumps({"schema": DATASET_SCHEMA, "labels": dataset.label_names}, ensure_ascii=False)]
    for conv in dataset.conversations:
        for utt in conv:
            lines.append(json.dumps(_utterance_record(utt, conv.split), ensure_ascii=False))
    return "\n".join(lines) + "\n"


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_text(dumps_dataset(dataset), encoding="utf-8", newline="\n")


def _check_type(rec: dict, key: str, types, lineno: int, nullable: bool = False):
    value = rec.get(key)
    if value is None and nullable:
        return None
    if isinstance(value, bool) or not isinstance(value, types):
        raise DatasetError(f"field {key!r} has invalid value {value!r}", lineno)
    return value


def parse_dataset(lines: Sequence[str] | Iterator[str], name: str = "dataset") -> Dataset:
    it = iter(lines)
    try:
        header = json.loads(next(it))
    except StopIteration:
        raise DatasetError("empty dataset file", 1) from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed header: {exc.msg}", 1) from None
    if not isinstance(header, dict) or header.get("schema") != DATASET_SCHEMA:
        raise DatasetError(f"header must declare schema {DATASET_SCHEMA!r}", 1)
    label_names = header.get("labels")
    if not isinstance(label_names, list) or not all(isinstance(n, str) for n in label_names):
        raise DatasetError("header labels must be a list of strings", 1)
    labels = tuple(EmotionLabel(i, n) for i, n in enumerate(label_names))
    if len(set(label_names)) != len(label_names) or len(labels) < 2:
        raise DatasetError("labels must be unique and at least two", 1)

    order: list[str] = []
    grouped: dict[str, list[Utterance]] = {}
    splits: dict[str, str] = {}
    seen: set[tuple[str, int]] = set()
    for lineno, raw in enumerate(it, start=2):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"malformed JSON: {exc.msg}", lineno) from None
        if not isinstance(rec, dict):
            raise DatasetError("record must be a JSON object", lineno)
        unknown = set(rec) - set(_FIELDS) - set(_OPTIONAL_FIELDS)
        missing = set(_FIELDS[:5]) - set(rec)
        if unknown or missing:
            raise DatasetError(f"unknown fields {sorted(unknown)} / missing fields {sorted(missing)}", lineno)
        conv_id = _check_type(rec, "conv_id", str, lineno)
        index = _check_type(rec, "index", int, lineno)
        split = _check_type(rec, "split", str, lineno)
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}", lineno)
        label = _check_type(rec, "label", int, lineno, nullable=True)
        if label is not None and not 0 <= label < len(labels):
            raise DatasetError(f"label id {label} out of range [0, {len(labels)})", lineno)
        if (conv_id, index) in seen:
            raise DatasetError(f"duplicate utterance ({conv_id!r}, {index})", lineno)
        seen.add((conv_id, index))
        if splits.setdefault(conv_id, split) != split:
            raise DatasetError(f"conversation {conv_id!r} appears in two splits", lineno)
        desc = rec.get("audio_descriptors")
        if desc is not None:
            try:
                desc = AudioDescriptors(**desc)
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"bad audio_descriptors: {exc}", lineno) from None
        transcript = _check_type(rec, "transcript", str, lineno)
        utt = Utterance(
            conv_id=conv_id,
            index=index,
            speaker_id=_check_type(rec, "speaker_id", str, lineno),
            transcript=transcript,
            label=label,
            video_path=_check_type(rec, "video_path", str, lineno, nullable=True),
            audio_path=_check_type(rec, "audio_path", str, lineno, nullable=True),
            reference_image_path=_check_type(rec, "reference_image_path", str, lineno, nullable=True),
            audio_descriptors=desc,
        )
        if conv_id not in grouped:
            order.append(conv_id)
            grouped[conv_id] = []
        grouped[conv_id].append(utt)

    conversations = []
    for conv_id in order:
        utts = sorted(grouped[conv_id], key=lambda u: u.index)
        indices = [u.index for u in utts]
        if indices != list(range(len(utts))):
            raise DatasetError(f"gapless ordering violated in {conv_id!r}: indices {indices}")
        conversations.append(Conversation(conv_id, tuple(utts), splits[conv_id]))
    return Dataset(labels, tuple(conversations), name)


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    with path.open(encoding="utf-8", newline="\n") as fh:
        return parse_dataset((line.rstrip("\n") for line in fh), name=path.stem)
