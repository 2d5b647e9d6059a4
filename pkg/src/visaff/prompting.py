"""Stage-1 prompt construction: speaker task prompt plus context, audio and VAD guidance."""

from __future__ import annotations

import csv
import re
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .datamodel import AUDIO_CATEGORIES, AudioDescriptors, Conversation, Utterance, history_view

SECTION_DELIMITER = "---SECTION---"
PART_SEPARATOR = "\n\n"
CURRENT_MARK = ">> "
PAST_MARK = "   "
NO_AUDIO_SENTENCE = "No audio description is available for the current utterance."
NO_VAD_SENTENCE = "No lexical affect cues were found in the current transcript."
DEFAULT_FRAMES = 8
DEFAULT_WINDOW = 8
DEFAULT_TOP_N = 5
TEMPLATE_SECTIONS = ("task", "context", "audio", "vad")


@dataclass(frozen=True)
class PromptTemplates:
    task: str
    context: str
    audio: str
    vad: str

    @classmethod
    def parse(cls, text: str) -> "PromptTemplates":
        parts = [p.strip("\n") for p in text.split(SECTION_DELIMITER)]
        if len(parts) != 4:
            raise ValueError(f"template file must hold 4 sections, found {len(parts)}")
        for name, part, placeholder in zip(TEMPLATE_SECTIONS, parts,
                                           ("{speaker}", "{lines}", "{descriptors}", "{vad_entries}")):
            if placeholder not in part:
                raise ValueError(f"{name} template lacks {placeholder}")
        return cls(*parts)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "PromptTemplates":
        if path is None:
            text = resources.files("visaff.resources").joinpath("prompts_v1.txt").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.parse(text)


_DEFAULT_TEMPLATES: PromptTemplates | None = None


def default_templates() -> PromptTemplates:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = PromptTemplates.load()
    return _DEFAULT_TEMPLATES


@dataclass(frozen=True)
class VadLexicon:
    entries: Mapping[str, tuple[float, float, float]]

    def __post_init__(self):
        for term, vad in self.entries.items():
            if not term or term != term.lower():
                raise ValueError(f"lexicon terms must be non-empty lowercase: {term!r}")
            if len(vad) != 3 or not all(0.0 <= x <= 1.0 for x in vad):
                raise ValueError(f"VAD values for {term!r} must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_tsv(cls, path: str | Path | None = None) -> "VadLexicon":
        """Read ``term<TAB>v<TAB>a<TAB>d`` rows; ``#`` lines are comments."""
        if path is None:
            text = resources.files("visaff.resources").joinpath("vad_sample.tsv").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        entries: dict[str, tuple[float, float, float]] = {}
        rows = (ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#"))
        for row in csv.reader(rows, delimiter="\t"):
            if len(row) != 4:
                raise ValueError(f"lexicon row needs 4 columns: {row!r}")
            entries[row[0].strip().lower()] = (float(row[1]), float(row[2]), float(row[3]))
        return cls(entries)


@dataclass(frozen=True)
class PromptBundle:
    conv_id: str
    index: int
    frame_indices: tuple[int, ...]
    reference_image: str | None
    task_prompt: str
    ctx_prompt: str
    aud_prompt: str
    vad_prompt: str
    composed: str


def sample_frame_indices(total_frames: int, k: int = DEFAULT_FRAMES) -> list[int]:
    """Uniformly spaced frame positions ``floor(j * total / m)`` for ``m = min(k, total)``."""
    if total_frames < 1:
        raise ValueError("clip has no frames")
    if k < 1:
        raise ValueError("k must be positive")
    m = min(k, total_frames)
    return [min(j * total_frames // m, total_frames - 1) for j in range(m)]


def build_task_prompt(utterance: Utterance, templates: PromptTemplates | None = None) -> str:
    if not utterance.speaker_id:
        raise ValueError("speaker_id must be non-empty")
    templates = templates or default_templates()
    return templates.task.replace("{speaker}", utterance.speaker_id)


def _one_line(text: str) -> str:
    return " ".join(text.split())


def build_context_prompt(history: Sequence[Utterance], window: int = DEFAULT_WINDOW,
                         templates: PromptTemplates | None = None) -> str:
    """Render the last ``window`` utterances of a causal history, current one last."""
    if not history:
        raise ValueError("history is empty")
    if window < 1:
        raise ValueError("window must be positive")
    templates = templates or default_templates()
    shown = list(history)[-window:]
    lines = []
    for pos, utt in enumerate(shown):
        mark = CURRENT_MARK if pos == len(shown) - 1 else PAST_MARK
        lines.append(f"{mark}{_one_line(utt.speaker_id)}: {_one_line(utt.transcript)}")
    return templates.context.replace("{lines}", "\n".join(lines))


def render_descriptors(desc: AudioDescriptors) -> str:
    return f"pitch is {desc.pitch}, energy is {desc.energy}, speaking rate is {desc.rate}"


_DESC_RE = re.compile(r"pitch is (\w+), energy is (\w+), speaking rate is (\w+)")


def parse_descriptors(prompt: str) -> AudioDescriptors | None:
    match = _DESC_RE.search(prompt)
    if match is None:
        return None
    return AudioDescriptors(*match.groups())


def build_audio_prompt(descriptors: AudioDescriptors | None,
                       templates: PromptTemplates | None = None) -> str:
    if descriptors is None:
        return NO_AUDIO_SENTENCE
    templates = templates or default_templates()
    return templates.audio.replace("{descriptors}", render_descriptors(descriptors))


def all_descriptor_combinations() -> list[AudioDescriptors]:
    return [AudioDescriptors(p, e, r)
            for p in AUDIO_CATEGORIES["pitch"]
            for e in AUDIO_CATEGORIES["energy"]
            for r in AUDIO_CATEGORIES["rate"]]


def vad_lookup(token: str, lex: VadLexicon) -> tuple[float, float, float] | None:
    return lex.entries.get(token.lower())


def tokenize(text: str) -> list[str]:
    tokens = (tok.strip(string.punctuation).lower() for tok in text.split())
    return [t for t in tokens if t]


def salience(vad: tuple[float, float, float]) -> float:
    # dominance is rendered but does not rank
    return abs(vad[0] - 0.5) + abs(vad[1] - 0.5)


def select_vad_terms(transcript: str, lex: VadLexicon, top_n: int = DEFAULT_TOP_N
                     ) -> list[tuple[str, tuple[float, float, float]]]:
    """Up to ``top_n`` distinct lexicon hits, most salient first, earlier position on ties."""
    hits: dict[str, tuple[int, tuple[float, float, float]]] = {}
    for pos, tok in enumerate(tokenize(transcript)):
        vad = vad_lookup(tok, lex)
        if vad is not None and tok not in hits:
            hits[tok] = (pos, vad)
    ranked = sorted(hits.items(), key=lambda kv: (-salience(kv[1][1]), kv[1][0]))
    return [(tok, vad) for tok, (_, vad) in ranked[:top_n]]


def build_vad_prompt(transcript: str, lex: VadLexicon, top_n: int = DEFAULT_TOP_N,
                     templates: PromptTemplates | None = None) -> str:
    if top_n < 1:
        raise ValueError("top_n must be positive")
    selected = select_vad_terms(transcript, lex, top_n)
    if not selected:
        return NO_VAD_SENTENCE
    templates = templates or default_templates()
    entries = "; ".join(f"{tok} (V={v:.2f}, A={a:.2f}, D={d:.2f})" for tok, (v, a, d) in selected)
    return templates.vad.replace("{vad_entries}", entries)


def compose_prompt(task: str, ctx: str = "", aud: str = "", vad: str = "") -> str:
    """Join the non-empty parts in task, context, audio, VAD order with a blank line.

    Splitting the result on the separator recovers the parts as long as no
    part itself contains a blank line.
    """
    if not task:
        raise ValueError("task prompt must be non-empty")
    return PART_SEPARATOR.join(p for p in (task, ctx, aud, vad) if p)


def split_prompt(prompt: str) -> list[str]:
    return prompt.split(PART_SEPARATOR)


def build_prompt_bundle(conv: Conversation, i: int, lex: VadLexicon, total_frames: int,
                        frames_per_clip: int = DEFAULT_FRAMES, window: int = DEFAULT_WINDOW,
                        top_n: int = DEFAULT_TOP_N, templates: PromptTemplates | None = None) -> PromptBundle:
    templates = templates or default_templates()
    history = history_view(conv, i)
    utt = history[-1]
    task = build_task_prompt(utt, templates)
    ctx = build_context_prompt(history, window, templates)
    aud = build_audio_prompt(utt.audio_descriptors, templates)
    vad = build_vad_prompt(utt.transcript, lex, top_n, templates)
    return PromptBundle(
        conv_id=conv.conv_id,
        index=i,
        frame_indices=tuple(sample_frame_indices(total_frames, frames_per_clip)),
        reference_image=utt.reference_image_path,
        task_prompt=task,
        ctx_prompt=ctx,
        aud_prompt=aud,
        vad_prompt=vad,
        composed=compose_prompt(task, ctx, aud, vad),
    )


def task_template_regex(templates: PromptTemplates | None = None) -> re.Pattern:
    """A regex matching any rendering of the task template (same speaker everywhere)."""
    templates = templates or default_templates()
    pieces = templates.task.split("{speaker}")
    body = re.escape(pieces[0]) + "(?P<speaker>.+?)"
    for k, piece in enumerate(pieces[1:], start=1):
        body += re.escape(piece)
        if k < len(pieces) - 1:
            body += "(?P=speaker)"
    return re.compile(body, re.DOTALL)
