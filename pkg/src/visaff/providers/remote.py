"""Client for a frozen embedding service and the offline extraction pass."""

from __future__ import annotations

import base64
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx
import numpy as np

from ..datamodel import Dataset, Utterance
from ..prompting import (DEFAULT_FRAMES, DEFAULT_TOP_N, DEFAULT_WINDOW, PromptBundle, PromptTemplates,
                         VadLexicon, build_prompt_bundle)
from .cache import DimMismatchError, FeatureCache
from .records import FeatureKey, FeatureRecord

log = logging.getLogger(__name__)

ENDPOINT_ENV = "VISAFF_ENDPOINT"
REMOTE_TAG = "remote"
RETRYABLE_STATUS = {429, 500, 502, 503, 504}
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".webp"}


class RemoteError(RuntimeError):
    pass


class ExtractionInputError(ValueError):
    pass


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    timeout: float = 30.0
    retries: int = 3
    backoff_base: float = 0.5
    backoff_max: float = 8.0

    @classmethod
    def resolve(cls, url: str | None = None, **kwargs) -> "EndpointConfig":
        """The environment variable wins over the configured URL."""
        env = os.environ.get(ENDPOINT_ENV)
        chosen = env or url
        if not chosen:
            raise ValueError(f"no endpoint configured (pass one or set {ENDPOINT_ENV})")
        return cls(chosen.rstrip("/"), **kwargs)


@dataclass
class EmbeddingClient:
    endpoint: EndpointConfig
    sleep: Callable[[float], None] = time.sleep
    transport: httpx.BaseTransport | None = None
    requests_sent: int = field(default=0, init=False)

    def __post_init__(self):
        self._client = httpx.Client(timeout=self.endpoint.timeout, transport=self.transport)
        self._count_lock = threading.Lock()

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def embed(self, frames: Sequence[bytes], reference: bytes | None, prompt: str) -> tuple[np.ndarray, str]:
        body = {
            "frames": [base64.b64encode(f).decode("ascii") for f in frames],
            "reference": base64.b64encode(reference).decode("ascii") if reference is not None else None,
            "prompt": prompt,
        }
        url = f"{self.endpoint.url}/embed"
        last = "no attempt made"
        for attempt in range(self.endpoint.retries + 1):
            if attempt:
                delay = min(self.endpoint.backoff_base * 2 ** (attempt - 1), self.endpoint.backoff_max)
                self.sleep(delay)
            with self._count_lock:
                self.requests_sent += 1
            try:
                resp = self._client.post(url, json=body)
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
                log.warning("embed attempt %d failed: %s", attempt + 1, last)
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last = f"HTTP {resp.status_code}: {resp.text}"
                log.warning("embed attempt %d got %s", attempt + 1, last)
                continue
            if not 200 <= resp.status_code < 300:
                raise RemoteError(f"HTTP {resp.status_code} from {url}: {resp.text}")
            return _parse_embedding(resp)
        raise RemoteError(f"embedding request failed after {self.endpoint.retries + 1} attempts: {last}")


def _parse_embedding(resp: httpx.Response) -> tuple[np.ndarray, str]:
    try:
        payload = resp.json()
        vec = np.asarray(payload["embedding"], dtype=np.float64)
        dim = int(payload["dim"])
        model = str(payload.get("model", ""))
    except (ValueError, KeyError, TypeError) as exc:
        raise RemoteError(f"malformed embedding response: {exc}") from None
    if vec.ndim != 1 or vec.size != dim:
        raise RemoteError(f"service declared dim {dim} but sent {vec.size} values")
    if not np.isfinite(vec).all():
        raise RemoteError("embedding contains NaN or Inf")
    return vec, model


def extract_remote(bundle: PromptBundle, frames: Sequence[bytes], reference: bytes | None,
                   client: EmbeddingClient, cache: FeatureCache | None = None) -> FeatureRecord:
    """Embed one utterance; when a cache is given the record is appended only on success."""
    if not frames:
        raise ExtractionInputError(f"no frames for {(bundle.conv_id, bundle.index)}")
    vec, _ = client.embed(frames, reference, bundle.composed)
    if cache is not None and vec.size != cache.dim:
        raise DimMismatchError(f"service returned dim {vec.size}, cache expects {cache.dim}")
    record = FeatureRecord(FeatureKey(bundle.conv_id, bundle.index, "visual", REMOTE_TAG), vec, provider="remote")
    if cache is not None:
        cache.put(record)
    return record


def list_frames(video_path: str | Path) -> list[Path]:
    """Frame files of a clip: a directory of images sorted by name, or a single image."""
    path = Path(video_path)
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if path.is_file():
        return [path]
    raise ExtractionInputError(f"video path {path} does not exist")


@dataclass
class ExtractionReport:
    extracted: list[tuple[str, int]] = field(default_factory=list)
    skipped: list[tuple[str, int]] = field(default_factory=list)
    failures: dict[tuple[str, int], str] = field(default_factory=dict)

    def manifest(self) -> dict:
        return {
            "extracted": len(self.extracted),
            "skipped": len(self.skipped),
            "failed": [{"conv_id": c, "index": i, "error": msg} for (c, i), msg in self.failures.items()],
        }


def _prepare(utt: Utterance, base_dir: Path) -> tuple[list[bytes], bytes, int]:
    if not utt.video_path:
        raise ExtractionInputError("utterance has no video_path")
    if not utt.reference_image_path:
        raise ExtractionInputError("utterance has no reference_image_path")
    frame_files = list_frames(base_dir / utt.video_path)
    if not frame_files:
        raise ExtractionInputError(f"no frame images under {utt.video_path}")
    reference = (base_dir / utt.reference_image_path).read_bytes()
    return [f.read_bytes() for f in frame_files], reference, len(frame_files)


def extract_dataset(dataset: Dataset, client: EmbeddingClient, cache_path: str | Path, lexicon: VadLexicon,
                    templates: PromptTemplates | None = None, frames_per_clip: int = DEFAULT_FRAMES,
                    window: int = DEFAULT_WINDOW, top_n: int = DEFAULT_TOP_N, workers: int = 4,
                    base_dir: str | Path = ".") -> ExtractionReport:
    """Fill the visual cache for every utterance, skipping keys already cached.

    Requests run on a bounded worker pool; results are written by the calling
    thread in dataset order so the cache layout is reproducible.
    """
    base_dir = Path(base_dir)
    cache_path = Path(cache_path)
    cache = FeatureCache(cache_path) if cache_path.exists() and cache_path.stat().st_size else None
    report = ExtractionReport()
    todo = []
    for conv in dataset.conversations:
        for utt in conv:
            key = FeatureKey(utt.conv_id, utt.index, "visual", REMOTE_TAG)
            if cache is not None and key in cache:
                report.skipped.append(utt.key)
            else:
                todo.append((conv, utt))

    def work(item):
        conv, utt = item
        try:
            frames, reference, total = _prepare(utt, base_dir)
            bundle = build_prompt_bundle(conv, utt.index, lexicon, total, frames_per_clip, window, top_n, templates)
            chosen = [frames[j] for j in bundle.frame_indices]
            vec, _ = client.embed(chosen, reference, bundle.composed)
            return utt, vec, None
        except (RemoteError, ExtractionInputError, OSError) as exc:
            return utt, None, str(exc)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for utt, vec, err in pool.map(work, todo):
            if err is None:
                if cache is None:
                    cache = FeatureCache(cache_path, dim=vec.size, modality="visual")
                try:
                    cache.put(FeatureRecord(FeatureKey(utt.conv_id, utt.index, "visual", REMOTE_TAG), vec,
                                            provider="remote"))
                except DimMismatchError as exc:
                    err = str(exc)
            if err is None:
                report.extracted.append(utt.key)
            else:
                log.error("extraction failed for %s: %s", utt.key, err)
                report.failures[utt.key] = err
    return report
