"""Append-only binary feature cache.

Layout: a 28-byte header (magic ``VAFF``, version, dim, committed record
count, 8-byte modality tag) followed by records of the form
``key_len:u16 | key utf-8 | flags:u8 | dim x f32 LE | crc32:u32``. A record
only becomes visible once the header count is rewritten, so a crash or an
error mid-append leaves the committed contents untouched.
"""

from __future__ import annotations

import json
import os
import struct
import threading
import zlib
from pathlib import Path
from typing import Iterator

import numpy as np

from .records import MODALITIES, FeatureKey, FeatureRecord

MAGIC = b"VAFF"
VERSION = 1
HEADER = struct.Struct("<4sIIQ8s")
COUNT_OFFSET = 12
FLAG_CORRUPTED = 0x01
FLAG_REMOTE = 0x02


class CacheError(Exception):
    pass


class DimMismatchError(CacheError, ValueError):
    pass


class KeyConflictError(CacheError, ValueError):
    pass


class ChecksumError(CacheError):
    pass


def _tag_bytes(modality: str) -> bytes:
    raw = modality.encode("ascii")
    if len(raw) > 8:
        raise ValueError("modality tag longer than 8 bytes")
    return raw.ljust(8, b"\0")


def _encode_key(key: FeatureKey) -> bytes:
    return json.dumps([key.conv_id, key.index, key.modality, key.provider_tag],
                      ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def encode_record(record: FeatureRecord) -> bytes:
    key = _encode_key(record.key)
    flags = (FLAG_CORRUPTED if record.corrupted else 0) | (FLAG_REMOTE if record.provider == "remote" else 0)
    body = struct.pack("<H", len(key)) + key + struct.pack("<B", flags) + record.vector.astype("<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


class FeatureCache:
    """Feature vectors of one modality keyed by ``(conv_id, index, modality, provider_tag)``.

    Appends go through a single lock; reads hit an in-memory index built at open.
    """

    def __init__(self, path: str | Path, dim: int | None = None, modality: str | None = None):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[FeatureKey, FeatureRecord] = {}
        self._by_utt: dict[tuple[str, int], list[FeatureKey]] = {}
        if self.path.exists() and self.path.stat().st_size > 0:
            self._load()
            if dim is not None and dim != self.dim:
                raise DimMismatchError(f"{self.path} holds dim {self.dim}, requested {dim}")
            if modality is not None and modality != self.modality:
                raise CacheError(f"{self.path} holds modality {self.modality!r}, requested {modality!r}")
        else:
            if dim is None or modality is None:
                raise CacheError(f"{self.path} does not exist; dim and modality are needed to create it")
            if modality not in MODALITIES:
                raise ValueError(f"unknown modality {modality!r}")
            if dim < 1:
                raise ValueError("dim must be positive")
            self.dim = dim
            self.modality = modality
            self._end = HEADER.size
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "wb") as fh:
                fh.write(HEADER.pack(MAGIC, VERSION, dim, 0, _tag_bytes(modality)))

    @property
    def record_size(self) -> int:
        return 4 * self.dim

    def _load(self) -> None:
        blob = self.path.read_bytes()
        if len(blob) < HEADER.size:
            raise CacheError(f"{self.path}: truncated header")
        magic, version, dim, count, tag = HEADER.unpack_from(blob, 0)
        if magic != MAGIC:
            raise CacheError(f"{self.path}: bad magic {magic!r}")
        if version != VERSION:
            raise CacheError(f"{self.path}: unsupported version {version}")
        self.dim = dim
        self.modality = tag.rstrip(b"\0").decode("ascii")
        pos = HEADER.size
        for n in range(count):
            if pos + 2 > len(blob):
                raise CacheError(f"{self.path}: truncated at record {n}")
            (key_len,) = struct.unpack_from("<H", blob, pos)
            end = pos + 2 + key_len + 1 + 4 * dim
            if end + 4 > len(blob):
                raise CacheError(f"{self.path}: truncated at record {n}")
            body = blob[pos:end]
            (crc,) = struct.unpack_from("<I", blob, end)
            if zlib.crc32(body) != crc:
                raise ChecksumError(f"{self.path}: checksum failure in record {n}")
            conv_id, index, modality, tag_str = json.loads(body[2 : 2 + key_len].decode("utf-8"))
            flags = body[2 + key_len]
            vec = np.frombuffer(body, dtype="<f4", count=dim, offset=3 + key_len).astype(np.float32)
            record = FeatureRecord(
                FeatureKey(conv_id, index, modality, tag_str),
                vec,
                provider="remote" if flags & FLAG_REMOTE else "synthetic",
                corrupted=bool(flags & FLAG_CORRUPTED),
            )
            self._index(record)
            pos = end + 4
        self._end = pos

    def _index(self, record: FeatureRecord) -> None:
        self._records[record.key] = record
        self._by_utt.setdefault((record.key.conv_id, record.key.index), []).append(record.key)

    def put(self, record: FeatureRecord) -> bool:
        """Append ``record``; returns False when an identical record is already stored."""
        if record.dim != self.dim:
            raise DimMismatchError(f"record dim {record.dim} != cache dim {self.dim}")
        if record.key.modality != self.modality:
            raise CacheError(f"record modality {record.key.modality!r} != cache modality {self.modality!r}")
        payload = encode_record(record)
        with self._lock:
            existing = self._records.get(record.key)
            if existing is not None:
                if encode_record(existing) == payload:
                    return False
                raise KeyConflictError(f"conflicting payload for {record.key}")
            with open(self.path, "r+b") as fh:
                fh.seek(self._end)
                fh.write(payload)
                fh.truncate()
                fh.flush()
                os.fsync(fh.fileno())
                # commit: the record exists only once the count covers it
                fh.seek(COUNT_OFFSET)
                fh.write(struct.pack("<Q", len(self._records) + 1))
                fh.flush()
            self._end += len(payload)
            self._index(record)
        return True

    def get(self, key: FeatureKey) -> FeatureRecord | None:
        return self._records.get(key)

    def find(self, conv_id: str, index: int) -> FeatureRecord | None:
        """The record for an utterance regardless of provider tag; ambiguous tags are an error."""
        keys = self._by_utt.get((conv_id, index))
        if not keys:
            return None
        if len(keys) > 1:
            raise CacheError(f"several provider tags cached for {(conv_id, index)}: {[k.provider_tag for k in keys]}")
        return self._records[keys[0]]

    def __contains__(self, key: FeatureKey) -> bool:
        return key in self._records

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[FeatureRecord]:
        return iter(list(self._records.values()))

    def keys(self) -> list[FeatureKey]:
        return list(self._records)


def cache_put(cache: FeatureCache, record: FeatureRecord) -> bool:
    return cache.put(record)


def cache_get(cache: FeatureCache, key: FeatureKey) -> FeatureRecord | None:
    return cache.get(key)


def open_caches(directory: str | Path) -> dict[str, FeatureCache]:
    """Open ``<modality>.vaff`` for every modality present in ``directory``."""
    directory = Path(directory)
    caches = {}
    for modality in MODALITIES:
        path = directory / f"{modality}.vaff"
        if path.exists():
            caches[modality] = FeatureCache(path)
    return caches
