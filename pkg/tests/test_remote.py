import json

import numpy as np
import pytest

from visaff import cli
from visaff.datamodel import Conversation, Dataset, EmotionLabel, Utterance, save_dataset
from visaff.prompting import VadLexicon, build_prompt_bundle
from visaff.providers.cache import DimMismatchError, FeatureCache
from visaff.providers.remote import (ENDPOINT_ENV, EmbeddingClient, EndpointConfig, ExtractionInputError,
                                     RemoteError, extract_remote)

from mock_server import MockEmbeddingServer


def client_for(server, retries=3):
    return EmbeddingClient(EndpointConfig(server.url, timeout=5.0, retries=retries), sleep=lambda s: None)


def bundle():
    conv = Conversation("c", (Utterance("c", 0, "A", "I am so happy today", 0),), "train")
    return build_prompt_bundle(conv, 0, VadLexicon.from_tsv(), total_frames=4)


def media_dataset(root, n_convs=2, per_conv=5):
    """Dataset JSONL whose utterances point at small frame directories on disk."""
    convs = []
    for c in range(n_convs):
        utts = []
        for i in range(per_conv):
            clip = root / "media" / f"c{c}_{i}"
            clip.mkdir(parents=True)
            for f in range(3):
                (clip / f"{f:03d}.png").write_bytes(f"frame {c} {i} {f}".encode())
            (root / "media" / f"ref_c{c}_{i}.png").write_bytes(f"ref c{c} {i}".encode())
            utts.append(Utterance(f"c{c}", i, "AB"[i % 2], f"words of utterance {i}", i % 2,
                                  video_path=f"media/c{c}_{i}", reference_image_path=f"media/ref_c{c}_{i}.png"))
        convs.append(Conversation(f"c{c}", tuple(utts), "train"))
    path = root / "dataset.jsonl"
    save_dataset(Dataset((EmotionLabel(0, "calm"), EmotionLabel(1, "tense")), tuple(convs), "media"), path)
    return path


def test_fixed_vector_pass_through():
    with MockEmbeddingServer() as server, client_for(server) as client:
        rec = extract_remote(bundle(), [b"f1", b"f2"], b"ref", client)
    assert rec.provider == "remote" and rec.dim == 8
    np.testing.assert_array_equal(rec.vector, np.asarray(server.vector, dtype=np.float32))
    body = server.requests[0]
    assert len(body["frames"]) == 2 and body["prompt"] == bundle().composed


def test_retry_then_succeed():
    delays = []
    with MockEmbeddingServer(script=[503, 503]) as server:
        client = EmbeddingClient(EndpointConfig(server.url, retries=3, backoff_base=0.5), sleep=delays.append)
        with client:
            rec = extract_remote(bundle(), [b"f"], b"r", client)
    assert len(server.requests) == 3 and client.requests_sent == 3
    assert delays == [0.5, 1.0]
    assert rec.dim == 8


def test_retry_budget_exhausted():
    with MockEmbeddingServer(script=[503] * 3) as server, client_for(server, retries=2) as client:
        with pytest.raises(RemoteError, match="3 attempts"):
            client.embed([b"f"], None, "p")
    assert len(server.requests) == 3


def test_non_retryable_status_echoes_body():
    with MockEmbeddingServer(fail_reference=b"bad") as server, client_for(server) as client:
        with pytest.raises(RemoteError, match="rejected reference image"):
            client.embed([b"f"], b"bad", "p")
    assert len(server.requests) == 1


def test_dim_mismatch_leaves_cache_untouched(tmp_path):
    path = tmp_path / "visual.vaff"
    FeatureCache(path, dim=8, modality="visual")
    before = path.read_bytes()
    with MockEmbeddingServer(dim=7) as server, client_for(server) as client:
        with pytest.raises(DimMismatchError):
            extract_remote(bundle(), [b"f"], b"r", client, FeatureCache(path))
    assert path.read_bytes() == before


def test_no_frames_rejected():
    with MockEmbeddingServer() as server, client_for(server) as client:
        with pytest.raises(ExtractionInputError):
            extract_remote(bundle(), [], b"r", client)
    assert server.requests == []


def test_endpoint_env_override(monkeypatch):
    monkeypatch.setenv(ENDPOINT_ENV, "http://env.example:9/")
    assert EndpointConfig.resolve("http://flag.example").url == "http://env.example:9"
    monkeypatch.delenv(ENDPOINT_ENV)
    assert EndpointConfig.resolve("http://flag.example").url == "http://flag.example"
    with pytest.raises(ValueError):
        EndpointConfig.resolve(None)


def run_extract(tmp_path, server, *extra):
    args = ["extract", "--dataset", str(tmp_path / "dataset.jsonl"), "--cache", str(tmp_path / "visual.vaff"),
            "--endpoint", server.url, "--retries", "0", *extra]
    return cli.main(args)


def test_cli_extract_fill_and_resume(tmp_path, monkeypatch):
    monkeypatch.delenv(ENDPOINT_ENV, raising=False)
    media_dataset(tmp_path)
    with MockEmbeddingServer() as server:
        assert run_extract(tmp_path, server) == 0
        assert len(server.requests) == 10
    assert len(FeatureCache(tmp_path / "visual.vaff")) == 10
    with MockEmbeddingServer() as server:
        assert run_extract(tmp_path, server) == 1
        assert run_extract(tmp_path, server, "--resume") == 0
        assert server.requests == []
    manifest = json.loads((tmp_path / "visual.vaff.manifest.json").read_text())
    assert manifest["requests"] == 0 and manifest["skipped"] == 10


def test_cli_extract_failure_manifest(tmp_path, monkeypatch):
    monkeypatch.delenv(ENDPOINT_ENV, raising=False)
    media_dataset(tmp_path)
    with MockEmbeddingServer(fail_reference=b"ref c1 3") as server:
        assert run_extract(tmp_path, server, "--workers", "3") == 2
    manifest = json.loads((tmp_path / "visual.vaff.manifest.json").read_text())
    assert [(f["conv_id"], f["index"]) for f in manifest["failed"]] == [("c1", 3)]
    assert manifest["extracted"] == 9
    cache = FeatureCache(tmp_path / "visual.vaff")
    assert len(cache) == 9 and cache.find("c1", 3) is None
    with MockEmbeddingServer() as server:
        assert run_extract(tmp_path, server, "--resume") == 0
        assert len(server.requests) == 1
    assert len(FeatureCache(tmp_path / "visual.vaff")) == 10


def test_cli_extract_dim_mismatch_on_resume(tmp_path, monkeypatch):
    monkeypatch.delenv(ENDPOINT_ENV, raising=False)
    media_dataset(tmp_path)
    with MockEmbeddingServer(fail_reference=b"ref c0 0") as server:
        run_extract(tmp_path, server)
    before = (tmp_path / "visual.vaff").read_bytes()
    with MockEmbeddingServer(dim=7) as server:
        assert run_extract(tmp_path, server, "--resume") == 2
    assert (tmp_path / "visual.vaff").read_bytes() == before


def test_cli_extract_env_endpoint(tmp_path, monkeypatch):
    media_dataset(tmp_path, n_convs=1, per_conv=2)
    with MockEmbeddingServer() as server:
        monkeypatch.setenv(ENDPOINT_ENV, server.url)
        code = cli.main(["extract", "--dataset", str(tmp_path / "dataset.jsonl"),
                         "--cache", str(tmp_path / "visual.vaff"), "--endpoint", "http://127.0.0.1:1"])
        assert code == 0 and len(server.requests) == 2
