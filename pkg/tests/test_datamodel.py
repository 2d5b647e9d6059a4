import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from visaff.datamodel import (AudioDescriptors, Conversation, Dataset, DatasetError, EmotionLabel, Utterance,
                              dumps_dataset, history_view, load_dataset, parse_dataset, save_dataset)
from visaff.providers.synthetic import CorpusShape, SyntheticSpec, generate_dataset

from conftest import make_conversation, make_dataset

HEADER = json.dumps({"schema": "visaff-dataset/1", "labels": ["neutral", "joy"]})


def record(**over):
    rec = {"conv_id": "a", "index": 0, "split": "train", "speaker_id": "S", "transcript": "hi", "label": 0,
           "video_path": None, "audio_path": None, "reference_image_path": None}
    rec.update(over)
    return json.dumps(rec)


def test_minimal_file_loads():
    ds = parse_dataset([HEADER, record(), record(index=1, label=1)])
    assert ds.num_labels == 2
    assert len(ds) == 2
    assert ds.label_names == ["neutral", "joy"]


def test_gap_in_indices_is_rejected():
    with pytest.raises(DatasetError, match="gapless ordering violated"):
        parse_dataset([HEADER, record(), record(index=2)])


@pytest.mark.parametrize("line, message", [
    (record(label=5), "out of range"),
    (record(split="dev"), "unknown split"),
    ("{not json", "malformed JSON"),
    (record(extra=1), "unknown fields"),
])
def test_bad_line_reports_its_number(line, message):
    with pytest.raises(DatasetError, match=message) as err:
        parse_dataset([HEADER, record(), line.replace('"index": 0', '"index": 1')])
    assert err.value.line == 3


def test_duplicate_key_and_split_conflict():
    with pytest.raises(DatasetError, match="duplicate"):
        parse_dataset([HEADER, record(), record()])
    with pytest.raises(DatasetError, match="two splits"):
        parse_dataset([HEADER, record(), record(index=1, split="val")])


def test_header_must_declare_schema():
    with pytest.raises(DatasetError) as err:
        parse_dataset([json.dumps({"labels": ["a", "b"]}), record()])
    assert err.value.line == 1


def test_round_trip_of_generated_dataset(tmp_path):
    ds = generate_dataset(SyntheticSpec(), CorpusShape(n_train=30, n_val=10, n_test=10), seed=3)
    path = tmp_path / "d.jsonl"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.labels == ds.labels
    odd = Dataset(ds.labels, (Conversation("x", (Utterance("x", 0, "s", "a\x85b\u2028c"),)),))
    save_dataset(odd, path)
    assert load_dataset(path).conversations == odd.conversations
    assert back.conversations == ds.conversations


@given(st.lists(st.tuples(st.integers(1, 5), st.sampled_from(["train", "val", "test"]),
                          st.text(max_size=12), st.one_of(st.none(), st.integers(0, 2))), min_size=1, max_size=6),
       st.booleans())
def test_save_load_identity(convs, with_audio):
    labels = tuple(EmotionLabel(i, f"l{i}") for i in range(3))
    built = []
    for j, (n, split, text, label) in enumerate(convs):
        desc = AudioDescriptors("high", "low", "slow") if with_audio else None
        utts = tuple(Utterance(f"c{j}", i, f"sp{i}", text, label, audio_descriptors=desc) for i in range(n))
        built.append(Conversation(f"c{j}", utts, split))
    ds = Dataset(labels, tuple(built))
    # the format is \n-delimited; str.splitlines would also break on U+0085 / U+2028
    back = parse_dataset(dumps_dataset(ds).split("\n"))
    assert back.conversations == ds.conversations


def test_history_view_edges():
    conv = make_conversation(n=5)
    assert history_view(conv, 0) == (conv.utterances[0],)
    assert history_view(conv, 4) == conv.utterances
    with pytest.raises(IndexError):
        history_view(conv, 5)


@given(st.integers(1, 20), st.data())
def test_history_view_never_leaks_future(n, data):
    conv = make_conversation(n=n)
    i = data.draw(st.integers(0, n - 1))
    view = history_view(conv, i)
    assert view == conv.utterances[: i + 1]
    assert not {u.index for u in view} & set(range(i + 1, n))


def test_splits_are_disjoint():
    ds = make_dataset(n_convs=6)
    ids = [set(c.conv_id for c in ds.split(s)) for s in ("train", "val", "test")]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])


def test_dataset_validates_labels():
    with pytest.raises(DatasetError):
        Dataset((EmotionLabel(0, "a"),), ())
    with pytest.raises(DatasetError):
        Dataset((EmotionLabel(0, "a"), EmotionLabel(0, "b")), ())
    with pytest.raises(DatasetError, match="out of range"):
        Dataset((EmotionLabel(0, "a"), EmotionLabel(1, "b")), (make_conversation(labels=[0, 1, 2]),))
