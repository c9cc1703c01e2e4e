import json
import logging

import pytest

from agentmod.dataset import (
    HATEFUL_MEMES,
    MMHS150K,
    DatasetManifest,
    ImageStore,
    LabelSpace,
    ManifestError,
    Sample,
    build_mmhs_manifest,
    content_key,
    export_manifest,
    load_manifest,
    majority_filter,
    map_label,
    validate_known_splits,
)


def _write(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def test_manifest_round_trip(tmp_path):
    samples = (Sample("a", "a.png", "hi", "hateful"), Sample("b", "b.png", "", "not_hateful"))
    manifest = DatasetManifest("hateful_memes", "test", samples, HATEFUL_MEMES)
    path = export_manifest(manifest, tmp_path / "m.jsonl")
    loaded = load_manifest(path)
    assert loaded == manifest
    assert loaded.base_dir == tmp_path


def test_manifest_rejects_label_outside_space(tmp_path):
    path = _write(
        tmp_path / "m.jsonl",
        [
            {"dataset_name": "x", "split": "test", "label_space": HATEFUL_MEMES.to_dict()},
            {"id": "a", "image_ref": "a.png", "gold_label": "spam"},
        ],
    )
    with pytest.raises(ManifestError) as info:
        load_manifest(path)
    assert info.value.line == 2


def test_manifest_rejects_duplicate_ids_and_bad_json(tmp_path):
    header = {"dataset_name": "x", "split": "test", "label_space": HATEFUL_MEMES.to_dict()}
    rec = {"id": "a", "image_ref": "a.png", "gold_label": "hateful"}
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(_write(tmp_path / "dup.jsonl", [header, rec, rec]))
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps(header) + "\n{not json\n")
    with pytest.raises(ManifestError) as info:
        load_manifest(bad)
    assert info.value.line == 2


def test_manifest_check_images(tmp_path):
    header = {"dataset_name": "x", "split": "test", "label_space": HATEFUL_MEMES.to_dict()}
    path = _write(tmp_path / "m.jsonl", [header, {"id": "a", "image_ref": "a.png", "gold_label": "hateful"}])
    load_manifest(path)
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(path, check_images=True)
    (tmp_path / "a.png").write_bytes(b"png")
    load_manifest(path, check_images=True)


def test_split_must_be_train_or_test():
    with pytest.raises(ManifestError):
        DatasetManifest("x", "val", (), HATEFUL_MEMES)


def test_label_space_canonical_is_case_insensitive():
    assert HATEFUL_MEMES.canonical(" Hateful ") == "hateful"
    assert HATEFUL_MEMES.canonical("hate") is None


def test_label_space_validation():
    with pytest.raises(ManifestError):
        LabelSpace("x", ())
    with pytest.raises(ManifestError):
        LabelSpace("x", ("a", "a"))
    with pytest.raises(ManifestError):
        LabelSpace("x", ("a", "b"), positive_class="c")
    assert LabelSpace.from_dict(MMHS150K.to_dict()) == MMHS150K


@pytest.mark.parametrize(
    "annotations, expected",
    [
        ([1, 1, 0], "racist"),
        ([0, 0, 0], "not_hate"),
        (["sexist", 2, 5], "sexist"),
        ([1, 2, 3], None),
    ],
)
def test_majority_filter(annotations, expected):
    assert majority_filter(annotations) == expected


def test_majority_filter_needs_three_labels():
    with pytest.raises(ManifestError):
        majority_filter([1, 1])
    with pytest.raises(ManifestError):
        majority_filter([1, 1, 9])


def test_build_mmhs_manifest_drops_disagreement():
    raw = [
        {"id": 1, "image_ref": "1.jpg", "text": "t", "annotator_labels": [0, 0, 1]},
        {"id": 2, "image_ref": "2.jpg", "text": "t", "annotator_labels": [1, 2, 3]},
        {"id": 3, "image_ref": "3.jpg", "text": "t", "annotator_labels": [4, 4, 4]},
    ]
    m = build_mmhs_manifest(raw, "train")
    assert [s.id for s in m.samples] == ["1", "3"]
    assert [s.gold_label for s in m.samples] == ["not_hate", "religion"]


def test_map_label_modes():
    assert map_label("racist", MMHS150K) == "racist"
    assert map_label("racist", MMHS150K, "binarized") == "violating"
    assert map_label("not_hate", MMHS150K, "binarized") == "benign"
    with pytest.raises(ManifestError):
        map_label("hateful", HATEFUL_MEMES, "binarized")
    with pytest.raises(ValueError):
        map_label("hateful", HATEFUL_MEMES, "other")


def _sized(name, split, n):
    samples = tuple(Sample(f"s{i}", f"{i}.png", "", "hateful") for i in range(n))
    return DatasetManifest(name, split, samples, HATEFUL_MEMES)


def test_split_report_match_and_mismatch(caplog):
    assert validate_known_splits(_sized("Hateful Memes", "test", 500)).match
    with caplog.at_level(logging.WARNING, logger="agentmod.dataset"):
        report = validate_known_splits(_sized("hateful_memes", "test", 499))
    assert not report.match and report.known
    assert "MISMATCH" in report.message
    assert "MISMATCH" in caplog.text


def test_split_report_unknown_dataset():
    report = validate_known_splits(_sized("my_data", "test", 3))
    assert not report.known and report.expected is None


def test_image_store_lookup_order(tmp_path):
    blobs = tmp_path / "blobs"
    blobs.mkdir()
    (tmp_path / "x.png").write_bytes(b"root")
    (blobs / "x.png").write_bytes(b"blob")
    store = ImageStore(tmp_path, blobs)
    assert store.read("x.png") == b"blob"
    key = store.put(b"mem")
    assert key == content_key(b"mem")
    assert store.read(key) == b"mem"
    assert not store.exists("missing.png")
    with pytest.raises(FileNotFoundError):
        store.read("missing.png")
