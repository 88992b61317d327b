import json

import pytest

from slotcon.errors import ParseError
from slotcon.manifest import MANIFEST_FILE, RunManifest, file_hash, read_manifest


def test_file_hash(tmp_path):
    path = tmp_path / "abc.txt"
    path.write_bytes(b"abc")
    assert file_hash(path) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_write_and_read(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "images" / "b.npy").write_bytes(b"b")
    (tmp_path / "images" / "a.npy").write_bytes(b"a")
    (tmp_path / "labels.json").write_text("{}")
    manifest = RunManifest(command="synth", seed=3, config_hash="f" * 64, inputs=["x"])
    path = manifest.write(tmp_path, [tmp_path / "labels.json", tmp_path / "images", tmp_path / MANIFEST_FILE])
    assert path == tmp_path / MANIFEST_FILE

    doc = json.loads(path.read_text())
    assert doc["command"] == "synth"
    assert doc["seed"] == 3
    assert list(doc["outputs"]) == [str(tmp_path / "images" / "a.npy"), str(tmp_path / "images" / "b.npy"),
                                    str(tmp_path / "labels.json")]
    assert doc["outputs"][str(tmp_path / "images" / "a.npy")] == file_hash(tmp_path / "images" / "a.npy")
    assert doc["manifest_hash"] == manifest.manifest_hash()
    assert doc["finished"] is not None

    back = read_manifest(path)
    assert back.outputs == manifest.outputs
    assert back.manifest_hash() == manifest.manifest_hash()


def test_hash_ignores_time_and_input_order():
    a = RunManifest(command="train", seed=1, inputs=["a", "b"], started="2020-01-01T00:00:00+00:00")
    b = RunManifest(command="train", seed=1, inputs=["b", "a"], started="2021-01-01T00:00:00+00:00")
    assert a.manifest_hash() == b.manifest_hash()
    assert RunManifest(command="train", seed=2, inputs=["a", "b"]).manifest_hash() != a.manifest_hash()


def test_read_errors(tmp_path):
    with pytest.raises(ParseError):
        read_manifest(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ParseError):
        read_manifest(tmp_path / "bad.json")
    (tmp_path / "odd.json").write_text('{"unexpected": 1}')
    with pytest.raises(ParseError):
        read_manifest(tmp_path / "odd.json")
