import json
import struct

import numpy as np
import pytest

from slotcon.checkpoint import (MAGIC, Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint,
                                save_checkpoint)
from slotcon.errors import ParseError


@pytest.fixture
def ckpt(rng):
    gen = np.random.default_rng(5)
    gen.standard_normal(3)
    return Checkpoint(
        config={"train.epochs": 3, "model.channels": [4, 8]},
        params={"a.weight": rng.standard_normal((3, 2)).astype(np.float32), "a.bias": np.zeros(2, np.float32)},
        epoch=2,
        step=17,
        seed=9,
        adam_t=17,
        moments={"a.weight": (np.ones((3, 2), np.float32), np.full((3, 2), 0.5, np.float32)),
                 "a.bias": (np.zeros(2, np.float32), np.zeros(2, np.float32))},
        banks=[(rng.standard_normal((4, 2)), np.arange(4)), (np.zeros((0, 2)), np.zeros(0, dtype=np.int64))],
        rng_state=gen.bit_generator.state,
        class_frequencies={"id": [0.97, 0.03], "sh": [0.25, 0.75]},
    )


def _header(doc):
    head = json.dumps(doc).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head


def test_round_trip(ckpt):
    back = decode_checkpoint(encode_checkpoint(ckpt))
    assert back.config == ckpt.config
    assert (back.epoch, back.step, back.seed, back.adam_t) == (2, 17, 9, 17)
    for name, value in ckpt.params.items():
        assert back.params[name].dtype == value.dtype
        np.testing.assert_array_equal(back.params[name], value)
    for name, (m, v) in ckpt.moments.items():
        np.testing.assert_array_equal(back.moments[name][0], m)
        np.testing.assert_array_equal(back.moments[name][1], v)
    assert len(back.banks) == 2
    np.testing.assert_array_equal(back.banks[0][0], ckpt.banks[0][0])
    np.testing.assert_array_equal(back.banks[0][1], [0, 1, 2, 3])
    assert back.banks[1][0].shape == (0, 2)
    assert back.dtype == "float32"
    assert back.class_frequencies == {"id": [0.97, 0.03], "sh": [0.25, 0.75]}


def test_rng_state_resumes_stream(ckpt):
    back = decode_checkpoint(encode_checkpoint(ckpt))
    a, b = np.random.default_rng(), np.random.default_rng()
    a.bit_generator.state = ckpt.rng_state
    b.bit_generator.state = back.rng_state
    np.testing.assert_array_equal(a.standard_normal(5), b.standard_normal(5))


def test_encoding_is_deterministic(ckpt):
    assert encode_checkpoint(ckpt) == encode_checkpoint(decode_checkpoint(encode_checkpoint(ckpt)))


def test_files(ckpt, tmp_path):
    path = save_checkpoint(ckpt, tmp_path / "run" / "checkpoint.ckpt")
    assert [p.name for p in path.parent.iterdir()] == ["checkpoint.ckpt"]
    np.testing.assert_array_equal(load_checkpoint(path).params["a.weight"], ckpt.params["a.weight"])
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_bad_magic(ckpt):
    with pytest.raises(ParseError, match="bad magic"):
        decode_checkpoint(b"NOTACKPT" + encode_checkpoint(ckpt)[8:])


@pytest.mark.parametrize("version", ["2.0.0", "0.9.0", "banana", None])
def test_unsupported_version(version):
    with pytest.raises(ParseError) as info:
        decode_checkpoint(_header({"format_version": version, "blocks": []}))
    assert info.value.location == "header.format_version"


def test_truncated_block():
    data = _header({"format_version": "1.0.0",
                    "blocks": [{"name": "param/w", "shape": [4], "dtype": "<f4", "offset": 0, "nbytes": 16}]})
    with pytest.raises(ParseError, match="past end of file"):
        decode_checkpoint(data + b"\0" * 8)


def test_bad_header():
    with pytest.raises(ParseError):
        decode_checkpoint(MAGIC + struct.pack("<I", 3) + b"{x}")


def test_older_format_without_frequencies():
    back = decode_checkpoint(_header({"format_version": "1.0.0", "blocks": []}))
    assert back.class_frequencies == {}


@pytest.mark.parametrize("frequencies", [[0.5, 0.5], {"id": 0.5}])
def test_bad_class_frequencies(frequencies):
    with pytest.raises(ParseError) as info:
        decode_checkpoint(_header({"format_version": "1.1.0", "blocks": [], "class_frequencies": frequencies}))
    assert info.value.location == "header.class_frequencies"
