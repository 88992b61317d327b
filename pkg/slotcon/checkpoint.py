"""
Checkpoint file: an 8-byte magic, a little-endian uint32 header length, a UTF-8 JSON header
and then raw little-endian array blocks in the order the header lists them.
"""
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from semantic_version import SimpleSpec, Version

from slotcon.errors import ParseError

MAGIC = b"SLOTCKPT"
FORMAT_VERSION = "1.1.0"
COMPATIBLE = SimpleSpec(">=1.0.0,<2.0.0")


@dataclass
class Checkpoint:
    config: Dict[str, Any]
    params: Dict[str, np.ndarray]
    epoch: int = 0
    step: int = 0
    seed: int = 0
    adam_t: int = 0
    moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    banks: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)  # (embeddings, steps) per class
    rng_state: Optional[Dict[str, Any]] = None
    class_frequencies: Dict[str, List[float]] = field(default_factory=dict)  # task -> q, used at inference

    @property
    def dtype(self) -> str:
        first = next(iter(self.params.values()), None)
        return str(first.dtype) if first is not None else "float32"


def _blocks(ckpt: Checkpoint) -> List[Tuple[str, np.ndarray]]:
    blocks = [(f"param/{name}", value) for name, value in ckpt.params.items()]
    for name, (m, v) in ckpt.moments.items():
        blocks.append((f"adam.m/{name}", m))
        blocks.append((f"adam.v/{name}", v))
    for k, (embeddings, steps) in enumerate(ckpt.banks):
        blocks.append((f"bank.{k}/embeddings", embeddings))
        blocks.append((f"bank.{k}/steps", np.asarray(steps, dtype=np.int64)))
    return blocks


def write_atomic(path: Union[str, Path], data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    entries, payload, offset = [], [], 0
    for name, array in _blocks(ckpt):
        le = np.ascontiguousarray(array).astype(array.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "shape": list(array.shape), "dtype": le.dtype.str, "offset": offset,
                        "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "adam_t": ckpt.adam_t,
        "dtype": ckpt.dtype,
        "rng_state": ckpt.rng_state,
        "class_frequencies": ckpt.class_frequencies,
        "blocks": entries,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(payload)


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    return write_atomic(path, encode_checkpoint(ckpt))


def decode_checkpoint(data: bytes, source: str = "<checkpoint>") -> Checkpoint:
    if data[:len(MAGIC)] != MAGIC:
        raise ParseError(source, "byte 0", "not a checkpoint file (bad magic)")
    start = len(MAGIC) + 4
    if len(data) < start:
        raise ParseError(source, f"byte {len(MAGIC)}", "truncated header length")
    (head_len, ) = struct.unpack("<I", data[len(MAGIC):start])
    try:
        header = json.loads(data[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(source, "header", f"invalid JSON header: {e}") from e

    version = header.get("format_version")
    try:
        compatible = Version(str(version)) in COMPATIBLE
    except ValueError:
        compatible = False
    if not compatible:
        raise ParseError(source, "header.format_version",
                         f"unsupported checkpoint format {version!r} (this build reads {COMPATIBLE})")

    frequencies = header.get("class_frequencies", {})
    if not isinstance(frequencies, dict) or not all(isinstance(q, list) for q in frequencies.values()):
        raise ParseError(source, "header.class_frequencies", "expected a mapping of task to a list of frequencies")

    base = start + head_len
    arrays: Dict[str, np.ndarray] = {}
    for i, entry in enumerate(header.get("blocks", [])):
        lo, hi = base + entry["offset"], base + entry["offset"] + entry["nbytes"]
        if hi > len(data):
            raise ParseError(source, f"header.blocks[{i}]", f"block '{entry['name']}' runs past end of file")
        dtype = np.dtype(entry["dtype"])
        array = np.frombuffer(data[lo:hi], dtype=dtype).reshape(entry["shape"])
        arrays[entry["name"]] = array.astype(dtype.newbyteorder("="), copy=True)

    params = {name[len("param/"):]: a for name, a in arrays.items() if name.startswith("param/")}
    moments = {
        name[len("adam.m/"):]: (a, arrays[f"adam.v/{name[len('adam.m/'):]}"])
        for name, a in arrays.items() if name.startswith("adam.m/")
    }
    banks = []
    k = 0
    while f"bank.{k}/embeddings" in arrays:
        banks.append((arrays[f"bank.{k}/embeddings"], arrays[f"bank.{k}/steps"]))
        k += 1
    return Checkpoint(config=header.get("config", {}), params=params, epoch=int(header.get("epoch", 0)),
                      step=int(header.get("step", 0)), seed=int(header.get("seed", 0)),
                      adam_t=int(header.get("adam_t", 0)), moments=moments, banks=banks,
                      rng_state=header.get("rng_state"), class_frequencies=frequencies)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ParseError(str(path), "file", f"cannot read checkpoint: {e.strerror}") from e
    return decode_checkpoint(data, str(path))
