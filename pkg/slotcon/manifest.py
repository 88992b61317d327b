"""
Run manifests: what a command read and wrote, with content hashes of every output file.
"""
import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from slotcon._version import __version__
from slotcon.checkpoint import write_atomic
from slotcon.errors import ParseError

MANIFEST_FILE = "manifest.json"
CHUNK = 1 << 20


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def file_hash(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(CHUNK), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _files(paths: Sequence[Union[str, Path]]) -> List[Path]:
    """Expands directories into the files below them, sorted."""
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found.extend(sorted(f for f in p.rglob("*") if f.is_file()))
        elif p.exists():
            found.append(p)
    return found


@dataclass
class RunManifest:
    command: str
    config_path: Optional[str] = None
    seed: Optional[int] = None
    config_hash: Optional[str] = None
    inputs: List[str] = field(default_factory=list)
    outputs: Dict[str, str] = field(default_factory=dict)  # path -> sha256
    version: str = __version__
    started: str = field(default_factory=utc_now)
    finished: Optional[str] = None

    def add_outputs(self, paths: Sequence[Union[str, Path]]):
        for path in _files(paths):
            if path.name == MANIFEST_FILE:
                continue
            self.outputs[str(path)] = file_hash(path)

    def manifest_hash(self) -> str:
        """Hash of what the run consumed, excluding timestamps."""
        key = {
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "inputs": sorted(self.inputs),
            "version": self.version,
        }
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode("utf-8")).hexdigest()

    def to_json(self) -> Dict[str, Any]:
        doc = asdict(self)
        doc["manifest_hash"] = self.manifest_hash()
        return doc

    def write(self, out_dir: Union[str, Path], outputs: Sequence[Union[str, Path]] = ()) -> Path:
        self.add_outputs(outputs)
        self.finished = utc_now()
        text = json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"
        return write_atomic(Path(out_dir) / MANIFEST_FILE, text.encode("utf-8"))


def read_manifest(path: Union[str, Path]) -> RunManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as e:
        raise ParseError(str(path), "file", e.strerror or str(e)) from None
    except json.JSONDecodeError as e:
        raise ParseError(str(path), f"line {e.lineno} column {e.colno}", e.msg) from None
    doc.pop("manifest_hash", None)
    try:
        return RunManifest(**doc)
    except TypeError as e:
        raise ParseError(str(path), "document", str(e)) from None
