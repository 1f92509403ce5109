"""Utility & helper functions."""

import hashlib
import json
import re
import zlib
from pathlib import Path
from typing import Any, Dict, List, TypedDict, Union

import numpy as np

_PUNCTUATION = re.compile(r"[^\w\s]|_")


class ErrorResponse(TypedDict, total=False):
    error: str
    error_type: str
    success: bool
    additional_info: Dict[str, Any]


def create_error_response(error_message, error_type=None, additional_info=None) -> ErrorResponse:
    """Create a standardized error response."""
    response: ErrorResponse = {
        "error": error_message,
        "success": False
    }

    if error_type:
        response["error_type"] = error_type

    if additional_info:
        response["additional_info"] = additional_info

    return response


def tokenize_text(text: str) -> List[str]:
    """Lowercase, strip punctuation and split on whitespace."""
    return _PUNCTUATION.sub(" ", text.lower()).split()


def derive_seed(seed: int, stream: str) -> int:
    """Expand a run seed into an independent seed for a named stream (data, augment, init, tsne, ...)."""
    sequence = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(stream.encode("utf-8"))])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def stream_rng(seed: int, stream: str) -> np.random.Generator:
    """Numpy generator for a named random stream."""
    return np.random.default_rng(derive_seed(seed, stream))


def git_blob_fingerprint(content: bytes) -> str:
    """Hash bytes the way ``git hash-object`` does."""
    header = f"blob {len(content)}\0".encode("utf-8")
    return hashlib.sha1(header + content).hexdigest()


def fingerprint_path(path: Union[str, Path]) -> str:
    """Git-style fingerprint of a file, or of a directory as a sorted tree of its files."""
    path = Path(path)
    if path.is_file():
        return git_blob_fingerprint(path.read_bytes())
    if not path.exists():
        return "missing"
    entries = []
    for child in sorted(p for p in path.rglob("*") if p.is_file()):
        entries.append(f"{child.relative_to(path).as_posix()} {git_blob_fingerprint(child.read_bytes())}")
    return hashlib.sha1("\n".join(entries).encode("utf-8")).hexdigest()


def fingerprint_json(payload: Any) -> str:
    """Stable fingerprint of a JSON-compatible object."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return git_blob_fingerprint(text.encode("utf-8"))


def write_json(path: Union[str, Path], payload: Any) -> Path:
    """Write deterministic, human-readable JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_json(path: Union[str, Path]) -> Any:
    with open(path, encoding="utf-8") as f:
        return json.load(f)
