"""Per-trigger trace cache keyed by a digest of the generation settings.

On-disk layout::

    <root>/<digest>/<trigger_id>.htrc

Each ``.htrc`` file is a ``container`` with magic ``b"HTRC"`` and version 1.
Header keys: ``trigger_id``, ``conversation_id``, ``query_text``,
``token_count``, ``d_h``, ``d`` (0 when no teacher embedding is stored).
Blocks: ``hidden_states`` as ``<f4`` with shape ``[token_count, d_h]`` and,
when present, ``teacher_embedding`` as ``<f8`` with shape ``[d]``.

The digest is the 64-bit BLAKE2b hex digest of the UTF-8 string
``"{model_name}|{tokenizer_max_length}|{generation_length}"``. For example
``CacheKey("demo-llm", 2048, 32).digest() == "49f3ab4aa09b9214"``.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .errors import CacheMiss, CorruptionError, DataError

TRACE_MAGIC = b"HTRC"
TRACE_VERSION = 1
SUFFIX = ".htrc"

_SAFE_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


@dataclass(frozen=True)
class CacheKey:
    model_name: str
    tokenizer_max_length: int
    generation_length: int

    def canonical(self) -> str:
        return f"{self.model_name}|{int(self.tokenizer_max_length)}|{int(self.generation_length)}"

    def digest(self) -> str:
        return hashlib.blake2b(self.canonical().encode("utf-8"), digest_size=8).hexdigest()


def cache_key_digest(key: CacheKey) -> str:
    return key.digest()


@dataclass
class Trace:
    trigger_id: str
    conversation_id: str
    hidden_states: np.ndarray
    query_text: str = ""
    teacher_embedding: np.ndarray | None = None

    def __post_init__(self):
        self.hidden_states = np.asarray(self.hidden_states, dtype=np.float32)
        if self.hidden_states.ndim != 2 or self.hidden_states.shape[0] < 1:
            raise DataError(f"trace {self.trigger_id}: hidden states must be [n>=1, d_h], got {self.hidden_states.shape}")
        if self.teacher_embedding is not None:
            self.teacher_embedding = np.asarray(self.teacher_embedding, dtype=np.float64)
            norm = float(np.linalg.norm(self.teacher_embedding))
            if self.teacher_embedding.ndim != 1 or abs(norm - 1.0) > 1e-5:
                raise DataError(f"trace {self.trigger_id}: teacher embedding must be a unit vector (norm {norm})")

    @property
    def token_count(self) -> int:
        return self.hidden_states.shape[0]

    def equal(self, other: Trace) -> bool:
        if (self.trigger_id, self.conversation_id, self.query_text) != (
            other.trigger_id, other.conversation_id, other.query_text
        ):
            return False
        if self.hidden_states.tobytes() != other.hidden_states.tobytes() or self.hidden_states.shape != other.hidden_states.shape:
            return False
        if (self.teacher_embedding is None) != (other.teacher_embedding is None):
            return False
        return self.teacher_embedding is None or self.teacher_embedding.tobytes() == other.teacher_embedding.tobytes()


def _check_id(trigger_id: str) -> None:
    if not _SAFE_ID.match(trigger_id):
        raise DataError(f"trigger id {trigger_id!r} is not a safe file name")


def trace_path(root_dir, key: CacheKey, trigger_id: str) -> Path:
    _check_id(trigger_id)
    return Path(root_dir) / key.digest() / (trigger_id + SUFFIX)


def encode_trace(trace: Trace) -> bytes:
    header = {
        "trigger_id": trace.trigger_id,
        "conversation_id": trace.conversation_id,
        "query_text": trace.query_text,
        "token_count": trace.token_count,
        "d_h": trace.hidden_states.shape[1],
        "d": 0 if trace.teacher_embedding is None else int(trace.teacher_embedding.shape[0]),
    }
    blocks = [("hidden_states", trace.hidden_states)]
    if trace.teacher_embedding is not None:
        blocks.append(("teacher_embedding", trace.teacher_embedding))
    return container.encode(TRACE_MAGIC, TRACE_VERSION, header, blocks)


def decode_trace(raw: bytes, source="<bytes>") -> Trace:
    header, blocks = container.decode(raw, TRACE_MAGIC, TRACE_VERSION, source)
    try:
        hidden = blocks["hidden_states"]
        teacher = blocks.get("teacher_embedding")
        if hidden.shape != (header["token_count"], header["d_h"]):
            raise CorruptionError(f"{source}: hidden_states shape {hidden.shape} disagrees with header")
        if (teacher is None) != (header["d"] == 0):
            raise CorruptionError(f"{source}: teacher embedding presence disagrees with header")
        return Trace(
            trigger_id=header["trigger_id"],
            conversation_id=header["conversation_id"],
            hidden_states=hidden,
            query_text=header["query_text"],
            teacher_embedding=teacher,
        )
    except KeyError as exc:
        raise CorruptionError(f"{source}: missing field {exc}") from exc


def write_trace(root_dir, key: CacheKey, trace: Trace) -> Path:
    """Write atomically (temp file + rename); returns the final path."""
    path = trace_path(root_dir, key, trace.trigger_id)
    container.atomic_write(path, encode_trace(trace))
    return path


def read_trace(root_dir, key: CacheKey, trigger_id: str) -> Trace:
    """Raises ``CacheMiss`` when absent and ``CorruptionError`` when damaged."""
    path = trace_path(root_dir, key, trigger_id)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CacheMiss(f"no cached trace {trigger_id!r} under {key.digest()}") from None
    return decode_trace(raw, source=str(path))


def scan(root_dir, key: CacheKey) -> list[str]:
    """Sorted trigger ids cached under ``key``. A missing root is an I/O error."""
    root = Path(root_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"cache root {root} does not exist")
    sub = root / key.digest()
    if not sub.is_dir():
        return []
    return sorted({p.name[: -len(SUFFIX)] for p in sub.iterdir() if p.name.endswith(SUFFIX) and not p.name.startswith(".")})
