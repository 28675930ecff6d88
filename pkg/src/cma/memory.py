"""Shared global state: embedded text records with similarity search.

Records live in memory as a dense row matrix for exact full-scan cosine
retrieval and are persisted to an append-only JSONL log (``put`` and ``del``
lines). Reloading replays the log; a torn final line from a crash is
discarded.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol

import numpy as np

from .errors import StorageFullError

logger = logging.getLogger(__name__)

DEFAULT_DIM = 256
DEFAULT_MAX_RECORDS = 100_000
ID_WIDTH = 10
# scores are quantised before ranking so mathematically equal similarities tie
SCORE_DECIMALS = 9

_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _hash64(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def embed(text: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Signed hashed bag-of-words, L2-normalised.

    Each token hashes to a bucket (hash mod ``dim``) and a sign (top bit of
    the same 64-bit hash). Text with no tokens, or whose signed counts cancel
    exactly, embeds to the zero vector.
    """
    vec = np.zeros(dim, dtype=np.float64)
    for tok in tokenize(text):
        h = _hash64(tok)
        vec[h % dim] += -1.0 if (h >> 63) & 1 else 1.0
    norm = float(np.linalg.norm(vec))
    if norm > 0.0:
        vec /= norm
    return vec


class Embedder(Protocol):
    dim: int

    def __call__(self, text: str) -> np.ndarray: ...


class HashingEmbedder:
    def __init__(self, dim: int = DEFAULT_DIM) -> None:
        self.dim = dim

    def __call__(self, text: str) -> np.ndarray:
        return embed(text, self.dim)


def format_id(n: int) -> str:
    return str(n).zfill(ID_WIDTH)


@dataclass(frozen=True)
class MemoryRecord:
    id: str
    text: str
    embedding: np.ndarray = field(repr=False, compare=False)
    source_module: str
    created_at: int  # epoch ms, UTC
    tags: frozenset[str] = frozenset()

    @property
    def is_zero(self) -> bool:
        return not bool(np.any(self.embedding))

    def same_as(self, other: "MemoryRecord") -> bool:
        return self == other and np.array_equal(self.embedding, other.embedding)


@dataclass(frozen=True)
class QueryHit:
    record: MemoryRecord
    score: float


def rank_key(score: float, created_at: int, record_id: str) -> tuple:
    """Sort key: higher score, then newer, then larger id first."""
    return (-round(score, SCORE_DECIMALS), -created_at, _neg_id(record_id))


def _neg_id(record_id: str) -> tuple:
    # ids are zero-padded integers; fall back to lexical order for foreign ids
    return (-int(record_id),) if record_id.isdigit() else tuple(-ord(c) for c in record_id)


class MemoryStore:
    """Thread-safe embedded record store.

    Parameters
    ----------
    path:
        JSONL log file. ``None`` keeps everything in memory.
    dim:
        Embedding dimension; all records share it.
    max_records:
        Hard cap on live records; reaching it raises :class:`StorageFullError`.
    now_ms:
        Timestamp source (the runtime passes its clock).
    fsync:
        ``fsync`` after each append, for durability against power loss
        rather than just process death.
    """

    def __init__(
        self,
        path: str | os.PathLike | None = None,
        *,
        dim: int = DEFAULT_DIM,
        max_records: int = DEFAULT_MAX_RECORDS,
        embedder: Embedder | Callable[[str], np.ndarray] | None = None,
        now_ms: Callable[[], int] | None = None,
        fsync: bool = False,
    ) -> None:
        self.dim = dim
        self.max_records = max_records
        self.embedder = embedder or HashingEmbedder(dim)
        self.now_ms = now_ms or (lambda: int(time.time() * 1000))
        self.fsync = fsync
        self.path = Path(path) if path is not None else None

        self._lock = threading.RLock()
        self._records: dict[str, MemoryRecord] = {}
        self._row_of: dict[str, int] = {}
        self._matrix = np.zeros((64, dim), dtype=np.float64)
        self._alive = np.zeros(64, dtype=bool)
        self._row_ids: list[str] = []
        self._last_id = 0
        self._fh = None

        if self.path is not None:
            self._load()
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")

    # persistence ----------------------------------------------------------
    def _load(self) -> None:
        assert self.path is not None
        if not self.path.exists():
            return
        raw = self.path.read_bytes()
        end = raw.rfind(b"\n") + 1
        if end < len(raw):
            logger.warning("discarding torn final line in %s (%d bytes)", self.path, len(raw) - end)
            with open(self.path, "r+b") as fh:
                fh.truncate(end)
        for lineno, line in enumerate(raw[:end].decode("utf-8", errors="replace").splitlines(), 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                self._replay(entry)
            except (ValueError, KeyError, TypeError) as exc:
                logger.warning("skipping corrupt line %d in %s: %s", lineno, self.path, exc)

    def _replay(self, entry: dict) -> None:
        op = entry["op"]
        rid = str(entry["id"])
        if rid.isdigit():
            self._last_id = max(self._last_id, int(rid))
        if op == "put":
            emb = np.asarray(entry["embedding"], dtype=np.float64)
            if emb.shape != (self.dim,):
                raise ValueError(f"embedding dimension {emb.shape} != {self.dim}")
            self._insert(MemoryRecord(rid, entry["text"], emb, entry["source"], int(entry["ts"]), frozenset(entry.get("tags", ()))))
        elif op == "del":
            self._remove(rid)
        else:
            raise ValueError(f"unknown op {op!r}")

    def _append(self, entries: Iterable[dict]) -> None:
        if self._fh is None:
            return
        data = "".join(json.dumps(e, ensure_ascii=False, separators=(",", ":")) + "\n" for e in entries)
        if not data:
            return
        self._fh.write(data)
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    @staticmethod
    def _put_line(rec: MemoryRecord) -> dict:
        return {
            "op": "put",
            "id": rec.id,
            "text": rec.text,
            "embedding": rec.embedding.tolist(),
            "source": rec.source_module,
            "ts": rec.created_at,
            "tags": sorted(rec.tags),
        }

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def __enter__(self) -> "MemoryStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # index maintenance ----------------------------------------------------
    def _insert(self, rec: MemoryRecord) -> None:
        if rec.id in self._records:
            self._remove(rec.id)
        row = len(self._row_ids)
        if row >= self._matrix.shape[0]:
            self._compact_rows(grow=True)
            row = len(self._row_ids)
        self._matrix[row] = rec.embedding
        self._alive[row] = not rec.is_zero
        self._row_ids.append(rec.id)
        self._row_of[rec.id] = row
        self._records[rec.id] = rec

    def _remove(self, rid: str) -> bool:
        rec = self._records.pop(rid, None)
        if rec is None:
            return False
        row = self._row_of.pop(rid)
        self._alive[row] = False
        return True

    def _compact_rows(self, grow: bool = False) -> None:
        live = [rid for rid in self._row_ids if rid in self._records]
        cap = max(64, 2 * len(live)) if grow else max(64, self._matrix.shape[0])
        matrix = np.zeros((cap, self.dim), dtype=np.float64)
        alive = np.zeros(cap, dtype=bool)
        for i, rid in enumerate(live):
            rec = self._records[rid]
            matrix[i] = rec.embedding
            alive[i] = not rec.is_zero
            self._row_of[rid] = i
        self._matrix, self._alive, self._row_ids = matrix, alive, live

    # public operations ------------------------------------------------------
    def embed(self, text: str) -> np.ndarray:
        vec = np.asarray(self.embedder(text), dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ValueError(f"embedder returned shape {vec.shape}, expected ({self.dim},)")
        return vec

    def store(self, text: str, source_module: str, tags: Iterable[str] = ()) -> str:
        vec = self.embed(text)
        with self._lock:
            if len(self._records) >= self.max_records:
                raise StorageFullError(
                    f"memory holds {len(self._records)} records (cap {self.max_records}); is the memory cleaner running?"
                )
            self._last_id += 1
            rec = MemoryRecord(format_id(self._last_id), text, vec, source_module, self.now_ms(), frozenset(tags))
            self._append([self._put_line(rec)])
            self._insert(rec)
            return rec.id

    def get(self, record_id: str) -> MemoryRecord | None:
        with self._lock:
            return self._records.get(record_id)

    def __contains__(self, record_id: str) -> bool:
        with self._lock:
            return record_id in self._records

    def query(self, text: str, k: int) -> list[QueryHit]:
        if k < 1:
            raise ValueError("k must be >= 1")
        q = self.embed(text)
        with self._lock:
            n = len(self._row_ids)
            if n == 0 or not np.any(q):
                return []
            rows = np.flatnonzero(self._alive[:n])
            if rows.size == 0:
                return []
            scores = np.clip(np.round(self._matrix[rows] @ q, SCORE_DECIMALS), -1.0, 1.0)
            recs = [self._records[self._row_ids[r]] for r in rows]
        created = np.fromiter((r.created_at for r in recs), dtype=np.int64, count=len(recs))
        id_num = np.fromiter((int(r.id) if r.id.isdigit() else 0 for r in recs), dtype=np.int64, count=len(recs))
        # lexsort: last key is primary
        order = np.lexsort((-id_num, -created, -scores))[:k]
        return [QueryHit(recs[i], float(scores[i])) for i in order]

    def recent(self, n: int) -> list[MemoryRecord]:
        if n < 1:
            raise ValueError("n must be >= 1")
        with self._lock:
            recs = list(self._records.values())
        recs.sort(key=lambda r: (r.created_at, int(r.id) if r.id.isdigit() else 0), reverse=True)
        return recs[:n]

    def tagged(self, tag: str, n: int | None = None) -> list[MemoryRecord]:
        """Newest-first records carrying ``tag``."""
        with self._lock:
            recs = [r for r in self._records.values() if tag in r.tags]
        recs.sort(key=lambda r: (r.created_at, int(r.id) if r.id.isdigit() else 0), reverse=True)
        return recs if n is None else recs[:n]

    def delete(self, ids: Iterable[str]) -> int:
        with self._lock:
            targets = list(dict.fromkeys(i for i in ids if i in self._records))
            if not targets:
                return 0
            self._append({"op": "del", "id": rid} for rid in targets)
            for rid in targets:
                self._remove(rid)
            if len(self._row_ids) > 256 and len(self._records) * 2 < len(self._row_ids):
                self._compact_rows()
            return len(targets)

    def count(self) -> int:
        with self._lock:
            return len(self._records)

    def all_records(self) -> list[MemoryRecord]:
        """Live records in insertion order."""
        with self._lock:
            return [self._records[rid] for rid in self._row_ids if rid in self._records]

    def snapshot_and_compact(self) -> int:
        """Rewrite the log to hold only live records; returns their count.

        If the highest id ever issued is no longer live, its tombstone is
        kept so ids are never reused after reload.
        """
        with self._lock:
            live = self.all_records()
            if self.path is None:
                self._compact_rows()
                return len(live)
            lines = [self._put_line(r) for r in live]
            top = format_id(self._last_id)
            if self._last_id and top not in self._records:
                lines.append({"op": "del", "id": top})
            tmp = self.path.with_suffix(self.path.suffix + ".tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                for line in lines:
                    fh.write(json.dumps(line, ensure_ascii=False, separators=(",", ":")) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            if self._fh is not None:
                self._fh.close()
            os.replace(tmp, self.path)
            self._fh = open(self.path, "a", encoding="utf-8")
            self._compact_rows()
            return len(live)
