"""Reference computations written independently of the package internals."""

from __future__ import annotations

import hashlib
import math
import re


def ref_tokens(text: str) -> list[str]:
    # lowercase, split on runs of anything that is not a letter or digit
    return [t for t in re.split(r"[\W_]+", text.lower()) if t]


def ref_embed(text: str, dim: int = 256) -> list[float]:
    vec = [0.0] * dim
    for tok in ref_tokens(text):
        h = int.from_bytes(hashlib.blake2b(tok.encode(), digest_size=8).digest(), "little")
        vec[h % dim] += -1.0 if h >= 2**63 else 1.0
    norm = math.sqrt(sum(v * v for v in vec))
    return [v / norm for v in vec] if norm else vec


def cosine(a: list[float], b: list[float]) -> float:
    return sum(x * y for x, y in zip(a, b))


def brute_force_topk(records: list[tuple[str, str, int]], query: str, k: int) -> list[str]:
    """records: (id, text, created_at). Full scan; ties by newer created_at then larger id."""
    q = ref_embed(query)
    if not any(q):
        return []
    scored = []
    for rid, text, created in records:
        e = ref_embed(text)
        if not any(e):
            continue
        scored.append((round(cosine(q, e), 9), created, int(rid), rid))
    scored.sort(key=lambda t: (-t[0], -t[1], -t[2]))
    return [t[3] for t in scored[:k]]


def backoff_schedule(n: int, base: float = 0.25, factor: float = 2.0, cap: float = 10.0) -> list[float]:
    """Delay before restart i (1-based) for i = 1..n."""
    return [min(cap, base * factor ** (i - 1)) for i in range(1, n + 1)]


def replay(ops: list[tuple]) -> dict[str, str]:
    """In-memory replay of ('put', id, text) / ('del', id) operations."""
    live: dict[str, str] = {}
    for op in ops:
        if op[0] == "put":
            live[op[1]] = op[2]
        else:
            live.pop(op[1], None)
    return live


ACTIVATION_TABLE = [
    ("activate", "activate"),
    ("ACTIVATE ", "activate"),
    (" deactivate", "deactivate"),
    ("None", "none"),
    ("garbage", "none"),
    ("", "none"),
]
