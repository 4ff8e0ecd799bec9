"""Deterministic seed fan-out.

A single top-level seed must reproduce every random choice in a run:
partition shuffles, placement variants, and per-measurement noise. Each
consumer derives its own stream with a stable label path instead of
sharing one RNG, so adding a consumer never perturbs the others.
"""

from __future__ import annotations

import hashlib


def derive_seed(root: int, *labels: object) -> int:
    """Map (root seed, label path) to a 63-bit seed, stably across runs."""
    text = repr(int(root)) + "".join("/" + repr(l) for l in labels)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1
