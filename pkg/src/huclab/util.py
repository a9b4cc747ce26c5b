"""Small shared helpers: seed derivation, canonical JSON, worker count."""

from __future__ import annotations

import hashlib
import json
import os


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of ints/strings (sha256-based)."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)


def worker_count() -> int:
    """Worker cap from HUC_LAB_THREADS; defaults to 1 (sequential)."""
    raw = os.environ.get("HUC_LAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)
