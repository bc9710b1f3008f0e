"""Deterministic seed derivation.

All randomness in a run flows from one top-level seed; independent
streams (per epoch, per grid cell, per stratum) get their own seeds by
hashing the top seed together with a textual path. SHA-256 keeps the
scheme stable across platforms and Python processes, unlike ``hash()``.
"""

from __future__ import annotations

import hashlib


def derive_seed(*parts: object) -> int:
    """A 64-bit seed from the colon-joined string forms of ``parts``."""
    text = ":".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
