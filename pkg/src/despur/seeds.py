"""Named sub-seed derivation.

All randomness in a run flows from one root seed. Components never share a
numpy Generator; each draws its own seed by name so that adding or removing
one consumer cannot shift another's stream.

Derivation: the root seed and the name parts are joined with "/" and the
first 8 bytes of the SHA-256 digest of that string, read little-endian,
become the sub-seed. Example:

    derive_seed(7, "gen", 3, "rocky outcrop")
      == LE64(sha256(b"7/gen/3/rocky outcrop")[:8])
"""

from __future__ import annotations

import hashlib


def derive_seed(root_seed: int, *parts: int | str) -> int:
    """Deterministic uint64 sub-seed for the named component."""
    text = "/".join(str(p) for p in (root_seed, *parts))
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
