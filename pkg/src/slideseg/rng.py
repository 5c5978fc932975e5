"""Deterministic random stream derivation.

Every stochastic operation in the pipeline takes an explicit stream derived
from a 64-bit seed plus context tokens (slide id, grid coordinates, epoch,
stage name). Derivation hashes the tokens, so the stream for one patch is
independent of scheduling order and worker count.
"""

import hashlib

import numpy as np


def derive_seed_sequence(seed: int, *tokens) -> np.random.SeedSequence:
    """Build a SeedSequence from a base seed and context tokens.

    Tokens may be ints or strings; they are hashed with a length-prefixed
    canonical encoding so ("ab", "c") and ("a", "bc") derive distinct streams.
    """
    h = hashlib.sha256()
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for tok in tokens:
        if isinstance(tok, (int, np.integer)):
            enc = b"i" + int(tok).to_bytes(8, "little", signed=True)
        elif isinstance(tok, str):
            raw = tok.encode("utf-8")
            enc = b"s" + len(raw).to_bytes(4, "little") + raw
        else:
            raise TypeError(f"unsupported token type: {type(tok)!r}")
        h.update(len(enc).to_bytes(4, "little"))
        h.update(enc)
    words = np.frombuffer(h.digest(), dtype=np.uint32)
    return np.random.SeedSequence(words.tolist())


def derive_rng(seed: int, *tokens) -> np.random.Generator:
    """PCG64 generator fully determined by (seed, tokens)."""
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(seed, *tokens)))
