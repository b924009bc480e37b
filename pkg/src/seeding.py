import hashlib

import numpy as np

# Streams used by the pipeline; any name is accepted.
STREAMS = ("split", "mask", "init", "batch")


def stream_key(name):
    """Stable 64-bit integer derived from a stream name."""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng_stream(seed, name):
    """Independent generator for one named stream of a 64-bit run seed."""
    if seed < 0:
        raise ValueError("Seed must be non-negative")
    sequence = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, stream_key(name)])
    return np.random.default_rng(sequence)
