"""Seed derivation and named random number streams."""

import hashlib
import struct
from typing import Dict, Tuple

import numpy as np

STREAMS = (
    "placement",
    "mobility",
    "shadowing",
    "activation",
    "arrivals",
    "fading",
    "noise",
    "init",
    "exploration",
    "replay",
)


def _digest_u64(payload: bytes) -> int:
    digest = hashlib.sha256(payload).digest()
    return struct.unpack("<Q", digest[:8])[0]


def stream_key(name: str) -> int:
    """Stable 32 bit key of a stream name (independent of PYTHONHASHSEED)."""
    return _digest_u64(name.encode("utf8")) & 0xFFFFFFFF


def rng_stream(seed: int, name: str) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, {seed=}")
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(stream_key(name),))
    return np.random.default_rng(seq)


def derive_seed(base_seed: int, *parts) -> int:
    """
    Mix a base seed with a fixed hash of ``parts``.

    Used for sweep points: every (replication, value, policy) gets its own
    reproducible seed.
    """
    payload = "|".join(str(p) for p in parts).encode("utf8")
    return (base_seed ^ _digest_u64(payload)) & 0x7FFFFFFFFFFFFFFF


class RngStreams:
    """
    One independent generator per stream name, all derived from a seed.

    A generator is created the first time its stream is used.
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, {seed=}")
        self.seed = seed
        self._streams: Dict[str, np.random.Generator] = {}

    @property
    def created(self) -> Tuple[str, ...]:
        return tuple(self._streams)

    def __getattr__(self, name):
        if name not in STREAMS:
            msg = f"Stream {name} not found. List of available {STREAMS=}"
            raise AttributeError(msg)
        streams = self.__dict__["_streams"]
        if name not in streams:
            streams[name] = rng_stream(self.__dict__["seed"], name)
        return streams[name]
