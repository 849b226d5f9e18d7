import zlib

import numpy as np

STREAMS = ("vehicle", "sensor", "planning_sensor", "filter", "mppi", "calibration")


def stream_seed(master: int, name: str) -> np.random.SeedSequence:
    """Child seed for a named stream; keyed by name so streams never shift each other."""
    return np.random.SeedSequence(entropy=master, spawn_key=(zlib.crc32(name.encode("utf-8")),))


def module_rng(master: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(master, name))


def derive_seed(master: int, *path: int) -> int:
    """u64 seed for a sweep replicate, e.g. ``derive_seed(master, cell, replicate)``."""
    sequence = np.random.SeedSequence(entropy=master, spawn_key=(zlib.crc32(b"sweep"), *path))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])
