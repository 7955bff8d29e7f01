"""Counter-based seed derivation.

Every random stream is ``SeedSequence(master_seed, spawn_key=(stream_id, index))``
so any single trajectory, bootstrap resample or rollout batch can be
regenerated without replaying the others.
"""
import numpy as np

STREAMS = {
    "lhs": 0,
    "trajectory": 1,
    "drug": 2,
    "bootstrap": 3,
    "rollout": 4,
    "holdout": 5,
    "quantize": 6,
    "synthetic": 7,
    "starts": 8,
}


def stream(master_seed: int, name: str, index: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master_seed), spawn_key=(STREAMS[name], int(index)))


def generator(master_seed: int, name: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(stream(master_seed, name, index))
