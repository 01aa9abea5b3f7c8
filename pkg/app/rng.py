import numpy as np

# purpose tags keep the streams of different consumers independent
PURPOSES = {
    "negatives": 1,
    "split": 2,
    "graph": 3,
    "pairs": 4,
    "shuffle": 5,
    "init": 6,
}


def make_rng(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """PCG64 generator keyed on (seed, purpose, *keys); keys must be non-negative ints"""
    entropy = [int(seed), PURPOSES[purpose], *(int(k) for k in keys)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, purpose: str, *keys: int) -> int:
    """Integer seed for libraries that take a plain int (torch)"""
    return int(make_rng(seed, purpose, *keys).integers(0, 2**63 - 1))
