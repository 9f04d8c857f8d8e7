import numpy as np

SeedLike = int | np.random.SeedSequence | np.random.Generator | None


def as_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def stream(root: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``keys`` under ``root``; the same keys always give the same stream."""
    return np.random.default_rng(np.random.SeedSequence(root, spawn_key=tuple(int(k) for k in keys)))
