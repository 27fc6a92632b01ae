from __future__ import annotations

import contextlib

import numpy as np
import torch


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 32-bit seed for a (seed, key...) stream, e.g. per fold or per subject."""
    return int(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]).generate_state(1)[0])


@contextlib.contextmanager
def seeded(seed: int):
    """Seed torch's global RNG for module initialisation without leaking state to the caller."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield
