"""Deterministic RNG stream derivation and state persistence.

Every stochastic component owns an independent PCG64 stream derived from a
single integer seed. Data generation and training live in disjoint spawn-key
domains so the same seed never yields correlated streams across the two.
"""
from __future__ import annotations

import numpy as np

DATA_DOMAIN = 0
TRAIN_DOMAIN = 1


def data_streams(seed: int, n_clients: int) -> list[np.random.Generator]:
    """One independent generation stream per client."""
    root = np.random.SeedSequence(seed, spawn_key=(DATA_DOMAIN,))
    return [np.random.Generator(np.random.PCG64(s)) for s in root.spawn(n_clients)]


def training_streams(seed: int, n_clients: int):
    """Returns (init_rng, server_rng, client_rngs) for one training run.

    init_rng seeds model initialization, server_rng drives per-round queue
    draws, and each client owns its own stream so client updates are
    order-independent within a round.
    """
    root = np.random.SeedSequence(seed, spawn_key=(TRAIN_DOMAIN,))
    children = root.spawn(n_clients + 2)
    init_rng = np.random.Generator(np.random.PCG64(children[0]))
    server_rng = np.random.Generator(np.random.PCG64(children[1]))
    client_rngs = [np.random.Generator(np.random.PCG64(c)) for c in children[2:]]
    return init_rng, server_rng, client_rngs


def rng_state(rng: np.random.Generator) -> dict:
    """Serializable snapshot of a generator's position in its stream."""
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    """Rebuild a generator at an exact stream position saved by rng_state."""
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
