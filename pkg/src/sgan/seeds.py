"""Per-role seed derivation from a single master seed."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

# Stable role codes; never renumber, checkpoints and seed logs depend on them.
ROLES = {
    "g_init": 1,
    "d_init": 2,
    "data": 3,
    "noise": 4,
    "aux": 5,
    "msg_data": 6,
    "msg_noise": 7,
    "msg_aux": 8,
    "baseline_data": 9,
    "baseline_noise": 10,
    "baseline_aux": 11,
    "eval_noise": 12,
    "eval_data": 13,
    "stub": 14,
}


def derive_seed(master_seed: int, role: str, index: int) -> int:
    """64-bit seed for ``(role, index)``.

    The master seed is the SeedSequence entropy and ``(role_code, index)`` its
    spawn key, so the mapping is the SeedSequence hash of that triple.
    """
    if role not in ROLES:
        raise ConfigError(f"unknown seed role {role!r}")
    if index < 0:
        raise ConfigError(f"seed index must be non-negative, got {index}")
    ss = np.random.SeedSequence(entropy=int(master_seed) & (2**128 - 1), spawn_key=(ROLES[role], int(index)))
    lo, hi = ss.generate_state(2, np.uint32)
    return (int(hi) << 32) | int(lo)


def seed_table(master_seed: int, roles_and_indices) -> dict[str, int]:
    """Seeds for every ``(role, index)``; raises if two entries collide."""
    table = {}
    seen = {}
    for role, index in roles_and_indices:
        seed = derive_seed(master_seed, role, index)
        key = f"{role}[{index}]"
        if seed in seen:
            raise ConfigError(f"derived seed collision between {seen[seed]} and {key}")
        seen[seed] = key
        table[key] = seed
    return table
