# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

"""Every random draw descends from one 64-bit seed through named, independent sub-streams."""

import zlib

import numpy as np

SEED_MODULUS = 2**64


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for the sub-stream ``name``; stable across runs, platforms and Python hash seeds."""

    entropy = [seed % SEED_MODULUS, zlib.crc32(name.encode())]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def episode_seeds(base_seed: int, count: int) -> list[int]:
    return [(base_seed + offset) % SEED_MODULUS for offset in range(count)]
