"""Counter-based random streams addressed by (seed, sweep, stage, phase).

Every sampler stage draws all of its randomness for one sweep from a single
Philox stream, as arrays laid out in site order. A site's draws depend only on
its address, never on how sites are split among workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STAGES = {
    "abundance": 1,
    "gamma": 2,
    "depth": 3,
    "label": 4,
    "anomaly": 5,
    "aux-depth": 6,
    "aux-label": 7,
    "aux-abundance": 8,
    "aux-gamma": 9,
    "simulate": 10,
    "init": 11,
}


@dataclass(frozen=True)
class RngAddress:
    seed: int
    sweep: int
    stage: str
    phase: int = 0

    def key(self) -> list[int]:
        return [int(self.seed), int(self.sweep), STAGES[self.stage], int(self.phase)]

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(self.key())))


def stream(seed: int, sweep: int, stage: str, phase: int = 0) -> np.random.Generator:
    return RngAddress(seed, sweep, stage, phase).generator()
