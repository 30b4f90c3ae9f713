"""Unit-level dropout over the grid's residual mappings.

Instead of zeroing single activations, one Bernoulli draw per residual
unit disables the whole unit for the step: a dropped unit contributes
exactly zero, is never evaluated, and therefore receives no gradient.
Identity wires and resampling units are never dropped, so every stream
keeps a value and the network stays connected. Kept units are not
rescaled by 1/p, and evaluation always keeps every unit.

Masks are drawn from a counter-based generator keyed by the run seed and
counted by the optimizer step, so the mask for any step can be recomputed
without replaying the steps before it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KEY_DROP = 0xD1B54A32D192ED03


@dataclass(frozen=True)
class DropMask:
    """Keep/drop decision per residual unit, keyed by (stream, column)."""

    keep: dict[tuple[int, int], bool]
    p: float
    seed: int
    step: int

    def keeps(self, row: int, col: int) -> bool:
        """Units without an entry (no gate there) are always kept."""
        return self.keep.get((row, col), True)

    @property
    def n_kept(self) -> int:
        return sum(1 for v in self.keep.values() if v)


def sample_drop_mask(model, p: float, seed: int, step: int = 0) -> DropMask:
    """Draw one keep/drop mask for the given optimizer step.

    Each residual unit that would run under the model's connection mask
    is kept with probability ``p``, independently.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"keep probability must lie in [0, 1], got {p}")
    if seed < 0 or step < 0:
        raise ValueError(f"seed and step must be non-negative, got {seed}, {step}")
    gates = model.residual_gate_ids()
    rng = np.random.Generator(np.random.Philox(key=seed ^ KEY_DROP, counter=step))
    u = rng.random(len(gates))
    return DropMask({g: bool(u[k] < p) for k, g in enumerate(gates)}, p, seed, step)
