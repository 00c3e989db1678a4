"""Spoofing: add a scaled extracted signal to an attack model's logits while it generates.

The attack model never sees the victim's secret; everything it knows about
the watermark is in the ``EwsTable``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidLogits
from .extract import EwsTable
from .textmodel import NGramModel, generate

DEFAULT_ALPHA = 4.5
ALPHA_GRID = (2.5, 3.0, 3.5, 4.0, 4.5, 5.0)


@dataclass(frozen=True)
class SpoofConfig:
    alpha: float
    ews: EwsTable
    attack_model: NGramModel
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")


def spoof_transform(logits: np.ndarray, ews: EwsTable, context: Sequence[int], alpha: float) -> np.ndarray:
    out = np.asarray(logits, dtype=np.float64) + alpha * ews.lookup(context)
    if not np.all(np.isfinite(out)):
        raise InvalidLogits("spoofed logits are not finite")
    return out


def spoof_generate(
    config: SpoofConfig,
    prompt: Sequence[int],
    length: int,
    rng: Optional[np.random.Generator] = None,
) -> list[int]:
    """Continuation of ``prompt`` from the attack model with the signal injected."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if config.alpha == 0:
        transform = None
    else:
        def transform(ctx, logits):
            return spoof_transform(logits, config.ews, ctx, config.alpha)
    return generate(config.attack_model, prompt, length, transform=transform, rng=rng,
                    temperature=config.temperature)
