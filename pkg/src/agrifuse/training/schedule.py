"""Linear warmup followed by cosine decay."""

from __future__ import annotations

import math
from dataclasses import dataclass

from agrifuse.errors import ConfigError, ContractError


@dataclass(frozen=True)
class Schedule:
    warmup_epochs: int = 100
    total_epochs: int = 600
    peak_lr: float = 1e-6

    def __post_init__(self):
        if not 0 < self.warmup_epochs < self.total_epochs:
            raise ConfigError(
                f"need 0 < warmup < total, got warmup={self.warmup_epochs}, total={self.total_epochs}"
            )
        if self.peak_lr <= 0:
            raise ConfigError(f"peak learning rate must be positive, got {self.peak_lr}")


def cosine_warmup_lr(epoch: float, s: Schedule) -> float:
    """0 -> peak linearly over the warmup, then half a cosine down to 0 at ``total``.

    Fractional epochs are allowed so the rate can be stepped per batch.
    """
    if epoch < 0:
        raise ContractError(f"epoch must be non-negative, got {epoch}")
    if epoch > s.total_epochs:
        return 0.0
    if epoch <= s.warmup_epochs:
        return s.peak_lr * epoch / s.warmup_epochs
    progress = (epoch - s.warmup_epochs) / (s.total_epochs - s.warmup_epochs)
    return s.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
