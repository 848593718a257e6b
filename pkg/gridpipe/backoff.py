"""Exponential backoff used for reconnects, pipe retries and service restarts."""
from __future__ import annotations

import random
from dataclasses import dataclass, field


@dataclass
class Backoff:
    """Stateful delay sequence: initial, initial*multiplier, ... capped at maximum.

    With ``jitter`` at 0 (the default) the sequence is non-decreasing, which the
    forwarder and supervisor rely on.
    """

    initial: float = 1.0
    maximum: float = 60.0
    multiplier: float = 2.0
    jitter: float = 0.0
    _current: float | None = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        if self.initial < 0 or self.maximum < 0:
            raise ValueError("backoff delays must be non-negative")
        if self.initial == 0 and self.maximum > 0:
            raise ValueError("backoff initial delay must be positive")
        if self.initial > self.maximum:
            raise ValueError("backoff initial delay exceeds maximum")
        if self.multiplier < 1.0:
            raise ValueError("backoff multiplier must be >= 1")

    def reset(self) -> None:
        self._current = None

    @property
    def at_cap(self) -> bool:
        """True once the last delay handed out was the maximum."""
        return self._current is not None and self._current >= self.maximum

    def next_delay(self) -> float:
        if self._current is None:
            self._current = self.initial
        else:
            self._current = min(self.maximum, self._current * self.multiplier)
        delay = self._current
        if self.jitter:
            offset = delay * self.jitter
            delay = min(self.maximum, max(0.0, delay + random.uniform(-offset, offset)))
        return delay
