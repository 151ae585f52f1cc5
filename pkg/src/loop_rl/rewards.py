"""Prompt-conditioned scalar rewards on 2-D samples.

Two families: a hard binary check that the sample landed in the prompted
quadrant, and a smooth score that decays with distance from the prompted
mode center. Both are bounded in [0, 1]. A small registry resolves them
by name for configs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, RewardLookupError

Array = np.ndarray

# Mode k sits in quadrant k: 0 (+,+), 1 (-,+), 2 (-,-), 3 (+,-).
DEFAULT_CENTERS = (
    (1.5, 1.5),
    (-1.5, 1.5),
    (-1.5, -1.5),
    (1.5, -1.5),
)
DEFAULT_BANDWIDTH = 1.0
_QUADRANT_SIGNS = ((1, 1), (-1, 1), (-1, -1), (1, -1))


@dataclass(frozen=True)
class RewardSpec:
    kind: str  # one of {"quadrant_binding", "mode_distance", "composite"}
    mode_centers: tuple[tuple[float, ...], ...] = DEFAULT_CENTERS
    bandwidth: float = DEFAULT_BANDWIDTH

    def __post_init__(self):
        if self.kind not in REGISTRY:
            raise RewardLookupError(
                f"unknown reward kind {self.kind!r}; valid: {sorted(REGISTRY)}"
            )
        if len(self.mode_centers) < 2:
            raise ConfigError("need at least 2 mode centers")
        if len(set(self.mode_centers)) != len(self.mode_centers):
            raise ConfigError("mode centers must be distinct")
        if self.bandwidth <= 0:
            raise ConfigError("bandwidth must be positive")


def quadrant_reward(x0: Array, context) -> float:
    """1.0 if x0 lies strictly inside the prompted quadrant, else 0.0.

    Boundary points (a zero coordinate) score 0: the check is strict.
    """
    sx, sy = _QUADRANT_SIGNS[context.id % 4]
    return 1.0 if (sx * x0[0] > 0.0 and sy * x0[1] > 0.0) else 0.0


def mode_distance_reward(x0: Array, context, spec: RewardSpec | None = None) -> float:
    """exp(-||x0 - center||^2 / bandwidth^2) for the prompted center."""
    spec = spec or RewardSpec("mode_distance")
    center = np.asarray(spec.mode_centers[context.id % len(spec.mode_centers)])
    d2 = float(np.sum((np.asarray(x0) - center) ** 2))
    return float(np.exp(-d2 / spec.bandwidth**2))


def composite_reward(x0: Array, context, spec: RewardSpec | None = None) -> float:
    """Even blend of the quadrant check and the mode-distance score."""
    return 0.5 * quadrant_reward(x0, context) + 0.5 * mode_distance_reward(
        x0, context, spec
    )


REGISTRY = {
    "quadrant_binding": quadrant_reward,
    "mode_distance": mode_distance_reward,
    "composite": composite_reward,
}


def reward_registry(name: str):
    """Resolve a reward callable by name; unknown names list the valid ones."""
    try:
        return REGISTRY[name]
    except KeyError:
        raise RewardLookupError(
            f"unknown reward {name!r}; valid names: {sorted(REGISTRY)}"
        ) from None
