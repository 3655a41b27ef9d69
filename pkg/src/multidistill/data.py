"""Procedural images with a dominant-quadrant label rule.

Each quadrant of an image is filled with one of K textures at a random
amplitude and colour. The label is the texture id of the quadrant with the
largest amplitude. Every image is a pure function of (seed, split, index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_PATTERNS = 6
_TRAIN, _EVAL = 0, 1


def _pattern(pid: int, size: int, phase: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if pid == 0:
        p = ((yy + phase) // 2) % 2
    elif pid == 1:
        p = ((xx + phase) // 2) % 2
    elif pid == 2:
        p = ((yy // 2) + (xx // 2) + phase) % 2
    elif pid == 3:
        p = ((xx + yy + phase) // 2) % 2
    elif pid == 4:
        p = ((xx - yy + phase) // 2) % 2
    else:
        p = ((yy % 4 < 2) & (xx % 4 < 2)).astype(int)
    return p.astype(np.float64) * 2.0 - 1.0


@dataclass(frozen=True)
class SyntheticDataset:
    seed: int = 0
    image_size: int = 32
    num_classes: int = 4
    channels: int = 3
    noise: float = 0.1

    def __post_init__(self):
        if not 2 <= self.num_classes <= MAX_PATTERNS:
            raise ValueError(f"num_classes must be in [2, {MAX_PATTERNS}], got {self.num_classes}")
        if self.image_size % 2:
            raise ValueError("image_size must be even")

    def _sample(self, split: int, index: int) -> tuple[np.ndarray, int]:
        rng = np.random.default_rng([self.seed, split, index])
        half = self.image_size // 2
        pids = rng.integers(0, self.num_classes, size=4)
        amps = rng.uniform(0.2, 0.7, size=4)
        dominant = int(rng.integers(0, 4))
        amps[dominant] = 1.0
        colours = rng.standard_normal((4, self.channels))
        colours /= np.linalg.norm(colours, axis=1, keepdims=True)
        img = np.zeros((self.image_size, self.image_size, self.channels))
        for q in range(4):
            r, c = divmod(q, 2)
            tex = _pattern(int(pids[q]), half, int(rng.integers(0, 4)))
            img[r * half : (r + 1) * half, c * half : (c + 1) * half] = amps[q] * tex[..., None] * colours[q]
        img += self.noise * rng.standard_normal(img.shape)
        return img.astype(np.float32), int(pids[dominant])

    def sample(self, index: int) -> tuple[np.ndarray, int]:
        return self._sample(_TRAIN, index)

    def batch(self, step: int, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        """Training batch for a global step; consecutive steps never overlap."""
        items = [self._sample(_TRAIN, step * batch_size + k) for k in range(batch_size)]
        return np.stack([x for x, _ in items]), np.array([y for _, y in items])

    def eval_set(self, size: int) -> tuple[np.ndarray, np.ndarray]:
        items = [self._sample(_EVAL, k) for k in range(size)]
        return np.stack([x for x, _ in items]), np.array([y for _, y in items])
