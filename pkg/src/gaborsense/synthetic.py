"""Seeded synthetic images for self-contained experiments.

Each image is a single oriented sinusoidal grating over a mid-gray base,
with a small per-channel tint. Orientation, wavelength, phase, amplitude,
and base level are drawn per image from a seeded stream, so the stack is
deterministic per (seed, index). Amplitude and base ranges are chosen so
no pixel clips; wavelengths sit at the edge of a Gabor filter bank's
passband, which makes a filter-bank model spread its predictions across
classes while leaving them movable by small structured perturbations.
"""

import math

import numpy as np

from .rng import SplitMix64, derive_seed

BASE_RANGE = (95.0, 160.0)
WAVELENGTH_RANGE = (5.0, 7.5)
AMPLITUDE_RANGE = (25.0, 55.0)
TINT_RANGE = (-12.0, 12.0)


def make_synthetic_images(
    count: int, width: int, height: int, seed: int
) -> np.ndarray:
    """Deterministic (count, height, width, 3) image stack in [0, 255].

    Per image, draw order from SplitMix64(derive_seed(seed, index)):
    base level, orientation, wavelength, phase, amplitude, then one tint
    per channel.
    """
    images = np.empty((count, height, width, 3), dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    for i in range(count):
        rng = SplitMix64(derive_seed(seed, i))
        base = rng.uniform(*BASE_RANGE)
        angle = rng.uniform(0.0, math.pi)
        wavelength = rng.uniform(*WAVELENGTH_RANGE)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        amplitude = rng.uniform(*AMPLITUDE_RANGE)
        arg = 2.0 * math.pi * (xs * math.cos(angle) + ys * math.sin(angle))
        plane = base + amplitude * np.cos(arg / wavelength + phase)
        for c in range(3):
            tint = rng.uniform(*TINT_RANGE)
            images[i, :, :, c] = plane + tint
    return np.clip(images, 0.0, 255.0)
