"""Anisotropic Gabor noise synthesis.

A noise field is the sparse convolution of uniformly scattered impulses
with one shared Gabor kernel: the product of a circular Gaussian envelope
and an oriented cosine harmonic. Kernel coordinates are normalized by the
support size K, so a frequency of lambda_freq produces lambda_freq bands
across one kernel width regardless of K. Contributions are truncated
outside the (2K+1) x (2K+1) square support centered on each impulse.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateField, ZeroPoints
from .rng import SplitMix64


@dataclass(frozen=True)
class GaborKernelParams:
    """Parameters of a single Gabor kernel.

    kappa_mag scales the whole kernel, sigma is the Gaussian width,
    lambda_freq and omega are the harmonic's frequency and orientation.
    omega is stored reduced to [0, pi); the kernel is pi-periodic in
    omega because the cosine is even.
    """

    kappa_mag: float
    sigma: float
    lambda_freq: float
    omega: float

    def __post_init__(self):
        if not (self.kappa_mag > 0 and math.isfinite(self.kappa_mag)):
            raise ValueError("kappa_mag must be positive and finite")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError("sigma must be positive and finite")
        if not (self.lambda_freq >= 0 and math.isfinite(self.lambda_freq)):
            raise ValueError("lambda_freq must be nonnegative and finite")
        if not math.isfinite(self.omega):
            raise ValueError("omega must be finite")
        object.__setattr__(
            self, "omega", self.omega - math.floor(self.omega / math.pi) * math.pi
        )


@dataclass(frozen=True)
class AnisotropicNoiseParams:
    """Shared kernel parameters for a whole noise field plus seed.

    kernel_size is the support radius K in pixels; kernel coordinates are
    divided by K before evaluation (see eval_gabor_kernel callers).
    """

    sigma: float
    omega: float
    lambda_freq: float
    kernel_size: int = 23
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma", "omega", "lambda_freq"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.lambda_freq < 0:
            raise ValueError("lambda_freq must be nonnegative")
        if self.kernel_size < 1:
            raise ValueError("kernel_size must be >= 1")

    def kernel(self) -> GaborKernelParams:
        """Kernel with unit magnitude and coordinates normalized by K.

        Dividing sigma and lambda_freq by K is identical to evaluating the
        unscaled kernel at (x / K, y / K).
        """
        k = float(self.kernel_size)
        return GaborKernelParams(
            kappa_mag=1.0,
            sigma=self.sigma / k,
            lambda_freq=self.lambda_freq / k,
            omega=self.omega,
        )


@dataclass(frozen=True)
class PointLattice:
    """Scattered impulse positions and weights.

    Points live in image coordinates extended by the kernel support:
    x in [-K, width + K), y in [-K, height + K).
    """

    points: np.ndarray  # (n, 2) float64, columns (x, y)
    weights: np.ndarray  # (n,) float64
    width: int
    height: int
    kernel_size: int

    def __post_init__(self):
        if self.points.shape != (len(self.weights), 2):
            raise ValueError("points and weights lengths differ")
        k = self.kernel_size
        x, y = self.points[:, 0], self.points[:, 1]
        if len(x) and not (
            (x >= -k).all()
            and (x < self.width + k).all()
            and (y >= -k).all()
            and (y < self.height + k).all()
        ):
            raise ValueError("points fall outside the padded image bounds")


@dataclass
class NoiseField:
    """A real-valued 2-D field, pre- or post-normalization."""

    values: np.ndarray  # (height, width) float64
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("field values must be 2-D")
        if not np.isfinite(self.values).all():
            raise ValueError("field values must be finite")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def eval_gabor_kernel(p: GaborKernelParams, x, y):
    """Evaluate kappa * exp(-pi sigma^2 (x^2 + y^2)) * cos(2 pi lambda (x cos w + y sin w)).

    Accepts scalars or broadcastable arrays; total on finite inputs.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    envelope = np.exp(-math.pi * p.sigma**2 * (x * x + y * y))
    phase = 2.0 * math.pi * p.lambda_freq * (
        x * math.cos(p.omega) + y * math.sin(p.omega)
    )
    out = p.kappa_mag * envelope * np.cos(phase)
    return float(out) if out.ndim == 0 else out


def kernel_patch(p: GaborKernelParams, kernel_size: int) -> np.ndarray:
    """Dense (2K+1) x (2K+1) kernel sampled at integer offsets / K.

    Row index is the y offset, column index the x offset, both in
    [-K, K]; entry [K, K] is the kernel origin.
    """
    k = kernel_size
    offs = np.arange(-k, k + 1, dtype=np.float64) / float(k)
    return eval_gabor_kernel(p, offs[None, :], offs[:, None])


def scatter_points(
    width: int,
    height: int,
    kernel_size: int,
    density: float,
    rng_seed: int,
) -> PointLattice:
    """Scatter impulses uniformly over the K-padded image rectangle.

    The count is round(density * (width + 2K)(height + 2K) / K^2), so the
    expected number of impulses covering any pixel is independent of the
    image size. All weights are 1 (every impulse shares one kernel).
    """
    if width < 1 or height < 1:
        raise ValueError("width and height must be >= 1")
    if density <= 0:
        raise ValueError("density must be positive")
    k = kernel_size
    area = (width + 2 * k) * (height + 2 * k)
    count = int(round(density * area / (k * k)))
    if count == 0:
        raise ZeroPoints(
            f"point count formula yields 0 for {width}x{height}, K={k}, density={density}"
        )
    rng = SplitMix64(rng_seed)
    # Draw order: x then y for each point, in point order.
    coords = rng.next_f64_block(2 * count).reshape(count, 2)
    points = np.empty((count, 2), dtype=np.float64)
    points[:, 0] = -k + coords[:, 0] * (width + 2 * k)
    points[:, 1] = -k + coords[:, 1] * (height + 2 * k)
    return PointLattice(
        points=points,
        weights=np.ones(count, dtype=np.float64),
        width=width,
        height=height,
        kernel_size=k,
    )


def synth_gabor_noise(
    theta: AnisotropicNoiseParams,
    lattice: PointLattice,
    width: int,
    height: int,
) -> NoiseField:
    """Accumulate the shared kernel around every impulse.

    values[y][x] = sum_i w_i * g(x - x_i, y - y_i) with contributions cut
    beyond the K-radius square support. Pixel centers sit at integer
    coordinates.
    """
    if lattice.width != width or lattice.height != height:
        raise ValueError("lattice was scattered for a different field size")
    if lattice.kernel_size != theta.kernel_size:
        raise ValueError("lattice kernel_size differs from theta.kernel_size")
    k = theta.kernel_size
    p = theta.kernel()

    out = np.zeros((height, width), dtype=np.float64)
    for (px, py), w in zip(lattice.points, lattice.weights):
        x0 = max(0, math.ceil(px - k))
        x1 = min(width - 1, math.floor(px + k))
        y0 = max(0, math.ceil(py - k))
        y1 = min(height - 1, math.floor(py + k))
        if x0 > x1 or y0 > y1:
            continue
        dx = np.arange(x0, x1 + 1, dtype=np.float64) - px
        dy = np.arange(y0, y1 + 1, dtype=np.float64) - py
        out[y0 : y1 + 1, x0 : x1 + 1] += w * eval_gabor_kernel(
            p, dx[None, :], dy[:, None]
        )
    return NoiseField(values=out, normalized=False)


def normalize_field(f: NoiseField) -> NoiseField:
    """Center the field on zero and scale the extreme value to magnitude 1."""
    if f.normalized:
        raise ValueError("field is already normalized")
    centered = f.values - f.values.mean()
    peak = np.abs(centered).max()
    if peak < 1e-12:
        raise DegenerateField("field is constant within 1e-12")
    return NoiseField(values=centered / peak, normalized=True)


def gabor_noise(
    theta: AnisotropicNoiseParams,
    width: int,
    height: int,
    density: float = 1.0,
) -> NoiseField:
    """Scatter, synthesize, and normalize in one step, seeded by theta.seed."""
    lattice = scatter_points(width, height, theta.kernel_size, density, theta.seed)
    return normalize_field(synth_gabor_noise(theta, lattice, width, height))
