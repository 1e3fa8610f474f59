"""Epsilon-bounded perturbations: construction, application, and file I/O.

Images are (H, W, C) arrays in raw pixel units [0, 255]. Perturbation
values are stored as float32 so that the GNP1 file round-trip is exact and
metrics recomputed from disk match in-memory results bit for bit.

GNP1 file layout: one UTF-8 JSON header line
{"magic": "GNP1", "width": W, "height": H, "channels": C,
 "epsilon": e, "provenance": {...}, "seed": s}
followed by a newline and W*H*C little-endian float32 values, row-major
with the channel index fastest.
"""

import json
from dataclasses import dataclass
from typing import Any

import numpy as np
from PIL import Image

from .errors import NotNormalized, ShapeMismatch, UnreadableFile
from .noise import NoiseField
from .rng import SplitMix64

GNP_MAGIC = "GNP1"


def f32_within(epsilon: float) -> np.float32:
    """Largest float32 magnitude that does not exceed epsilon.

    Casting an arbitrary float64 epsilon to float32 can round upward and
    break the linf budget by half an ulp; full-magnitude entries use this
    value instead.
    """
    e = np.float32(epsilon)
    if float(e) > epsilon:
        e = np.nextafter(e, np.float32(0.0))
    return e


@dataclass
class PerturbationField:
    """An additive perturbation with provenance metadata.

    values is (height, width, channels) float32 with max |value| <= epsilon
    (up to 1e-6 slack for scaled noise fields).
    """

    values: np.ndarray
    epsilon: float
    provenance: dict[str, Any]
    seed: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError("perturbation values must be (H, W, C)")
        if not np.isfinite(self.values).all():
            raise ValueError("perturbation values must be finite")
        if float(np.abs(self.values).max(initial=0.0)) > self.epsilon + 1e-6:
            raise ValueError("perturbation exceeds its epsilon bound")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def to_perturbation(
    f: NoiseField,
    epsilon: float,
    mode: str = "scaled",
    provenance: dict[str, Any] | None = None,
    seed: int = 0,
) -> PerturbationField:
    """Turn a normalized noise field into a 3-channel perturbation.

    scaled mode multiplies the field by epsilon; sign mode takes
    epsilon * sign(field). Either way the same plane is replicated across
    all three channels.
    """
    if not f.normalized:
        raise NotNormalized("noise field must be normalized first")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    peak = f32_within(epsilon)
    if mode == "scaled":
        plane = np.clip((epsilon * f.values).astype(np.float32), -peak, peak)
    elif mode == "sign":
        plane = (peak * np.sign(f.values)).astype(np.float32)
    else:
        raise ValueError(f"unknown mode {mode!r}, expected 'scaled' or 'sign'")
    values = np.repeat(plane[:, :, None], 3, axis=2)
    if provenance is None:
        provenance = {"kind": "noise_field", "mode": mode}
    return PerturbationField(
        values=values, epsilon=float(epsilon), provenance=provenance, seed=seed
    )


def random_uniform_perturbation(
    width: int, height: int, epsilon: float, rng_seed: int
) -> PerturbationField:
    """Baseline noise: every entry independently +epsilon or -epsilon.

    One u64 is drawn per entry in (row, column, channel) order with the
    channel fastest; the top bit picks the sign.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = SplitMix64(rng_seed)
    bits = rng.next_u64_block(height * width * 3) >> np.uint64(63)
    peak = f32_within(epsilon)
    values = np.where(bits == 1, peak, -peak)
    values = values.astype(np.float32).reshape(height, width, 3)
    return PerturbationField(
        values=values,
        epsilon=float(epsilon),
        provenance={"kind": "uniform_random", "seed": rng_seed},
        seed=rng_seed,
    )


def apply(x: np.ndarray, s: PerturbationField) -> np.ndarray:
    """Adversarial image clamp(x + s, 0, 255), elementwise."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != s.values.shape:
        raise ShapeMismatch(f"image shape {x.shape} != perturbation {s.values.shape}")
    return np.clip(x + s.values, 0.0, 255.0)


def apply_batch(images: np.ndarray, s: PerturbationField) -> np.ndarray:
    """clamp(x + s) over a stacked (N, H, W, C) image array."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != s.values.shape:
        raise ShapeMismatch(
            f"batch shape {images.shape} incompatible with perturbation {s.values.shape}"
        )
    return np.clip(images + s.values[None], 0.0, 255.0)


def linf_norm(s: PerturbationField) -> float:
    """Largest absolute entry of the perturbation."""
    return float(np.abs(s.values).max(initial=0.0))


def write_gnp(path, s: PerturbationField) -> None:
    """Serialize a perturbation to the GNP1 format."""
    header = {
        "magic": GNP_MAGIC,
        "width": s.width,
        "height": s.height,
        "channels": s.channels,
        "epsilon": s.epsilon,
        "provenance": s.provenance,
        "seed": s.seed,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(s.values, dtype="<f4").tobytes())


def read_gnp(path) -> PerturbationField:
    """Load a perturbation written by write_gnp; exact float32 round trip."""
    try:
        with open(path, "rb") as fh:
            header_line = fh.readline()
            payload = fh.read()
    except OSError as exc:
        raise UnreadableFile(f"cannot read {path}: {exc}") from exc
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise UnreadableFile(f"{path}: bad GNP1 header: {exc}") from exc
    if header.get("magic") != GNP_MAGIC:
        raise UnreadableFile(f"{path}: not a GNP1 file")
    h, w, c = header["height"], header["width"], header["channels"]
    expected = h * w * c * 4
    if len(payload) != expected:
        raise UnreadableFile(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    return PerturbationField(
        values=values.copy(),
        epsilon=float(header["epsilon"]),
        provenance=header.get("provenance", {}),
        seed=int(header.get("seed", 0)),
    )


def perturbation_to_png_array(s: PerturbationField) -> np.ndarray:
    """Visualization mapping v -> round(255 (v + eps) / (2 eps)) as uint8."""
    eps = s.epsilon
    mapped = np.rint(255.0 * (s.values.astype(np.float64) + eps) / (2.0 * eps))
    return np.clip(mapped, 0, 255).astype(np.uint8)


def png_array_to_values(arr: np.ndarray, epsilon: float) -> np.ndarray:
    """Inverse of the PNG mapping, up to the uint8 quantization step."""
    return (arr.astype(np.float64) / 255.0) * 2.0 * epsilon - epsilon


def write_png(path, s: PerturbationField) -> None:
    arr = perturbation_to_png_array(s)
    if arr.shape[2] != 3:
        raise ShapeMismatch("PNG export expects a 3-channel perturbation")
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")
