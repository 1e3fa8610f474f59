"""Classifier oracles: built-in reference model and wire-protocol client.

An oracle maps raw [0, 255] pixel images to probability vectors. The
built-in GaborBankClassifier is a fixed, fully deterministic pipeline
(Gabor filter bank, ReLU, average pool, random projection, softmax) that
needs no trained weights; external models run behind a newline-delimited
JSON protocol over a child process's stdio or a TCP socket.

Wire protocol frames:
  -> {"op": "meta"}
  <- {"op": "meta", "name": .., "width": .., "height": .., "channels": ..,
      "classes": ..}
  -> {"op": "predict", "id": n, "batch": B, "width": W, "height": H,
      "channels": C, "data": "<base64 float32 LE, batch-major,
      channel-fastest, raw [0,255] pixels>"}
  <- {"op": "predict", "id": n, "probs": [[..], ..]}
  <- {"op": "error", "id": n, "message": ".."}
"""

import base64
import json
import math
import queue
import shlex
import socket
import subprocess
import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import (
    DescriptorMismatch,
    HandshakeTimeout,
    OracleFailure,
    ShapeMismatch,
    SpawnFailure,
)
from .noise import GaborKernelParams, kernel_patch
from .rng import SplitMix64


@dataclass(frozen=True)
class ModelDescriptor:
    name: str
    input_width: int
    input_height: int
    input_channels: int
    num_classes: int

    def __post_init__(self):
        if min(self.input_width, self.input_height, self.input_channels) < 1:
            raise ValueError("descriptor dimensions must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.input_height, self.input_width, self.input_channels)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _correlation_spectrum(kernel: np.ndarray, grid_shape: tuple[int, int]) -> np.ndarray:
    """rfft2 spectrum implementing circular (periodic) cross-correlation.

    The kernel (odd side 2K+1, center at index K) is folded onto the
    image-sized grid with modular indexing, so that multiplying an image
    spectrum by this and inverse-transforming yields
    out[y, x] = sum_d kernel[K+dy, K+dx] img[(y+dy) mod H, (x+dx) mod W]
    for any kernel size, matching a nested-loop oracle with wraparound.
    """
    side = kernel.shape[0]
    radius = side // 2
    height, width = grid_shape
    folded = np.zeros(grid_shape, dtype=np.float64)
    offsets = np.arange(side) - radius
    rows = np.mod(-offsets, height)
    cols = np.mod(-offsets, width)
    np.add.at(folded, (rows[:, None], cols[None, :]), kernel)
    return np.fft.rfft2(folded)


class GaborBankClassifier:
    """Deterministic reference classifier built on a Gabor filter bank.

    Pipeline: channel mean, circular (periodic) correlation with 8 fixed
    Gabor filters (orientations k*pi/8, sigma 2, frequency 3, support
    radius 11, each scaled to a fixed L2 norm), ReLU, 4x4 average pool,
    flatten, random projection W, softmax. Periodic boundaries keep the
    features driven by oriented image content rather than border artifacts.
    W entries come from a seeded SplitMix64 stream mapped to [-1, 1], drawn
    row-major over (class, feature), so identical seeds give bit-identical
    models.
    """

    FILTER_ORIENTATIONS = 8
    FILTER_SIGMA = 2.0
    FILTER_LAMBDA = 3.0
    FILTER_SUPPORT = 11
    POOL = 4
    # L2 norm of each filter; keeps logits of full-range images order one.
    FILTER_GAIN = 1.0 / 255.0

    def __init__(
        self,
        seed: int = 0,
        width: int = 32,
        height: int = 32,
        num_classes: int = 10,
    ):
        if width % self.POOL or height % self.POOL:
            raise ValueError(f"input sides must be multiples of {self.POOL}")
        self.seed = seed
        self.descriptor = ModelDescriptor(
            name=f"gabor-bank-{seed}",
            input_width=width,
            input_height=height,
            input_channels=3,
            num_classes=num_classes,
        )
        self._grid_shape = (height, width)
        filters = []
        for k in range(self.FILTER_ORIENTATIONS):
            params = GaborKernelParams(
                kappa_mag=1.0,
                sigma=self.FILTER_SIGMA,
                lambda_freq=self.FILTER_LAMBDA,
                omega=k * math.pi / self.FILTER_ORIENTATIONS,
            )
            patch = kernel_patch(params, self.FILTER_SUPPORT)
            filters.append(patch / np.linalg.norm(patch) * self.FILTER_GAIN)
        self.filters = np.stack(filters)
        self._spectra = np.stack(
            [_correlation_spectrum(f, self._grid_shape) for f in self.filters]
        )
        self._adj_spectra = np.stack(
            [_correlation_spectrum(f[::-1, ::-1], self._grid_shape) for f in self.filters]
        )
        self.feature_dim = (
            self.FILTER_ORIENTATIONS * (height // self.POOL) * (width // self.POOL)
        )
        rng = SplitMix64(seed)
        draws = rng.next_f64_block(num_classes * self.feature_dim)
        self.weights = (2.0 * draws - 1.0).reshape(num_classes, self.feature_dim)

    # -- forward stages ------------------------------------------------------

    def _gray(self, image: np.ndarray) -> np.ndarray:
        return np.asarray(image, dtype=np.float64).mean(axis=2)

    def _correlate(self, plane: np.ndarray, spectra: np.ndarray) -> np.ndarray:
        spec = np.fft.rfft2(plane)
        return np.fft.irfft2(spec[None] * spectra, s=self._grid_shape)

    def conv_maps(self, image: np.ndarray) -> np.ndarray:
        """Pre-ReLU circular-correlation responses of the 8 filters, (8, H, W)."""
        return self._correlate(self._gray(image), self._spectra)

    def _pool(self, maps: np.ndarray) -> np.ndarray:
        f, h, w = maps.shape
        p = self.POOL
        return maps.reshape(f, h // p, p, w // p, p).mean(axis=(2, 4))

    def features(self, image: np.ndarray) -> np.ndarray:
        """Flattened pooled activations in (filter, row, col) order."""
        return self._pool(np.maximum(self.conv_maps(image), 0.0)).ravel()

    def logits(self, image: np.ndarray) -> np.ndarray:
        return np.einsum("cf,f->c", self.weights, self.features(image))

    def predict(self, image: np.ndarray) -> np.ndarray:
        self._check_shape(image)
        return softmax(self.logits(image))

    def predict_batch(self, images) -> np.ndarray:
        """One probability row per image; images processed independently,
        so results do not depend on how a dataset is split into batches."""
        images = _as_image_array(images, self.descriptor)
        out = np.empty((len(images), self.descriptor.num_classes), dtype=np.float64)
        for i, image in enumerate(images):
            out[i] = softmax(
                np.einsum("cf,f->c", self.weights, self.features(image))
            )
        return out

    def _check_shape(self, image: np.ndarray) -> None:
        if tuple(np.shape(image)) != self.descriptor.input_shape:
            raise ShapeMismatch(
                f"image shape {np.shape(image)} != model input {self.descriptor.input_shape}"
            )

    def clone(self):
        """Immutable after construction, so workers can share one instance."""
        return self

    def close(self) -> None:
        return None

    # -- linear-map pieces used by the Jacobian probes -------------------------

    def conv_jvp(self, v: np.ndarray) -> np.ndarray:
        """Directional derivative of conv_maps: linear, so the map itself."""
        return self._correlate(np.asarray(v, dtype=np.float64).mean(axis=2), self._spectra)

    def conv_vjp(self, u_maps: np.ndarray) -> np.ndarray:
        """Adjoint of conv_jvp back to image space (H, W, C)."""
        back = np.fft.irfft2(
            np.fft.rfft2(u_maps) * self._adj_spectra, s=self._grid_shape
        )
        plane = back.sum(axis=0)
        return np.repeat(plane[:, :, None] / 3.0, 3, axis=2)

    def pool_jvp(self, maps: np.ndarray) -> np.ndarray:
        return self._pool(maps).ravel()

    def pool_vjp(self, u: np.ndarray) -> np.ndarray:
        f = self.FILTER_ORIENTATIONS
        p = self.POOL
        h = self.descriptor.input_height
        w = self.descriptor.input_width
        blocks = u.reshape(f, h // p, w // p) / (p * p)
        return np.repeat(np.repeat(blocks, p, axis=1), p, axis=2)


def _as_image_array(images, descriptor: ModelDescriptor) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape((0,) + descriptor.input_shape)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != descriptor.input_shape:
        raise ShapeMismatch(
            f"batch shape {arr.shape} != (N,) + {descriptor.input_shape}"
        )
    return arr


def build_reference_model(seed: int) -> GaborBankClassifier:
    """Default desk-scale model: 32x32x3 input, 10 classes."""
    return GaborBankClassifier(seed=seed)


def predict_batch(oracle, images) -> np.ndarray:
    """Probability rows for a batch, order preserving.

    `oracle` is anything with a `descriptor` and a `predict_batch` method
    (built-in classifier or an external-process client).
    """
    return oracle.predict_batch(images)


# -- wire protocol ------------------------------------------------------------


def encode_image_batch(images: np.ndarray) -> str:
    """Base64 of batch-major, channel-fastest little-endian float32."""
    arr = np.ascontiguousarray(images, dtype="<f4")
    return base64.b64encode(arr.tobytes()).decode("ascii")


def decode_image_batch(data: str, batch: int, height: int, width: int, channels: int) -> np.ndarray:
    raw = base64.b64decode(data.encode("ascii"), validate=True)
    expected = batch * height * width * channels * 4
    if len(raw) != expected:
        raise OracleFailure(f"payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(batch, height, width, channels)


class _LineReader:
    """Background reader turning a byte stream into a queue of lines."""

    def __init__(self, stream):
        self.lines: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._run, args=(stream,), daemon=True)
        self._thread.start()

    def _run(self, stream):
        try:
            for line in stream:
                self.lines.put(line)
        except (OSError, ValueError):
            pass
        finally:
            self.lines.put(None)  # EOF marker

    def get(self, timeout: float):
        try:
            return self.lines.get(timeout=timeout)
        except queue.Empty:
            return _TIMEOUT


_TIMEOUT = object()


class ExternalOracle:
    """Client for a model process speaking the wire protocol.

    One request is in flight at a time per connection; parallelism comes
    from running several connections (see clone()).
    """

    def __init__(
        self,
        command,
        expectations: dict | None = None,
        handshake_timeout: float = 30.0,
        request_timeout: float = 600.0,
    ):
        self._command = command
        self._expectations = expectations
        self._handshake_timeout = handshake_timeout
        self._request_timeout = request_timeout
        self._next_id = 1
        self._lock = threading.Lock()
        self._proc = None
        self._sock = None
        self._stderr_tail: deque = deque(maxlen=30)

        if isinstance(command, str) and command.startswith("tcp://"):
            hostport = command[len("tcp://") :]
            host, _, port = hostport.rpartition(":")
            try:
                self._sock = socket.create_connection(
                    (host or "127.0.0.1", int(port)), timeout=handshake_timeout
                )
                self._sock.settimeout(None)
            except (OSError, ValueError) as exc:
                raise SpawnFailure(f"cannot connect to {command}: {exc}") from exc
            self._writer = self._sock.makefile("wb")
            self._reader = _LineReader(self._sock.makefile("rb"))
        else:
            argv = shlex.split(command) if isinstance(command, str) else list(command)
            try:
                self._proc = subprocess.Popen(
                    argv,
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    stderr=subprocess.PIPE,
                )
            except OSError as exc:
                raise SpawnFailure(f"cannot launch {argv!r}: {exc}") from exc
            self._writer = self._proc.stdin
            self._reader = _LineReader(self._proc.stdout)
            threading.Thread(
                target=self._drain_stderr, args=(self._proc.stderr,), daemon=True
            ).start()

        self.descriptor = self._handshake()

    def _drain_stderr(self, stream):
        try:
            for line in stream:
                self._stderr_tail.append(line.decode("utf-8", "replace").rstrip())
        except (OSError, ValueError):
            pass

    def _stderr_summary(self) -> str:
        return " | ".join(self._stderr_tail) or "<no stderr>"

    def _send(self, obj: dict) -> None:
        try:
            self._writer.write(json.dumps(obj).encode("utf-8") + b"\n")
            self._writer.flush()
        except (OSError, ValueError, BrokenPipeError) as exc:
            raise OracleFailure(
                f"oracle connection write failed: {exc}; stderr: {self._stderr_summary()}"
            ) from exc

    def _recv(self, timeout: float) -> dict:
        line = self._reader.get(timeout)
        if line is _TIMEOUT:
            raise OracleFailure(f"oracle reply timed out after {timeout}s")
        if line is None:
            raise OracleFailure(
                f"oracle closed the connection; stderr: {self._stderr_summary()}"
            )
        try:
            msg = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise OracleFailure(f"oracle sent a malformed frame: {exc}") from exc
        if not isinstance(msg, dict):
            raise OracleFailure("oracle frame is not a JSON object")
        return msg

    def _handshake(self) -> ModelDescriptor:
        self._send({"op": "meta"})
        line = self._reader.get(self._handshake_timeout)
        if line is _TIMEOUT:
            raise HandshakeTimeout(
                f"no meta reply within {self._handshake_timeout}s"
            )
        if line is None:
            raise OracleFailure(
                f"oracle exited during handshake; stderr: {self._stderr_summary()}"
            )
        try:
            msg = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise OracleFailure(f"malformed meta reply: {exc}") from exc
        if msg.get("op") != "meta":
            raise OracleFailure(f"expected meta reply, got {msg.get('op')!r}")
        try:
            desc = ModelDescriptor(
                name=str(msg["name"]),
                input_width=int(msg["width"]),
                input_height=int(msg["height"]),
                input_channels=int(msg["channels"]),
                num_classes=int(msg["classes"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise OracleFailure(f"incomplete meta reply: {exc}") from exc
        if self._expectations:
            reply = {
                "name": desc.name,
                "width": desc.input_width,
                "height": desc.input_height,
                "channels": desc.input_channels,
                "classes": desc.num_classes,
            }
            for key, want in self._expectations.items():
                if reply.get(key) != want:
                    raise DescriptorMismatch(
                        f"descriptor field {key}={reply.get(key)!r}, expected {want!r}"
                    )
        return desc

    def predict_batch(self, images) -> np.ndarray:
        images = _as_image_array(images, self.descriptor)
        if len(images) == 0:
            return np.empty((0, self.descriptor.num_classes), dtype=np.float64)
        with self._lock:
            request_id = self._next_id
            self._next_id += 1
            self._send(
                {
                    "op": "predict",
                    "id": request_id,
                    "batch": int(len(images)),
                    "width": self.descriptor.input_width,
                    "height": self.descriptor.input_height,
                    "channels": self.descriptor.input_channels,
                    "data": encode_image_batch(images),
                }
            )
            msg = self._recv(self._request_timeout)
        if msg.get("op") == "error":
            raise OracleFailure(f"oracle error: {msg.get('message')}")
        if msg.get("op") != "predict" or msg.get("id") != request_id:
            raise OracleFailure(
                f"unexpected reply op={msg.get('op')!r} id={msg.get('id')!r}"
            )
        probs = np.asarray(msg.get("probs"), dtype=np.float64)
        if probs.shape != (len(images), self.descriptor.num_classes):
            raise OracleFailure(f"probs shape {probs.shape} is wrong")
        if not np.isfinite(probs).all() or (probs < -1e-6).any():
            raise OracleFailure("oracle returned invalid probabilities")
        if np.abs(probs.sum(axis=1) - 1.0).max() > 1e-3:
            raise OracleFailure("oracle probabilities do not sum to 1")
        return probs

    def clone(self) -> "ExternalOracle":
        """Fresh connection to the same oracle (one per sweep worker)."""
        return ExternalOracle(
            self._command,
            expectations=self._expectations,
            handshake_timeout=self._handshake_timeout,
            request_timeout=self._request_timeout,
        )

    def close(self) -> None:
        for stream in (getattr(self, "_writer", None),):
            try:
                if stream:
                    stream.close()
            except OSError:
                pass
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        if self._proc is not None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def spawn_external_oracle(
    command,
    descriptor_expectations: dict | None = None,
    handshake_timeout: float = 30.0,
    request_timeout: float = 600.0,
) -> ExternalOracle:
    """Start (or connect to) an external oracle and complete the handshake."""
    return ExternalOracle(
        command,
        expectations=descriptor_expectations,
        handshake_timeout=handshake_timeout,
        request_timeout=request_timeout,
    )


def resolve_oracle(spec: str, request_timeout: float = 600.0):
    """Build an oracle from a command spec string.

    "builtin" or "builtin:<seed>" constructs the reference classifier;
    "tcp://host:port" connects to a listening adapter; anything else is
    run as a subprocess command line.
    """
    if spec == "builtin" or spec.startswith("builtin:"):
        seed = int(spec.split(":", 1)[1]) if ":" in spec else 0
        return build_reference_model(seed)
    return spawn_external_oracle(spec, request_timeout=request_timeout)
