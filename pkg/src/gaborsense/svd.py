"""Power iteration for (p, q)-singular vectors of layer Jacobians.

The iteration is s <- phi_q(J^T psi_p(J s)) with psi_r(z) = sign(z)|z|^(r-1)
elementwise and phi_q(z) = psi_q'(z) / ||psi_q'(z)||_q, q' = q / (q - 1).
For p = q = 2 both maps are the identity (up to scaling) and the scheme
reduces to classical power iteration on J^T J.

Exponents are restricted to finite p, q > 1; infinity is approximated by
callers with a large finite exponent (default suggestion: 10).
"""

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionMismatch, InvalidLayer
from .perturb import PerturbationField, f32_within
from .rng import SplitMix64

LARGE_EXPONENT = 10.0  # suggested stand-in for p or q = infinity

LAYERS = ("post_conv", "post_pool", "logits")


@dataclass(frozen=True)
class LinearOperatorProbe:
    """Matrix-free view of a Jacobian: v -> J v and u -> J^T u on flat vectors."""

    apply: Callable[[np.ndarray], np.ndarray]
    apply_transpose: Callable[[np.ndarray], np.ndarray]
    input_dim: int
    output_dim: int

    def check_consistency(
        self, seed: int = 0, probes: int = 10, tol: float = 1e-6
    ) -> None:
        """Verify <J v, u> == <v, J^T u> on seeded random probes."""
        rng = SplitMix64(seed)
        for _ in range(probes):
            v = 2.0 * rng.next_f64_block(self.input_dim) - 1.0
            u = 2.0 * rng.next_f64_block(self.output_dim) - 1.0
            lhs = float(np.dot(self.apply(v), u))
            rhs = float(np.dot(v, self.apply_transpose(u)))
            scale = max(1.0, abs(lhs), abs(rhs))
            if abs(lhs - rhs) > tol * scale:
                raise DimensionMismatch(
                    f"transpose inconsistency: <Jv,u>={lhs!r} vs <v,J^Tu>={rhs!r}"
                )


@dataclass(frozen=True)
class SingularConfig:
    p: float = 2.0
    q: float = 2.0
    epsilon: float = 12.0
    tol: float = 1e-6
    max_iter: int = 1000
    seed: int = 0

    def __post_init__(self):
        for name in ("p", "q"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 1.0):
                raise ConfigError(f"{name} must be finite and > 1, got {value!r}")
        if not (math.isfinite(self.epsilon) and self.epsilon > 0.0):
            raise ConfigError(f"epsilon must be positive, got {self.epsilon!r}")
        if self.tol <= 0.0:
            raise ConfigError(f"tol must be positive, got {self.tol!r}")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter!r}")


@dataclass(frozen=True)
class PowerResult:
    """Outcome of power_method; iterable as (s, value) for convenience."""

    s: np.ndarray
    value: float
    converged: bool
    iterations: int
    value_history: list[float] = field(default_factory=list)

    def __iter__(self):
        return iter((self.s, self.value))


def psi(z: np.ndarray, r: float) -> np.ndarray:
    """Elementwise sign(z) * |z|^(r-1)."""
    return np.sign(z) * np.abs(z) ** (r - 1.0)


def _qnorm(z: np.ndarray, q: float) -> float:
    return float(np.sum(np.abs(z) ** q) ** (1.0 / q))


def power_method(J: LinearOperatorProbe, cfg: SingularConfig) -> PowerResult:
    """Dominant (p, q)-singular pair of J by generalized power iteration.

    Returns s scaled to ||s||_q = epsilon and value = ||J s||_p evaluated
    at unit q-norm. On stagnation-free exhaustion of max_iter the best
    iterate seen is returned with converged=False.
    """
    if J.input_dim < 1 or J.output_dim < 1:
        raise DimensionMismatch("operator dimensions must be >= 1")
    q_conj = cfg.q / (cfg.q - 1.0)
    rng = SplitMix64(cfg.seed)
    s = 2.0 * rng.next_f64_block(J.input_dim) - 1.0
    norm = _qnorm(s, cfg.q)
    if norm == 0.0:
        s = np.full(J.input_dim, 1.0)
        norm = _qnorm(s, cfg.q)
    s = s / norm

    best_s = s
    best_value = -math.inf
    history: list[float] = []
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iter + 1):
        image = J.apply(s)
        if image.shape != (J.output_dim,):
            raise DimensionMismatch(
                f"apply returned shape {image.shape}, expected ({J.output_dim},)"
            )
        value = float(np.sum(np.abs(image) ** cfg.p) ** (1.0 / cfg.p))
        history.append(value)
        if value >= best_value:
            best_value = value
            best_s = s
        raw = J.apply_transpose(psi(image, cfg.p))
        if raw.shape != (J.input_dim,):
            raise DimensionMismatch(
                f"apply_transpose returned shape {raw.shape}, expected ({J.input_dim},)"
            )
        step = psi(raw, q_conj)
        step_norm = _qnorm(step, cfg.q)
        if step_norm == 0.0:
            # s is in the null space of the composed map; nothing to iterate.
            break
        s_next = step / step_norm
        delta = float(np.max(np.abs(s_next - s)))
        s = s_next
        if delta < cfg.tol:
            final_value = float(
                np.sum(np.abs(J.apply(s)) ** cfg.p) ** (1.0 / cfg.p)
            )
            history.append(final_value)
            if final_value >= best_value:
                best_value = final_value
                best_s = s
            converged = True
            break

    if not math.isfinite(best_value):
        best_value = 0.0
    return PowerResult(
        s=best_s * cfg.epsilon,
        value=best_value,
        converged=converged,
        iterations=iterations,
        value_history=history,
    )


def matrix_probe(matrix: np.ndarray) -> LinearOperatorProbe:
    """Probe view of an explicit dense matrix."""
    m = np.asarray(matrix, dtype=np.float64)
    return LinearOperatorProbe(
        apply=lambda v: m @ v,
        apply_transpose=lambda u: m.T @ u,
        input_dim=m.shape[1],
        output_dim=m.shape[0],
    )


def layer_jacobian(model, x, layer: str) -> LinearOperatorProbe:
    """Jacobian probe of the built-in classifier at input x.

    Layers: post_conv (filter responses, linear in the input), post_pool
    (pooled ReLU activations; ReLU subgradient at 0 taken as 0), logits.
    Vectors are flat; images use (H, W, C) row-major, channel-fastest order.
    """
    if layer not in LAYERS:
        raise InvalidLayer(f"layer must be one of {LAYERS}, got {layer!r}")
    shape = model.descriptor.input_shape
    input_dim = int(np.prod(shape))
    height, width = shape[0], shape[1]
    n_maps = model.FILTER_ORIENTATIONS * height * width

    def conv_fwd(v: np.ndarray) -> np.ndarray:
        return model.conv_jvp(v.reshape(shape))

    def conv_bwd(u: np.ndarray) -> np.ndarray:
        return model.conv_vjp(u).ravel()

    if layer == "post_conv":
        return LinearOperatorProbe(
            apply=lambda v: conv_fwd(v).ravel(),
            apply_transpose=lambda u: conv_bwd(
                u.reshape(model.FILTER_ORIENTATIONS, height, width)
            ),
            input_dim=input_dim,
            output_dim=n_maps,
        )

    # ReLU mask is fixed by the linearization point x.
    mask = (model.conv_maps(np.asarray(x, dtype=np.float64)) > 0.0).astype(
        np.float64
    )

    def pool_fwd(v: np.ndarray) -> np.ndarray:
        return model.pool_jvp(mask * conv_fwd(v))

    def pool_bwd(u: np.ndarray) -> np.ndarray:
        return conv_bwd(mask * model.pool_vjp(u))

    if layer == "post_pool":
        return LinearOperatorProbe(
            apply=pool_fwd,
            apply_transpose=pool_bwd,
            input_dim=input_dim,
            output_dim=model.feature_dim,
        )
    return LinearOperatorProbe(
        apply=lambda v: model.weights @ pool_fwd(v),
        apply_transpose=lambda u: pool_bwd(model.weights.T @ u),
        input_dim=input_dim,
        output_dim=model.descriptor.num_classes,
    )


def stacked_probe(probes: list[LinearOperatorProbe]) -> LinearOperatorProbe:
    """Vertical stack [J_1; ...; J_n] sharing one input space."""
    if not probes:
        raise DimensionMismatch("need at least one probe to stack")
    input_dim = probes[0].input_dim
    for p in probes:
        if p.input_dim != input_dim:
            raise DimensionMismatch("stacked probes must share input_dim")
    offsets = np.cumsum([0] + [p.output_dim for p in probes])

    def apply(v: np.ndarray) -> np.ndarray:
        return np.concatenate([p.apply(v) for p in probes])

    def apply_transpose(u: np.ndarray) -> np.ndarray:
        total = np.zeros(input_dim, dtype=np.float64)
        for p, lo, hi in zip(probes, offsets[:-1], offsets[1:]):
            total += p.apply_transpose(u[lo:hi])
        return total

    return LinearOperatorProbe(
        apply=apply,
        apply_transpose=apply_transpose,
        input_dim=input_dim,
        output_dim=int(offsets[-1]),
    )


def singular_uap(model, layer: str, X_batch, cfg: SingularConfig) -> PerturbationField:
    """Dominant-singular-direction perturbation over a batch of inputs.

    Stacks the per-input layer Jacobians, runs the power method, and maps
    the resulting direction to the l-inf budget in sign mode:
    epsilon * sign(s). The method's own scale (||s||_q = epsilon) is
    irrelevant after the sign map.
    """
    X = np.asarray(X_batch, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.size == 0:
        raise DimensionMismatch("X_batch must contain at least one image")
    probes = [layer_jacobian(model, x, layer) for x in X]
    result = power_method(stacked_probe(probes), cfg)
    shape = model.descriptor.input_shape
    direction = result.s.reshape(shape)
    if not np.any(direction):
        raise DimensionMismatch("power method returned a zero direction")
    peak = f32_within(cfg.epsilon)
    values = (peak * np.sign(direction)).astype(np.float32)
    provenance = {
        "kind": "singular_vector",
        "layer": layer,
        "p": cfg.p,
        "q": cfg.q,
        "batch": int(len(X)),
        "value": result.value,
        "converged": result.converged,
        "model": model.descriptor.name,
    }
    return PerturbationField(
        values=values,
        epsilon=float(cfg.epsilon),
        provenance=provenance,
        seed=cfg.seed,
    )
