"""Message compression operators and their bit-cost model.

Each operator ``Q`` maps a vector to a cheaper-to-transmit surrogate and
contracts the error in expectation::

    E ||Q(x) - x||^2  <=  (1 - omega) ||x||^2,      0 < omega <= 1,

where ``omega`` is the quality factor returned by :func:`omega`
(``omega = 1`` means lossless).  Implemented operators:

* ``Identity`` -- no compression.
* ``RandK(k)`` -- keep k coordinates chosen uniformly without replacement
  (``omega = k/d``).
* ``TopK(k)`` -- keep the k largest-magnitude coordinates, deterministic
  (``omega = k/d``).
* ``Qsgd(s)`` -- random uniform-dither quantization to s levels per
  coordinate, rescaled by ``tau = 1 + min(d/s^2, sqrt(d)/s)`` so that the
  contraction above holds with ``omega = 1/tau``.
* ``RandGossip(p)`` -- transmit the whole vector with probability p, else
  nothing (``omega = p``).
* ``RescaledUnbiased(inner)`` -- the unbiased estimator associated with a
  contractive primitive: multiplies ``inner``'s output by its natural
  second-moment constant ``tau`` so that ``E Q(x) = x``.  Needed by the
  gossip baselines that are only analyzed for unbiased operators.  Note the
  unbiased estimator itself does not contract; ``omega`` reports ``1/tau``,
  the factor of the associated rescaled (contractive) operator.

The bit cost of a message is modeled, not materialized: sparse formats pay
``ceil(log2 d)`` bits per transmitted index, quantized formats pay
``1 + ceil(log2 s)`` bits per coordinate (sign + level) plus one full-width
scalar for the norm, and dense formats pay ``value_bits`` per coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CompressionSpec",
    "Identity",
    "RandK",
    "TopK",
    "Qsgd",
    "RandGossip",
    "RescaledUnbiased",
    "CompressedMessage",
    "compress",
    "omega",
    "payload_bits",
    "qsgd_tau",
    "natural_tau",
    "is_unbiased",
    "is_random",
    "resolve_k",
]

INDEX_BITS_POLICY = "ceil-log2"


@dataclass(frozen=True)
class CompressionSpec:
    """Base for all operator specs; carries the bit-accounting knobs."""

    value_bits: int = field(default=32, kw_only=True)
    index_bits_policy: str = field(default=INDEX_BITS_POLICY, kw_only=True)

    def __post_init__(self):
        if self.value_bits < 1:
            raise ValueError(f"value_bits must be >= 1, got {self.value_bits}")
        if self.index_bits_policy != INDEX_BITS_POLICY:
            raise ValueError(
                f"unsupported index_bits_policy {self.index_bits_policy!r}; "
                f"only {INDEX_BITS_POLICY!r} is implemented"
            )


@dataclass(frozen=True)
class Identity(CompressionSpec):
    pass


@dataclass(frozen=True)
class RandK(CompressionSpec):
    k: int = 1

    def __post_init__(self):
        super().__post_init__()
        if self.k < 1:
            raise ValueError(f"k must be a positive count, got {self.k}")


@dataclass(frozen=True)
class TopK(CompressionSpec):
    k: int = 1

    def __post_init__(self):
        super().__post_init__()
        if self.k < 1:
            raise ValueError(f"k must be a positive count, got {self.k}")


@dataclass(frozen=True)
class Qsgd(CompressionSpec):
    s: int = 1

    def __post_init__(self):
        super().__post_init__()
        if self.s < 1:
            raise ValueError(f"s must be a positive level count, got {self.s}")


@dataclass(frozen=True)
class RandGossip(CompressionSpec):
    p: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"p must lie in (0, 1], got {self.p}")


@dataclass(frozen=True)
class RescaledUnbiased(CompressionSpec):
    inner: CompressionSpec = Identity()
    tau: float | None = None

    def __post_init__(self):
        super().__post_init__()
        if isinstance(self.inner, (TopK, RescaledUnbiased)):
            raise ValueError(
                f"inner operator {type(self.inner).__name__} has no unbiased rescaling"
            )
        if self.tau is not None and self.tau < 1.0:
            raise ValueError(f"tau must be a scale >= 1, got {self.tau}")


@dataclass(frozen=True)
class CompressedMessage:
    """Reconstructed payload plus its modeled transmission cost in bits."""

    dense_value: np.ndarray
    payload_bits: int
    transmitted: bool = True


def qsgd_tau(s: int, d: int) -> float:
    """Second-moment constant ``1 + min(d/s^2, sqrt(d)/s)`` of s-level dithering."""
    return 1.0 + min(d / s**2, math.sqrt(d) / s)


def natural_tau(spec: CompressionSpec, d: int) -> float:
    """Scale that lifts a contractive primitive to its unbiased estimator."""
    if isinstance(spec, Identity):
        return 1.0
    if isinstance(spec, RandK):
        _check_k(spec.k, d)
        return d / spec.k
    if isinstance(spec, Qsgd):
        return qsgd_tau(spec.s, d)
    if isinstance(spec, RandGossip):
        return 1.0 / spec.p
    raise ValueError(f"no unbiased rescaling for {type(spec).__name__}")


def _effective_tau(spec: RescaledUnbiased, d: int) -> float:
    return spec.tau if spec.tau is not None else natural_tau(spec.inner, d)


def is_unbiased(spec: CompressionSpec) -> bool:
    """True if ``E Q(x) = x`` (Identity or a naturally rescaled primitive)."""
    if isinstance(spec, Identity):
        return True
    return isinstance(spec, RescaledUnbiased) and spec.tau is None


def is_random(spec: CompressionSpec) -> bool:
    """True if the operator consumes random draws."""
    if isinstance(spec, (RandK, Qsgd, RandGossip)):
        return True
    if isinstance(spec, RescaledUnbiased):
        return is_random(spec.inner)
    return False


def resolve_k(fraction: float, d: int) -> int:
    """Turn a coordinate fraction into a count, ``k = ceil(fraction * d)``."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"k fraction must lie in (0, 1], got {fraction}")
    return max(1, math.ceil(fraction * d))


def _check_k(k: int, d: int):
    if k > d:
        raise ValueError(f"k = {k} exceeds the dimension d = {d}")


def _index_bits(d: int) -> int:
    return (d - 1).bit_length() if d > 1 else 0


def omega(spec: CompressionSpec, d: int) -> float:
    """Contraction quality of ``spec`` at dimension ``d``; always in (0, 1]."""
    if d < 1:
        raise ValueError(f"dimension d must be >= 1, got {d}")
    if isinstance(spec, Identity):
        return 1.0
    if isinstance(spec, (RandK, TopK)):
        _check_k(spec.k, d)
        return spec.k / d
    if isinstance(spec, Qsgd):
        return 1.0 / qsgd_tau(spec.s, d)
    if isinstance(spec, RandGossip):
        return spec.p
    if isinstance(spec, RescaledUnbiased):
        return 1.0 / _effective_tau(spec, d)
    raise TypeError(f"unknown compression spec {spec!r}")


def payload_bits(spec: CompressionSpec, d: int, message: CompressedMessage | None = None) -> int:
    """Modeled cost in bits of one message produced by ``spec`` at dimension d.

    ``RandGossip`` costs depend on whether the draw transmitted anything, so
    the message must be supplied for it.
    """
    if isinstance(spec, Identity):
        return d * spec.value_bits
    if isinstance(spec, (RandK, TopK)):
        _check_k(spec.k, d)
        return spec.k * (spec.value_bits + _index_bits(d))
    if isinstance(spec, Qsgd):
        level_bits = (spec.s - 1).bit_length() if spec.s > 1 else 0
        return d * (1 + level_bits) + spec.value_bits
    if isinstance(spec, RandGossip):
        if message is None:
            raise ValueError("RandGossip cost depends on the message; pass one")
        return d * spec.value_bits if message.transmitted else 0
    if isinstance(spec, RescaledUnbiased):
        return payload_bits(spec.inner, d, message)
    raise TypeError(f"unknown compression spec {spec!r}")


def compress(
    spec: CompressionSpec, x: np.ndarray, rng: np.random.Generator | None = None
) -> CompressedMessage:
    """Apply the operator to ``x`` and return the reconstruction with its cost.

    Parameters
    ----------
    spec : CompressionSpec
        Operator to apply; must be valid for ``d = len(x)``.
    x : ndarray
        Finite one-dimensional input vector.
    rng : numpy Generator, optional
        Source of randomness; required for the random operators.  One call
        consumes exactly the draws of one message, so passing streams keyed
        per (node, round) makes simulations reproducible and thread safe.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 1:
        raise ValueError(f"x must be a nonempty 1-d vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("x contains nonfinite entries")
    d = x.size

    dense, transmitted = _apply(spec, x, rng, d)
    msg = CompressedMessage(dense_value=dense, payload_bits=0, transmitted=transmitted)
    bits = payload_bits(spec, d, msg)
    return CompressedMessage(dense_value=dense, payload_bits=bits, transmitted=transmitted)


def _need_rng(rng, spec):
    if rng is None:
        raise ValueError(f"{type(spec).__name__} is random; an rng is required")
    return rng


def _apply(spec, x, rng, d):
    if isinstance(spec, Identity):
        return x.copy(), True
    if isinstance(spec, RandK):
        _check_k(spec.k, d)
        idx = _need_rng(rng, spec).choice(d, size=spec.k, replace=False)
        out = np.zeros(d)
        out[idx] = x[idx]
        return out, True
    if isinstance(spec, TopK):
        _check_k(spec.k, d)
        # stable sort pins tie-breaking to first occurrence
        idx = np.argsort(-np.abs(x), kind="stable")[: spec.k]
        out = np.zeros(d)
        out[idx] = x[idx]
        return out, True
    if isinstance(spec, Qsgd):
        norm = float(np.linalg.norm(x))
        if norm == 0.0:
            return np.zeros(d), True
        xi = _need_rng(rng, spec).random(d)
        levels = np.floor(spec.s * np.abs(x) / norm + xi)
        tau = qsgd_tau(spec.s, d)
        return np.sign(x) * (norm / (spec.s * tau)) * levels, True
    if isinstance(spec, RandGossip):
        if _need_rng(rng, spec).random() < spec.p:
            return x.copy(), True
        return np.zeros(d), False
    if isinstance(spec, RescaledUnbiased):
        inner_dense, transmitted = _apply(spec.inner, x, rng, d)
        return _effective_tau(spec, d) * inner_dense, transmitted
    raise TypeError(f"unknown compression spec {spec!r}")
