"""Grouped min-max quantization for 2-D matrices (tokens x channels).

Every function here is pure: inputs are never modified and returned objects
are treated as immutable. Rounding is round-half-to-even (``np.rint``)
everywhere, including the zero-point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

SUPPORTED_BITS = (2, 4, 6, 8)

STATIC = "static"
DYNAMIC = "dynamic"


class QuantizationError(ValueError):
    """Raised for invalid quantization inputs (shapes, bit-widths, params)."""


def _check_bits(bits: int) -> int:
    if bits not in SUPPORTED_BITS:
        raise QuantizationError(f"unsupported bit-width {bits}; expected one of {SUPPORTED_BITS}")
    return int(bits)


def as_matrix(x, name: str = "x") -> np.ndarray:
    """Validate ``x`` as a finite, non-empty 2-D float64 matrix."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise QuantizationError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise QuantizationError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise QuantizationError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class QuantParams:
    """Scale, zero-point and bit-width shared by one quantization group.

    The zero-point is an unbounded integer: min-max params place the code
    range ``[0, 2**bits - 1]`` exactly over ``[min, max]`` even when the
    group does not straddle zero, so no clipping ever occurs for them.
    """

    scale: float
    zero_point: int
    bits: int

    def __post_init__(self):
        _check_bits(self.bits)
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise QuantizationError(f"scale must be positive and finite, got {self.scale}")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class GroupingScheme:
    """Which elements of a matrix share one (scale, zero-point) pair.

    ``per_token`` groups rows, ``per_channel`` groups columns,
    ``per_output_channel`` groups the rows of a ``[C_out, C_in]`` weight, and
    ``per_group`` splits every row into contiguous chunks of ``group_size``.
    """

    kind: str
    group_size: int | None = None

    KINDS = ("per_tensor", "per_token", "per_channel", "per_output_channel", "per_group")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise QuantizationError(f"unknown grouping scheme {self.kind!r}")
        if self.kind == "per_group":
            if self.group_size is None or self.group_size < 1:
                raise QuantizationError("per_group needs a positive group_size")
        elif self.group_size is not None:
            raise QuantizationError(f"{self.kind} does not take a group_size")

    @classmethod
    def per_group(cls, group_size: int) -> "GroupingScheme":
        return cls("per_group", int(group_size))

    @classmethod
    def parse(cls, text: str) -> "GroupingScheme":
        """Parse ``"per_token"`` or ``"per_group:32"`` style strings."""
        if text.startswith("per_group:"):
            return cls.per_group(int(text.split(":", 1)[1]))
        return cls(text)

    def __str__(self) -> str:
        if self.kind == "per_group":
            return f"per_group:{self.group_size}"
        return self.kind

    def num_groups(self, shape: tuple[int, int]) -> int:
        rows, cols = shape
        if self.kind == "per_tensor":
            return 1
        if self.kind in ("per_token", "per_output_channel"):
            return rows
        if self.kind == "per_channel":
            return cols
        if cols % self.group_size:
            raise QuantizationError(f"group_size {self.group_size} does not divide {cols} channels")
        return rows * (cols // self.group_size)

    def to_groups(self, x: np.ndarray) -> np.ndarray:
        """Reshape ``x`` to ``[n_groups, group_len]``."""
        rows, cols = x.shape
        if self.kind == "per_tensor":
            return x.reshape(1, -1)
        if self.kind in ("per_token", "per_output_channel"):
            return x
        if self.kind == "per_channel":
            return x.T
        self.num_groups(x.shape)
        return x.reshape(rows * (cols // self.group_size), self.group_size)

    def from_groups(self, g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
        if self.kind == "per_channel":
            return np.ascontiguousarray(g.T)
        return g.reshape(shape)


PER_TENSOR = GroupingScheme("per_tensor")
PER_TOKEN = GroupingScheme("per_token")
PER_CHANNEL = GroupingScheme("per_channel")
PER_OUTPUT_CHANNEL = GroupingScheme("per_output_channel")


@dataclass(frozen=True)
class GroupParams:
    """Vectorised per-group params: ``scales[i]``/``zero_points[i]`` for group ``i``."""

    scales: np.ndarray
    zero_points: np.ndarray
    bits: int

    def __post_init__(self):
        _check_bits(self.bits)
        scales = np.asarray(self.scales, dtype=np.float64).reshape(-1)
        zps = np.asarray(self.zero_points, dtype=np.int64).reshape(-1)
        if scales.shape != zps.shape:
            raise QuantizationError("scales and zero_points differ in length")
        if not np.all(np.isfinite(scales) & (scales > 0)):
            raise QuantizationError("all scales must be positive and finite")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "zero_points", zps)

    def __len__(self) -> int:
        return self.scales.shape[0]

    @classmethod
    def from_params(cls, params: Sequence[QuantParams]) -> "GroupParams":
        if not params:
            raise QuantizationError("empty parameter list")
        bits = {p.bits for p in params}
        if len(bits) != 1:
            raise QuantizationError(f"mixed bit-widths in one parameter set: {sorted(bits)}")
        return cls(
            np.array([p.scale for p in params]),
            np.array([p.zero_point for p in params]),
            bits.pop(),
        )

    def to_params(self) -> list[QuantParams]:
        return [QuantParams(float(s), int(z), self.bits) for s, z in zip(self.scales, self.zero_points)]


ParamsLike = Union[GroupParams, Sequence[QuantParams]]


def _minmax_grid(groups: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    qmax = (1 << bits) - 1
    lo = groups.min(axis=1)
    hi = groups.max(axis=1)
    scale = (hi - lo) / qmax
    # constant group (or a subnormal range whose step underflows): s = 1 and
    # the zero-point cancels round(min)
    scale = np.where(scale > 0, scale, 1.0)
    zp = np.rint(-lo / scale)
    if not np.all(np.abs(zp) < 2.0**62):
        raise QuantizationError("zero-point overflows int64: range too narrow for its offset")
    return scale, zp.astype(np.int64)


def _symmetric_grid(groups: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    half = 1 << (bits - 1)
    amax = np.abs(groups).max(axis=1)
    scale = amax / (half - 1)
    scale = np.where(scale > 0, scale, 1.0)  # all-zero or underflowing group
    return scale, np.full(groups.shape[0], half, dtype=np.int64)


def compute_minmax_params(group, bits: int) -> QuantParams:
    """Asymmetric min-max params for a single group.

    ``scale = (max - min) / (2**bits - 1)`` and ``zero_point = round(-min / scale)``.
    A constant group gets ``scale = 1``.
    """
    bits = _check_bits(bits)
    g = np.asarray(group, dtype=np.float64).reshape(1, -1)
    if g.size == 0:
        raise QuantizationError("cannot compute params of an empty group")
    if not np.all(np.isfinite(g)):
        raise QuantizationError("group contains non-finite values")
    s, z = _minmax_grid(g, bits)
    return QuantParams(float(s[0]), int(z[0]), bits)


def compute_symmetric_params(group, bits: int) -> QuantParams:
    """Symmetric params: zero-point pinned at the mid-code ``2**(bits-1)``."""
    bits = _check_bits(bits)
    g = np.asarray(group, dtype=np.float64).reshape(1, -1)
    if g.size == 0:
        raise QuantizationError("cannot compute params of an empty group")
    if not np.all(np.isfinite(g)):
        raise QuantizationError("group contains non-finite values")
    s, z = _symmetric_grid(g, bits)
    return QuantParams(float(s[0]), int(z[0]), bits)


def compute_params(x, scheme: GroupingScheme, bits: int, symmetric: bool = False) -> GroupParams:
    """Per-group params of ``x`` under ``scheme`` (what dynamic mode uses)."""
    bits = _check_bits(bits)
    x = as_matrix(x)
    groups = scheme.to_groups(x)
    s, z = (_symmetric_grid if symmetric else _minmax_grid)(groups, bits)
    return GroupParams(s, z, bits)


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer codes plus the params needed to dequantize them."""

    ints: np.ndarray
    scheme: GroupingScheme
    group_params: GroupParams
    symmetric: bool = False

    def __post_init__(self):
        if self.ints.ndim != 2:
            raise QuantizationError("ints must be 2-D")
        n = self.scheme.num_groups(self.ints.shape)
        if n != len(self.group_params):
            raise QuantizationError(f"scheme expects {n} groups, params hold {len(self.group_params)}")
        if self.ints.size and (self.ints.min() < 0 or self.ints.max() > self.qmax):
            raise QuantizationError("integer codes outside [0, 2**bits - 1]")

    @property
    def bits(self) -> int:
        return self.group_params.bits

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.ints.shape

    @property
    def params(self) -> list[QuantParams]:
        return self.group_params.to_params()

    def signed_ints(self) -> np.ndarray:
        """``ints - zero_point`` broadcast per group, as int64."""
        g = self.scheme.to_groups(self.ints.astype(np.int64))
        return self.scheme.from_groups(g - self.group_params.zero_points[:, None], self.shape)


def _resolve_params(frozen_params: ParamsLike | None) -> GroupParams:
    if frozen_params is None:
        raise QuantizationError("static mode needs frozen_params from calibration")
    if isinstance(frozen_params, GroupParams):
        return frozen_params
    return GroupParams.from_params(list(frozen_params))


def quantize(
    x,
    scheme: GroupingScheme,
    bits: int,
    mode: str = DYNAMIC,
    frozen_params: ParamsLike | None = None,
    symmetric: bool = False,
) -> QuantizedTensor:
    """Quantize ``x`` group by group: ``clamp(round(x / s) + z, 0, 2**bits - 1)``.

    Args:
        x: 2-D matrix, ``[tokens, channels]`` for activations or
            ``[C_out, C_in]`` for weights.
        scheme: grouping of elements that share params.
        bits: one of 2, 4, 6, 8.
        mode: ``"dynamic"`` derives params from ``x``; ``"static"`` uses
            ``frozen_params``.
        frozen_params: calibrated params, one per group (static mode only).
        symmetric: dynamic mode only; pin the zero-point at the mid-code.
    """
    bits = _check_bits(bits)
    x = as_matrix(x)
    if mode == DYNAMIC:
        params = compute_params(x, scheme, bits, symmetric)
    elif mode == STATIC:
        params = _resolve_params(frozen_params)
        if params.bits != bits:
            raise QuantizationError(f"frozen params are {params.bits}-bit, asked for {bits}")
        n = scheme.num_groups(x.shape)
        if len(params) != n:
            raise QuantizationError(f"frozen params hold {len(params)} groups, {scheme} needs {n}")
    else:
        raise QuantizationError(f"unknown mode {mode!r}")
    groups = scheme.to_groups(x)
    idx = np.rint(groups / params.scales[:, None]) + params.zero_points[:, None]
    codes = np.clip(idx, 0, (1 << bits) - 1).astype(np.uint8)
    return QuantizedTensor(scheme.from_groups(codes, x.shape), scheme, params, symmetric)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """``s * (x_int - z)`` per group, as float64."""
    g = q.scheme.to_groups(q.ints.astype(np.float64))
    out = q.group_params.scales[:, None] * (g - q.group_params.zero_points[:, None])
    return q.scheme.from_groups(out, q.shape)


def fake_quantize(
    x,
    scheme: GroupingScheme,
    bits: int,
    mode: str = DYNAMIC,
    frozen_params: ParamsLike | None = None,
    symmetric: bool = False,
) -> np.ndarray:
    return dequantize(quantize(x, scheme, bits, mode, frozen_params, symmetric))


@dataclass(frozen=True)
class QuantErrorReport:
    rounding_mse: float
    clamping_mse: float
    total_mse: float
    max_abs_err: float
    clamped_fraction: float = 0.0


def error_report(x, q: QuantizedTensor) -> QuantErrorReport:
    """Split the quantization MSE into rounding and clamping parts.

    An element counts as clamped when its pre-clamp index fell outside
    ``[0, 2**bits - 1]``. Both parts are normalised by the total element
    count so that they add up to the total MSE.
    """
    x = as_matrix(x)
    if x.shape != q.shape:
        raise QuantizationError(f"shape mismatch: x {x.shape} vs codes {q.shape}")
    p = q.group_params
    groups = q.scheme.to_groups(x)
    idx = np.rint(groups / p.scales[:, None]) + p.zero_points[:, None]
    clamped = q.scheme.from_groups((idx < 0) | (idx > q.qmax), x.shape)
    sq = (x - dequantize(q)) ** 2
    n = x.size
    return QuantErrorReport(
        rounding_mse=float(sq[~clamped].sum() / n),
        clamping_mse=float(sq[clamped].sum() / n),
        total_mse=float(sq.mean()),
        max_abs_err=float(np.sqrt(sq.max())),
        clamped_fraction=float(clamped.mean()),
    )


def incoherence(group) -> float:
    """Smallest ``mu`` with ``max|x| <= mu * ||x|| / sqrt(g)``.

    Ranges from 1 (all magnitudes equal) to ``sqrt(g)`` (a single spike).
    """
    g = np.asarray(group, dtype=np.float64).reshape(-1)
    if g.size == 0:
        raise QuantizationError("incoherence of an empty group is undefined")
    norm = np.linalg.norm(g)
    if norm == 0:
        raise QuantizationError("incoherence of an all-zero group is undefined")
    return float(np.abs(g).max() * np.sqrt(g.size) / norm)


def row_incoherence(x) -> np.ndarray:
    """Vectorised :func:`incoherence` over the rows of ``x``; zero rows give 1."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=1)
    amax = np.abs(x).max(axis=1)
    out = np.ones(x.shape[0])
    nz = norm > 0
    out[nz] = amax[nz] * np.sqrt(x.shape[1]) / norm[nz]
    return out
