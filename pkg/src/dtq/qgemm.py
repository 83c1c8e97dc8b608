"""Reference integer GEMM for quantized linear layers.

Activations are quantized per token (dynamic, asymmetric) and weights per
output channel (symmetric), so every product summed along ``C_in`` shares a
single ``(s_x, z_x)`` and a single ``s_w``. That makes

    Y[t, o] = s_x[t] * s_w[o] * sum_c (X_int[t, c] - z_x[t]) * W_sym[o, c] + bias[o]

computable with one integer accumulation followed by one float rescale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .quant_core import (
    DYNAMIC,
    PER_OUTPUT_CHANNEL,
    PER_TOKEN,
    QuantizedTensor,
    as_matrix,
    dequantize,
    fake_quantize,
    quantize,
)


class AccumulatorOverflow(OverflowError):
    pass


@dataclass(frozen=True)
class QuantLinear:
    """Symmetric per-output-channel weight codes plus the activation recipe."""

    w_q: QuantizedTensor
    bias: np.ndarray | None = None
    act_bits: int = 8

    def __post_init__(self):
        if self.w_q.scheme != PER_OUTPUT_CHANNEL or not self.w_q.symmetric:
            raise ValueError("QuantLinear needs symmetric per-output-channel weights")
        mid = 1 << (self.w_q.bits - 1)
        if not np.all(self.w_q.group_params.zero_points == mid):
            raise ValueError("weight zero-point must be the mid-code")
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if b.shape != (self.out_features,):
                raise ValueError(f"bias length {b.shape[0]} != C_out {self.out_features}")
            object.__setattr__(self, "bias", b)

    @classmethod
    def from_float(cls, w, bits: int = 8, bias=None, act_bits: int = 8) -> "QuantLinear":
        w_q = quantize(w, PER_OUTPUT_CHANNEL, bits, DYNAMIC, symmetric=True)
        return cls(w_q, bias, act_bits)

    @property
    def out_features(self) -> int:
        return self.w_q.shape[0]

    @property
    def in_features(self) -> int:
        return self.w_q.shape[1]

    def weight_int8(self) -> np.ndarray:
        """Signed weight codes upcast to int8 (W4/W2 codes widen losslessly)."""
        return self.w_q.signed_ints().astype(np.int8)

    def weight_colsum(self) -> np.ndarray:
        """Per-output-channel ``sum_c W_sym[o, c]`` for the zero-point correction."""
        return self.weight_int8().astype(np.int64).sum(axis=1)


def _check_range(name: str, values: np.ndarray, acc_bits: int) -> None:
    limit = 1 << (acc_bits - 1)
    if values.size and (values.max() >= limit or values.min() < -limit):
        raise AccumulatorOverflow(
            f"{name} exceeds the {acc_bits}-bit accumulator range "
            f"[{-limit}, {limit - 1}] (observed [{values.min()}, {values.max()}])"
        )


def integer_accumulate(x_q: QuantizedTensor, layer: QuantLinear, acc_bits: int = 32) -> np.ndarray:
    """``acc[t, o] = sum_c X_int W_sym - z_x[t] * colsum[o]`` in checked integers."""
    if x_q.shape[1] != layer.in_features:
        raise ValueError(f"X has {x_q.shape[1]} channels, layer expects {layer.in_features}")
    x_int = x_q.ints.astype(np.int64)
    w_sym = layer.weight_int8().astype(np.int64)
    # worst case |sum| bound, checked before touching int64 arithmetic
    bound = int(x_int.max(initial=0)) * int(np.abs(w_sym).max(initial=0)) * layer.in_features
    if bound >= 1 << 62:
        raise AccumulatorOverflow("product bound exceeds int64; refusing to accumulate")
    dot = x_int @ w_sym.T
    _check_range("integer dot product", dot, acc_bits)
    zx = x_q.group_params.zero_points
    if np.abs(zx).max(initial=0) * int(np.abs(layer.weight_colsum()).max(initial=0)) >= 1 << 62:
        raise AccumulatorOverflow("zero-point correction exceeds int64")
    correction = zx[:, None] * layer.weight_colsum()[None, :]
    _check_range("zero-point correction", correction, acc_bits)
    acc = dot - correction
    _check_range("accumulator", acc, acc_bits)
    return acc


def qlinear_forward(x, layer: QuantLinear, acc_bits: int = 32) -> np.ndarray:
    """Integer-path forward of a quantized linear layer.

    Raises:
        AccumulatorOverflow: if any intermediate leaves the ``acc_bits``
            signed range. Values are never wrapped.
    """
    x = as_matrix(x, "X")
    if x.shape[1] != layer.in_features:
        raise ValueError(f"X has {x.shape[1]} channels, layer expects {layer.in_features}")
    x_q = quantize(x, PER_TOKEN, layer.act_bits, DYNAMIC)
    acc = integer_accumulate(x_q, layer, acc_bits)
    y = (x_q.group_params.scales[:, None] * layer.w_q.group_params.scales[None, :]) * acc
    if layer.bias is not None:
        y = y + layer.bias
    return y


def float_reference_forward(x, layer: QuantLinear) -> np.ndarray:
    """Fake-quant float path the integer kernel must agree with."""
    xq = fake_quantize(x, PER_TOKEN, layer.act_bits, DYNAMIC)
    y = xq @ dequantize(layer.w_q).T
    if layer.bias is not None:
        y = y + layer.bias
    return y


def packed_nbytes(count: int, bits: int) -> int:
    return math.ceil(count * bits / 8)


def layer_payload_bytes(
    shape: tuple[int, int],
    bits: int | tuple[int, ...],
    mask: bool = False,
    rotation: bool = False,
    symmetric: bool = True,
    act_param_groups: int = 0,
) -> int:
    """Serialized payload of one quantized layer.

    Per stored bit-width: packed codes plus one float32 scale per output
    channel (and one float32 zero-point when asymmetric). Optional float32
    scaling mask, a bit-packed rotation sign vector, and float32
    ``(scale, zero_point)`` pairs for frozen activation params.
    """
    c_out, c_in = shape
    widths = (bits,) if isinstance(bits, int) else tuple(bits)
    total = 0
    for b in widths:
        total += packed_nbytes(c_out * c_in, b) + 4 * c_out * (1 if symmetric else 2)
    if mask:
        total += 4 * c_in
    if rotation:
        total += packed_nbytes(c_in, 1)
    total += 8 * act_param_groups
    return total


def checkpoint_bytes(layers: dict[str, tuple[int, int]], bits: dict, **layer_opts) -> int:
    """Total payload for ``layers`` (name -> shape) at ``bits`` (name -> width or widths).

    ``layer_opts`` are forwarded to :func:`layer_payload_bytes`, either as
    plain values or as per-layer dicts.
    """
    total = 0
    for name, shape in layers.items():
        opts = {k: (v[name] if isinstance(v, dict) else v) for k, v in layer_opts.items()}
        total += layer_payload_bytes(shape, bits[name], **opts)
    return total


def fp16_bytes(layers: dict[str, tuple[int, int]]) -> int:
    return sum(2 * r * c for r, c in layers.values())
