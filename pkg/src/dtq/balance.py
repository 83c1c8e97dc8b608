"""Output-preserving channel balancing for linear layers.

Weights are stored ``[C_out, C_in]`` and a layer computes ``Y = X @ W.T``.
Both transforms act along ``C_in``:

* scaling: ``X' = X / s``, ``W' = W * s`` (column-wise)
* rotation: ``X' = X @ H``, ``W' = W @ H`` with ``H @ H.T = I``

The static-dynamic transform applies scaling first, then rotation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import hadamard

from .quant_core import (
    DYNAMIC,
    PER_OUTPUT_CHANNEL,
    PER_TOKEN,
    as_matrix,
    fake_quantize,
)

MASK_MIN = 1e-5
MASK_MAX = 1e5
DEFAULT_ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))


class BalanceError(ValueError):
    pass


@dataclass(frozen=True)
class ScalingMask:
    s: np.ndarray
    alpha: float

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(s) & (s > 0)):
            raise BalanceError("scaling mask entries must be positive and finite")
        if not 0.0 <= self.alpha <= 1.0:
            raise BalanceError(f"alpha must lie in [0, 1], got {self.alpha}")
        object.__setattr__(self, "s", s)

    def __len__(self) -> int:
        return self.s.shape[0]


@dataclass(frozen=True)
class RotationMatrix:
    """Normalised Sylvester Hadamard matrix, optionally with random row signs.

    ``matrix = diag(sign_diag) @ sylvester(n) / sqrt(n)``.
    """

    n: int
    sign_diag: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.n < 2 or self.n & (self.n - 1):
            raise BalanceError(f"Hadamard size must be a power of two >= 2, got {self.n}")
        if self.sign_diag is not None:
            d = np.asarray(self.sign_diag, dtype=np.float64).reshape(-1)
            if d.shape != (self.n,) or not np.all(np.abs(d) == 1):
                raise BalanceError("sign_diag must be a length-n vector of +-1")
            object.__setattr__(self, "sign_diag", d)

    @property
    def matrix(self) -> np.ndarray:
        h = hadamard(self.n).astype(np.float64) / np.sqrt(self.n)
        if self.sign_diag is not None:
            h = self.sign_diag[:, None] * h
        return h


@dataclass(frozen=True)
class BalanceTransform:
    """Scaling mask and/or rotation, applied in that order."""

    mask: ScalingMask | None = None
    rotation: RotationMatrix | None = None

    @property
    def kind(self) -> str:
        if self.mask is not None and self.rotation is not None:
            return "static_dynamic"
        if self.mask is not None:
            return "scaling"
        if self.rotation is not None:
            return "rotation"
        return "none"

    def transform_activation(self, x: np.ndarray) -> np.ndarray:
        if self.mask is not None:
            x = x / self.mask.s
        if self.rotation is not None:
            x = x @ self.rotation.matrix
        return x

    def transform_weight(self, w: np.ndarray) -> np.ndarray:
        if self.mask is not None:
            w = w * self.mask.s
        if self.rotation is not None:
            w = w @ self.rotation.matrix
        return w

    def apply(self, x, w) -> tuple[np.ndarray, np.ndarray]:
        x = as_matrix(x, "X")
        w = as_matrix(w, "W")
        if x.shape[1] != w.shape[1]:
            raise BalanceError(f"X has {x.shape[1]} channels, W has {w.shape[1]}")
        return self.transform_activation(x), self.transform_weight(w)


def compute_scaling_mask(act_absmax, weight_absmax, alpha: float) -> ScalingMask:
    """Per-channel mask ``s_i = max|X_i|**alpha / max|W_i|**(1 - alpha)``.

    Channels with a zero statistic get ``s_i = 1`` (with a warning); all
    entries are clamped to ``[1e-5, 1e5]``.
    """
    a = np.asarray(act_absmax, dtype=np.float64).reshape(-1)
    w = np.asarray(weight_absmax, dtype=np.float64).reshape(-1)
    if a.shape != w.shape:
        raise BalanceError(f"statistic lengths differ: {a.shape[0]} vs {w.shape[0]}")
    if not 0.0 <= alpha <= 1.0:
        raise BalanceError(f"alpha must lie in [0, 1], got {alpha}")
    if np.any(a < 0) or np.any(w < 0) or not (np.all(np.isfinite(a)) and np.all(np.isfinite(w))):
        raise BalanceError("channel statistics must be finite absolute maxima")
    dead = (a == 0) | (w == 0)
    if np.any(dead):
        warnings.warn(f"{int(dead.sum())} channel(s) with zero statistic; mask set to 1", stacklevel=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.power(a, alpha) / np.power(w, 1.0 - alpha)
    s = np.where(dead, 1.0, s)
    return ScalingMask(np.clip(s, MASK_MIN, MASK_MAX), float(alpha))


def apply_scaling(x, w, mask: ScalingMask) -> tuple[np.ndarray, np.ndarray]:
    x = as_matrix(x, "X")
    w = as_matrix(w, "W")
    if not (x.shape[1] == w.shape[1] == len(mask)):
        raise BalanceError(f"channel mismatch: X {x.shape[1]}, W {w.shape[1]}, mask {len(mask)}")
    return x / mask.s, w * mask.s


def hadamard_matrix(n: int, randomize: bool = True, seed: int = 0) -> RotationMatrix:
    if n < 2 or n & (n - 1):
        raise BalanceError(f"Hadamard size must be a power of two >= 2, got {n}")
    if not randomize:
        return RotationMatrix(n)
    signs = np.random.default_rng(seed).choice(np.array([-1.0, 1.0]), size=n)
    return RotationMatrix(n, signs, seed)


def apply_rotation(x, w, h: RotationMatrix) -> tuple[np.ndarray, np.ndarray]:
    x = as_matrix(x, "X")
    w = as_matrix(w, "W")
    if not (x.shape[1] == w.shape[1] == h.n):
        raise BalanceError(f"channel mismatch: X {x.shape[1]}, W {w.shape[1]}, H {h.n}")
    m = h.matrix
    return x @ m, w @ m


def balanced_output_mse(
    x: np.ndarray,
    w: np.ndarray,
    transform: BalanceTransform,
    w_bits: int = 4,
    a_bits: int = 8,
    row_groups: np.ndarray | None = None,
) -> float:
    """Layer-output MSE of dynamic per-token / per-output-channel fake quantization.

    With ``row_groups`` (one label per row of ``x``) the result is the mean
    over groups of each group's MSE relative to its mean squared output, so
    low-magnitude groups (e.g. early timesteps) weigh as much as large ones.
    """
    ref = x @ w.T
    xt, wt = transform.apply(x, w)
    xq = fake_quantize(xt, PER_TOKEN, a_bits, DYNAMIC)
    wq = fake_quantize(wt, PER_OUTPUT_CHANNEL, w_bits, DYNAMIC, symmetric=True)
    sq = (xq @ wq.T - ref) ** 2
    if row_groups is None:
        return float(np.mean(sq))
    labels = np.asarray(row_groups).reshape(-1)
    if labels.shape[0] != x.shape[0]:
        raise BalanceError(f"row_groups has {labels.shape[0]} labels for {x.shape[0]} rows")
    errs = []
    for g in np.unique(labels):
        rows = labels == g
        errs.append(sq[rows].mean() / max(float(np.mean(ref[rows] ** 2)), 1e-30))
    return float(np.mean(errs))


def search_alpha(
    calib_x: np.ndarray,
    w: np.ndarray,
    act_absmax: np.ndarray,
    rotate: RotationMatrix | None = None,
    grid=DEFAULT_ALPHA_GRID,
    w_bits: int = 4,
    a_bits: int = 8,
    row_groups: np.ndarray | None = None,
) -> tuple[float, BalanceTransform]:
    """Grid-search ``alpha`` by post-balance fake-quant output MSE.

    ``act_absmax`` is the per-channel statistic the mask is fitted to; for
    scaling-only balance it comes from all calibration data, for
    static-dynamic balance from the static (time-embedding-free) part.
    ``row_groups`` switches to the per-group relative MSE of
    :func:`balanced_output_mse`. Ties keep the smallest alpha.
    """
    w = as_matrix(w, "W")
    w_absmax = np.abs(w).max(axis=0)
    best = None
    for alpha in grid:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mask = compute_scaling_mask(act_absmax, w_absmax, alpha)
        t = BalanceTransform(mask, rotate)
        err = balanced_output_mse(calib_x, w, t, w_bits, a_bits, row_groups)
        if best is None or err < best[0]:
            best = (err, alpha, t)
    return best[1], best[2]


def static_dynamic_balance(
    static_base,
    w,
    alpha: float | None = None,
    seed: int = 0,
    calib_x=None,
    randomize: bool = True,
    w_bits: int = 4,
    a_bits: int = 8,
) -> BalanceTransform:
    """Scaling fitted to the static activation part, then a seeded Hadamard rotation.

    ``static_base`` is the calibration activation with the time-embedding
    contribution removed from the feature modulation. With ``alpha=None`` the
    exponent is grid-searched on ``calib_x`` (defaults to ``static_base``).
    """
    base = as_matrix(static_base, "static_base")
    w = as_matrix(w, "W")
    if base.shape[1] != w.shape[1]:
        raise BalanceError(f"static base has {base.shape[1]} channels, W has {w.shape[1]}")
    rot = hadamard_matrix(w.shape[1], randomize=randomize, seed=seed)
    act_absmax = np.abs(base).max(axis=0)
    if alpha is None:
        calib = base if calib_x is None else as_matrix(calib_x, "calib_x")
        return search_alpha(calib, w, act_absmax, rot, w_bits=w_bits, a_bits=a_bits)[1]
    mask = compute_scaling_mask(act_absmax, np.abs(w).max(axis=0), alpha)
    return BalanceTransform(mask, rot)
