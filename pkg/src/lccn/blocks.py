"""Acceleration block: a convolution paired with a low-cost collaborative
convolution whose activated output predicts the zero cells of the main
output and gates them off.

Two collaborative kernel forms exist:

* ``SHARED`` - a ``k x k x C x 1`` filter (same k as the paired convolution)
  whose single output map is logically broadcast over all T output channels.
  Every channel therefore shares one zero pattern, which is what makes row
  skipping in the matrix formulation possible.
* ``POINTWISE`` - a ``1 x 1 x C x T`` filter with an independent zero
  pattern per channel.  Per-channel skipping does not map onto a single
  matrix-matrix product, so this form is executed densely and its skipped
  work is only *accounted*, never elided.

The collaborative map V' is produced by conv -> (optional batch norm) ->
ReLU; the final block output is the element-wise product of V' with the
paired convolution's output V, with zeros of V' forcing zeros of the result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .convolution import (
    ConvCounters,
    ConvSpec,
    RowMask,
    conv_blas_array,
    conv_gemm_array,
    conv_gemm_masked_array,
)
from .errors import ShapeError
from .tensor import DTYPE, Tensor, _as_array, sparsity

SHARED = "shared"
POINTWISE = "pointwise"
FORMS = (SHARED, POINTWISE)

BEF = "bef"
AFT = "aft"
STRATEGIES = (BEF, AFT)


@dataclass
class BatchNormParams:
    """Per-channel batch normalization parameters and running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=DTYPE).reshape(-1))
        n = self.gamma.size
        if any(getattr(self, f).size != n for f in ("beta", "running_mean", "running_var")):
            raise ShapeError("batch norm parameter lengths disagree")
        if self.eps <= 0:
            raise ShapeError("batch norm eps must be positive")
        if np.any(self.running_var < 0):
            raise ShapeError("running variance must be non-negative")

    @property
    def channels(self) -> int:
        return self.gamma.size

    @classmethod
    def identity(cls, channels: int, eps: float = 1e-5, momentum: float = 0.9):
        return cls(
            gamma=np.ones(channels, dtype=DTYPE),
            beta=np.zeros(channels, dtype=DTYPE),
            running_mean=np.zeros(channels, dtype=DTYPE),
            running_var=np.ones(channels, dtype=DTYPE),
            eps=eps,
            momentum=momentum,
        )


def bn_infer_array(x: np.ndarray, bn: BatchNormParams) -> np.ndarray:
    """Affine transform from the running statistics (inference mode)."""
    scale = bn.gamma / np.sqrt(bn.running_var + np.asarray(bn.eps, dtype=bn.running_var.dtype))
    return x * scale + (bn.beta - bn.running_mean * scale)


def bn_train_array(x: np.ndarray, bn: BatchNormParams, update_running: bool = True):
    """Normalize with statistics of the current batch; returns (y, cache).

    Statistics are taken over every axis except the last (channel) axis.
    Running statistics follow the common convention: biased variance for
    normalization, unbiased for the running estimate, blended with
    ``momentum`` weight on the old value.
    """
    axes = tuple(range(x.ndim - 1))
    m = x.size // x.shape[-1]
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + np.asarray(bn.eps, dtype=var.dtype))
    xhat = (x - mean) * inv_std
    y = bn.gamma * xhat + bn.beta
    if update_running:
        unbiased = var * (m / (m - 1)) if m > 1 else var
        bn.running_mean[:] = bn.momentum * bn.running_mean + (1 - bn.momentum) * mean
        bn.running_var[:] = bn.momentum * bn.running_var + (1 - bn.momentum) * unbiased
    cache = (xhat, inv_std, bn.gamma.astype(x.dtype, copy=False), m, axes)
    return y, cache


def bn_backward_array(dout: np.ndarray, cache):
    """Gradients through train-mode batch normalization."""
    xhat, inv_std, gamma, m, axes = cache
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


@dataclass
class AccelBlock:
    """One convolution plus its collaborative layer.

    ``lccl_bn is None`` reproduces the ReLU-only activation variant; the
    collaborative map's spatial shape always equals the paired convolution's
    output shape.
    """

    spec: ConvSpec
    weights: np.ndarray
    lccl_form: str
    lccl_spec: ConvSpec
    lccl_weights: np.ndarray
    lccl_bn: BatchNormParams | None

    def __post_init__(self):
        if self.lccl_form not in FORMS:
            raise ShapeError(f"unknown collaborative kernel form {self.lccl_form!r}")
        if self.weights.shape != self.spec.weight_shape:
            raise ShapeError("block weights do not match spec")
        if self.lccl_weights.shape != self.lccl_spec.weight_shape:
            raise ShapeError("collaborative weights do not match their spec")
        if (self.lccl_spec.out_x, self.lccl_spec.out_y) != (self.spec.out_x, self.spec.out_y):
            raise ShapeError("collaborative map must match the paired output spatially")
        if self.lccl_bn is not None and self.lccl_bn.channels != self.lccl_spec.out_channels:
            raise ShapeError("collaborative batch norm channel count mismatch")

    @property
    def use_bn_in_lccl(self) -> bool:
        return self.lccl_bn is not None

    @property
    def lccl_macs(self) -> int:
        return self.lccl_spec.dense_macs


def make_lccl_spec(spec: ConvSpec, form: str) -> ConvSpec:
    """Derive the collaborative-layer geometry for a paired convolution."""
    if form == SHARED:
        return ConvSpec(
            k=spec.k,
            stride=spec.stride,
            pad=spec.pad,
            in_channels=spec.in_channels,
            out_channels=1,
            in_x=spec.in_x,
            in_y=spec.in_y,
        )
    if form == POINTWISE:
        lccl = ConvSpec(
            k=1,
            stride=spec.stride,
            pad=0,
            in_channels=spec.in_channels,
            out_channels=spec.out_channels,
            in_x=spec.in_x,
            in_y=spec.in_y,
        )
        if (lccl.out_x, lccl.out_y) != (spec.out_x, spec.out_y):
            raise ShapeError(
                "pointwise collaborative layer cannot match output extents "
                f"{spec.out_shape()} for geometry {spec}"
            )
        return lccl
    raise ShapeError(f"unknown collaborative kernel form {form!r}")


def make_accel_block(
    spec: ConvSpec,
    weights: np.ndarray | None = None,
    form: str = SHARED,
    use_bn: bool = True,
    lccl_weights: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    bn_eps: float = 1e-5,
    bn_momentum: float = 0.9,
) -> AccelBlock:
    """Build an AccelBlock, He-initializing any weights not supplied."""
    rng = rng or np.random.default_rng(0)
    lccl_spec = make_lccl_spec(spec, form)
    if weights is None:
        weights = he_init(spec, rng)
    if lccl_weights is None:
        lccl_weights = he_init(lccl_spec, rng)
    bn = (
        BatchNormParams.identity(lccl_spec.out_channels, eps=bn_eps, momentum=bn_momentum)
        if use_bn
        else None
    )
    return AccelBlock(
        spec=spec,
        weights=np.asarray(weights, dtype=DTYPE),
        lccl_form=form,
        lccl_spec=lccl_spec,
        lccl_weights=np.asarray(lccl_weights, dtype=DTYPE),
        lccl_bn=bn,
    )


def he_init(spec: ConvSpec, rng: np.random.Generator) -> np.ndarray:
    std = np.sqrt(2.0 / spec.patch_size)
    return (rng.standard_normal(spec.weight_shape) * std).astype(DTYPE)


def lccl_forward_array(
    x: np.ndarray,
    block: AccelBlock,
    mode: str = "infer",
    update_running: bool = True,
    fast: bool = False,
):
    """Collaborative map V' = ReLU((BN of) conv(x, W')); returns (V', cache)."""
    conv = conv_blas_array if fast else conv_gemm_array
    z = conv(x, block.lccl_weights, block.lccl_spec)
    if block.lccl_bn is not None:
        if mode == "train":
            pre, bn_cache = bn_train_array(z, block.lccl_bn, update_running=update_running)
        else:
            pre, bn_cache = bn_infer_array(z, block.lccl_bn), None
    else:
        pre, bn_cache = z, None
    vp = np.maximum(pre, 0)
    return vp, (z, pre, bn_cache)


def lccl_forward(input: Tensor, block: AccelBlock, mode: str = "infer") -> Tensor:
    vp, _ = lccl_forward_array(_as_array(input), block, mode=mode)
    return Tensor._wrap(vp)


def gate_array(v_prime: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Element-wise gate: 0 where V' is 0, else V' * V.

    A single-channel V' broadcasts across all channels of V; otherwise the
    shapes must match exactly.
    """
    if v_prime.shape != v.shape:
        if not (
            v_prime.ndim == v.ndim
            and v_prime.shape[:-1] == v.shape[:-1]
            and v_prime.shape[-1] == 1
        ):
            raise ShapeError(f"gate shape mismatch: {v_prime.shape} against {v.shape}")
    zero = np.asarray(0, dtype=np.result_type(v_prime.dtype, v.dtype))
    return np.where(v_prime == 0, zero, v_prime * v)


def gate(v_prime: Tensor, v: Tensor) -> Tensor:
    return Tensor._wrap(gate_array(_as_array(v_prime), _as_array(v)))


def row_mask_from_map(v_prime: np.ndarray) -> RowMask:
    """Keep-rows for the shared form: positions where the single-channel map
    is non-zero.  The zero pattern is the same for every output channel."""
    if v_prime.shape[-1] != 1:
        raise ShapeError("row masks require a single-channel collaborative map")
    return RowMask(keep=(v_prime[..., 0] != 0).reshape(-1))


@dataclass
class BlockStats:
    """Per-call record of sparsity and exact MAC accounting for one block."""

    form: str
    sparsity: float
    kept: float
    dense_macs: int
    lccl_macs: int
    performed_macs: int
    skipped_macs: int
    theoretical_speedup: float


def _theoretical_speedup(spec: ConvSpec, form: str, kept: float) -> float:
    if form == SHARED:
        return 1.0 - (1.0 / spec.in_channels + kept)
    return 1.0 - (1.0 / (spec.k * spec.k) + kept)


def accel_forward_array(
    x: np.ndarray,
    block: AccelBlock,
    mode: str = "infer",
    lccl_input: np.ndarray | None = None,
    accel_mode: str | None = None,
    workers: int = 1,
    update_running: bool = True,
    forced_v_prime: np.ndarray | None = None,
    fast: bool = False,
):
    """Run one acceleration block; returns (V*, BlockStats).

    ``accel_mode`` selects the execution route: ``"skip"`` uses the
    row-masked multiplication (shared form) or dense-with-accounting
    (pointwise form); ``"gate"`` computes the paired convolution densely and
    gates afterwards, which is the reference route and the one used in
    training.  ``lccl_input`` defaults to the same tensor the paired
    convolution reads (the after-activation connection).
    ``forced_v_prime`` substitutes a synthetic collaborative map after the
    real one is computed; benchmarks use it to pin the kept fraction.
    """
    if accel_mode is None:
        accel_mode = "gate" if mode == "train" else "skip"
    if accel_mode not in ("skip", "gate"):
        raise ShapeError(f"unknown accel mode {accel_mode!r}")
    if lccl_input is None:
        lccl_input = x
    vp, _ = lccl_forward_array(
        lccl_input, block, mode=mode, update_running=update_running, fast=fast
    )
    if forced_v_prime is not None:
        vp = forced_v_prime
    spec = block.spec
    dense = spec.dense_macs
    lmacs = block.lccl_macs

    if accel_mode == "skip" and block.lccl_form == SHARED:
        mask = row_mask_from_map(vp)
        counters = ConvCounters()
        v = conv_gemm_masked_array(x, block.weights, spec, mask.keep, workers, counters)
        performed = counters.performed_macs
        skipped = counters.skipped_macs
    else:
        if fast:
            v = conv_blas_array(x, block.weights, spec)
        else:
            v = conv_gemm_array(x, block.weights, spec, workers)
        if accel_mode == "skip":
            # pointwise form: dense compute, per-channel skip accounting only
            kept_cells = int(np.count_nonzero(vp))
            performed = kept_cells * spec.patch_size
            skipped = dense - performed
        else:
            performed, skipped = dense, 0

    v_star = gate_array(vp, v)
    r = sparsity(vp)
    kept = 1.0 - r
    stats = BlockStats(
        form=block.lccl_form,
        sparsity=r,
        kept=kept,
        dense_macs=dense,
        lccl_macs=lmacs,
        performed_macs=performed,
        skipped_macs=skipped,
        theoretical_speedup=_theoretical_speedup(spec, block.lccl_form, kept),
    )
    return v_star, stats


def accel_forward(
    input: Tensor,
    block: AccelBlock,
    mode: str = "infer",
    lccl_input: Tensor | None = None,
    accel_mode: str | None = None,
    workers: int = 1,
):
    v_star, stats = accel_forward_array(
        _as_array(input),
        block,
        mode=mode,
        lccl_input=None if lccl_input is None else _as_array(lccl_input),
        accel_mode=accel_mode,
        workers=workers,
    )
    return Tensor._wrap(v_star), stats


def smooth_l1l2(x, mu: float, rho: float) -> float:
    """mu * ||x||_2 + rho * ||x||_1, the sparsity penalty for collaborative maps."""
    if mu < 0 or rho < 0:
        raise ValueError("penalty coefficients must be non-negative")
    xv = _as_array(x).astype(np.float64, copy=False)
    return float(mu * np.sqrt(np.sum(xv * xv)) + rho * np.sum(np.abs(xv)))


def smooth_l1l2_grad(x, mu: float, rho: float) -> np.ndarray:
    """Gradient of smooth_l1l2 with the convention grad = 0 at x = 0 and a
    zero L2 term when the whole vector is zero."""
    if mu < 0 or rho < 0:
        raise ValueError("penalty coefficients must be non-negative")
    xv = _as_array(x)
    norm = float(np.sqrt(np.sum(xv.astype(np.float64) ** 2)))
    l2 = np.zeros_like(xv) if norm == 0 else (mu / norm) * xv
    return (l2 + rho * np.sign(xv)).astype(xv.dtype, copy=False)
