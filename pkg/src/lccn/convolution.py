"""Convolution three ways: direct summation, im2col + GEMM, and row-masked
im2col + GEMM that skips the work for output positions predicted to be zero.

The matrix formulation flattens each receptive field into one row of a
patch matrix ``U*`` of shape ``(X*Y, k*k*C)`` (row ``x*Y + y`` belongs to
output position ``(x, y)``, column ``(i*k + j)*C + c`` to patch element
``(i, j, c)``) and multiplies it by the reshaped weights ``W*`` of shape
``(k*k*C, T)``.  Because every row corresponds to one output position, rows
whose outputs are known to be zero can simply be deleted before the
multiplication, shrinking it to ``S' x k*k*C`` where ``S'`` is the number of
surviving positions.

The in-repo GEMM accumulates every output element strictly in ascending-k
order.  That makes the dense and the row-masked paths bit-identical on the
surviving rows and makes results independent of how output rows are
partitioned across workers; it trades peak speed for reproducibility.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import DTYPE, Tensor, _as_array


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution: square kernel k, stride, zero padding,
    channel counts and the input spatial extents it will be applied to."""

    k: int
    stride: int
    pad: int
    in_channels: int
    out_channels: int
    in_x: int
    in_y: int

    def __post_init__(self):
        if self.k < 1 or self.stride < 1 or self.pad < 0:
            raise ShapeError(f"invalid conv geometry: {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError(f"channel counts must be >= 1: {self}")
        if self.in_x < 1 or self.in_y < 1:
            raise ShapeError(f"input extents must be >= 1: {self}")
        if self.out_x < 1 or self.out_y < 1:
            raise ShapeError(f"derived output extent < 1: {self}")

    @property
    def out_x(self) -> int:
        return (self.in_x + 2 * self.pad - self.k) // self.stride + 1

    @property
    def out_y(self) -> int:
        return (self.in_y + 2 * self.pad - self.k) // self.stride + 1

    @property
    def out_positions(self) -> int:
        return self.out_x * self.out_y

    @property
    def patch_size(self) -> int:
        return self.k * self.k * self.in_channels

    @property
    def macs_per_position(self) -> int:
        """Multiply-accumulates to produce all T channels of one output cell row."""
        return self.patch_size * self.out_channels

    @property
    def dense_macs(self) -> int:
        return self.out_positions * self.macs_per_position

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.k, self.k, self.in_channels)

    @property
    def weight_count(self) -> int:
        return self.out_channels * self.patch_size

    def in_shape(self) -> tuple:
        return (self.in_x, self.in_y, self.in_channels)

    def out_shape(self) -> tuple:
        return (self.out_x, self.out_y, self.out_channels)


@dataclass
class Im2colMatrix:
    """Patch matrix U*: one row per output spatial position."""

    rows: int
    cols: int
    data: np.ndarray


@dataclass
class RowMask:
    """Boolean keep-vector over the X*Y output positions of a ConvSpec."""

    keep: np.ndarray

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool).reshape(-1)

    @property
    def kept_count(self) -> int:
        return int(np.count_nonzero(self.keep))

    def __len__(self) -> int:
        return self.keep.size


@dataclass
class ConvCounters:
    """Instrumentation: exact MAC accounting and patch-row access counts."""

    performed_macs: int = 0
    skipped_macs: int = 0
    gathered_rows: int = 0

    def add(self, performed: int, skipped: int, gathered: int):
        self.performed_macs += performed
        self.skipped_macs += skipped
        self.gathered_rows += gathered


# Patch-gather indices are pure functions of the spec; cache them.
_INDEX_CACHE: dict = {}
_INDEX_LOCK = threading.Lock()


def _col_indices(spec: ConvSpec) -> np.ndarray:
    """(X*Y, k*k*C) int array of flat offsets into the zero-padded input."""
    cached = _INDEX_CACHE.get(spec)
    if cached is not None:
        return cached
    with _INDEX_LOCK:
        cached = _INDEX_CACHE.get(spec)
        if cached is not None:
            return cached
        py = spec.in_y + 2 * spec.pad
        c = spec.in_channels
        ox = np.arange(spec.out_x) * spec.stride
        oy = np.arange(spec.out_y) * spec.stride
        ki = np.arange(spec.k)
        kj = np.arange(spec.k)
        cc = np.arange(c)
        # rows ordered x*Y + y; columns ordered (i*k + j)*C + c
        xs = ox[:, None, None, None, None] + ki[None, None, :, None, None]
        ys = oy[None, :, None, None, None] + kj[None, None, None, :, None]
        idx = (xs * py + ys) * c + cc[None, None, None, None, :]
        idx = idx.reshape(spec.out_positions, spec.patch_size)
        idx = np.ascontiguousarray(idx)
        idx.flags.writeable = False
        _INDEX_CACHE[spec] = idx
        return idx


def _pad_input(arr: np.ndarray, spec: ConvSpec) -> np.ndarray:
    if arr.shape != spec.in_shape():
        raise ShapeError(f"input shape {arr.shape} does not match spec {spec.in_shape()}")
    if spec.pad == 0:
        return arr
    p = spec.pad
    padded = np.zeros(
        (spec.in_x + 2 * p, spec.in_y + 2 * p, spec.in_channels), dtype=arr.dtype
    )
    padded[p : p + spec.in_x, p : p + spec.in_y, :] = arr
    return padded


def _weights_matrix(w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Reshape (T, k, k, C) weights into the (k*k*C, T) multiplicand W*."""
    if w.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {w.shape} does not match spec {spec.weight_shape}")
    return np.ascontiguousarray(w.reshape(spec.out_channels, -1).T)


def im2col_array(arr: np.ndarray, spec: ConvSpec) -> np.ndarray:
    padded = _pad_input(arr, spec)
    return padded.reshape(-1)[_col_indices(spec)]


def im2col_batch_array(xb: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Patch matrix for a whole batch, stacked sample-major: (N*X*Y, k*k*C)."""
    n = xb.shape[0]
    if xb.shape[1:] != spec.in_shape():
        raise ShapeError(f"batch shape {xb.shape} does not match spec {spec.in_shape()}")
    p = spec.pad
    if p == 0:
        padded = xb
    else:
        padded = np.zeros(
            (n, spec.in_x + 2 * p, spec.in_y + 2 * p, spec.in_channels), dtype=xb.dtype
        )
        padded[:, p : p + spec.in_x, p : p + spec.in_y, :] = xb
    flat = padded.reshape(n, -1)
    return flat[:, _col_indices(spec)].reshape(n * spec.out_positions, spec.patch_size)


def conv_input_grad_batch_array(dout_b: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Batched input gradient: one scatter-add over all samples at once."""
    n = dout_b.shape[0]
    dmat = dout_b.reshape(n * spec.out_positions, spec.out_channels)
    dcols = dmat @ _weights_matrix(w, spec).T
    p = spec.pad
    px, py = spec.in_x + 2 * p, spec.in_y + 2 * p
    padded_size = px * py * spec.in_channels
    idx = _col_indices(spec).reshape(-1)
    big_idx = (idx[None, :] + (np.arange(n) * padded_size)[:, None]).reshape(-1)
    flat = np.bincount(
        big_idx,
        weights=dcols.reshape(-1).astype(np.float64, copy=False),
        minlength=n * padded_size,
    )
    padded = flat.reshape(n, px, py, spec.in_channels)
    out = padded[:, p : p + spec.in_x, p : p + spec.in_y, :]
    return out.astype(dout_b.dtype, copy=False)


def im2col(input: Tensor, spec: ConvSpec) -> Im2colMatrix:
    """Flatten every receptive field of the input into one matrix row."""
    data = im2col_array(_as_array(input), spec)
    return Im2colMatrix(rows=spec.out_positions, cols=spec.patch_size, data=data)


def gemm(a, b, workers: int = 1) -> np.ndarray:
    """Matrix product with a fixed, sequential accumulation order.

    Every output element is accumulated over k = 0..K-1 in that order with
    one rounding per multiply and one per add, so results are bit-identical
    to a naive triple loop and independent of the worker count.  Output rows
    may be partitioned across threads; each partition owns a disjoint slice
    of the result.
    """
    a = _as_array(a)
    b = _as_array(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"gemm needs rank-2 operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"gemm inner dimensions disagree: {a.shape} x {b.shape}")
    m, kdim = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.result_type(a.dtype, b.dtype))
    if m == 0:
        return out

    def accumulate(lo: int, hi: int):
        sub_a = a[lo:hi]
        sub_out = out[lo:hi]
        tmp = np.empty_like(sub_out)
        for kk in range(kdim):
            np.multiply(sub_a[:, kk : kk + 1], b[kk : kk + 1, :], out=tmp)
            sub_out += tmp

    if workers <= 1 or m < 2 * workers:
        accumulate(0, m)
    else:
        bounds = np.linspace(0, m, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futs = [
                pool.submit(accumulate, bounds[i], bounds[i + 1])
                for i in range(workers)
                if bounds[i] < bounds[i + 1]
            ]
            for f in futs:
                f.result()
    return out


def conv_direct_array(arr: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    padded = _pad_input(arr, spec)
    if w.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {w.shape} does not match spec {spec.weight_shape}")
    wf = w.reshape(spec.out_channels, -1)
    out = np.empty(spec.out_shape(), dtype=np.result_type(arr.dtype, w.dtype))
    for ox in range(spec.out_x):
        x0 = ox * spec.stride
        for oy in range(spec.out_y):
            y0 = oy * spec.stride
            patch = padded[x0 : x0 + spec.k, y0 : y0 + spec.k, :].reshape(-1)
            out[ox, oy, :] = (wf * patch).sum(axis=1)
    return out


def conv_direct(input: Tensor, weights: Tensor, spec: ConvSpec) -> Tensor:
    """Reference convolution: evaluate the defining sum at each output cell.

    No bias term; zero padding.  Output cell (x, y, t) is the sum over the
    k x k x C receptive field of weight times input.
    """
    return Tensor._wrap(conv_direct_array(_as_array(input), _as_array(weights), spec))


def conv_gemm_array(
    arr: np.ndarray,
    w: np.ndarray,
    spec: ConvSpec,
    workers: int = 1,
    counters: ConvCounters | None = None,
) -> np.ndarray:
    cols = im2col_array(arr, spec)
    out = gemm(cols, _weights_matrix(w, spec), workers=workers)
    if counters is not None:
        counters.add(spec.dense_macs, 0, spec.out_positions)
    return out.reshape(spec.out_shape())


def conv_gemm(
    input: Tensor,
    weights: Tensor,
    spec: ConvSpec,
    workers: int = 1,
    counters: ConvCounters | None = None,
) -> Tensor:
    """Convolution as im2col followed by the deterministic GEMM."""
    return Tensor._wrap(
        conv_gemm_array(_as_array(input), _as_array(weights), spec, workers, counters)
    )


def conv_gemm_masked_array(
    arr: np.ndarray,
    w: np.ndarray,
    spec: ConvSpec,
    keep: np.ndarray,
    workers: int = 1,
    counters: ConvCounters | None = None,
) -> np.ndarray:
    keep = np.asarray(keep, dtype=bool).reshape(-1)
    if keep.size != spec.out_positions:
        raise ShapeError(
            f"mask length {keep.size} does not match {spec.out_positions} output positions"
        )
    padded_flat = _pad_input(arr, spec).reshape(-1)
    kept = np.flatnonzero(keep)
    # Gather only the surviving rows of U*; skipped patches are never read.
    sub = gemm(padded_flat[_col_indices(spec)[kept]], _weights_matrix(w, spec), workers=workers)
    out = np.zeros((spec.out_positions, spec.out_channels), dtype=sub.dtype)
    out[kept] = sub
    if counters is not None:
        performed = int(kept.size) * spec.macs_per_position
        counters.add(performed, spec.dense_macs - performed, int(kept.size))
    return out.reshape(spec.out_shape())


def conv_gemm_masked(
    input: Tensor,
    weights: Tensor,
    spec: ConvSpec,
    mask: RowMask,
    workers: int = 1,
    counters: ConvCounters | None = None,
) -> Tensor:
    """Row-reduced convolution: compute only the output positions the mask
    keeps; masked-out positions are exactly 0.0 in the result."""
    if len(mask) != spec.out_positions:
        raise ShapeError(
            f"mask length {len(mask)} does not match {spec.out_positions} output positions"
        )
    return Tensor._wrap(
        conv_gemm_masked_array(
            _as_array(input), _as_array(weights), spec, mask.keep, workers, counters
        )
    )


def conv_blas_array(arr: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Fast convolution via the platform matmul.

    Used on training paths where run-to-run determinism suffices; the
    engine's reproducibility contract (bit-equal dense/masked results for any
    worker count) applies to the gemm-based paths above, not to this one.
    """
    cols = im2col_array(arr, spec)
    return (cols @ _weights_matrix(w, spec)).reshape(spec.out_shape())


def conv_input_grad_array(dout: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Gradient of the convolution output w.r.t. its input (scatter of dU*)."""
    dmat = dout.reshape(spec.out_positions, spec.out_channels)
    dcols = dmat @ _weights_matrix(w, spec).T
    p = spec.pad
    px, py = spec.in_x + 2 * p, spec.in_y + 2 * p
    flat = np.bincount(
        _col_indices(spec).reshape(-1),
        weights=dcols.reshape(-1).astype(np.float64, copy=False),
        minlength=px * py * spec.in_channels,
    )
    padded = flat.reshape(px, py, spec.in_channels)
    return padded[p : p + spec.in_x, p : p + spec.in_y, :].astype(dout.dtype, copy=False)


def conv_weight_grad_array(arr: np.ndarray, dout: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Gradient of the convolution output w.r.t. the weights."""
    cols = im2col_array(arr, spec)
    dmat = dout.reshape(spec.out_positions, spec.out_channels)
    dwmat = cols.T @ dmat
    return np.ascontiguousarray(dwmat.T).reshape(spec.weight_shape)
