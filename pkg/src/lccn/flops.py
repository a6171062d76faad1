"""Theoretical FLOP formulas, exact MAC accounting, and the comparison of
theoretical against measured wall-clock speedup.

One multiply-accumulate counts as one FLOP throughout; that convention is
what makes the standard large-image architectures land on their familiar
aggregate totals (about 1.8e9 for the 18-layer network).  Batch norm, ReLU,
pooling and the gating product are excluded from FLOP totals and surfaced
separately as an "unaccounted elementwise ops" estimate.

The per-layer cost formulas use the *kept* fraction (share of output cells
actually computed).  The complementary quantity, sparsity, is the share of
exact zeros in the collaborative map; reports carry both so neither
convention has to be guessed.

    dense convolution:        X*Y*T*k^2*C
    pointwise collaborative:  X*Y*T*C*(1 + k^2*kept),  speedup 1 - (1/k^2 + kept)
    shared collaborative:     X*Y*T*k^2*(1 + C*kept),  speedup 1 - (1/C  + kept)
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .blocks import POINTWISE, SHARED, AccelBlock, accel_forward_array
from .convolution import ConvSpec, conv_gemm_array
from .errors import ConfigError
from .graph import (
    AccelLayer,
    Graph,
    RunStats,
    _forward_arrays,
    forced_v_prime_map,
)
from .tensor import DTYPE, _as_array


def dense_flops(spec: ConvSpec) -> int:
    """Cost of the plain convolution: X*Y*T*k^2*C multiply-accumulates."""
    return spec.out_positions * spec.out_channels * spec.k * spec.k * spec.in_channels


def lccl_flops(spec: ConvSpec, form: str, kept: float) -> float:
    """Cost of the accelerated layer (collaborative overhead plus the kept
    portion of the original convolution) at a given kept fraction."""
    if not 0.0 <= kept <= 1.0:
        raise ConfigError(f"kept fraction must be in [0, 1], got {kept}")
    xy = spec.out_positions
    t = spec.out_channels
    c = spec.in_channels
    k2 = spec.k * spec.k
    if form == SHARED:
        return xy * t * k2 * (1.0 + c * kept)
    if form == POINTWISE:
        return xy * t * c * (1.0 + k2 * kept)
    raise ConfigError(f"unknown collaborative kernel form {form!r}")


def speedup_ratio(spec: ConvSpec, form: str, kept: float) -> float:
    """Theoretical fraction of the dense cost saved; negative when the
    collaborative overhead exceeds the savings (never clamped)."""
    if not 0.0 <= kept <= 1.0:
        raise ConfigError(f"kept fraction must be in [0, 1], got {kept}")
    if form == SHARED:
        return 1.0 - (1.0 / spec.in_channels + kept)
    if form == POINTWISE:
        return 1.0 - (1.0 / (spec.k * spec.k) + kept)
    raise ConfigError(f"unknown collaborative kernel form {form!r}")


def speedup_ratio_basic(k: int, k_prime: int, kept: float) -> float:
    """Generic form for a k' x k' collaborative kernel next to a k x k one."""
    return 1.0 - ((k_prime * k_prime) / (k * k) + kept)


def kept_from_sparsity(sparsity: float) -> float:
    return 1.0 - sparsity


# ---------------------------------------------------------------------------
# whole-graph accounting


def _graph_conv_entries(graph: Graph):
    """(name, spec, form-or-None) for every MAC-counted layer."""
    yield graph.stem.conv.name, graph.stem.conv.spec, None
    for unit in graph.units:
        for conv in unit.convs:
            if isinstance(conv, AccelLayer):
                yield conv.name, conv.spec, conv.block.lccl_form
            else:
                yield conv.name, conv.spec, None
        if unit.projection is not None:
            yield unit.projection.name, unit.projection.spec, None


def graph_dense_flops(graph: Graph) -> int:
    """Dense MAC total of the unaccelerated network (convs plus classifier)."""
    total = sum(dense_flops(spec) for _, spec, _ in _graph_conv_entries(graph))
    return total + graph.classifier.w.size


def graph_theoretical_flops(graph: Graph, kept: float) -> float:
    """LCCN MAC total with a uniform kept fraction on accelerated layers."""
    total = float(graph.classifier.w.size)
    for _, spec, form in _graph_conv_entries(graph):
        total += lccl_flops(spec, form, kept) if form else dense_flops(spec)
    return total


def graph_theoretical_speedup(graph: Graph, kept: float) -> float:
    return 1.0 - graph_theoretical_flops(graph, kept) / graph_dense_flops(graph)


def uniform_kept_for_target(graph: Graph, target: float, tol: float = 1e-9) -> float:
    """Uniform kept fraction at which the whole-graph theoretical speedup
    hits the target; bisection over [0, 1] (speedup decreases in kept)."""
    lo, hi = 0.0, 1.0
    if graph_theoretical_speedup(graph, lo) < target:
        raise ConfigError(f"target speedup {target} unreachable even at kept=0")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if graph_theoretical_speedup(graph, mid) >= target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def unaccounted_elementwise_ops(graph: Graph) -> int:
    """Static estimate of the per-image element visits the FLOP totals leave
    out: norm scale/shift, rectifications, gating products, pooling."""
    total = 0
    x, y, c = graph.stem.conv.spec.out_shape()
    if graph.stem.pool:
        total += 9 * ((x // 2 + x % 2) * (y // 2 + y % 2) * c)
        x, y = x // 2 + x % 2, y // 2 + y % 2
    for unit in graph.units:
        for conv in unit.convs:
            ix, iy, ic = conv.spec.in_shape()
            total += 3 * ix * iy * ic  # pre-norm (2 ops) + rectify
            if isinstance(conv, AccelLayer):
                ox, oy, oc = conv.spec.out_shape()
                total += ox * oy * oc  # gate product
        ox, oy, oc = unit.convs[-1].spec.out_shape()
        total += ox * oy * oc  # shortcut add
    ox, oy, oc = graph.units[-1].convs[-1].spec.out_shape() if graph.units else (x, y, c)
    total += 4 * ox * oy * oc  # head norm + rectify + pool
    return total


# ---------------------------------------------------------------------------
# reports

CSV_COLUMNS = [
    "layer",
    "form",
    "sparsity",
    "kept",
    "dense_flops",
    "lccl_flops",
    "theoretical_speedup",
    "performed_macs",
    "skipped_macs",
    "t_dense_ms",
    "t_masked_ms",
    "realistic_speedup",
]


@dataclass
class LayerRow:
    layer: str
    form: str
    sparsity: float
    kept: float
    dense_flops: int
    lccl_flops: float
    theoretical_speedup: float
    performed_macs: int
    skipped_macs: int
    t_dense_ms: float = float("nan")
    t_masked_ms: float = float("nan")
    realistic_speedup: float = float("nan")

    def as_csv_row(self) -> list:
        return [getattr(self, col) for col in CSV_COLUMNS]


@dataclass
class FlopsReport:
    rows: list
    total: LayerRow
    workers: int = 1
    repetitions: int = 0
    unaccounted_elementwise: int = 0

    def write_csv(self, target):
        """Write rows plus the aggregate line; target is a path or file."""
        if hasattr(target, "write"):
            self._write_csv(target)
        else:
            with open(target, "w", newline="") as fh:
                self._write_csv(fh)

    def _write_csv(self, fh):
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            writer.writerow(row.as_csv_row())
        writer.writerow(self.total.as_csv_row())

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        self._write_csv(buf)
        return buf.getvalue()

    def format_table(self) -> str:
        headers = CSV_COLUMNS
        lines = ["  ".join(f"{h:>14}" for h in headers)]

        def fmt(v):
            if isinstance(v, float):
                return f"{v:>14.4f}"
            return f"{str(v):>14}"

        for row in [*self.rows, self.total]:
            lines.append("  ".join(fmt(v) for v in row.as_csv_row()))
        lines.append(
            f"unaccounted elementwise ops (norm/relu/gate/pool): "
            f"{self.unaccounted_elementwise}"
        )
        lines.append(f"workers={self.workers} repetitions={self.repetitions}")
        return "\n".join(lines)


def report_rows_from_stats(masked: RunStats) -> list:
    """One LayerRow per accelerated layer of a single-sample masked run."""
    rows = []
    for rec in masked.records:
        if rec.kind != "accel":
            continue
        rows.append(
            LayerRow(
                layer=rec.name,
                form=rec.form,
                sparsity=rec.sparsity,
                kept=rec.kept,
                dense_flops=rec.dense_macs,
                lccl_flops=lccl_flops(rec.spec, rec.form, rec.kept),
                theoretical_speedup=speedup_ratio(rec.spec, rec.form, rec.kept),
                performed_macs=rec.performed_macs,
                skipped_macs=rec.skipped_macs,
            )
        )
    return rows


def _aggregate(rows, graph, masked, t_dense_ms, t_masked_ms) -> LayerRow:
    dense_total = graph_dense_flops(graph)
    accel_dense = sum(r.dense_flops for r in rows)
    accel_perf = sum(r.performed_macs for r in rows)
    lccn_total = dense_total - accel_dense + sum(r.lccl_flops for r in rows)
    kept = accel_perf / accel_dense if accel_dense else float("nan")
    realistic = 1.0 - t_masked_ms / t_dense_ms if t_dense_ms > 0 else float("nan")
    return LayerRow(
        layer="total",
        form="-",
        sparsity=1.0 - kept if accel_dense else float("nan"),
        kept=kept,
        dense_flops=dense_total,
        lccl_flops=lccn_total,
        theoretical_speedup=1.0 - lccn_total / dense_total,
        performed_macs=masked.total("performed_macs"),
        skipped_macs=masked.total("skipped_macs"),
        t_dense_ms=t_dense_ms,
        t_masked_ms=t_masked_ms,
        realistic_speedup=realistic,
    )


def compare_realistic(
    graph: Graph,
    input,
    repetitions: int = 20,
    workers: int = 1,
    force_kept: float | None = None,
    warmup: int = 3,
) -> FlopsReport:
    """Time the unaccelerated and the masked execution of the same graph and
    weights on one input; juxtaposes measured speedup with the formula value.

    The masked run pays the collaborative layers, mask construction, row
    gather and scatter; the dense run executes plain convolutions only.  Both
    use the deterministic in-repo GEMM.  Per-layer and whole-forward times
    are medians over ``repetitions`` runs after ``warmup`` discarded ones.
    """
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    x = _as_array(input).astype(DTYPE, copy=False)
    xb = x[None] if x.ndim == 3 else x
    if xb.shape[0] != 1:
        raise ConfigError("speedup comparison expects a single input")

    def run(mode):
        return _forward_arrays(
            graph, xb, mode="infer", accel_mode=mode, workers=workers,
            timing=True, force_kept=force_kept,
        )

    for _ in range(warmup):
        run("plain")
        run("skip")

    dense_ns: dict = {}
    masked_ns: dict = {}
    dense_totals, masked_totals = [], []
    masked_stats = None
    for _ in range(repetitions):
        _, st_d = run("plain")
        _, st_m = run("skip")
        masked_stats = st_m
        dense_totals.append(st_d.wall_ns_total)
        masked_totals.append(st_m.wall_ns_total)
        for rec in st_d.records:
            dense_ns.setdefault(rec.name, []).append(rec.wall_ns)
        for rec in st_m.records:
            masked_ns.setdefault(rec.name, []).append(rec.wall_ns)

    rows = report_rows_from_stats(masked_stats)
    for row in rows:
        row.t_dense_ms = statistics.median(dense_ns[row.layer]) / 1e6
        row.t_masked_ms = statistics.median(masked_ns[row.layer]) / 1e6
        if row.t_dense_ms > 0:
            row.realistic_speedup = 1.0 - row.t_masked_ms / row.t_dense_ms
    total = _aggregate(
        rows,
        graph,
        masked_stats,
        statistics.median(dense_totals) / 1e6,
        statistics.median(masked_totals) / 1e6,
    )
    return FlopsReport(
        rows=rows,
        total=total,
        workers=workers,
        repetitions=repetitions,
        unaccounted_elementwise=unaccounted_elementwise_ops(graph),
    )


def bench_block(
    block: AccelBlock,
    input,
    repetitions: int = 20,
    force_kept: float | None = None,
    workers: int = 1,
    warmup: int = 3,
) -> LayerRow:
    """Single-layer version of compare_realistic for one AccelBlock."""
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    x = _as_array(input).astype(DTYPE, copy=False)
    forced = None
    if force_kept is not None:
        forced = forced_v_prime_map(block.spec, block.lccl_form, force_kept)

    def run_masked():
        return accel_forward_array(x, block, mode="infer", accel_mode="skip",
                                   workers=workers, forced_v_prime=forced)

    def run_dense():
        return conv_gemm_array(x, block.weights, block.spec, workers)

    for _ in range(warmup):
        run_dense()
        run_masked()
    dense_ns, masked_ns = [], []
    bstats = None
    for _ in range(repetitions):
        t0 = time.perf_counter_ns()
        run_dense()
        dense_ns.append(time.perf_counter_ns() - t0)
        t0 = time.perf_counter_ns()
        _, bstats = run_masked()
        masked_ns.append(time.perf_counter_ns() - t0)

    t_dense = statistics.median(dense_ns) / 1e6
    t_masked = statistics.median(masked_ns) / 1e6
    return LayerRow(
        layer="block",
        form=block.lccl_form,
        sparsity=bstats.sparsity,
        kept=bstats.kept,
        dense_flops=block.spec.dense_macs,
        lccl_flops=lccl_flops(block.spec, block.lccl_form, bstats.kept),
        theoretical_speedup=speedup_ratio(block.spec, block.lccl_form, bstats.kept),
        performed_macs=bstats.performed_macs,
        skipped_macs=bstats.skipped_macs,
        t_dense_ms=t_dense,
        t_masked_ms=t_masked,
        realistic_speedup=1.0 - t_masked / t_dense,
    )
