"""Pre-activation residual network graphs whose convolutions can carry
acceleration blocks, plus the forward executor.

A graph is an ordered chain: input stem, residual units, a final
norm + ReLU + global average pool, and a linear classifier.  Each residual
unit holds one pre-norm per convolution (norm -> ReLU -> conv ordering) and
an identity or 1x1-projection shortcut.  Convolutions inside units are
either plain layers or acceleration blocks; the block's collaborative layer
reads the tensor before the pre-norm (``bef``) or the activated tensor the
paired convolution itself consumes (``aft``).

The executor supports three routes for acceleration blocks: ``skip``
(row-masked multiplication, the inference default), ``gate`` (dense compute
then gate, the reference route and the training default) and ``plain``
(original convolution only, the unaccelerated baseline used for timing).
When an intermediate gated output inside a unit is entirely zero the
executor bypasses the remaining convolutions of that unit and emits the
shortcut value directly; the bypassed layers record zero performed work.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .blocks import (
    AFT,
    BEF,
    SHARED,
    STRATEGIES,
    AccelBlock,
    BatchNormParams,
    accel_forward_array,
    bn_infer_array,
    bn_train_array,
    gate_array,
    he_init,
    make_accel_block,
)
from .convolution import (
    ConvCounters,
    ConvSpec,
    _col_indices,
    _weights_matrix,
    conv_blas_array,
    conv_gemm_array,
    conv_gemm_masked_array,
    im2col_batch_array,
)
from .errors import ConfigError, ShapeError
from .tensor import DTYPE, Tensor, _as_array, sparsity


# ---------------------------------------------------------------------------
# nodes


class ConvLayer:
    def __init__(self, name: str, spec: ConvSpec, w: np.ndarray):
        if w.shape != spec.weight_shape:
            raise ShapeError(f"{name}: weight shape {w.shape} != {spec.weight_shape}")
        self.name = name
        self.spec = spec
        self.w = np.asarray(w, dtype=DTYPE)


class AccelLayer:
    def __init__(self, name: str, block: AccelBlock, strategy: str = AFT):
        if strategy not in STRATEGIES:
            raise ConfigError(f"{name}: unknown connection strategy {strategy!r}")
        self.name = name
        self.block = block
        self.strategy = strategy

    @property
    def spec(self) -> ConvSpec:
        return self.block.spec


class NormLayer:
    def __init__(self, name: str, bn: BatchNormParams):
        self.name = name
        self.bn = bn


class LinearLayer:
    def __init__(self, name: str, w: np.ndarray, b: np.ndarray):
        self.name = name
        self.w = np.asarray(w, dtype=DTYPE)
        self.b = np.asarray(b, dtype=DTYPE)


class InputStem:
    """First convolution of the network, optionally followed by a 3x3/2
    max pool (the large-image topology).  Never accelerated."""

    def __init__(self, name: str, conv: ConvLayer, pool: bool = False):
        self.name = name
        self.conv = conv
        self.pool = pool


class ResidualUnit:
    def __init__(self, name, norms, convs, projection=None):
        if len(norms) != len(convs):
            raise ConfigError(f"{name}: need one pre-norm per convolution")
        self.name = name
        self.norms = norms
        self.convs = convs
        self.projection = projection


@dataclass
class ResidualBlockSpec:
    """Declarative description of one residual unit."""

    kind: str  # "basic" or "bottleneck"
    in_channels: int
    out_channels: int
    mid_channels: int | None
    stride: int
    accelerate: tuple
    strategies: tuple


class Graph:
    def __init__(
        self,
        name: str,
        input_shape: tuple,
        num_classes: int,
        stem: InputStem,
        units: list,
        head_norm: NormLayer,
        classifier: LinearLayer,
        stage_starts: list,
        origin: dict | None = None,
    ):
        self.name = name
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.stem = stem
        self.units = units
        self.head_norm = head_norm
        self.classifier = classifier
        self.stage_starts = list(stage_starts)
        self.origin = origin or {}
        self.metadata: dict = {}
        self.validate_shapes()

    # -- structure queries ---------------------------------------------------

    @property
    def nodes(self) -> list:
        return [self.stem, *self.units, self.head_norm, self.classifier]

    def accel_layers(self):
        for unit in self.units:
            for conv in unit.convs:
                if isinstance(conv, AccelLayer):
                    yield unit, conv

    def accelerated_conv_count(self) -> int:
        return sum(1 for _ in self.accel_layers())

    def plain_residual_conv_count(self) -> int:
        n = 0
        for unit in self.units:
            n += sum(1 for c in unit.convs if isinstance(c, ConvLayer))
        return n

    def validate_shapes(self):
        x, y, c = self.input_shape
        spec = self.stem.conv.spec
        if spec.in_shape() != (x, y, c):
            raise ConfigError(f"stem expects {spec.in_shape()}, graph input is {(x, y, c)}")
        x, y, c = spec.out_shape()
        if self.stem.pool:
            pool = _pool_spec(x, y, c)
            x, y = pool.out_x, pool.out_y
        for unit in self.units:
            ux, uy, uc = x, y, c
            for norm, conv in zip(unit.norms, unit.convs):
                if norm.bn.channels != c:
                    raise ConfigError(f"{norm.name}: {norm.bn.channels} channels, stream has {c}")
                if conv.spec.in_shape() != (x, y, c):
                    raise ConfigError(
                        f"{conv.name}: expects {conv.spec.in_shape()}, stream is {(x, y, c)}"
                    )
                x, y, c = conv.spec.out_shape()
            if unit.projection is not None:
                if unit.projection.spec.in_shape() != (ux, uy, uc):
                    raise ConfigError(f"{unit.projection.name}: projection input mismatch")
                if unit.projection.spec.out_shape() != (x, y, c):
                    raise ConfigError(f"{unit.projection.name}: projection output mismatch")
            elif (ux, uy, uc) != (x, y, c):
                raise ConfigError(f"{unit.name}: shortcut shape {(ux, uy, uc)} != {(x, y, c)}")
        if self.head_norm.bn.channels != c:
            raise ConfigError("head norm channel mismatch")
        if self.classifier.w.shape != (self.num_classes, c):
            raise ConfigError(
                f"classifier weights {self.classifier.w.shape} != {(self.num_classes, c)}"
            )

    # -- parameter access ----------------------------------------------------

    def _norm_items(self, name, bn, trainable_only):
        items = [(f"{name}.gamma", bn.gamma), (f"{name}.beta", bn.beta)]
        if not trainable_only:
            items += [
                (f"{name}.running_mean", bn.running_mean),
                (f"{name}.running_var", bn.running_var),
            ]
        return items

    def _items(self, trainable_only: bool):
        out = [("stem.conv.w", self.stem.conv.w)]
        for unit in self.units:
            for i, (norm, conv) in enumerate(zip(unit.norms, unit.convs), start=1):
                out += self._norm_items(f"{unit.name}.norm{i}", norm.bn, trainable_only)
                if isinstance(conv, AccelLayer):
                    out.append((f"{unit.name}.conv{i}.w", conv.block.weights))
                    out.append((f"{unit.name}.conv{i}.lccl.w", conv.block.lccl_weights))
                    if conv.block.lccl_bn is not None:
                        out += self._norm_items(
                            f"{unit.name}.conv{i}.lccl_norm", conv.block.lccl_bn, trainable_only
                        )
                else:
                    out.append((f"{unit.name}.conv{i}.w", conv.w))
            if unit.projection is not None:
                out.append((f"{unit.name}.proj.w", unit.projection.w))
        out += self._norm_items("head_norm", self.head_norm.bn, trainable_only)
        out += [("fc.w", self.classifier.w), ("fc.b", self.classifier.b)]
        return out

    def parameters(self):
        """Ordered (name, array) pairs of trainable parameters."""
        return self._items(trainable_only=True)

    def state_items(self):
        """Parameters plus running statistics, for persistence."""
        return self._items(trainable_only=False)

    def describe(self) -> dict:
        units = []
        for unit in self.units:
            convs = []
            for conv in unit.convs:
                entry = {"spec": _spec_to_dict(conv.spec)}
                if isinstance(conv, AccelLayer):
                    entry.update(
                        accel=True,
                        form=conv.block.lccl_form,
                        strategy=conv.strategy,
                        use_bn=conv.block.use_bn_in_lccl,
                    )
                else:
                    entry["accel"] = False
                convs.append(entry)
            units.append(
                {
                    "name": unit.name,
                    "convs": convs,
                    "projection": _spec_to_dict(unit.projection.spec)
                    if unit.projection is not None
                    else None,
                }
            )
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "stem": {"spec": _spec_to_dict(self.stem.conv.spec), "pool": self.stem.pool},
            "units": units,
            "stage_starts": self.stage_starts,
            "bn_eps": float(self.head_norm.bn.eps),
            "bn_momentum": float(self.head_norm.bn.momentum),
            "origin": self.origin,
        }


def _spec_to_dict(spec: ConvSpec) -> dict:
    return {
        "k": spec.k,
        "stride": spec.stride,
        "pad": spec.pad,
        "in_channels": spec.in_channels,
        "out_channels": spec.out_channels,
        "in_x": spec.in_x,
        "in_y": spec.in_y,
    }


def _spec_from_dict(d: dict) -> ConvSpec:
    return ConvSpec(**{k: int(v) for k, v in d.items()})


def graph_from_description(desc: dict) -> Graph:
    """Rebuild a zero-initialized graph skeleton from describe() output."""
    eps = float(desc.get("bn_eps", 1e-5))
    mom = float(desc.get("bn_momentum", 0.9))
    stem_spec = _spec_from_dict(desc["stem"]["spec"])
    stem = InputStem(
        "stem",
        ConvLayer("stem.conv", stem_spec, np.zeros(stem_spec.weight_shape, dtype=DTYPE)),
        pool=bool(desc["stem"]["pool"]),
    )
    units = []
    for ud in desc["units"]:
        norms, convs = [], []
        for i, cd in enumerate(ud["convs"], start=1):
            spec = _spec_from_dict(cd["spec"])
            norms.append(
                NormLayer(
                    f"{ud['name']}.norm{i}",
                    BatchNormParams.identity(spec.in_channels, eps=eps, momentum=mom),
                )
            )
            cname = f"{ud['name']}.conv{i}"
            if cd.get("accel"):
                block = make_accel_block(
                    spec,
                    weights=np.zeros(spec.weight_shape, dtype=DTYPE),
                    form=cd["form"],
                    use_bn=bool(cd["use_bn"]),
                    bn_eps=eps,
                    bn_momentum=mom,
                )
                block.lccl_weights[:] = 0
                convs.append(AccelLayer(cname, block, strategy=cd["strategy"]))
            else:
                convs.append(ConvLayer(cname, spec, np.zeros(spec.weight_shape, dtype=DTYPE)))
        proj = None
        if ud.get("projection"):
            pspec = _spec_from_dict(ud["projection"])
            proj = ConvLayer(
                f"{ud['name']}.proj", pspec, np.zeros(pspec.weight_shape, dtype=DTYPE)
            )
        units.append(ResidualUnit(ud["name"], norms, convs, projection=proj))
    last_c = _spec_from_dict(desc["units"][-1]["convs"][-1]["spec"]).out_channels if desc["units"] else stem_spec.out_channels
    head = NormLayer("head_norm", BatchNormParams.identity(last_c, eps=eps, momentum=mom))
    fc = LinearLayer(
        "fc",
        np.zeros((desc["num_classes"], last_c), dtype=DTYPE),
        np.zeros(desc["num_classes"], dtype=DTYPE),
    )
    return Graph(
        name=desc["name"],
        input_shape=tuple(desc["input_shape"]),
        num_classes=int(desc["num_classes"]),
        stem=stem,
        units=units,
        head_norm=head,
        classifier=fc,
        stage_starts=list(desc.get("stage_starts", [])),
        origin=desc.get("origin", {}),
    )


# ---------------------------------------------------------------------------
# builders


def parse_strategy(text: str) -> tuple:
    tokens = tuple(t.strip().lower() for t in str(text).split("-"))
    for t in tokens:
        if t not in STRATEGIES:
            raise ConfigError(f"unknown connection strategy {text!r}")
    return tokens


def _make_unit(
    name: str,
    plan: ResidualBlockSpec,
    in_x: int,
    in_y: int,
    form: str,
    use_bn: bool,
    rng: np.random.Generator,
    bn_eps: float = 1e-5,
    bn_momentum: float = 0.9,
) -> ResidualUnit:
    if plan.kind == "basic":
        chain = [
            (3, plan.stride, plan.in_channels, plan.out_channels),
            (3, 1, plan.out_channels, plan.out_channels),
        ]
    elif plan.kind == "bottleneck":
        mid = plan.mid_channels
        chain = [
            (1, 1, plan.in_channels, mid),
            (3, plan.stride, mid, mid),
            (1, 1, mid, plan.out_channels),
        ]
    else:
        raise ConfigError(f"unknown residual block kind {plan.kind!r}")
    norms, convs = [], []
    x, y = in_x, in_y
    for i, (k, stride, cin, cout) in enumerate(chain):
        spec = ConvSpec(k=k, stride=stride, pad=(k - 1) // 2, in_channels=cin,
                        out_channels=cout, in_x=x, in_y=y)
        norms.append(
            NormLayer(
                f"{name}.norm{i + 1}",
                BatchNormParams.identity(cin, eps=bn_eps, momentum=bn_momentum),
            )
        )
        cname = f"{name}.conv{i + 1}"
        if plan.accelerate[i]:
            block = make_accel_block(
                spec, form=form, use_bn=use_bn, rng=rng, bn_eps=bn_eps, bn_momentum=bn_momentum
            )
            convs.append(AccelLayer(cname, block, strategy=plan.strategies[i]))
        else:
            convs.append(ConvLayer(cname, spec, he_init(spec, rng)))
        x, y = spec.out_x, spec.out_y
    projection = None
    if plan.stride != 1 or plan.in_channels != plan.out_channels:
        pspec = ConvSpec(k=1, stride=plan.stride, pad=0, in_channels=plan.in_channels,
                         out_channels=plan.out_channels, in_x=in_x, in_y=in_y)
        projection = ConvLayer(f"{name}.proj", pspec, he_init(pspec, rng))
    return ResidualUnit(name, norms, convs, projection=projection)


def _assemble(
    name,
    input_size,
    in_channels,
    num_classes,
    stem_spec,
    stem_pool,
    stages,  # list of (n_blocks, out_channels, mid_channels, stride)
    kind,
    accel_flags,  # fn(stage_idx, block_idx, n_convs) -> tuple of bool
    strategy_tokens,
    form,
    use_bn,
    seed,
    origin,
    bn_eps: float = 1e-5,
    bn_momentum: float = 0.9,
) -> Graph:
    rng = np.random.default_rng(seed)
    stem = InputStem("stem", ConvLayer("stem.conv", stem_spec, he_init(stem_spec, rng)),
                     pool=stem_pool)
    x, y, c = stem_spec.out_shape()
    if stem_pool:
        pool = _pool_spec(x, y, c)
        x, y = pool.out_x, pool.out_y
    units, stage_starts = [], []
    n_convs = 2 if kind == "basic" else 3
    cur_c = c
    for si, (n_blocks, out_c, mid_c, stride) in enumerate(stages):
        stage_starts.append(len(units))
        for bi in range(n_blocks):
            flags = tuple(accel_flags(si, bi, n_convs))
            strategies = tuple(strategy_tokens[i % len(strategy_tokens)] for i in range(n_convs))
            plan = ResidualBlockSpec(
                kind=kind,
                in_channels=cur_c,
                out_channels=out_c,
                mid_channels=mid_c,
                stride=stride if bi == 0 else 1,
                accelerate=flags,
                strategies=strategies,
            )
            unit = _make_unit(f"s{si + 1}b{bi + 1}", plan, x, y, form, use_bn, rng,
                              bn_eps=bn_eps, bn_momentum=bn_momentum)
            units.append(unit)
            last_spec = unit.convs[-1].spec
            x, y, cur_c = last_spec.out_x, last_spec.out_y, last_spec.out_channels
    head = NormLayer("head_norm", BatchNormParams.identity(cur_c, eps=bn_eps, momentum=bn_momentum))
    wstd = np.sqrt(1.0 / cur_c)
    fc = LinearLayer(
        "fc",
        (rng.standard_normal((num_classes, cur_c)) * wstd).astype(DTYPE),
        np.zeros(num_classes, dtype=DTYPE),
    )
    return Graph(
        name=name,
        input_shape=(input_size, input_size, in_channels),
        num_classes=num_classes,
        stem=stem,
        units=units,
        head_norm=head,
        classifier=fc,
        stage_starts=stage_starts,
        origin=origin,
    )


def build_resnet_cifar(
    depth: int,
    widen: int = 1,
    accel_preset: str = "all",
    kind: str = "auto",
    strategy: str = "aft-aft",
    lccl_form: str = SHARED,
    use_bn_in_lccl: bool = True,
    num_classes: int = 10,
    input_size: int = 32,
    in_channels: int = 3,
    seed: int = 0,
) -> Graph:
    """Three-stage small-image topology (stages at full/half/quarter
    resolution, widths 16/32/64 times ``widen``).  Depth 6n+2 selects basic
    blocks, 9n+2 bottleneck blocks; the stem convolution is never
    accelerated."""
    if widen < 1:
        raise ConfigError("widen must be >= 1")
    if kind == "auto":
        kind = "basic" if (depth - 2) % 6 == 0 else "bottleneck"
    if kind == "basic":
        if depth < 8 or (depth - 2) % 6 != 0:
            raise ConfigError(f"basic-block depth must be 6n+2, got {depth}")
        n = (depth - 2) // 6
        stages = [(n, 16 * widen, None, 1), (n, 32 * widen, None, 2), (n, 64 * widen, None, 2)]
    elif kind == "bottleneck":
        if depth < 11 or (depth - 2) % 9 != 0:
            raise ConfigError(f"bottleneck depth must be 9n+2, got {depth}")
        n = (depth - 2) // 9
        stages = [
            (n, 64 * widen, 16 * widen, 1),
            (n, 128 * widen, 32 * widen, 2),
            (n, 256 * widen, 64 * widen, 2),
        ]
    else:
        raise ConfigError(f"unknown block kind {kind!r}")

    presets_basic = {"all": lambda s, b, m: (True,) * m, "none": lambda s, b, m: (False,) * m}
    presets_bottleneck = {
        "all": lambda s, b, m: (True,) * m,
        "none": lambda s, b, m: (False,) * m,
        # accelerate the first and second convolution of each bottleneck
        "first-two": lambda s, b, m: (True, True, False),
        # accelerate only the middle 3x3 convolution
        "middle": lambda s, b, m: (False, True, False),
    }
    table = presets_basic if kind == "basic" else presets_bottleneck
    if accel_preset not in table:
        raise ConfigError(f"unknown acceleration preset {accel_preset!r} for {kind} blocks")
    stem_spec = ConvSpec(k=3, stride=1, pad=1, in_channels=in_channels,
                         out_channels=16 * widen, in_x=input_size, in_y=input_size)
    return _assemble(
        name=f"resnet{depth}-cifar",
        input_size=input_size,
        in_channels=in_channels,
        num_classes=num_classes,
        stem_spec=stem_spec,
        stem_pool=False,
        stages=stages,
        kind=kind,
        accel_flags=table[accel_preset],
        strategy_tokens=parse_strategy(strategy),
        form=lccl_form,
        use_bn=use_bn_in_lccl,
        seed=seed,
        origin={
            "family": "cifar",
            "depth": depth,
            "widen": widen,
            "kind": kind,
            "accel_preset": accel_preset,
            "strategy": strategy,
            "lccl_form": lccl_form,
            "use_bn_in_lccl": use_bn_in_lccl,
            "seed": seed,
        },
    )


def build_resnet_imagenet(
    depth: int,
    accel_preset: str = "all",
    strategy: str = "aft-aft",
    lccl_form: str = SHARED,
    use_bn_in_lccl: bool = True,
    num_classes: int = 1000,
    input_size: int = 224,
    in_channels: int = 3,
    seed: int = 0,
) -> Graph:
    """Large-image topology: 7x7/2 stem with 3x3/2 max pool, four stages.

    ``accel_preset="skip-first-block-each-stage"`` leaves both convolutions
    of the first residual unit in every stage unaccelerated (8 plain convs at
    depth 34), matching the depth-34 training recipe; depth 18 conventionally
    accelerates everything.
    """
    plans = {18: [2, 2, 2, 2], 34: [3, 4, 6, 3]}
    if depth not in plans:
        raise ConfigError(f"unsupported depth {depth}; choose 18 or 34")
    blocks = plans[depth]
    widths = [64, 128, 256, 512]
    stages = [
        (blocks[i], widths[i], None, 1 if i == 0 else 2) for i in range(4)
    ]
    presets = {
        "all": lambda s, b, m: (True,) * m,
        "none": lambda s, b, m: (False,) * m,
        "skip-first-block-each-stage": lambda s, b, m: (b != 0,) * m,
    }
    if accel_preset not in presets:
        raise ConfigError(f"unknown acceleration preset {accel_preset!r}")
    stem_spec = ConvSpec(k=7, stride=2, pad=3, in_channels=in_channels, out_channels=64,
                         in_x=input_size, in_y=input_size)
    return _assemble(
        name=f"resnet{depth}",
        input_size=input_size,
        in_channels=in_channels,
        num_classes=num_classes,
        stem_spec=stem_spec,
        stem_pool=True,
        stages=stages,
        kind="basic",
        accel_flags=presets[accel_preset],
        strategy_tokens=parse_strategy(strategy),
        form=lccl_form,
        use_bn=use_bn_in_lccl,
        seed=seed,
        origin={
            "family": "imagenet",
            "depth": depth,
            "accel_preset": accel_preset,
            "strategy": strategy,
            "lccl_form": lccl_form,
            "use_bn_in_lccl": use_bn_in_lccl,
            "seed": seed,
        },
    )


def build_small_testnet(
    input_size: int = 8,
    in_channels: int = 3,
    num_classes: int = 4,
    width: int = 8,
    strategy: str = "aft-aft",
    lccl_form: str = SHARED,
    use_bn_in_lccl: bool = True,
    accelerate: bool = True,
    seed: int = 0,
) -> Graph:
    """Two residual units on top of a small stem; the desk-scale fixture."""
    stem_spec = ConvSpec(k=3, stride=1, pad=1, in_channels=in_channels, out_channels=width,
                         in_x=input_size, in_y=input_size)
    stages = [(1, width, None, 1), (1, 2 * width, None, 2)]
    flag = (lambda s, b, m: (True,) * m) if accelerate else (lambda s, b, m: (False,) * m)
    return _assemble(
        name="small-testnet",
        input_size=input_size,
        in_channels=in_channels,
        num_classes=num_classes,
        stem_spec=stem_spec,
        stem_pool=False,
        stages=stages,
        kind="basic",
        accel_flags=flag,
        strategy_tokens=parse_strategy(strategy),
        form=lccl_form,
        use_bn=use_bn_in_lccl,
        seed=seed,
        origin={
            "family": "small-testnet",
            "input_size": input_size,
            "in_channels": in_channels,
            "num_classes": num_classes,
            "width": width,
            "strategy": strategy,
            "lccl_form": lccl_form,
            "use_bn_in_lccl": use_bn_in_lccl,
            "accelerate": accelerate,
            "seed": seed,
        },
    )


# ---------------------------------------------------------------------------
# execution


@dataclass
class NodeRecord:
    """Per-layer accounting for one forward call (totals over the batch)."""

    name: str
    kind: str  # "conv" | "accel" | "linear"
    dense_macs: int
    performed_macs: int
    skipped_macs: int
    lccl_macs: int = 0
    sparsity: float = float("nan")
    kept: float = float("nan")
    wall_ns: int = 0
    spec: ConvSpec | None = None
    form: str | None = None


@dataclass
class RunStats:
    mode: str
    accel_mode: str
    workers: int
    batch: int
    records: list = field(default_factory=list)
    wall_ns_total: int = 0

    def find(self, name: str) -> NodeRecord:
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)

    def total(self, field_name: str) -> int:
        return sum(getattr(r, field_name) for r in self.records)


def block_skip_check(v_star: np.ndarray) -> bool:
    """True when a gated output is entirely zero, allowing the rest of the
    residual unit to be bypassed."""
    return bool(np.all(_as_array(v_star) == 0))


def _pool_spec(x: int, y: int, c: int) -> ConvSpec:
    return ConvSpec(k=3, stride=2, pad=1, in_channels=c, out_channels=c, in_x=x, in_y=y)


def _maxpool_batch(xb: np.ndarray, tape: dict | None, name: str):
    n, x, y, c = xb.shape
    spec = _pool_spec(x, y, c)
    idx = _col_indices(spec).reshape(spec.out_positions, spec.k * spec.k, c)
    p = spec.pad
    out = np.empty((n, spec.out_x, spec.out_y, c), dtype=xb.dtype)
    args = np.empty((n, spec.out_positions, c), dtype=np.int64) if tape is not None else None
    for i in range(n):
        padded = np.full((x + 2 * p, y + 2 * p, c), -np.inf, dtype=xb.dtype)
        padded[p : p + x, p : p + y, :] = xb[i]
        windows = padded.reshape(-1)[idx]
        out[i] = windows.max(axis=1).reshape(spec.out_x, spec.out_y, c)
        if args is not None:
            args[i] = windows.argmax(axis=1)
    if tape is not None:
        tape[name] = {"spec": spec, "args": args, "in_shape": xb.shape}
    return out


def _conv_batch(xb: np.ndarray, w: np.ndarray, spec: ConvSpec, workers: int, fast: bool):
    n = xb.shape[0]
    if fast:
        cols = im2col_batch_array(xb, spec)
        return (cols @ _weights_matrix(w, spec)).reshape((n,) + spec.out_shape())
    out = np.empty((n,) + spec.out_shape(), dtype=np.result_type(xb.dtype, w.dtype))
    for i in range(n):
        out[i] = conv_gemm_array(xb[i], w, spec, workers)
    return out


def _record_plain(stats, name, spec, n, wall_ns, kind="conv"):
    stats.records.append(
        NodeRecord(
            name=name,
            kind=kind,
            dense_macs=spec.dense_macs * n,
            performed_macs=spec.dense_macs * n,
            skipped_macs=0,
            wall_ns=wall_ns,
            spec=spec,
        )
    )


def forced_v_prime_map(spec: ConvSpec, form: str, kept: float) -> np.ndarray:
    """Synthetic collaborative map with a pinned kept fraction: ones at
    evenly spaced output positions, zeros elsewhere."""
    if not 0.0 <= kept <= 1.0:
        raise ConfigError(f"kept fraction must be in [0, 1], got {kept}")
    xy = spec.out_positions
    count = min(max(int(round(kept * xy)), 0), xy)
    flat = np.zeros(xy, dtype=DTYPE)
    if count:
        flat[np.floor(np.arange(count) * (xy / count)).astype(np.int64)] = 1.0
    channels = 1 if form == SHARED else spec.out_channels
    vp = flat.reshape(spec.out_x, spec.out_y, 1)
    if channels > 1:
        vp = np.repeat(vp, channels, axis=2)
    return vp


def _accel_sample(
    layer: AccelLayer,
    x: np.ndarray,
    lccl_x: np.ndarray,
    accel_mode: str,
    workers: int,
    force_kept: float | None,
):
    """Single-sample acceleration block on the inference routes."""
    block = layer.block
    spec = block.spec
    if accel_mode == "plain":
        v = conv_gemm_array(x, block.weights, spec, workers)
        return v, None
    forced = None
    if force_kept is not None:
        forced = forced_v_prime_map(spec, block.lccl_form, force_kept)
    return accel_forward_array(
        x,
        block,
        mode="infer",
        lccl_input=lccl_x,
        accel_mode=accel_mode,
        workers=workers,
        forced_v_prime=forced,
    )


def _unit_forward(
    unit: ResidualUnit,
    xb: np.ndarray,
    mode: str,
    accel_mode: str,
    workers: int,
    stats: RunStats,
    timing: bool,
    force_kept,
    update_running: bool,
    tape: dict | None,
    fast: bool,
):
    n = xb.shape[0]
    h = xb
    shortcut = None
    bypassed = False
    unit_tape = {"input": xb, "pres": [], "acts": [], "bns": [], "convs": []} if tape is not None else None
    for i, (norm, conv) in enumerate(zip(unit.norms, unit.convs)):
        if bypassed:
            # descendants of a fully-gated output: no work performed
            spec = conv.spec
            rec = NodeRecord(
                name=conv.name,
                kind="accel" if isinstance(conv, AccelLayer) else "conv",
                dense_macs=spec.dense_macs * n,
                performed_macs=0,
                skipped_macs=spec.dense_macs * n,
                spec=spec,
                form=conv.block.lccl_form if isinstance(conv, AccelLayer) else None,
            )
            stats.records.append(rec)
            continue
        pre = h
        if mode == "train":
            bn_out, bn_cache = bn_train_array(pre, norm.bn, update_running=update_running)
        else:
            bn_out, bn_cache = bn_infer_array(pre, norm.bn), None
        act = np.maximum(bn_out, 0)
        if unit_tape is not None:
            unit_tape["pres"].append(pre)
            unit_tape["bns"].append((bn_out, bn_cache))
            unit_tape["acts"].append(act)
        if i == 0:
            if unit.projection is None:
                shortcut = xb
            else:
                t0 = time.perf_counter_ns() if timing else 0
                shortcut = _conv_batch(act, unit.projection.w, unit.projection.spec, workers, fast)
                wall = time.perf_counter_ns() - t0 if timing else 0
                _record_plain(stats, unit.projection.name, unit.projection.spec, n, wall)
                if unit_tape is not None:
                    unit_tape["proj_x"] = act

        if isinstance(conv, AccelLayer):
            lccl_in = pre if conv.strategy == BEF else act
            h = _run_accel(
                conv, act, lccl_in, mode, accel_mode, workers, stats, timing,
                force_kept, update_running, unit_tape, fast, i,
            )
            if (
                accel_mode == "skip"
                and i < len(unit.convs) - 1
                and block_skip_check(h)
            ):
                bypassed = True
        else:
            t0 = time.perf_counter_ns() if timing else 0
            h = _conv_batch(act, conv.w, conv.spec, workers, fast)
            wall = time.perf_counter_ns() - t0 if timing else 0
            _record_plain(stats, conv.name, conv.spec, n, wall)
            if unit_tape is not None:
                unit_tape["convs"].append({"kind": "plain", "x": act})

    out = shortcut if bypassed else h + shortcut
    if unit_tape is not None:
        unit_tape["bypassed"] = bypassed
        tape[unit.name] = unit_tape
    return out


def _run_accel(
    layer: AccelLayer,
    xb: np.ndarray,
    lccl_xb: np.ndarray,
    mode: str,
    accel_mode: str,
    workers: int,
    stats: RunStats,
    timing: bool,
    force_kept,
    update_running: bool,
    unit_tape: dict | None,
    fast: bool,
    conv_index: int,
):
    block = layer.block
    spec = block.spec
    n = xb.shape[0]

    if mode == "train":
        # fully batched dense-then-gate route; batch statistics in the
        # collaborative layer's norm require the whole batch at once
        z = _conv_batch(lccl_xb, block.lccl_weights, block.lccl_spec, workers, fast)
        if block.lccl_bn is not None:
            pre_act, bn_cache = bn_train_array(z, block.lccl_bn, update_running=update_running)
        else:
            pre_act, bn_cache = z, None
        vp = np.maximum(pre_act, 0)
        v = _conv_batch(xb, block.weights, spec, workers, fast)
        out = gate_array(vp, v)
        rec = NodeRecord(
            name=layer.name,
            kind="accel",
            dense_macs=spec.dense_macs * n,
            performed_macs=spec.dense_macs * n,
            skipped_macs=0,
            lccl_macs=block.lccl_macs * n,
            sparsity=sparsity(vp),
            kept=1.0 - sparsity(vp),
            spec=spec,
            form=block.lccl_form,
        )
        stats.records.append(rec)
        if unit_tape is not None:
            unit_tape["convs"].append(
                {
                    "kind": "accel",
                    "x": xb,
                    "lccl_x": lccl_xb,
                    "z": z,
                    "pre_act": pre_act,
                    "bn": bn_cache,
                    "vp": vp,
                    "v": v,
                }
            )
        return out

    if accel_mode == "gate" and fast:
        # batched inference-mode reference route (running statistics)
        z = _conv_batch(lccl_xb, block.lccl_weights, block.lccl_spec, workers, fast)
        vp = np.maximum(bn_infer_array(z, block.lccl_bn) if block.lccl_bn is not None else z, 0)
        if force_kept is not None:
            vp = np.broadcast_to(
                forced_v_prime_map(spec, block.lccl_form, force_kept), vp.shape
            )
        v = _conv_batch(xb, block.weights, spec, workers, fast)
        out = gate_array(vp, v)
        r = sparsity(vp)
        stats.records.append(
            NodeRecord(
                name=layer.name,
                kind="accel",
                dense_macs=spec.dense_macs * n,
                performed_macs=spec.dense_macs * n,
                skipped_macs=0,
                lccl_macs=block.lccl_macs * n,
                sparsity=r,
                kept=1.0 - r,
                spec=spec,
                form=block.lccl_form,
            )
        )
        return out

    out = np.empty((n,) + spec.out_shape(), dtype=np.result_type(xb.dtype, block.weights.dtype))
    performed = skipped = 0
    r_sum = 0.0
    wall = 0
    if accel_mode == "plain":
        t0 = time.perf_counter_ns() if timing else 0
        for i in range(n):
            out[i] = conv_gemm_array(xb[i], block.weights, spec, workers)
        wall = time.perf_counter_ns() - t0 if timing else 0
        rec = NodeRecord(
            name=layer.name,
            kind="accel",
            dense_macs=spec.dense_macs * n,
            performed_macs=spec.dense_macs * n,
            skipped_macs=0,
            wall_ns=wall,
            spec=spec,
            form=block.lccl_form,
        )
        stats.records.append(rec)
        return out

    t0 = time.perf_counter_ns() if timing else 0
    for i in range(n):
        out[i], bstats = _accel_sample(layer, xb[i], lccl_xb[i], accel_mode, workers, force_kept)
        performed += bstats.performed_macs
        skipped += bstats.skipped_macs
        r_sum += bstats.sparsity
    wall = time.perf_counter_ns() - t0 if timing else 0
    rec = NodeRecord(
        name=layer.name,
        kind="accel",
        dense_macs=spec.dense_macs * n,
        performed_macs=performed,
        skipped_macs=skipped,
        lccl_macs=block.lccl_macs * n,
        sparsity=r_sum / n,
        kept=1.0 - r_sum / n,
        wall_ns=wall,
        spec=spec,
        form=block.lccl_form,
    )
    stats.records.append(rec)
    return out


def _forward_arrays(
    graph: Graph,
    xb: np.ndarray,
    mode: str = "infer",
    accel_mode: str | None = None,
    workers: int = 1,
    timing: bool = False,
    force_kept: float | None = None,
    update_running: bool = True,
    tape: dict | None = None,
    fast: bool = False,
):
    if mode not in ("infer", "train"):
        raise ConfigError(f"unknown mode {mode!r}")
    if accel_mode is None:
        accel_mode = "gate" if mode == "train" else "skip"
    if accel_mode not in ("skip", "gate", "plain"):
        raise ConfigError(f"unknown accel mode {accel_mode!r}")
    if xb.ndim != 4 or xb.shape[1:] != graph.input_shape:
        raise ShapeError(
            f"input batch shape {xb.shape} does not match graph input {graph.input_shape}"
        )
    t_start = time.perf_counter_ns()
    n = xb.shape[0]
    stats = RunStats(mode=mode, accel_mode=accel_mode, workers=workers, batch=n)

    t0 = time.perf_counter_ns() if timing else 0
    h = _conv_batch(xb, graph.stem.conv.w, graph.stem.conv.spec, workers, fast)
    wall = time.perf_counter_ns() - t0 if timing else 0
    _record_plain(stats, graph.stem.conv.name, graph.stem.conv.spec, n, wall)
    if tape is not None:
        tape["stem"] = {"x": xb}
    if graph.stem.pool:
        h = _maxpool_batch(h, tape, "stem.pool")

    for unit in graph.units:
        h = _unit_forward(
            unit, h, mode, accel_mode, workers, stats, timing, force_kept,
            update_running, tape, fast,
        )

    if mode == "train":
        bn_out, bn_cache = bn_train_array(h, graph.head_norm.bn, update_running=update_running)
    else:
        bn_out, bn_cache = bn_infer_array(h, graph.head_norm.bn), None
    act = np.maximum(bn_out, 0)
    pooled = act.mean(axis=(1, 2))
    logits = pooled @ graph.classifier.w.T + graph.classifier.b
    if tape is not None:
        tape["head"] = {"pre": h, "bn_out": bn_out, "bn": bn_cache, "act": act, "pooled": pooled}
    stats.records.append(
        NodeRecord(
            name="fc",
            kind="linear",
            dense_macs=graph.classifier.w.size * n,
            performed_macs=graph.classifier.w.size * n,
            skipped_macs=0,
        )
    )
    stats.wall_ns_total = time.perf_counter_ns() - t_start
    return logits, stats


def forward(
    graph: Graph,
    input,
    mode: str = "infer",
    accel_mode: str | None = None,
    workers: int = 1,
    timing: bool = False,
    force_kept: float | None = None,
    update_running: bool = True,
):
    """Execute the graph; returns (logits, RunStats).

    Accepts a single (X, Y, C) tensor or an (N, X, Y, C) batch; logits come
    back with the matching rank.
    """
    arr = _as_array(input).astype(DTYPE, copy=False)
    single = arr.ndim == 3
    xb = arr[None] if single else arr
    logits, stats = _forward_arrays(
        graph, xb, mode=mode, accel_mode=accel_mode, workers=workers, timing=timing,
        force_kept=force_kept, update_running=update_running,
    )
    if single:
        logits = logits[0]
    return Tensor._wrap(logits), stats
