"""Desk-scale SGD training: backpropagation through gate, convolution, batch
norm and ReLU, the warmup-then-staircase learning-rate schedule, and a
central-finite-difference gradient checker.

Training always computes the paired convolution densely and gates
afterwards; row skipping is an inference-time optimization and gradients
need the full maps anyway.  Wherever the collaborative map is zero, no
gradient flows into the paired convolution through that cell (the factor is
exactly zero), and the rectifier's subgradient at zero is taken as zero.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .blocks import bn_backward_array, smooth_l1l2, smooth_l1l2_grad
from .convolution import (
    ConvSpec,
    _col_indices,
    conv_input_grad_array,
    conv_input_grad_batch_array,
    conv_weight_grad_array,
    im2col_batch_array,
)
from .data import ToyDataset
from .errors import ConfigError, ShapeError, TrainingDiverged
from .graph import AccelLayer, Graph, _forward_arrays
from .tensor import DTYPE


@dataclass
class SgdConfig:
    """Schedule: hold ``warmup_lr`` for the first ``warmup_fraction`` of all
    iterations, then run at ``base_lr`` scaled by ``decay_factor`` for every
    decay point already passed."""

    base_lr: float = 0.1
    warmup_lr: float = 0.01
    warmup_fraction: float = 0.03
    decay_points: tuple = (0.45, 0.70, 0.90)
    decay_factor: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9
    total_epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    l1l2_mu: float = 0.0
    l1l2_rho: float = 0.0


def lr_at(config: SgdConfig, iteration: int, total_iters: int) -> float:
    if not 0 <= iteration < total_iters:
        raise ConfigError(f"iteration {iteration} outside [0, {total_iters})")
    frac = iteration / total_iters
    if frac < config.warmup_fraction:
        return config.warmup_lr
    passed = sum(1 for p in config.decay_points if frac >= p)
    return config.base_lr * config.decay_factor**passed


@dataclass
class GradientTape:
    """Per-parameter gradients plus the cached activations that produced them."""

    grads: dict = field(default_factory=dict)
    caches: dict = field(default_factory=dict)

    def add(self, name: str, g: np.ndarray):
        if name in self.grads:
            if self.grads[name].shape != g.shape:
                raise ShapeError(f"gradient shape changed for {name}")
            self.grads[name] += g
        else:
            self.grads[name] = g


# ---------------------------------------------------------------------------
# layer-level backward rules


def backward_relu(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Subgradient 0 at exactly 0."""
    return dout * (x > 0)


def backward_bn(dout: np.ndarray, cache):
    """(dx, dgamma, dbeta) through train-mode batch normalization."""
    return bn_backward_array(dout, cache)


def backward_conv(dout: np.ndarray, cache):
    """(dinput, dweights) for a convolution; cache is (input, weights, spec).

    Accepts single samples or batches (leading batch axis on input/dout).
    """
    x, w, spec = cache
    if x.ndim == 3:
        return conv_input_grad_array(dout, w, spec), conv_weight_grad_array(x, dout, spec)
    return _conv_backward_batch(x, dout, w, spec)


def backward_gate(d_vstar: np.ndarray, v_prime: np.ndarray, v: np.ndarray):
    """(dV', dV) through the element-wise gate.

    dV = dV* * V' vanishes wherever the collaborative map is zero; for the
    single-channel (shared) map, dV' sums the broadcast channel axis.
    """
    dv = d_vstar * v_prime
    dvp = d_vstar * v
    if v_prime.shape != v.shape and v_prime.shape[-1] == 1:
        dvp = dvp.sum(axis=-1, keepdims=True)
    return dvp, dv


def _conv_backward_batch(xb: np.ndarray, dout_b: np.ndarray, w: np.ndarray, spec: ConvSpec):
    n = xb.shape[0]
    cols = im2col_batch_array(xb, spec)
    dmat = dout_b.reshape(n * spec.out_positions, spec.out_channels)
    dw = np.ascontiguousarray((cols.T @ dmat).T).reshape(spec.weight_shape)
    dx = conv_input_grad_batch_array(dout_b, w, spec)
    return dx, dw


def _maxpool_backward(cache, dout: np.ndarray) -> np.ndarray:
    spec = cache["spec"]
    args = cache["args"]
    n, in_x, in_y, c = cache["in_shape"]
    idx = _col_indices(spec).reshape(spec.out_positions, spec.k * spec.k, c)
    p = spec.pad
    padded_size = (in_x + 2 * p) * (in_y + 2 * p) * c
    dx = np.empty((n, in_x, in_y, c), dtype=dout.dtype)
    dflat = dout.reshape(n, spec.out_positions, c)
    for i in range(n):
        target = np.take_along_axis(idx, args[i][:, None, :], axis=1)[:, 0, :]
        flat = np.bincount(
            target.reshape(-1),
            weights=dflat[i].reshape(-1).astype(np.float64, copy=False),
            minlength=padded_size,
        )
        padded = flat.reshape(in_x + 2 * p, in_y + 2 * p, c)
        dx[i] = padded[p : p + in_x, p : p + in_y, :]
    return dx


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross entropy over the batch; returns (loss, dlogits, probs)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    eps = np.finfo(probs.dtype).tiny
    loss = float(-np.log(probs[np.arange(n), labels] + eps).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits, probs


# ---------------------------------------------------------------------------
# whole-graph forward/backward


def _forward_loss(graph, xb, yb, mu, rho, update_running):
    caches: dict = {}
    logits, _ = _forward_arrays(
        graph, xb, mode="train", update_running=update_running, tape=caches, fast=True
    )
    loss, dlogits, probs = softmax_cross_entropy(logits, yb)
    if mu or rho:
        for unit in graph.units:
            ucache = caches[unit.name]
            for ccache in ucache["convs"]:
                if ccache["kind"] == "accel":
                    loss += smooth_l1l2(ccache["vp"], mu, rho)
    acc = float((logits.argmax(axis=1) == yb).mean())
    return loss, dlogits, probs, acc, caches


def loss_and_grads(graph: Graph, xb, yb, mu: float = 0.0, rho: float = 0.0,
                   update_running: bool = True):
    """One train-mode forward/backward; returns (loss, acc, tape)."""
    xb = np.asarray(xb)
    yb = np.asarray(yb)
    loss, dlogits, _, acc, caches = _forward_loss(graph, xb, yb, mu, rho, update_running)
    tape = GradientTape(caches=caches)
    _backward_graph(graph, caches, dlogits, tape, mu, rho)
    return loss, acc, tape


def _backward_graph(graph, caches, dlogits, tape, mu, rho):
    head = caches["head"]
    tape.add("fc.w", dlogits.T @ head["pooled"])
    tape.add("fc.b", dlogits.sum(axis=0))
    dpooled = dlogits @ graph.classifier.w

    n, x, y, c = head["act"].shape
    dact = np.broadcast_to(dpooled[:, None, None, :], head["act"].shape) / (x * y)
    dbn_out = backward_relu(dact, head["bn_out"])
    dh, dgamma, dbeta = backward_bn(dbn_out, head["bn"])
    tape.add("head_norm.gamma", dgamma)
    tape.add("head_norm.beta", dbeta)

    for unit in reversed(graph.units):
        dh = _backward_unit(unit, caches[unit.name], dh, tape, mu, rho)

    if graph.stem.pool:
        dh = _maxpool_backward(caches["stem.pool"], dh)
    stem_x = caches["stem"]["x"]
    _, dw = _conv_backward_batch(stem_x, dh, graph.stem.conv.w, graph.stem.conv.spec)
    tape.add("stem.conv.w", dw)
    return tape


def _backward_unit(unit, ucache, dout, tape, mu, rho):
    dh = dout
    dshortcut = dout
    dacts = [None] * len(unit.convs)
    if unit.projection is not None:
        dproj_x, dproj_w = _conv_backward_batch(
            ucache["proj_x"], dshortcut, unit.projection.w, unit.projection.spec
        )
        tape.add(f"{unit.name}.proj.w", dproj_w)
        dacts[0] = dproj_x

    for i in range(len(unit.convs) - 1, -1, -1):
        conv = unit.convs[i]
        ccache = ucache["convs"][i]
        act = ucache["acts"][i]
        bn_out, bn_cache = ucache["bns"][i]
        dlccl_pre = None

        if isinstance(conv, AccelLayer):
            block = conv.block
            dvp, dv = backward_gate(dh, ccache["vp"], ccache["v"])
            if mu or rho:
                dvp = dvp + smooth_l1l2_grad(ccache["vp"], mu, rho)
            dx, dw = _conv_backward_batch(ccache["x"], dv, block.weights, block.spec)
            tape.add(f"{unit.name}.conv{i + 1}.w", dw)
            dpre_act = backward_relu(dvp, ccache["pre_act"])
            if block.lccl_bn is not None:
                dz, dg, db = backward_bn(dpre_act, ccache["bn"])
                tape.add(f"{unit.name}.conv{i + 1}.lccl_norm.gamma", dg)
                tape.add(f"{unit.name}.conv{i + 1}.lccl_norm.beta", db)
            else:
                dz = dpre_act
            dlccl_x, dlccl_w = _conv_backward_batch(
                ccache["lccl_x"], dz, block.lccl_weights, block.lccl_spec
            )
            tape.add(f"{unit.name}.conv{i + 1}.lccl.w", dlccl_w)
            if conv.strategy == "aft":
                dx = dx + dlccl_x
            else:
                dlccl_pre = dlccl_x
        else:
            dx, dw = _conv_backward_batch(ccache["x"], dh, conv.w, conv.spec)
            tape.add(f"{unit.name}.conv{i + 1}.w", dw)

        if dacts[i] is not None:
            dx = dx + dacts[i]
        dbn_out = backward_relu(dx, bn_out)
        dpre, dgamma, dbeta = backward_bn(dbn_out, bn_cache)
        tape.add(f"{unit.name}.norm{i + 1}.gamma", dgamma)
        tape.add(f"{unit.name}.norm{i + 1}.beta", dbeta)
        if dlccl_pre is not None:
            dpre = dpre + dlccl_pre
        dh = dpre

    if unit.projection is None:
        dh = dh + dshortcut
    return dh


# ---------------------------------------------------------------------------
# optimization loop

LOG_COLUMNS = ["epoch", "loss", "train_acc", "val_acc", "mean_sparsity", "lr"]


def _sgd_step(params, grads, buffers, lr, momentum, weight_decay):
    for name, p in params:
        g = grads[name] + weight_decay * p
        buf = buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p)
            buffers[name] = buf
        buf *= momentum
        buf += g
        p -= (lr * buf).astype(p.dtype, copy=False)


def evaluate(graph: Graph, images, labels, batch_size: int = 64):
    """Inference-mode accuracy plus per-layer collaborative-map sparsity,
    aggregated exactly over the dataset.

    Early in training the running statistics are immature and the gate (a
    product of two activations) can push float32 past its range in inference
    mode; such samples produce non-finite logits and simply count as errors.
    """
    n = images.shape[0]
    correct = 0
    zero_counts: dict = {}
    sizes: dict = {}
    for lo in range(0, n, batch_size):
        xb = images[lo : lo + batch_size]
        with np.errstate(over="ignore", invalid="ignore"):
            logits, stats = _forward_arrays(
                graph, xb, mode="infer", accel_mode="gate", fast=True
            )
        finite = np.all(np.isfinite(logits), axis=1)
        hits = (logits.argmax(axis=1) == labels[lo : lo + batch_size]) & finite
        correct += int(hits.sum())
        for rec in stats.records:
            if rec.kind == "accel":
                batch_n = rec.dense_macs // rec.spec.dense_macs
                per_sample = rec.spec.out_positions * (
                    1 if rec.form == "shared" else rec.spec.out_channels
                )
                elems = batch_n * per_sample  # collaborative-map elements this batch
                zero_counts[rec.name] = zero_counts.get(rec.name, 0) + rec.sparsity * elems
                sizes[rec.name] = sizes.get(rec.name, 0) + elems
    per_layer = {name: zero_counts[name] / sizes[name] for name in zero_counts}
    return correct / n, per_layer


def train(graph: Graph, dataset: ToyDataset, config: SgdConfig, log_path=None):
    """SGD with momentum and weight decay on the toy task; returns the
    per-epoch log rows.  Deterministic given the config seed."""
    images, labels = dataset.train_images, dataset.train_labels
    n = images.shape[0]
    iters_per_epoch = math.ceil(n / config.batch_size)
    total_iters = config.total_epochs * iters_per_epoch
    rng = np.random.default_rng(config.seed)
    buffers: dict = {}
    logs = []
    it = 0
    for epoch in range(1, config.total_epochs + 1):
        perm = rng.permutation(n)
        batch_losses = []
        lr = config.warmup_lr
        for b in range(iters_per_epoch):
            idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
            lr = lr_at(config, it, total_iters)
            loss, _, tape = loss_and_grads(
                graph, images[idx], labels[idx], config.l1l2_mu, config.l1l2_rho
            )
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} iteration {it} (lr={lr})"
                )
            _sgd_step(graph.parameters(), tape.grads, buffers, lr,
                      config.momentum, config.weight_decay)
            batch_losses.append(loss)
            it += 1
        train_acc, per_layer = evaluate(graph, images, labels)
        val_acc, _ = evaluate(graph, dataset.val_images, dataset.val_labels)
        mean_r = float(np.mean(list(per_layer.values()))) if per_layer else 0.0
        logs.append(
            {
                "epoch": epoch,
                "loss": float(np.mean(batch_losses)),
                "train_acc": train_acc,
                "val_acc": val_acc,
                "mean_sparsity": mean_r,
                "lr": lr,
            }
        )
    if log_path is not None:
        write_log_csv(logs, log_path)
    return logs


def write_log_csv(logs, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(logs)


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(
    graph: Graph,
    xb,
    yb,
    samples_per_param: int = 8,
    step: float = 3e-5,
    tol: float = 1e-3,
    floor: float = 1e-6,
    floor_f32: float = 1e-4,
    seed: int = 0,
    mu: float = 0.0,
    rho: float = 0.0,
):
    """Verify gradients against a float64 central-difference oracle at
    sampled coordinates of every parameter.

    One finite-difference sweep (forward in float64, step scaled by each
    coordinate's magnitude) is compared against two analytic gradient sets
    from the same backward code: the float64 one, which isolates the chain
    rule from rounding, and the production float32 one.  Relative error is
    |a - n| / max(|a|, |n|, floor); the float32 comparison uses a larger
    floor because float32's absolute rounding noise makes relative error
    meaningless for near-zero gradients.  The loss surface has rectifier and
    gate kinks, so the step must stay small enough that perturbations do not
    cross them; 3e-5 is safe at desk scale while float64 keeps the oracle's
    own noise orders of magnitude below the tolerance.
    """
    xb = np.asarray(xb)
    yb = np.asarray(yb)
    _, _, tape32 = loss_and_grads(graph, xb, yb, mu, rho, update_running=False)
    analytic32 = {name: g.copy() for name, g in tape32.grads.items()}

    originals = list(graph.parameters())
    rng = np.random.default_rng(seed)
    xb64 = xb.astype(np.float64)
    f64 = {name: p.astype(np.float64) for name, p in originals}
    _swap_params(graph, f64)
    results = []
    try:
        _, _, tape64 = loss_and_grads(graph, xb64, yb, mu, rho, update_running=False)
        analytic64 = tape64.grads
        for name, _ in originals:
            arr = f64[name]
            flat = arr.reshape(-1)
            count = min(samples_per_param, flat.size)
            coords = rng.choice(flat.size, size=count, replace=False)
            for c in coords:
                old = flat[c]
                h = step * max(abs(old), 0.1)
                flat[c] = old + h
                lp, *_ = _forward_loss(graph, xb64, yb, mu, rho, update_running=False)
                flat[c] = old - h
                lm, *_ = _forward_loss(graph, xb64, yb, mu, rho, update_running=False)
                flat[c] = old
                numeric = (lp - lm) / (2 * h)
                a64 = float(analytic64[name].reshape(-1)[c])
                a32 = float(analytic32[name].reshape(-1)[c])
                results.append(
                    {
                        "param": name,
                        "coord": int(c),
                        "numeric": numeric,
                        "analytic": a64,
                        "analytic_f32": a32,
                        "rel_err": abs(numeric - a64) / max(abs(numeric), abs(a64), floor),
                        "rel_err_f32": abs(numeric - a32)
                        / max(abs(numeric), abs(a32), floor_f32),
                    }
                )
    finally:
        _swap_params(graph, dict(originals))

    passed = sum(1 for r in results if r["rel_err"] <= tol)
    passed32 = sum(1 for r in results if r["rel_err_f32"] <= tol)
    n = len(results)
    return {
        "results": results,
        "checked": n,
        "passed": passed,
        "pass_fraction": passed / n if n else 1.0,
        "passed_f32": passed32,
        "pass_fraction_f32": passed32 / n if n else 1.0,
        "tol": tol,
    }


def _swap_params(graph: Graph, values: dict):
    """Point every parameter slot of the graph at the given arrays."""
    for unit in graph.units:
        for i, (norm, conv) in enumerate(zip(unit.norms, unit.convs), start=1):
            norm.bn.gamma = values[f"{unit.name}.norm{i}.gamma"]
            norm.bn.beta = values[f"{unit.name}.norm{i}.beta"]
            if isinstance(conv, AccelLayer):
                conv.block.weights = values[f"{unit.name}.conv{i}.w"]
                conv.block.lccl_weights = values[f"{unit.name}.conv{i}.lccl.w"]
                if conv.block.lccl_bn is not None:
                    conv.block.lccl_bn.gamma = values[f"{unit.name}.conv{i}.lccl_norm.gamma"]
                    conv.block.lccl_bn.beta = values[f"{unit.name}.conv{i}.lccl_norm.beta"]
            else:
                conv.w = values[f"{unit.name}.conv{i}.w"]
        if unit.projection is not None:
            unit.projection.w = values[f"{unit.name}.proj.w"]
    graph.stem.conv.w = values["stem.conv.w"]
    graph.head_norm.bn.gamma = values["head_norm.gamma"]
    graph.head_norm.bn.beta = values["head_norm.beta"]
    graph.classifier.w = values["fc.w"]
    graph.classifier.b = values["fc.b"]
