"""Numerical execution of an ArchitectureGraph: init, forward, loss, gradients.

The executor walks the graph in its stored topological order. The terminal
softmax node is structural: forward() returns the logits feeding it, the loss
fuses softmax with cross-entropy, and inference applies softmax explicitly.

Public activations are channel-first, (classes, x, y, z) or batched
(batch, classes, x, y, z); internally everything runs channels-last.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, replace

import numpy as np

from . import layers
from .archspec import ArchitectureGraph, graph_from_json, graph_hash, graph_to_json
from .errors import FormatError, GraphError
from .volume import HEADER_SEP, MultiModalVolume

CKPT_MAGIC = "VSEGCKPT1"
LEARNABLE = ("kernel", "bias", "gamma", "beta")


@dataclass(frozen=True)
class WeightSet:
    """Named tensors for every weighted node, plus the batch-norm mode flag.

    Treat as immutable: optimizer steps exchange whole WeightSets rather than
    mutating tensors in place, so concurrent forward passes stay coherent.
    """

    tensors: dict
    mode: str = "train"
    graph_id: str = ""

    def __post_init__(self):
        if self.mode not in ("train", "inference"):
            raise ValueError(f"mode must be train or inference, got {self.mode!r}")

    def to_inference(self) -> "WeightSet":
        return replace(self, mode="inference")

    def to_train(self) -> "WeightSet":
        return replace(self, mode="train")

    def learnable_keys(self) -> list:
        return [k for k in self.tensors if k.rsplit(".", 1)[1] in LEARNABLE]

    def dtype(self):
        return next(iter(self.tensors.values())).dtype


def init_weights(graph: ArchitectureGraph, seed: int, dtype=np.float32) -> WeightSet:
    """He-style init: kernels ~ N(0, 2/fan_in), biases/shifts 0, scales 1."""
    rng = np.random.default_rng(seed)
    channels = graph.channels()
    tensors = {}
    for node in graph.nodes:
        cin = channels[graph.inputs_of(node.name)[0]] if node.kind != "input" else None
        if node.kind in ("conv3", "upsample2"):
            fan_in = 27 * cin
            tensors[f"{node.name}.kernel"] = rng.normal(
                0.0, np.sqrt(2.0 / fan_in), size=(cin, 3, 3, 3, node.out_channels)
            ).astype(dtype)
            tensors[f"{node.name}.bias"] = np.zeros(node.out_channels, dtype)
            tensors[f"{node.name}.gamma"] = np.ones(node.out_channels, dtype)
            tensors[f"{node.name}.beta"] = np.zeros(node.out_channels, dtype)
            tensors[f"{node.name}.running_mean"] = np.zeros(node.out_channels, dtype)
            tensors[f"{node.name}.running_var"] = np.ones(node.out_channels, dtype)
        elif node.kind == "predict1":
            tensors[f"{node.name}.kernel"] = rng.normal(
                0.0, np.sqrt(2.0 / cin), size=(cin, node.out_channels)
            ).astype(dtype)
            tensors[f"{node.name}.bias"] = np.zeros(node.out_channels, dtype)
    return WeightSet(tensors=tensors, mode="train", graph_id=graph_hash(graph))


def _as_batch_cl(x, graph: ArchitectureGraph):
    """Coerce input to channels-last (n, sx, sy, sz, c); report if it was unbatched."""
    if isinstance(x, MultiModalVolume):
        x = x.data
    x = np.asarray(x)
    unbatched = x.ndim == 4
    if unbatched:
        x = x[None]
    if x.ndim != 5:
        raise ValueError(f"expected (channels, x, y, z) or batched input, got shape {x.shape}")
    if x.shape[1] != graph.in_channels:
        raise ValueError(f"graph expects {graph.in_channels} channels, input has {x.shape[1]}")
    depth = graph.pooling_depth()
    if any(s % 2**depth for s in x.shape[2:]):
        raise ValueError(
            f"spatial extents {x.shape[2:]} not divisible by 2^{depth} (pooling depth)"
        )
    return np.ascontiguousarray(np.moveaxis(x, 1, -1)), unbatched


def _logits_node(graph: ArchitectureGraph) -> str:
    out = graph.node(graph.output)
    if out.kind != "softmax":
        raise GraphError("graph output must be a softmax node")
    return graph.inputs_of(graph.output)[0]


def _run_forward(graph, weights: WeightSet, x_cl, need_cache: bool):
    train = weights.mode == "train"
    t = weights.tensors
    values = {}
    caches = {}
    batch_stats = {}
    for node in graph.nodes:
        name = node.name
        ins = [values[s] for s in graph.inputs_of(name)]
        if node.kind == "input":
            y = x_cl
        elif node.kind == "conv3":
            a = layers.conv3d_forward(ins[0], t[f"{name}.kernel"], t[f"{name}.bias"])
            r = layers.relu_forward(a)
            y, stats = layers.batchnorm_forward(
                r, t[f"{name}.gamma"], t[f"{name}.beta"],
                t[f"{name}.running_mean"], t[f"{name}.running_var"], train,
            )
            if train:
                batch_stats[name] = stats
            if need_cache:
                caches[name] = (a, stats)
        elif node.kind == "upsample2":
            u = layers.repeat2_forward(ins[0])
            a = layers.conv3d_forward(u, t[f"{name}.kernel"], t[f"{name}.bias"])
            r = layers.relu_forward(a)
            y, stats = layers.batchnorm_forward(
                r, t[f"{name}.gamma"], t[f"{name}.beta"],
                t[f"{name}.running_mean"], t[f"{name}.running_var"], train,
            )
            if train:
                batch_stats[name] = stats
            if need_cache:
                caches[name] = (u, a, stats)
        elif node.kind == "pool2":
            y, idx = layers.maxpool2_forward(ins[0])
            if need_cache:
                caches[name] = idx
        elif node.kind == "predict1":
            y = layers.pointwise_forward(ins[0], t[f"{name}.kernel"], t[f"{name}.bias"])
        elif node.kind == "sum":
            y = ins[0] + ins[1]
            for extra in ins[2:]:
                y = y + extra
        elif node.kind == "concat":
            y = np.concatenate(ins, axis=-1)
        elif node.kind == "softmax":
            y = ins[0]  # structural; softmax is fused into loss / applied at inference
        values[name] = y
    return values, caches, batch_stats


def _run_backward(graph, weights: WeightSet, values, caches, start_node, dstart):
    train = weights.mode == "train"
    t = weights.tensors
    grads = {}
    douts = {start_node: dstart}

    def _push(name, dx):
        douts[name] = douts[name] + dx if name in douts else dx

    for node in reversed(graph.nodes):
        name = node.name
        if name not in douts:
            continue
        dout = douts.pop(name)
        srcs = graph.inputs_of(name)
        if node.kind == "input":
            continue
        if node.kind == "conv3":
            a, stats = caches[name]
            r = layers.relu_forward(a)
            dr, dgamma, dbeta = layers.batchnorm_backward(
                dout, r, t[f"{name}.gamma"], stats, train
            )
            da = layers.relu_backward(dr, a)
            dx, dk, db = layers.conv3d_backward(da, values[srcs[0]], t[f"{name}.kernel"])
            grads[f"{name}.kernel"] = dk
            grads[f"{name}.bias"] = db
            grads[f"{name}.gamma"] = dgamma
            grads[f"{name}.beta"] = dbeta
            _push(srcs[0], dx)
        elif node.kind == "upsample2":
            u, a, stats = caches[name]
            r = layers.relu_forward(a)
            dr, dgamma, dbeta = layers.batchnorm_backward(
                dout, r, t[f"{name}.gamma"], stats, train
            )
            da = layers.relu_backward(dr, a)
            du, dk, db = layers.conv3d_backward(da, u, t[f"{name}.kernel"])
            grads[f"{name}.kernel"] = dk
            grads[f"{name}.bias"] = db
            grads[f"{name}.gamma"] = dgamma
            grads[f"{name}.beta"] = dbeta
            _push(srcs[0], layers.repeat2_backward(du))
        elif node.kind == "pool2":
            _push(srcs[0], layers.maxpool2_backward(dout, caches[name], values[srcs[0]].shape))
        elif node.kind == "predict1":
            dx, dk, db = layers.pointwise_backward(dout, values[srcs[0]], t[f"{name}.kernel"])
            grads[f"{name}.kernel"] = dk
            grads[f"{name}.bias"] = db
            _push(srcs[0], dx)
        elif node.kind == "sum":
            for src in srcs:
                _push(src, dout)
        elif node.kind == "concat":
            offset = 0
            for src in srcs:
                c = values[src].shape[-1]
                _push(src, dout[..., offset : offset + c])
                offset += c
        elif node.kind == "softmax":
            _push(srcs[0], dout)
    return grads


def forward(graph: ArchitectureGraph, weights: WeightSet, x):
    """Run the network; returns logits with the input's batching convention.

    Output spatial size always equals input spatial size. In inference mode
    the result is a pure function of (weights, input).
    """
    x_cl, unbatched = _as_batch_cl(x, graph)
    values, _, _ = _run_forward(graph, weights, x_cl, need_cache=False)
    logits = np.moveaxis(values[_logits_node(graph)], -1, 1)
    if not np.isfinite(logits).all():
        raise FloatingPointError("forward produced non-finite logits")
    return logits[0] if unbatched else logits


def predict_probabilities(graph: ArchitectureGraph, weights: WeightSet, x):
    """Softmax of forward(); per-voxel class probabilities."""
    logits = forward(graph, weights, x)
    return layers.softmax(logits, axis=-4)


def softmax_cross_entropy(logits, labels, class_weights=None):
    """Loss and d(loss)/d(logits) for channel-first logits."""
    logits = np.asarray(logits)
    unbatched = logits.ndim == 4
    if unbatched:
        logits = logits[None]
        labels = np.asarray(labels)[None]
    loss, dl = layers.cross_entropy(
        np.moveaxis(logits, 1, -1), np.asarray(labels), class_weights
    )
    dl = np.moveaxis(dl, -1, 1)
    return loss, (dl[0] if unbatched else dl)


def compute_loss(graph, weights, images, labels, class_weights=None) -> float:
    """Forward-only mean cross-entropy (no gradients, no caches)."""
    x_cl, _ = _as_batch_cl(images, graph)
    labels = np.asarray(labels)
    if labels.ndim == 3:
        labels = labels[None]
    values, _, _ = _run_forward(graph, weights, x_cl, need_cache=False)
    loss, _ = layers.cross_entropy(values[_logits_node(graph)], labels, class_weights)
    return loss


def loss_and_grad(graph, weights, images, labels, class_weights=None, return_batch_stats=False):
    """Forward + backward over a batch; gradients cover every learnable tensor.

    images: (n, channels, x, y, z); labels: (n, x, y, z). Gradient keys mirror
    WeightSet tensor names. With return_batch_stats=True also returns the
    per-node batch-norm statistics of this pass (for running-average updates).
    """
    x_cl, _ = _as_batch_cl(images, graph)
    labels = np.asarray(labels)
    if labels.ndim == 3:
        labels = labels[None]
    values, caches, batch_stats = _run_forward(graph, weights, x_cl, need_cache=True)
    logits_node = _logits_node(graph)
    loss, dlogits = layers.cross_entropy(values[logits_node], labels, class_weights)
    grads = _run_backward(graph, weights, values, caches, logits_node, dlogits)
    for key in weights.learnable_keys():
        grads.setdefault(key, np.zeros_like(weights.tensors[key]))
    if return_batch_stats:
        return loss, grads, batch_stats
    return loss, grads


def update_running_stats(weights: WeightSet, batch_stats: dict) -> WeightSet:
    """Fold one pass's batch statistics into the running averages (momentum 0.9)."""
    m = layers.BN_MOMENTUM
    tensors = dict(weights.tensors)
    for name, (mean, var) in batch_stats.items():
        old_mean = tensors[f"{name}.running_mean"]
        old_var = tensors[f"{name}.running_var"]
        tensors[f"{name}.running_mean"] = (m * old_mean + (1 - m) * mean).astype(old_mean.dtype)
        tensors[f"{name}.running_var"] = (m * old_var + (1 - m) * var).astype(old_var.dtype)
    return replace(weights, tensors=tensors)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, weights: WeightSet, graph: ArchitectureGraph,
                    step: int = 0, epoch: int = 0, extra: dict | None = None) -> None:
    """Write weights (+ optional optimizer tensors) with the graph embedded."""
    extra = extra or {}
    named = {f"w/{k}": v for k, v in sorted(weights.tensors.items())}
    named.update({f"x/{k}": np.asarray(v) for k, v in sorted(extra.items())})
    index = []
    payload = io.BytesIO()
    for name, arr in named.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        index.append(f"{name}:{arr.dtype.name}:{','.join(map(str, arr.shape))}")
        payload.write(le.tobytes())
    fields = {
        "magic": CKPT_MAGIC,
        "graph_hash": graph_hash(graph),
        "step": str(int(step)),
        "epoch": str(int(epoch)),
        "mode": weights.mode,
        "graph": json.dumps(json.loads(graph_to_json(graph)), separators=(",", ":")),
        "tensors": ";".join(index),
    }
    lines = "\n".join(f"{k}={v}" for k, v in fields.items())
    with open(path, "wb") as fh:
        fh.write(lines.encode("utf-8") + HEADER_SEP)
        fh.write(payload.getvalue())


def load_checkpoint(path, expected_graph: ArchitectureGraph | None = None):
    """Read a checkpoint; returns (weights, graph, step, epoch, extra_tensors)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if HEADER_SEP not in blob:
        raise FormatError("missing checkpoint header terminator")
    head, payload = blob.split(HEADER_SEP, 1)
    fields = dict(
        line.split("=", 1) for line in head.decode("utf-8").splitlines() if "=" in line
    )
    if fields.get("magic") != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {fields.get('magic')!r}")
    graph = graph_from_json(fields["graph"])
    if fields["graph_hash"] != graph_hash(graph):
        raise FormatError("checkpoint graph hash does not match embedded graph")
    if expected_graph is not None and graph_hash(expected_graph) != fields["graph_hash"]:
        raise FormatError("checkpoint was written for a different graph")
    tensors = {}
    extra = {}
    offset = 0
    entries = fields["tensors"].split(";") if fields.get("tensors") else []
    for entry in entries:
        name, dtype_name, shape_str = entry.split(":")
        shape = tuple(int(s) for s in shape_str.split(",")) if shape_str else ()
        dtype = np.dtype(dtype_name).newbyteorder("<")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(payload):
            raise FormatError("checkpoint payload shorter than tensor index declares")
        arr = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)),
                            offset=offset).reshape(shape)
        arr = np.ascontiguousarray(arr.astype(np.dtype(dtype_name), copy=False))
        offset += nbytes
        if name.startswith("w/"):
            tensors[name[2:]] = arr
        else:
            extra[name[2:]] = arr
    if offset != len(payload):
        raise FormatError("checkpoint payload longer than tensor index declares")
    weights = WeightSet(tensors=tensors, mode=fields.get("mode", "train"),
                        graph_id=fields["graph_hash"])
    return weights, graph, int(fields.get("step", 0)), int(fields.get("epoch", 0)), extra
