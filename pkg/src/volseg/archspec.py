"""Declarative architecture graphs and their analyzers.

A graph is a DAG of layer nodes over a fixed vocabulary: 3^3 same-padded
convolutions (each fused with ReLU and batch norm), 2^3 max pooling,
x2 repetition upsampling (fused with a 3^3 conv), 1^3 prediction convs,
sum/concat merges, and a terminal softmax. Three builders produce the
multi-resolution networks compared in this package plus their
single-resolution ablations; analyzers report receptive fields, parameter
counts, and activation-memory estimates without executing anything.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import GraphError

KINDS = ("input", "conv3", "pool2", "upsample2", "predict1", "sum", "concat", "softmax")
_WEIGHTED = ("conv3", "upsample2", "predict1")


@dataclass(frozen=True)
class LayerSpec:
    """One node: its kind, name, and (for weighted kinds) output channels."""

    name: str
    kind: str
    out_channels: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GraphError(f"unknown layer kind {self.kind!r}")
        if self.kind in _WEIGHTED:
            if not self.out_channels or self.out_channels < 1:
                raise GraphError(f"{self.kind} node {self.name!r} needs positive out_channels")
        elif self.out_channels is not None:
            raise GraphError(f"{self.kind} node {self.name!r} must not declare out_channels")


@dataclass(frozen=True)
class ReceptiveFieldTrace:
    """Per-node (receptive field, jump) plus the designated probe values."""

    per_node: dict
    network_rf: dict

    def rf(self, name: str) -> int:
        return self.per_node[name][0]

    def jump(self, name: str) -> int:
        return self.per_node[name][1]


@dataclass(frozen=True)
class ArchitectureGraph:
    """An immutable, topologically ordered layer DAG.

    `probes` names the nodes whose receptive fields characterize the network
    (reported as ReceptiveFieldTrace.network_rf). `meta` records how the graph
    was built so ablations can be derived from it.
    """

    nodes: tuple
    edges: tuple
    output: str
    in_channels: int = 4
    probes: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple((str(s), str(d)) for s, d in self.edges))
        object.__setattr__(self, "probes", tuple(self.probes))
        self.validate()

    # -- structure ---------------------------------------------------------

    def node(self, name: str) -> LayerSpec:
        return self._by_name[name]

    @property
    def _by_name(self) -> dict:
        return {n.name: n for n in self.nodes}

    def inputs_of(self, name: str) -> list:
        """Input node names in edge-declaration order (matters for concat)."""
        return [s for s, d in self.edges if d == name]

    def validate(self):
        by_name = self._by_name
        if len(by_name) != len(self.nodes):
            raise GraphError("duplicate node names")
        inputs = [n for n in self.nodes if n.kind == "input"]
        if len(inputs) != 1:
            raise GraphError(f"expected exactly 1 input node, found {len(inputs)}")
        if self.output not in by_name:
            raise GraphError(f"output node {self.output!r} does not exist")
        seen = set()
        for node in self.nodes:
            for src in self.inputs_of(node.name):
                if src not in by_name:
                    raise GraphError(f"edge from unknown node {src!r}")
                if src not in seen:
                    raise GraphError(
                        f"nodes are not topologically ordered: {src!r} feeds {node.name!r}"
                    )
            n_in = len(self.inputs_of(node.name))
            if node.kind == "input" and n_in != 0:
                raise GraphError("input node cannot have incoming edges")
            if node.kind in ("conv3", "pool2", "upsample2", "predict1", "softmax") and n_in != 1:
                raise GraphError(f"{node.kind} node {node.name!r} needs exactly 1 input")
            if node.kind in ("sum", "concat") and n_in < 2:
                raise GraphError(f"{node.kind} node {node.name!r} needs at least 2 inputs")
            seen.add(node.name)
        sinks = [n.name for n in self.nodes if not any(s == n.name for s, _ in self.edges)]
        if sinks != [self.output]:
            raise GraphError(f"expected the single sink to be the output, found {sinks}")
        for probe in self.probes:
            if probe not in by_name:
                raise GraphError(f"probe {probe!r} does not name a node")
        levels = self.levels()
        if levels[self.output] != 0:
            raise GraphError("output node is not at full input resolution")
        channels = self.channels()
        for node in self.nodes:
            if node.kind == "sum":
                cs = {channels[s] for s in self.inputs_of(node.name)}
                if len(cs) != 1:
                    raise GraphError(f"sum node {node.name!r} merges unequal channel counts {cs}")

    def levels(self) -> dict:
        """Downsampling level per node (jump = 2**level)."""
        levels = {}
        for node in self.nodes:
            if node.kind == "input":
                levels[node.name] = 0
            elif node.kind == "pool2":
                levels[node.name] = levels[self.inputs_of(node.name)[0]] + 1
            elif node.kind == "upsample2":
                lvl = levels[self.inputs_of(node.name)[0]]
                if lvl == 0:
                    raise GraphError(f"upsample2 node {node.name!r} would go below jump 1")
                levels[node.name] = lvl - 1
            else:
                in_levels = {levels[s] for s in self.inputs_of(node.name)}
                if len(in_levels) != 1:
                    raise GraphError(
                        f"{node.kind} node {node.name!r} merges unequal levels {in_levels}"
                    )
                levels[node.name] = in_levels.pop()
        return levels

    def channels(self) -> dict:
        """Output channel count per node."""
        channels = {}
        for node in self.nodes:
            if node.kind == "input":
                channels[node.name] = self.in_channels
            elif node.kind in _WEIGHTED:
                channels[node.name] = node.out_channels
            elif node.kind == "concat":
                channels[node.name] = sum(channels[s] for s in self.inputs_of(node.name))
            else:
                channels[node.name] = channels[self.inputs_of(node.name)[0]]
        return channels

    def pooling_depth(self) -> int:
        """Deepest downsampling level reached anywhere in the graph."""
        return max(self.levels().values())


def receptive_field(graph: ArchitectureGraph) -> ReceptiveFieldTrace:
    """Trace (rf, jump) through the graph.

    Recurrence from (1, 1) at the input: a 3^3 conv adds 2*jump to rf; pooling
    adds jump then doubles it; upsampling halves jump and its fused conv adds
    2*jump at the new scale; pointwise and merge nodes take the max of their
    inputs' rf at the common jump.
    """
    per_node = {}
    for node in graph.nodes:
        ins = [per_node[s] for s in graph.inputs_of(node.name)]
        if node.kind == "input":
            entry = (1, 1)
        elif node.kind == "conv3":
            rf, j = ins[0]
            entry = (rf + 2 * j, j)
        elif node.kind == "pool2":
            rf, j = ins[0]
            entry = (rf + j, 2 * j)
        elif node.kind == "upsample2":
            rf, j = ins[0]
            if j == 1:
                raise GraphError(f"upsample2 node {node.name!r} below jump 1")
            entry = (rf + j, j // 2)  # repetition halves jump; fused conv adds 2*(j//2)
        else:  # predict1, sum, concat, softmax
            jumps = {j for _, j in ins}
            if len(jumps) != 1:
                raise GraphError(f"node {node.name!r} merges unequal jumps {jumps}")
            entry = (max(rf for rf, _ in ins), jumps.pop())
        per_node[node.name] = entry
    network_rf = {name: per_node[name][0] for name in graph.probes}
    return ReceptiveFieldTrace(per_node=per_node, network_rf=network_rf)


def filter_schedule(filter_base: int, level: int) -> int:
    """Filters at a downsampling level: filter_base * 2**level, capped at 8x."""
    return min(filter_base * 2**level, 8 * filter_base)


class _Builder:
    def __init__(self, in_channels):
        self.nodes = []
        self.edges = []
        self.in_channels = in_channels

    def add(self, kind, name, inputs=(), channels=None):
        self.nodes.append(LayerSpec(name=name, kind=kind, out_channels=channels))
        for src in inputs:
            self.edges.append((src, name))
        return name

    def graph(self, output, probes, meta):
        return ArchitectureGraph(
            nodes=tuple(self.nodes),
            edges=tuple(self.edges),
            output=output,
            in_channels=self.in_channels,
            probes=tuple(probes),
            meta=meta,
        )


def _build_net1(fb, in_channels, num_classes, single_res):
    """VGG-style trunk with 5 pools; score maps fused by summation."""
    b = _Builder(in_channels)
    x = b.add("input", "in")
    taps = {}
    for lvl, n_convs in enumerate((2, 2, 3, 3, 3)):
        ch = filter_schedule(fb, lvl)
        for i in range(n_convs):
            x = b.add("conv3", f"enc{lvl}_conv{i}", [x], ch)
        if lvl in (2, 3):
            taps[lvl] = x  # prediction taps attach ahead of pooling
        x = b.add("pool2", f"pool{lvl}", [x])
    x = b.add("predict1", "score_deep", [x], num_classes)
    probes = ["score_deep"]
    if single_res:
        for i in range(5):
            x = b.add("upsample2", f"up{i}", [x], num_classes)
    else:
        x = b.add("upsample2", "up_deep0", [x], num_classes)
        x = b.add("upsample2", "up_deep1", [x], num_classes)
        mid = b.add("predict1", "score_mid", [taps[3]], num_classes)
        x = b.add("sum", "fuse_mid", [x, mid])
        x = b.add("upsample2", "up_mid", [x], num_classes)
        fine = b.add("predict1", "score_fine", [taps[2]], num_classes)
        x = b.add("sum", "fuse_fine", [x, fine])
        x = b.add("upsample2", "up_out0", [x], num_classes)
        x = b.add("upsample2", "up_out1", [x], num_classes)
        probes += ["score_mid", "score_fine"]
    out = b.add("softmax", "probs", [x])
    return b, out, probes


def _build_net2(fb, in_channels, num_classes, single_res):
    """Encoder-decoder with 4 pools; features fused by concatenation."""
    b = _Builder(in_channels)
    x = b.add("input", "in")
    skips = {}
    for lvl in range(4):
        ch = filter_schedule(fb, lvl)
        x = b.add("conv3", f"enc{lvl}_conv0", [x], ch)
        x = b.add("conv3", f"enc{lvl}_conv1", [x], ch)
        skips[lvl] = x
        x = b.add("pool2", f"pool{lvl}", [x])
    ch = filter_schedule(fb, 4)
    x = b.add("conv3", "mid_conv0", [x], ch)
    x = b.add("conv3", "mid_conv1", [x], ch)
    probes = ["mid_conv1"]
    for lvl in (3, 2, 1, 0):
        ch = filter_schedule(fb, lvl)
        x = b.add("upsample2", f"up{lvl}", [x], ch)
        if not single_res:
            x = b.add("concat", f"cat{lvl}", [skips[lvl], x])
        x = b.add("conv3", f"dec{lvl}_conv0", [x], ch)
        x = b.add("conv3", f"dec{lvl}_conv1", [x], ch)
    x = b.add("predict1", "score", [x], num_classes)
    out = b.add("softmax", "probs", [x])
    if not single_res:
        probes += [f"enc{lvl}_conv1" for lvl in range(4)]
    return b, out, probes


def _build_net3(fb, in_channels, num_classes, single_res):
    """Two same-input paths: a pool-free local path and a pooled context path."""
    b = _Builder(in_channels)
    inp = b.add("input", "in")
    x = inp
    for i in range(8):
        x = b.add("conv3", f"local_conv{i}", [x], fb)
    local_exit = x
    probes = [local_exit]
    if single_res:
        x = b.add("predict1", "score", [local_exit], num_classes)
    else:
        x = inp
        for lvl, n_convs in enumerate((1, 2, 2, 4)):
            ch = filter_schedule(fb, lvl)
            for i in range(n_convs):
                x = b.add("conv3", f"ctx{lvl}_conv{i}", [x], ch)
            x = b.add("pool2", f"ctx_pool{lvl}", [x])
        for lvl in (3, 2, 1, 0):
            x = b.add("upsample2", f"ctx_up{lvl}", [x], filter_schedule(fb, lvl))
        probes.append(x)
        x = b.add("concat", "fuse", [local_exit, x])
        x = b.add("predict1", "score", [x], num_classes)
    out = b.add("softmax", "probs", [x])
    return b, out, probes


_BUILDERS = {"net1": _build_net1, "net2": _build_net2, "net3": _build_net3}
ARCH_KINDS = tuple(_BUILDERS)


def build_architecture(
    kind: str,
    filter_base: int = 8,
    in_channels: int = 4,
    num_classes: int = 5,
    single_res: bool = False,
) -> ArchitectureGraph:
    """Build one of the three reference networks (or its ablation)."""
    if kind not in _BUILDERS:
        raise GraphError(f"unknown architecture kind {kind!r} (choose from {ARCH_KINDS})")
    if filter_base < 1:
        raise GraphError("filter_base must be >= 1")
    b, out, probes = _BUILDERS[kind](filter_base, in_channels, num_classes, single_res)
    meta = {
        "kind": kind,
        "filter_base": filter_base,
        "in_channels": in_channels,
        "num_classes": num_classes,
        "single_res": bool(single_res),
    }
    return b.graph(out, probes, meta)


def single_resolution_variant(graph: ArchitectureGraph, kind: str) -> ArchitectureGraph:
    """Ablate a built graph to its single-resolution form.

    net1 keeps only the deep-score path (no sums), net2 keeps both paths but
    cuts the cross connections, net3 keeps the local path alone.
    """
    if kind not in _BUILDERS:
        raise GraphError(f"unknown architecture kind {kind!r}")
    if graph.meta.get("kind") != kind:
        raise GraphError(
            f"graph was built as {graph.meta.get('kind')!r}, not {kind!r}"
        )
    return build_architecture(
        kind,
        filter_base=graph.meta["filter_base"],
        in_channels=graph.meta["in_channels"],
        num_classes=graph.meta["num_classes"],
        single_res=True,
    )


def count_parameters(
    graph: ArchitectureGraph, in_channels: int | None = None, num_classes: int | None = None
) -> int:
    """Learnable parameter count: conv kernels + biases + 2 per batch-norm channel."""
    if in_channels is not None and in_channels != graph.in_channels:
        raise GraphError(f"graph has {graph.in_channels} input channels, not {in_channels}")
    channels = graph.channels()
    total = 0
    for node in graph.nodes:
        if node.kind in ("conv3", "upsample2"):
            cin = channels[graph.inputs_of(node.name)[0]]
            total += 27 * cin * node.out_channels + node.out_channels  # kernel + bias
            total += 2 * node.out_channels  # batch-norm scale + shift
        elif node.kind == "predict1":
            if num_classes is not None and node.out_channels != num_classes:
                raise GraphError(
                    f"predict1 node {node.name!r} emits {node.out_channels} classes, "
                    f"not {num_classes}"
                )
            cin = channels[graph.inputs_of(node.name)[0]]
            total += cin * node.out_channels + node.out_channels
    return total


def estimate_activation_memory(graph: ArchitectureGraph, input_size, bytes_per_value: int = 4) -> int:
    """Bytes held by all node outputs for one input (the input tensor excluded)."""
    size = np.atleast_1d(np.asarray(input_size, dtype=int))
    if size.size == 1:
        size = np.repeat(size, 3)
    depth = graph.pooling_depth()
    if (size % 2**depth).any():
        raise GraphError(
            f"input size {tuple(size)} not divisible by 2^{depth} (pooling depth)"
        )
    levels = graph.levels()
    channels = graph.channels()
    total = 0
    for node in graph.nodes:
        if node.kind == "input":
            continue
        spatial = int(np.prod(size // 2 ** levels[node.name]))
        total += channels[node.name] * spatial * bytes_per_value
    return total


# -- serialization ----------------------------------------------------------


def graph_to_json(graph: ArchitectureGraph) -> str:
    doc = {
        "nodes": [
            {"name": n.name, "kind": n.kind, "out_channels": n.out_channels}
            for n in graph.nodes
        ],
        "edges": [list(e) for e in graph.edges],
        "output": graph.output,
        "in_channels": graph.in_channels,
        "probes": list(graph.probes),
        "meta": graph.meta,
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def graph_from_json(text: str) -> ArchitectureGraph:
    try:
        doc = json.loads(text)
        nodes = tuple(
            LayerSpec(name=n["name"], kind=n["kind"], out_channels=n["out_channels"])
            for n in doc["nodes"]
        )
        return ArchitectureGraph(
            nodes=nodes,
            edges=tuple(tuple(e) for e in doc["edges"]),
            output=doc["output"],
            in_channels=doc["in_channels"],
            probes=tuple(doc.get("probes", ())),
            meta=doc.get("meta", {}),
        )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise GraphError(f"malformed graph document: {exc}") from None


def graph_hash(graph: ArchitectureGraph) -> str:
    canonical = json.dumps(json.loads(graph_to_json(graph)), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_graph(path, graph: ArchitectureGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(graph_to_json(graph))


def load_graph(path) -> ArchitectureGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return graph_from_json(fh.read())
