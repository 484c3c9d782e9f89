"""Transportation-map flow graph for the encoder.

Layer nodes own parameters and have one incoming and one outgoing edge;
computation nodes (``add``, ``concat``, ``attend``) merge several incoming
maps into one outgoing map. A node's single outgoing edge may be delivered
to several consumers (the residual stream feeds both the next block and the
skip connection), so an :class:`Edge` carries a list of destinations.

Propagation walks nodes in topological order and asks caller-supplied
callbacks for the maps of layer and add nodes; see :func:`propagate`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import ArchConfig


class NodeKind(str, enum.Enum):
    SOURCE = "source"
    LAYER = "layer"
    ADD = "add"
    CONCAT = "concat"
    ATTEND = "attend"  # softmax(QK^T)V: passes the value map on
    SINK = "sink"


class ResidualPolicy(str, enum.Enum):
    AVERAGING = "avg"
    WEIGHTED_SCALAR = "scalar"
    WEIGHTED_MATRIX = "matrix"
    IDENTITY = "identity"
    RESIDUAL_ONLY = "residual"


@dataclass
class FlowNode:
    id: int
    kind: NodeKind
    name: str
    incoming: list[int] = field(default_factory=list)
    outgoing: int | None = None
    passthrough: bool = False  # layer without its own map (layer norm)


@dataclass
class Edge:
    id: int
    src: int
    dsts: list[int] = field(default_factory=list)


@dataclass
class FlowGraph:
    nodes: list[FlowNode] = field(default_factory=list)
    edges: list[Edge] = field(default_factory=list)

    def add_node(self, kind: NodeKind, name: str, inputs=(), passthrough: bool = False) -> FlowNode:
        node = FlowNode(len(self.nodes), kind, name, passthrough=passthrough)
        self.nodes.append(node)
        for src in inputs:
            self.connect(src, node)
        return node

    def connect(self, src: FlowNode, dst: FlowNode) -> None:
        if src.outgoing is None:
            edge = Edge(len(self.edges), src.id)
            self.edges.append(edge)
            src.outgoing = edge.id
        edge = self.edges[src.outgoing]
        edge.dsts.append(dst.id)
        dst.incoming.append(edge.id)

    def node(self, name: str) -> FlowNode:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def topological_order(self) -> list[FlowNode]:
        indeg = {n.id: len(n.incoming) for n in self.nodes}
        ready = [n.id for n in self.nodes if indeg[n.id] == 0]
        order = []
        while ready:
            nid = ready.pop(0)
            order.append(self.nodes[nid])
            out = self.nodes[nid].outgoing
            if out is None:
                continue
            for dst in self.edges[out].dsts:
                indeg[dst] -= 1
                if indeg[dst] == 0:
                    ready.append(dst)
        if len(order) != len(self.nodes):
            raise ValueError("flow graph has a cycle")
        return order

    def validate(self) -> None:
        for n in self.nodes:
            if n.kind is NodeKind.LAYER and (len(n.incoming) != 1 or n.outgoing is None):
                raise ValueError(f"layer node {n.name} must have one incoming and one outgoing edge")
            if n.kind in (NodeKind.ADD, NodeKind.CONCAT, NodeKind.ATTEND):
                if len(n.incoming) < 2 or n.outgoing is None:
                    raise ValueError(f"computation node {n.name} needs >= 2 inputs and an output")
            if n.kind is NodeKind.SOURCE and n.incoming:
                raise ValueError(f"source {n.name} has inputs")
            if n.kind is NodeKind.SINK and n.outgoing is not None:
                raise ValueError(f"sink {n.name} has an output")
        self.topological_order()


def build_encoder_flow_graph(arch: ArchConfig) -> FlowGraph:
    """Flow graph of the encoder in :mod:`otfuse.model`.

    Add nodes list their inputs as ``[current, residual]``; concat nodes list
    the patch stream first.
    """
    g = FlowGraph()
    src = g.add_node(NodeKind.SOURCE, "input")
    patch = g.add_node(NodeKind.LAYER, "embed.patch", [src])
    cls = g.add_node(NodeKind.SOURCE, "embed.cls")
    concat = g.add_node(NodeKind.CONCAT, "embed.concat", [patch, cls])
    pos = g.add_node(NodeKind.SOURCE, "embed.pos")
    stream = g.add_node(NodeKind.ADD, "embed.add_pos", [pos, concat])
    for i in range(arch.num_layers):
        pre = f"layers.{i}."
        ln1 = g.add_node(NodeKind.LAYER, pre + "ln1", [stream], passthrough=True)
        q = g.add_node(NodeKind.LAYER, pre + "attn.q", [ln1])
        k = g.add_node(NodeKind.LAYER, pre + "attn.k", [ln1])
        v = g.add_node(NodeKind.LAYER, pre + "attn.v", [ln1])
        att = g.add_node(NodeKind.ATTEND, pre + "attn.attend", [q, k, v])
        o = g.add_node(NodeKind.LAYER, pre + "attn.o", [att])
        stream = g.add_node(NodeKind.ADD, pre + "add_attn", [o, stream])
        ln2 = g.add_node(NodeKind.LAYER, pre + "ln2", [stream], passthrough=True)
        fc1 = g.add_node(NodeKind.LAYER, pre + "mlp.fc1", [ln2])
        fc2 = g.add_node(NodeKind.LAYER, pre + "mlp.fc2", [fc1])
        stream = g.add_node(NodeKind.ADD, pre + "add_mlp", [fc2, stream])
    fln = g.add_node(NodeKind.LAYER, "final_ln", [stream], passthrough=True)
    head = g.add_node(NodeKind.LAYER, "head", [fln])
    g.add_node(NodeKind.SINK, "logits", [head])
    g.validate()
    return g


LayerFn = Callable[[FlowNode, np.ndarray], np.ndarray]
AddFn = Callable[[FlowNode, np.ndarray, np.ndarray], np.ndarray]
SourceFn = Callable[[FlowNode], "np.ndarray | None"]


def propagate(graph: FlowGraph, source_fn: SourceFn, layer_fn: LayerFn, add_fn: AddFn) -> dict[int, np.ndarray]:
    """Compute the map on every edge, visiting each node once in topological order.

    ``layer_fn(node, incoming)`` returns a layer's outgoing map (it is not
    called for pass-through layers, which forward their incoming map).
    ``add_fn(node, current, residual)`` combines the two strands of an add
    node. Concat nodes forward their first (patch) input; attend nodes
    forward the value map (third input). Returns ``{edge_id: map}``.
    """
    maps: dict[int, np.ndarray] = {}
    for node in graph.topological_order():
        ins = [maps.get(e) for e in node.incoming]
        if node.kind is NodeKind.SOURCE:
            out = source_fn(node)
        elif node.kind is NodeKind.LAYER:
            out = ins[0] if node.passthrough else layer_fn(node, ins[0])
        elif node.kind is NodeKind.ADD:
            current, residual = ins
            out = residual if current is None else add_fn(node, current, residual)
        elif node.kind is NodeKind.CONCAT:
            out = ins[0]
        elif node.kind is NodeKind.ATTEND:
            out = ins[2]
        else:
            continue
        if node.outgoing is not None:
            maps[node.outgoing] = out
    return maps


def gamma_scalar(f_current: np.ndarray, f_residual: np.ndarray) -> np.ndarray:
    """Share of L1 activation mass carried by the residual strand, one value for all neurons."""
    cur = float(np.abs(np.asarray(f_current, dtype=np.float64)).sum())
    res = float(np.abs(np.asarray(f_residual, dtype=np.float64)).sum())
    d = np.shape(f_current)[0]
    gamma = 0.5 if cur + res == 0 else res / (cur + res)
    return np.full(d, gamma)


def gamma_matrix(f_current: np.ndarray, f_residual: np.ndarray) -> np.ndarray:
    """Per-neuron residual share; neurons silent on both strands get 0.5."""
    cur = np.abs(np.asarray(f_current, dtype=np.float64)).sum(axis=1)
    res = np.abs(np.asarray(f_residual, dtype=np.float64)).sum(axis=1)
    total = cur + res
    return np.divide(res, total, out=np.full_like(total, 0.5), where=total > 0)


def combine_residual_maps(t_current: np.ndarray, t_residual: np.ndarray, gamma) -> np.ndarray:
    """``T_cur diag(1 - gamma) + T_res diag(gamma)`` with columns renormalised.

    ``gamma`` is indexed by anchor neuron (the column axis of the maps).
    """
    t_current = np.asarray(t_current, dtype=np.float64)
    t_residual = np.asarray(t_residual, dtype=np.float64)
    if t_current.shape != t_residual.shape:
        raise ValueError(f"residual maps differ in shape: {t_current.shape} vs {t_residual.shape}")
    gamma = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (t_current.shape[1],))
    if np.any(gamma < 0) or np.any(gamma > 1):
        raise ValueError("gamma entries must lie in [0, 1]")
    out = t_current * (1.0 - gamma)[None, :] + t_residual * gamma[None, :]
    sums = out.sum(axis=0)
    return out / np.where(sums > 0, sums, 1.0)[None, :]


def policy_gamma(policy: ResidualPolicy, f_current=None, f_residual=None, width: int | None = None) -> np.ndarray | None:
    """Gamma for ``policy``; ``None`` for the identity policy (the caller emits I)."""
    if policy is ResidualPolicy.IDENTITY:
        return None
    if policy is ResidualPolicy.AVERAGING:
        return np.full(width, 0.5)
    if policy is ResidualPolicy.RESIDUAL_ONLY:
        return np.ones(width)
    if f_current is None or f_residual is None:
        raise ValueError(f"residual policy {policy.value} needs anchor activations")
    if policy is ResidualPolicy.WEIGHTED_SCALAR:
        return gamma_scalar(f_current, f_residual)
    return gamma_matrix(f_current, f_residual)


def _describe(m: np.ndarray) -> str:
    if m is None:
        return "-"
    hard = m.shape[0] == m.shape[1] and np.all((m == 0) | (m == 1))
    return f"{m.shape[0]}x{m.shape[1]} {'perm' if hard else 'soft'}"


def to_dot(graph: FlowGraph, maps: dict[int, np.ndarray] | None = None) -> str:
    """DOT rendering; edges are labelled with their map summaries when ``maps`` is given."""
    lines = ["digraph flow {", "  rankdir=TB;"]
    for n in graph.nodes:
        if n.kind is NodeKind.LAYER:
            style = "shape=box" + (", style=dashed" if n.passthrough else "")
        elif n.kind in (NodeKind.SOURCE, NodeKind.SINK):
            style = "shape=ellipse"
        else:
            style = "shape=circle, color=red"
        lines.append(f'  n{n.id} [label="{n.name}", {style}];')
    for e in graph.edges:
        label = f' [label="{_describe(maps.get(e.id))}"]' if maps is not None else ""
        for dst in e.dsts:
            lines.append(f"  n{e.src} -> n{dst}{label};")
    lines.append("}")
    return "\n".join(lines) + "\n"
