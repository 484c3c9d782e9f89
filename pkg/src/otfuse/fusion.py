"""Optimal-transport fusion of encoder transformers.

Every non-anchor model is aligned to the anchor by walking the flow graph:
each layer gets an alignment map from the OT problem between its neurons and
the anchor's, its weights are rewritten as ``M_in.T @ W @ M_out`` and its
outgoing map flows on to the next layer. The aligned models are then
averaged with the anchor.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import flowgraph as fg
from .model import ArchConfig, ActivationTrace, Params, check_params, forward, param_shapes
from .ot import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    AlignmentMap,
    build_cost_matrix,
    solve_emd,
    solve_sinkhorn,
    to_alignment_map,
)


class FusionError(ValueError):
    kind = "fusion"


class HeterogeneousError(FusionError):
    kind = "heterogeneous"


class AlignMode(str, enum.Enum):
    WEIGHTS = "weights"
    ACTIVATIONS = "acts"


class Solver(str, enum.Enum):
    EMD = "emd"
    SINKHORN = "sinkhorn"


DEFAULT_LAMBDA = {AlignMode.WEIGHTS: 0.06, AlignMode.ACTIVATIONS: 0.08}


@dataclass(frozen=True)
class SequenceFilter:
    """Which token positions contribute activation samples."""

    kind: str = "all"  # "all" | "cls" | "window"
    n: int | None = None

    def __post_init__(self):
        if self.kind not in ("all", "cls", "window"):
            raise ValueError(f"unknown sequence filter {self.kind!r}")
        if self.kind == "window" and (self.n is None or self.n < 1):
            raise ValueError("window filter needs n >= 1")

    @classmethod
    def parse(cls, text: str) -> SequenceFilter:
        text = text.strip().lower()
        if text in ("all", "cls"):
            return cls(text)
        if text.startswith("window:") or text.startswith("window_"):
            return cls("window", int(text[7:]))
        raise ValueError(f"cannot parse sequence filter {text!r} (all, cls, window:<n>)")

    def __str__(self) -> str:
        return f"window:{self.n}" if self.kind == "window" else self.kind

    def token_indices(self, grid_side: int) -> np.ndarray:
        """Kept token positions within one sequence (class token is position 0)."""
        if self.kind == "all":
            return np.arange(grid_side * grid_side + 1)
        if self.kind == "cls":
            return np.array([0])
        if self.n > grid_side:
            raise ValueError(f"window {self.n} larger than grid side {grid_side}")
        lo = (grid_side - self.n) // 2
        rows = np.arange(lo, lo + self.n)
        return (rows[:, None] * grid_side + rows[None, :]).reshape(-1) + 1


@dataclass(frozen=True)
class FusionConfig:
    mode: AlignMode = AlignMode.WEIGHTS
    solver: Solver = Solver.SINKHORN
    lam: float | None = None  # None: per-mode default
    residual_policy: fg.ResidualPolicy = fg.ResidualPolicy.AVERAGING
    filter: SequenceFilter = field(default_factory=SequenceFilter)
    tie_qk: bool = True
    normalize_features: bool = False
    normalize_cost: bool = True
    anchor_index: int = 0
    pos_map: bool = False  # separate map for the positional embedding branch
    sample_size: int = 64
    sample_seed: int = 0
    sinkhorn_tol: float = DEFAULT_TOL
    sinkhorn_max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        for name, enum_type in (("mode", AlignMode), ("solver", Solver),
                                ("residual_policy", fg.ResidualPolicy)):
            object.__setattr__(self, name, enum_type(getattr(self, name)))
        if isinstance(self.filter, str):
            object.__setattr__(self, "filter", SequenceFilter.parse(self.filter))
        if self.solver is Solver.EMD and not self.tie_qk:
            raise ValueError("hard (EMD) alignment requires tied query/key maps")
        if self.solver is Solver.SINKHORN and not self.regularizer > 0:
            raise ValueError("Sinkhorn regulariser must be positive")

    @property
    def regularizer(self) -> float:
        return DEFAULT_LAMBDA[self.mode] if self.lam is None else float(self.lam)

    @property
    def needs_activations(self) -> bool:
        return self.mode is AlignMode.ACTIVATIONS or self.residual_policy in (
            fg.ResidualPolicy.WEIGHTED_SCALAR, fg.ResidualPolicy.WEIGHTED_MATRIX)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["solver"] = self.solver.value
        d["residual_policy"] = self.residual_policy.value
        d["filter"] = str(self.filter)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FusionConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown fusion config keys: {sorted(unknown)}")
        return cls(**d)


def filter_tokens(site: np.ndarray, filt: SequenceFilter, arch: ArchConfig) -> np.ndarray:
    """Keep the filtered token columns of a ``d x (B * seq)`` activation matrix."""
    seq = arch.seq_len
    if site.shape[1] % seq:
        raise ValueError(f"sample count {site.shape[1]} is not a multiple of seq_len {seq}")
    if filt.kind == "all":
        return site
    keep = filt.token_indices(arch.grid_side)
    batch = site.shape[1] // seq
    cols = (np.arange(batch)[:, None] * seq + keep[None, :]).reshape(-1)
    return site[:, cols]


# layer node suffix -> (weight, bias, trace site)
_LAYER_SITES = {
    "attn.q": ("attn.wq", "attn.bq", "q_out"),
    "attn.k": ("attn.wk", "attn.bk", "k_out"),
    "attn.v": ("attn.wv", "attn.bv", "v_out"),
    "attn.o": ("attn.wo", "attn.bo", "attn_proj_out"),
    "mlp.fc1": ("mlp.w1", "mlp.b1", "fc1_out"),
    "mlp.fc2": ("mlp.w2", "mlp.b2", "fc2_out"),
}


def site_names(site: str) -> tuple[str, str, str]:
    """Weight name, bias name and trace site of a layer node."""
    if site == "embed.patch":
        return "embed.patch.w", "embed.patch.b", "embeddings_out"
    if site == "head":
        return "head.w", "head.b", ""
    prefix, _, rest = site.partition(".")
    layer, _, suffix = rest.partition(".")
    w, b, t = _LAYER_SITES[suffix]
    pre = f"{prefix}.{layer}."
    return pre + w, pre + b, pre + t


def neuron_features(
    anchor: Params,
    other: Params,
    site: str,
    mode: AlignMode,
    incoming_map: AlignmentMap | None = None,
    traces: tuple[ActivationTrace, ActivationTrace] | None = None,
    filt: SequenceFilter | None = None,
    arch: ArchConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Feature rows ``(x, y)`` for the other model's and the anchor's neurons at ``site``.

    Weights mode: output-neuron weight columns, with the other model's input
    axis first carried into anchor coordinates by ``incoming_map``.
    Activations mode: filtered activation rows captured on a shared batch.
    """
    wname, _, tname = site_names(site)
    if AlignMode(mode) is AlignMode.WEIGHTS:
        w_other = np.asarray(other[wname], dtype=np.float64)
        if incoming_map is not None:
            w_other = incoming_map.T @ w_other
        return w_other.T, np.asarray(anchor[wname], dtype=np.float64).T
    if traces is None:
        raise FusionError(f"activation alignment of {site} needs captured traces")
    tr_anchor, tr_other = traces
    if tname not in tr_anchor or tname not in tr_other:
        raise FusionError(f"trace site {tname} missing")
    filt = filt or SequenceFilter()
    x = filter_tokens(tr_other[tname], filt, arch)
    y = filter_tokens(tr_anchor[tname], filt, arch)
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)


def compute_site_map(x: np.ndarray, y: np.ndarray, config: FusionConfig) -> AlignmentMap:
    cost = build_cost_matrix(x, y, config.normalize_features, config.normalize_cost)
    if config.solver is Solver.EMD:
        plan = solve_emd(cost)
    else:
        plan = solve_sinkhorn(cost, config.regularizer, config.sinkhorn_tol, config.sinkhorn_max_iter)
    return to_alignment_map(plan)


SiteMapFn = Callable[[np.ndarray, np.ndarray, FusionConfig], AlignmentMap]


@dataclass
class Alignment:
    """Result of aligning one model to the anchor."""

    params: Params
    site_maps: dict[str, AlignmentMap]  # layer node name -> outgoing map
    edge_maps: dict[int, AlignmentMap]
    graph: fg.FlowGraph


def _check_pair(arch_a: ArchConfig, arch_o: ArchConfig, config: FusionConfig) -> None:
    if arch_a.num_layers != arch_o.num_layers:
        raise FusionError(
            f"cannot fuse models of different depth ({arch_a.num_layers} vs {arch_o.num_layers})"
        )
    for name in ("grid_side", "patch_dim", "num_classes"):
        if getattr(arch_a, name) != getattr(arch_o, name):
            raise FusionError(f"models disagree on {name}")
    widths_differ = (arch_a.hidden_dim, arch_a.intermediate_dim) != (
        arch_o.hidden_dim, arch_o.intermediate_dim)
    if widths_differ and config.solver is Solver.EMD:
        raise HeterogeneousError(
            "exact EMD alignment needs equal widths; use Sinkhorn for heterogeneous fusion"
        )
    if widths_differ and config.residual_policy is fg.ResidualPolicy.IDENTITY:
        raise HeterogeneousError("identity residual policy is undefined across widths")


def capture_traces(params: Params, arch: ArchConfig, batch: np.ndarray) -> ActivationTrace:
    return forward(params, arch, batch, capture=True)[1]


def compute_alignment(
    anchor: Params,
    other: Params,
    arch_anchor: ArchConfig,
    arch_other: ArchConfig,
    config: FusionConfig,
    sample_batch: np.ndarray | None = None,
    site_map_fn: SiteMapFn = compute_site_map,
    traces: tuple[ActivationTrace, ActivationTrace] | None = None,
) -> Alignment:
    """Align ``other`` to ``anchor``; the result has the anchor's shapes.

    ``site_map_fn`` replaces the OT map computation (used to force identity
    maps). ``traces`` may carry precomputed ``(anchor, other)`` activations.
    """
    check_params(anchor, arch_anchor)
    check_params(other, arch_other)
    _check_pair(arch_anchor, arch_other, config)
    if config.needs_activations and traces is None:
        if sample_batch is None:
            raise FusionError("this configuration needs a sample batch for activations")
        traces = (capture_traces(anchor, arch_anchor, sample_batch),
                  capture_traces(other, arch_other, sample_batch))
    tr_anchor = traces[0] if traces else None
    filt = config.filter
    graph = fg.build_encoder_flow_graph(arch_anchor)
    site_maps: dict[str, AlignmentMap] = {}

    def features(site, m_in):
        return neuron_features(anchor, other, site, config.mode, m_in, traces, filt, arch_anchor)

    def source_fn(node):
        if node.name == "input":
            return np.eye(arch_anchor.patch_dim)
        if node.name == "embed.pos" and config.pos_map:
            m = site_map_fn(np.asarray(other["embed.pos"], dtype=np.float64).T,
                            np.asarray(anchor["embed.pos"], dtype=np.float64).T, config)
            site_maps["embed.pos"] = m
            return m
        return None

    def layer_fn(node, m_in):
        site = node.name
        if site == "head":
            m = np.eye(arch_anchor.num_classes)
        elif site.endswith("attn.k") and config.tie_qk:
            m = site_maps[site[:-1] + "q"]
        elif site.endswith("attn.q") and config.tie_qk:
            xq, yq = features(site, m_in)
            xk, yk = features(site[:-1] + "k", m_in)
            m = site_map_fn(np.hstack([xq, xk]), np.hstack([yq, yk]), config)
        else:
            m = site_map_fn(*features(site, m_in), config)
        site_maps[site] = m
        return m

    def add_fn(node, current, residual):
        policy = config.residual_policy
        if policy is fg.ResidualPolicy.IDENTITY:
            return np.eye(current.shape[1])
        f_cur = f_res = None
        if tr_anchor is not None and policy in (fg.ResidualPolicy.WEIGHTED_SCALAR,
                                                fg.ResidualPolicy.WEIGHTED_MATRIX):
            f_cur, f_res = _add_activations(node.name, tr_anchor, anchor, arch_anchor, filt)
        gamma = fg.policy_gamma(policy, f_cur, f_res, width=current.shape[1])
        return fg.combine_residual_maps(current, residual, gamma)

    edge_maps = fg.propagate(graph, source_fn, layer_fn, add_fn)
    aligned = _rewrite(other, arch_anchor, graph, edge_maps, site_maps)
    return Alignment(aligned, site_maps, edge_maps, graph)


def _add_activations(name, trace, anchor, arch, filt):
    if name == "embed.add_pos":
        batch = trace.batch_size
        pos = np.tile(np.asarray(anchor["embed.pos"], dtype=np.float64).T, (1, batch))
        cur, res = pos, trace["embed.concat_out"]
    else:
        pre = name.rsplit(".", 1)[0] + "."
        if name.endswith("add_attn"):
            cur, res = trace[pre + "attn_proj_out"], trace[pre + "attn_resid_in"]
        else:
            cur, res = trace[pre + "fc2_out"], trace[pre + "mlp_resid_in"]
    return filter_tokens(cur, filt, arch), filter_tokens(res, filt, arch)


def _rewrite(other: Params, arch: ArchConfig, graph: fg.FlowGraph,
             edge_maps: dict[int, np.ndarray], site_maps: dict[str, np.ndarray]) -> Params:
    out: Params = {}
    O = {k: np.asarray(v, dtype=np.float64) for k, v in other.items()}

    def m_in(node_name):
        return edge_maps[graph.node(node_name).incoming[0]]

    for node in graph.nodes:
        if node.kind is not fg.NodeKind.LAYER:
            continue
        name = node.name
        if node.passthrough:
            mi = m_in(name)
            out[name + ".alpha"] = mi.T @ O[name + ".alpha"]
            out[name + ".beta"] = mi.T @ O[name + ".beta"]
            continue
        wname, bname, _ = site_names(name)
        mi, mo = m_in(name), site_maps[name]
        out[wname] = mi.T @ O[wname] @ mo
        out[bname] = mo.T @ O[bname]
    m_emb = edge_maps[graph.node("embed.concat").outgoing]
    out["embed.cls"] = m_emb.T @ O["embed.cls"]
    m_pos = site_maps.get("embed.pos", m_emb)
    out["embed.pos"] = O["embed.pos"] @ m_pos
    # classes are shared, the head output axis is never moved
    out["head.b"] = O["head.b"]
    result = {k: out[k].astype(np.float32) for k in param_shapes(arch)}
    check_params(result, arch)
    return result


def align_model(anchor, other, arch_anchor, arch_other, config, sample_batch=None, **kwargs) -> Params:
    return compute_alignment(anchor, other, arch_anchor, arch_other, config,
                             sample_batch, **kwargs).params


def average_params(models: list[Params]) -> Params:
    names = models[0].keys()
    return {k: (np.mean([np.asarray(m[k], dtype=np.float64) for m in models], axis=0)
                .astype(np.float32)) for k in names}


def vanilla_fuse(models: list[Params]) -> Params:
    """Elementwise mean of identically shaped models (no alignment)."""
    if len(models) < 1:
        raise FusionError("nothing to fuse")
    ref = models[0]
    for m in models[1:]:
        if m.keys() != ref.keys() or any(m[k].shape != ref[k].shape for k in ref):
            raise HeterogeneousError(
                "vanilla fusion cannot be applied to heterogeneous models (shapes differ)"
            )
    return average_params(models)


def fuse_models(
    models: list[Params],
    archs: list[ArchConfig],
    config: FusionConfig,
    sample_batch: np.ndarray | None = None,
    site_map_fn: SiteMapFn = compute_site_map,
) -> Params:
    """Align every model to the anchor independently, then average uniformly."""
    if len(models) < 2 or len(models) != len(archs):
        raise FusionError("fusion needs at least two models, each with its architecture")
    k = config.anchor_index
    if not 0 <= k < len(models):
        raise FusionError(f"anchor index {k} out of range for {len(models)} models")
    anchor, arch_a = models[k], archs[k]
    traces_anchor = None
    if config.needs_activations:
        if sample_batch is None:
            raise FusionError("this configuration needs a sample batch for activations")
        traces_anchor = capture_traces(anchor, arch_a, sample_batch)
    aligned = [anchor]
    for i, (m, arch) in enumerate(zip(models, archs)):
        if i == k:
            continue
        traces = None
        if traces_anchor is not None:
            traces = (traces_anchor, capture_traces(m, arch, sample_batch))
        aligned.append(align_model(anchor, m, arch_a, arch, config,
                                   site_map_fn=site_map_fn, traces=traces))
    return average_params(aligned)


def identity_site_map(x: np.ndarray, y: np.ndarray, config: FusionConfig) -> AlignmentMap:
    """Site-map function that never moves neurons (reduces fusion to vanilla averaging)."""
    if x.shape[0] != y.shape[0]:
        raise HeterogeneousError("identity maps need equal widths")
    return np.eye(x.shape[0])
