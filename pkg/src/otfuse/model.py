"""Tiny pre-LN vision transformer: parameters, forward pass, permutation oracle.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed by dotted names
(see :func:`param_shapes`). Weight matrices are stored input-axis x
output-axis, so a layer computes ``x @ W + b``.

The forward pass runs in float64 regardless of the parameter dtype; public
outputs are cast back to the parameter dtype.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .linalg import Rng, ShapeError, gelu, softmax_rows, trunc_normal

Params = dict[str, np.ndarray]

INIT_STD = 0.02


@dataclass(frozen=True)
class ArchConfig:
    hidden_dim: int = 32
    intermediate_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    grid_side: int = 3
    patch_dim: int = 16
    num_classes: int = 5
    eps_ln: float = 1e-6

    def __post_init__(self):
        for name in ("hidden_dim", "intermediate_dim", "num_layers", "num_heads",
                     "grid_side", "patch_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"ArchConfig.{name} must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if not self.eps_ln > 0:
            raise ValueError("eps_ln must be positive")

    @property
    def num_patches(self) -> int:
        return self.grid_side * self.grid_side

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ArchConfig:
        return cls(**d)


def param_shapes(arch: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in serialisation order."""
    d, f, p = arch.hidden_dim, arch.intermediate_dim, arch.patch_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embed.patch.w": (p, d),
        "embed.patch.b": (d,),
        "embed.cls": (d,),
        "embed.pos": (arch.seq_len, d),
    }
    for i in range(arch.num_layers):
        pre = f"layers.{i}."
        shapes.update({
            pre + "ln1.alpha": (d,),
            pre + "ln1.beta": (d,),
            pre + "attn.wq": (d, d),
            pre + "attn.bq": (d,),
            pre + "attn.wk": (d, d),
            pre + "attn.bk": (d,),
            pre + "attn.wv": (d, d),
            pre + "attn.bv": (d,),
            pre + "attn.wo": (d, d),
            pre + "attn.bo": (d,),
            pre + "ln2.alpha": (d,),
            pre + "ln2.beta": (d,),
            pre + "mlp.w1": (d, f),
            pre + "mlp.b1": (f,),
            pre + "mlp.w2": (f, d),
            pre + "mlp.b2": (d,),
        })
    shapes.update({
        "final_ln.alpha": (d,),
        "final_ln.beta": (d,),
        "head.w": (d, arch.num_classes),
        "head.b": (arch.num_classes,),
    })
    return shapes


def check_params(params: Params, arch: ArchConfig) -> None:
    expected = param_shapes(arch)
    missing = expected.keys() - params.keys()
    extra = params.keys() - expected.keys()
    if missing or extra:
        raise ShapeError(f"parameter names differ: missing={sorted(missing)} extra={sorted(extra)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")


def init_params(arch: ArchConfig, rng: Rng) -> Params:
    """Truncated-normal(0, 0.02) weights and embeddings, zero biases, identity LN."""
    params: Params = {}
    for name, shape in param_shapes(arch).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "alpha":
            params[name] = np.ones(shape, dtype=np.float32)
        elif leaf == "beta" or (leaf.startswith("b") and len(shape) == 1):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            params[name] = trunc_normal(rng, shape, INIT_STD)
    return params


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


@dataclass
class ActivationTrace:
    """Captured activations, one ``neurons x (batch * seq_len)`` matrix per site.

    Token samples are ordered batch-major: column ``b * seq_len + t`` is token
    ``t`` of batch element ``b``. Site names:

    - ``embeddings_out``: the embedded sequence (class token prepended,
      positional embedding added)
    - ``embed.concat_out``: the sequence before the positional embedding
    - ``layers.{i}.q_out`` / ``k_out`` / ``v_out`` / ``attn_proj_out``
    - ``layers.{i}.fc1_out``: after the GELU
    - ``layers.{i}.fc2_out``
    - ``layers.{i}.attn_resid_in`` / ``mlp_resid_in``: the residual stream
      entering each block's skip connection

    ``attn_probs[i]`` holds the ``(batch, heads, seq, seq)`` attention
    probabilities of layer ``i``.
    """

    batch_size: int
    seq_len: int
    sites: dict[str, np.ndarray] = field(default_factory=dict)
    attn_probs: list[np.ndarray] = field(default_factory=list)

    def __getitem__(self, site: str) -> np.ndarray:
        return self.sites[site]

    def __contains__(self, site: str) -> bool:
        return site in self.sites


def _ln(x, alpha, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * alpha + beta, (xhat, rstd)


def _linear(x, w, b):
    # one 2-D GEMM instead of a batched matmul over the leading axes
    return (x.reshape(-1, x.shape[-1]) @ w + b).reshape(*x.shape[:-1], w.shape[1])


def _split_heads(x, h):
    b, s, d = x.shape
    return x.reshape(b, s, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def _check_batch(arch: ArchConfig, batch: np.ndarray) -> None:
    if batch.ndim != 3 or batch.shape[1:] != (arch.num_patches, arch.patch_dim):
        raise ShapeError(
            f"batch shape {batch.shape} does not match (B, {arch.num_patches}, {arch.patch_dim})"
        )


def forward_cached(params: Params, arch: ArchConfig, batch: np.ndarray):
    """Float64 forward pass returning ``(logits, cache)`` for backpropagation."""
    _check_batch(arch, batch)
    P = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    x_in = np.asarray(batch, dtype=np.float64)
    B = x_in.shape[0]
    h, eps = arch.num_heads, arch.eps_ln
    scale = 1.0 / math.sqrt(arch.head_dim)

    e = _linear(x_in, P["embed.patch.w"], P["embed.patch.b"])
    cls = np.broadcast_to(P["embed.cls"], (B, 1, arch.hidden_dim))
    concat = np.concatenate([cls, e], axis=1)
    x = concat + P["embed.pos"]
    cache = {"P": P, "x_in": x_in, "patch_out": e, "concat": concat, "embed": x, "layers": []}

    for i in range(arch.num_layers):
        pre = f"layers.{i}."
        lc: dict = {"x_attn_in": x}
        a, lc["ln1"] = _ln(x, P[pre + "ln1.alpha"], P[pre + "ln1.beta"], eps)
        q = _linear(a, P[pre + "attn.wq"], P[pre + "attn.bq"])
        k = _linear(a, P[pre + "attn.wk"], P[pre + "attn.bk"])
        v = _linear(a, P[pre + "attn.wv"], P[pre + "attn.bv"])
        qh, kh, vh = _split_heads(q, h), _split_heads(k, h), _split_heads(v, h)
        probs = softmax_rows(qh @ kh.transpose(0, 1, 3, 2) * scale)
        ctx = _merge_heads(probs @ vh)
        o = _linear(ctx, P[pre + "attn.wo"], P[pre + "attn.bo"])
        lc.update(a=a, q=q, k=k, v=v, qh=qh, kh=kh, vh=vh, probs=probs, ctx=ctx, o=o)
        x = x + o

        lc["x_mlp_in"] = x
        c, lc["ln2"] = _ln(x, P[pre + "ln2.alpha"], P[pre + "ln2.beta"], eps)
        u = _linear(c, P[pre + "mlp.w1"], P[pre + "mlp.b1"])
        g = gelu(u)
        fo = _linear(g, P[pre + "mlp.w2"], P[pre + "mlp.b2"])
        lc.update(c=c, u=u, g=g, f=fo)
        x = x + fo
        cache["layers"].append(lc)

    z, cache["final_ln"] = _ln(x, P["final_ln.alpha"], P["final_ln.beta"], eps)
    z0 = z[:, 0, :]
    logits = z0 @ P["head.w"] + P["head.b"]
    cache.update(x_final=x, z=z, z0=z0)
    return logits, cache


def _site_matrix(x: np.ndarray) -> np.ndarray:
    # (B, S, n) -> (n, B*S), batch-major token order
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]).T)


def trace_from_cache(cache: dict, arch: ArchConfig, dtype=np.float32) -> ActivationTrace:
    B = cache["x_in"].shape[0]
    tr = ActivationTrace(batch_size=B, seq_len=arch.seq_len)
    tr.sites["embed.concat_out"] = _site_matrix(cache["concat"]).astype(dtype)
    tr.sites["embeddings_out"] = _site_matrix(cache["embed"]).astype(dtype)
    for i, lc in enumerate(cache["layers"]):
        pre = f"layers.{i}."
        for site, key in (("attn_resid_in", "x_attn_in"), ("q_out", "q"), ("k_out", "k"),
                          ("v_out", "v"), ("attn_proj_out", "o"), ("mlp_resid_in", "x_mlp_in"),
                          ("fc1_out", "g"), ("fc2_out", "f")):
            tr.sites[pre + site] = _site_matrix(lc[key]).astype(dtype)
        tr.attn_probs.append(lc["probs"].astype(dtype))
    return tr


def forward(params: Params, arch: ArchConfig, batch: np.ndarray, capture: bool = False):
    """Logits ``(B, num_classes)`` and, when ``capture``, an :class:`ActivationTrace`."""
    logits, cache = forward_cached(params, arch, batch)
    dtype = np.result_type(*params.values())
    trace = trace_from_cache(cache, arch, dtype) if capture else None
    return logits.astype(dtype), trace


@dataclass
class Permutations:
    """One permutation per alignment site of a model.

    ``perm[i]`` is the index of the original neuron placed at position ``i``.
    ``stream`` is shared by the whole residual stream; ``qk`` permutes the
    query and key output columns together; ``v`` the value columns (and the
    input rows of the attention output projection); ``fc1`` the MLP hidden
    units. For the model function to be preserved, ``qk`` and ``v`` must move
    whole heads identically (within-head orders may differ).
    """

    stream: np.ndarray
    qk: list[np.ndarray]
    v: list[np.ndarray]
    fc1: list[np.ndarray]

    @classmethod
    def identity(cls, arch: ArchConfig) -> Permutations:
        d, f, L = arch.hidden_dim, arch.intermediate_dim, arch.num_layers
        return cls(np.arange(d), [np.arange(d)] * L, [np.arange(d)] * L, [np.arange(f)] * L)

    @classmethod
    def random(cls, arch: ArchConfig, rng: Rng) -> Permutations:
        h, dh = arch.num_heads, arch.head_dim
        stream = rng.permutation(arch.hidden_dim)
        qk, v, fc1 = [], [], []
        for _ in range(arch.num_layers):
            heads = rng.permutation(h)
            qk.append(np.concatenate([heads[i] * dh + rng.permutation(dh) for i in range(h)]))
            v.append(np.concatenate([heads[i] * dh + rng.permutation(dh) for i in range(h)]))
            fc1.append(rng.permutation(arch.intermediate_dim))
        return cls(stream, qk, v, fc1)

    def inverse(self) -> Permutations:
        inv = lambda p: np.argsort(p)  # noqa: E731
        return Permutations(inv(self.stream), [inv(p) for p in self.qk],
                            [inv(p) for p in self.v], [inv(p) for p in self.fc1])

    def check(self, arch: ArchConfig) -> None:
        def ok(p, n, what):
            p = np.asarray(p)
            if p.shape != (n,) or not np.array_equal(np.sort(p), np.arange(n)):
                raise ShapeError(f"{what}: not a permutation of length {n}")

        ok(self.stream, arch.hidden_dim, "stream")
        for name, perms, n in (("qk", self.qk, arch.hidden_dim), ("v", self.v, arch.hidden_dim),
                               ("fc1", self.fc1, arch.intermediate_dim)):
            if len(perms) != arch.num_layers:
                raise ShapeError(f"{name}: need {arch.num_layers} permutations, got {len(perms)}")
            for i, p in enumerate(perms):
                ok(p, n, f"{name}[{i}]")


def permutation_matrix(perm: np.ndarray) -> np.ndarray:
    """The hard alignment map that undoes ``perm``: ``M[i, perm[i]] = 1``."""
    n = len(perm)
    m = np.zeros((n, n))
    m[np.arange(n), perm] = 1.0
    return m


def permute_model(
    params: Params,
    arch: ArchConfig,
    perms: Permutations | None = None,
    rng: Rng | None = None,
) -> Params:
    """Functionally equivalent model with neurons reordered by ``perms``.

    When ``perms`` is omitted a random head-consistent set is drawn from ``rng``.
    """
    check_params(params, arch)
    if perms is None:
        if rng is None:
            raise ValueError("permute_model needs perms or an rng")
        perms = Permutations.random(arch, rng)
    perms.check(arch)
    s = perms.stream
    out: Params = {}
    out["embed.patch.w"] = params["embed.patch.w"][:, s]
    out["embed.patch.b"] = params["embed.patch.b"][s]
    out["embed.cls"] = params["embed.cls"][s]
    out["embed.pos"] = params["embed.pos"][:, s]
    for i in range(arch.num_layers):
        pre = f"layers.{i}."
        qk, v, f1 = perms.qk[i], perms.v[i], perms.fc1[i]
        for ln in ("ln1", "ln2"):
            out[pre + ln + ".alpha"] = params[pre + ln + ".alpha"][s]
            out[pre + ln + ".beta"] = params[pre + ln + ".beta"][s]
        out[pre + "attn.wq"] = params[pre + "attn.wq"][s][:, qk]
        out[pre + "attn.bq"] = params[pre + "attn.bq"][qk]
        out[pre + "attn.wk"] = params[pre + "attn.wk"][s][:, qk]
        out[pre + "attn.bk"] = params[pre + "attn.bk"][qk]
        out[pre + "attn.wv"] = params[pre + "attn.wv"][s][:, v]
        out[pre + "attn.bv"] = params[pre + "attn.bv"][v]
        out[pre + "attn.wo"] = params[pre + "attn.wo"][v][:, s]
        out[pre + "attn.bo"] = params[pre + "attn.bo"][s]
        out[pre + "mlp.w1"] = params[pre + "mlp.w1"][s][:, f1]
        out[pre + "mlp.b1"] = params[pre + "mlp.b1"][f1]
        out[pre + "mlp.w2"] = params[pre + "mlp.w2"][f1][:, s]
        out[pre + "mlp.b2"] = params[pre + "mlp.b2"][s]
    out["final_ln.alpha"] = params["final_ln.alpha"][s]
    out["final_ln.beta"] = params["final_ln.beta"][s]
    out["head.w"] = params["head.w"][s]
    out["head.b"] = params["head.b"].copy()
    return {k: np.ascontiguousarray(out[k]) for k in param_shapes(arch)}
