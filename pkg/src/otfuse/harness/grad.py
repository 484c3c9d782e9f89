"""Hand-written backward pass for the encoder in :mod:`otfuse.model`."""

from __future__ import annotations

import math

import numpy as np

from ..linalg import gelu_grad
from ..model import ArchConfig, Params, forward_cached


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -float(logp[np.arange(n), labels].mean())
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


def _ln_backward(dy, cache, alpha):
    xhat, rstd = cache
    axes = tuple(range(dy.ndim - 1))
    dalpha = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * alpha
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dalpha, dbeta


def _wgrad(inp, dout):
    return inp.reshape(-1, inp.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])


def _back(dout, w):
    return (dout.reshape(-1, dout.shape[-1]) @ w.T).reshape(*dout.shape[:-1], w.shape[0])


def _heads(x, h):
    b, s, d = x.shape
    return x.reshape(b, s, h, d // h).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def loss_and_grads(params: Params, arch: ArchConfig, batch: np.ndarray,
                   labels: np.ndarray, return_logits: bool = False):
    """Cross-entropy loss and float64 gradients for every parameter.

    Returns ``(loss, grads)``, or ``(loss, grads, logits)`` with ``return_logits``.
    """
    logits, cache = forward_cached(params, arch, batch)
    P = cache["P"]
    loss, dlogits = cross_entropy(logits, labels)
    G: dict[str, np.ndarray] = {}
    h = arch.num_heads
    scale = 1.0 / math.sqrt(arch.head_dim)

    G["head.w"] = cache["z0"].T @ dlogits
    G["head.b"] = dlogits.sum(axis=0)
    dz = np.zeros_like(cache["z"])
    dz[:, 0, :] = dlogits @ P["head.w"].T
    dx, G["final_ln.alpha"], G["final_ln.beta"] = _ln_backward(dz, cache["final_ln"],
                                                               P["final_ln.alpha"])

    for i in reversed(range(arch.num_layers)):
        pre = f"layers.{i}."
        lc = cache["layers"][i]
        # x_out = x_mid + fc2(gelu(fc1(ln2(x_mid))))
        G[pre + "mlp.w2"] = _wgrad(lc["g"], dx)
        G[pre + "mlp.b2"] = dx.sum(axis=(0, 1))
        du = _back(dx, P[pre + "mlp.w2"]) * gelu_grad(lc["u"])
        G[pre + "mlp.w1"] = _wgrad(lc["c"], du)
        G[pre + "mlp.b1"] = du.sum(axis=(0, 1))
        dln, G[pre + "ln2.alpha"], G[pre + "ln2.beta"] = _ln_backward(
            _back(du, P[pre + "mlp.w1"]), lc["ln2"], P[pre + "ln2.alpha"])
        dx = dx + dln

        # x_mid = x_in + attn(ln1(x_in))
        G[pre + "attn.wo"] = _wgrad(lc["ctx"], dx)
        G[pre + "attn.bo"] = dx.sum(axis=(0, 1))
        dctx = _heads(_back(dx, P[pre + "attn.wo"]), h)
        probs = lc["probs"]
        dprobs = dctx @ lc["vh"].transpose(0, 1, 3, 2)
        dvh = probs.transpose(0, 1, 3, 2) @ dctx
        ds = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
        dq = _merge(ds @ lc["kh"])
        dk = _merge(ds.transpose(0, 1, 3, 2) @ lc["qh"])
        dv = _merge(dvh)
        da = 0.0
        for name, dout in (("q", dq), ("k", dk), ("v", dv)):
            G[pre + f"attn.w{name}"] = _wgrad(lc["a"], dout)
            G[pre + f"attn.b{name}"] = dout.sum(axis=(0, 1))
            da = da + _back(dout, P[pre + f"attn.w{name}"])
        dln, G[pre + "ln1.alpha"], G[pre + "ln1.beta"] = _ln_backward(
            da, lc["ln1"], P[pre + "ln1.alpha"])
        dx = dx + dln

    G["embed.pos"] = dx.sum(axis=0)
    G["embed.cls"] = dx[:, 0, :].sum(axis=0)
    de = dx[:, 1:, :]
    G["embed.patch.w"] = _wgrad(cache["x_in"], de)
    G["embed.patch.b"] = de.sum(axis=(0, 1))
    if return_logits:
        return loss, G, logits
    return loss, G


def batch_loss(params: Params, arch: ArchConfig, batch: np.ndarray, labels: np.ndarray) -> float:
    logits, _ = forward_cached(params, arch, batch)
    return cross_entropy(logits, labels)[0]
