import math

import numpy as np
import pytest

from conftest import random_batch, random_model
from otfuse.linalg import Rng, ShapeError
from otfuse.model import (
    ArchConfig,
    Permutations,
    check_params,
    copy_params,
    forward,
    init_params,
    param_shapes,
    permute_model,
)


def reference_forward(params, arch, batch):
    """Per-example, per-head loop implementation written directly from the block definitions."""
    P = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    d, h = arch.hidden_dim, arch.num_heads
    dh = d // h

    def ln(x, a, b):
        mu = x.mean()
        return (x - mu) / math.sqrt(((x - mu) ** 2).mean() + arch.eps_ln) * a + b

    def gelu(x):
        return np.array([v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in x])

    out = []
    for img in np.asarray(batch, dtype=np.float64):
        seq = [P["embed.cls"]] + [p @ P["embed.patch.w"] + P["embed.patch.b"] for p in img]
        x = [t + P["embed.pos"][i] for i, t in enumerate(seq)]
        for layer in range(arch.num_layers):
            pre = f"layers.{layer}."
            a = [ln(t, P[pre + "ln1.alpha"], P[pre + "ln1.beta"]) for t in x]
            q = [t @ P[pre + "attn.wq"] + P[pre + "attn.bq"] for t in a]
            k = [t @ P[pre + "attn.wk"] + P[pre + "attn.bk"] for t in a]
            v = [t @ P[pre + "attn.wv"] + P[pre + "attn.bv"] for t in a]
            ctx = [np.zeros(d) for _ in x]
            for head in range(h):
                sl = slice(head * dh, (head + 1) * dh)
                for i in range(len(x)):
                    s = np.array([q[i][sl] @ k[j][sl] / math.sqrt(dh) for j in range(len(x))])
                    w = np.exp(s - s.max())
                    w /= w.sum()
                    ctx[i][sl] = sum(w[j] * v[j][sl] for j in range(len(x)))
            x = [t + c @ P[pre + "attn.wo"] + P[pre + "attn.bo"] for t, c in zip(x, ctx)]
            m = [ln(t, P[pre + "ln2.alpha"], P[pre + "ln2.beta"]) for t in x]
            x = [t + gelu(u @ P[pre + "mlp.w1"] + P[pre + "mlp.b1"]) @ P[pre + "mlp.w2"]
                 + P[pre + "mlp.b2"] for t, u in zip(x, m)]
        z = ln(x[0], P["final_ln.alpha"], P["final_ln.beta"])
        out.append(z @ P["head.w"] + P["head.b"])
    return np.array(out)


SMALL = ArchConfig(hidden_dim=8, intermediate_dim=12, num_layers=2, num_heads=2,
                   grid_side=2, patch_dim=3, num_classes=4)


def test_arch_validation():
    with pytest.raises(ValueError, match="divisible"):
        ArchConfig(hidden_dim=10, num_heads=4)
    with pytest.raises(ValueError):
        ArchConfig(num_layers=0)
    assert ArchConfig().seq_len == 10


def test_forward_matches_reference_loops():
    params = random_model(SMALL, 0, std=0.4)
    batch = random_batch(SMALL, 3, 1)
    np.testing.assert_allclose(forward(params, SMALL, batch)[0],
                               reference_forward(params, SMALL, batch), atol=1e-5)


def test_forward_float64_matches_reference_tightly():
    params = random_model(SMALL, 2, std=0.4, dtype=np.float64)
    batch = random_batch(SMALL, 2, 3).astype(np.float64)
    np.testing.assert_allclose(forward(params, SMALL, batch)[0],
                               reference_forward(params, SMALL, batch), atol=1e-12)


def test_zero_weights_give_head_bias():
    arch = ArchConfig()
    params = {k: np.zeros(s, np.float32) for k, s in param_shapes(arch).items()}
    params["head.b"] = np.arange(5, dtype=np.float32)
    logits, _ = forward(params, arch, random_batch(arch, 4, 0))
    np.testing.assert_array_equal(logits, np.tile(np.arange(5, dtype=np.float32), (4, 1)))


def test_init_params_deterministic_and_scaled():
    arch = ArchConfig()
    a, b = init_params(arch, Rng(3)), init_params(arch, Rng(3))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    check_params(a, arch)
    assert 0.015 <= a["layers.0.attn.wq"].std() <= 0.025
    assert (a["layers.0.ln1.alpha"] == 1).all() and not a["layers.0.attn.bq"].any()


def test_check_params_rejects_bad_shape():
    arch = ArchConfig()
    params = init_params(arch, Rng(0))
    params["head.w"] = params["head.w"][:-1]
    with pytest.raises(ShapeError):
        check_params(params, arch)


def test_trace_shapes():
    arch = ArchConfig()
    _, tr = forward(init_params(arch, Rng(0)), arch, random_batch(arch, 3, 0), capture=True)
    assert tr["layers.0.q_out"].shape == (32, 3 * 10)
    assert tr["layers.1.fc1_out"].shape == (64, 30)
    assert tr.attn_probs[0].shape == (3, 4, 10, 10)


def test_attention_rows_sum_to_one():
    arch = ArchConfig()
    _, tr = forward(random_model(arch, 1), arch, random_batch(arch, 5, 2), capture=True)
    for probs in tr.attn_probs:
        assert np.abs(probs.astype(np.float64).sum(-1) - 1).max() < 1e-6


def test_forward_deterministic():
    arch = ArchConfig()
    params, batch = random_model(arch, 4), random_batch(arch, 6, 4)
    assert forward(params, arch, batch)[0].tobytes() == forward(params, arch, batch)[0].tobytes()


def test_forward_rejects_bad_batch():
    with pytest.raises(ShapeError):
        forward(init_params(ArchConfig(), Rng(0)), ArchConfig(), np.zeros((2, 8, 16), np.float32))


def test_identity_permutation_is_bit_equal():
    arch = ArchConfig()
    params = random_model(arch, 0)
    out = permute_model(params, arch, Permutations.identity(arch))
    assert all(np.array_equal(out[k], params[k]) for k in params)


@pytest.mark.parametrize("seed", range(20))
def test_permuted_model_is_equivalent(seed):
    arch = ArchConfig()
    params = random_model(arch, 100 + seed, std=0.3)
    other = permute_model(params, arch, rng=Rng(seed, stream=9))
    batch = random_batch(arch, 8, seed)
    assert np.abs(forward(other, arch, batch)[0] - forward(params, arch, batch)[0]).max() < 1e-4


def test_permutation_then_inverse_restores():
    arch = ArchConfig()
    params = random_model(arch, 7)
    perms = Permutations.random(arch, Rng(7))
    back = permute_model(permute_model(params, arch, perms), arch, perms.inverse())
    assert max(np.abs(back[k] - params[k]).max() for k in params) <= 1e-6


def test_permutation_length_checked():
    arch = ArchConfig()
    perms = Permutations.identity(arch)
    bad = Permutations(perms.stream[:-1], perms.qk, perms.v, perms.fc1)
    with pytest.raises(ShapeError):
        permute_model(init_params(arch, Rng(0)), arch, bad)


def _qk_logits(params, arch, batch, layer=0):
    _, tr = forward(params, arch, batch, capture=True)
    return tr.attn_probs[layer]


def test_tied_qk_permutation_keeps_attention():
    arch = ArchConfig()
    params = random_model(arch, 5)
    batch = random_batch(arch, 4, 5)
    perms = Permutations.identity(arch)
    rng = Rng(5)
    dh = arch.head_dim
    heads = rng.permutation(arch.num_heads)
    qk = np.concatenate([heads[i] * dh + rng.permutation(dh) for i in range(arch.num_heads)])
    v = np.concatenate([heads[i] * dh + rng.permutation(dh) for i in range(arch.num_heads)])
    tied = Permutations(perms.stream, [qk, qk], [v, v], perms.fc1)
    out = permute_model(params, arch, tied)
    for layer in range(arch.num_layers):
        # new head i is old head heads[i]
        before = _qk_logits(params, arch, batch, layer)[:, heads]
        after = _qk_logits(out, arch, batch, layer)
        assert np.abs(after.astype(np.float64) - before).max() < 1e-5


def test_single_head_any_tied_permutation_keeps_logits():
    arch = ArchConfig(num_heads=1)
    params = copy_params(random_model(arch, 6, dtype=np.float64))
    x = Rng(6).normal(10 * 32).reshape(10, 32)
    perm = Rng(8).permutation(32)
    q = x @ params["layers.0.attn.wq"] + params["layers.0.attn.bq"]
    k = x @ params["layers.0.attn.wk"] + params["layers.0.attn.bk"]
    np.testing.assert_allclose(q[:, perm] @ k[:, perm].T, q @ k.T, atol=1e-10)
