"""Straight-line reference forward pass for the toy backend.

Written without the tap machinery or batched attention: one position and one
head at a time, reading parameters straight from the seeded generator.
"""

import math

import numpy as np

from tapret.backend.toy import ToyConfig, toy_weights


def _ln(x, g, b, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((xi - mu) ** 2 for xi in x) / len(x)
    return np.array([(xi - mu) / math.sqrt(var + eps) for xi in x]) * g + b


def _gelu(x):
    return np.array([0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v**3))) for v in x])


def _position(t, d):
    out = np.zeros(d)
    for i in range(d // 2):
        a = t / (10000.0 ** (2 * i / d))
        out[2 * i] = math.sin(a)
        out[2 * i + 1] = math.cos(a)
    return out


def oracle_forward(ids, cfg=ToyConfig(), weights=None):
    """Return {(layer, 'attn'|'mlp'): (T, d) stream}, plus last-position logits.

    (0, 'mlp') is the embedding stream.
    """
    w = toy_weights(cfg)
    if weights:
        w.update(weights)
    d, H = cfg.d_model, cfg.n_heads
    hd = d // H
    T = len(ids)
    h = [w["tok_emb"][i] + _position(t, d) for t, i in enumerate(ids)]
    streams = {(0, "mlp"): np.array(h)}
    for l in range(1, cfg.n_layers + 1):
        p = f"l{l}."
        normed = [_ln(x, w[p + "ln1_g"], w[p + "ln1_b"]) for x in h]
        q = [x @ w[p + "wq"] for x in normed]
        k = [x @ w[p + "wk"] for x in normed]
        v = [x @ w[p + "wv"] for x in normed]
        attn_out = []
        for t in range(T):
            heads = []
            for head in range(H):
                s = slice(head * hd, (head + 1) * hd)
                scores = np.array([q[t][s] @ k[j][s] / math.sqrt(hd) for j in range(t + 1)])
                e = np.exp(scores - scores.max())
                a = e / e.sum()
                heads.append(sum(a[j] * v[j][s] for j in range(t + 1)))
            attn_out.append(np.concatenate(heads) @ w[p + "wo"])
        h = [h[t] + attn_out[t] for t in range(T)]
        streams[(l, "attn")] = np.array(h)
        mlp_out = []
        for x in h:
            m = _ln(x, w[p + "ln2_g"], w[p + "ln2_b"])
            mlp_out.append(_gelu(m @ w[p + "w1"] + w[p + "b1"]) @ w[p + "w2"] + w[p + "b2"])
        h = [h[t] + mlp_out[t] for t in range(T)]
        streams[(l, "mlp")] = np.array(h)
    final = _ln(h[-1], w["lnf_g"], w["lnf_b"])
    logits = np.array([final @ w["unembed"][:, c] for c in range(cfg.vocab_size)]) + w["lm_bias"]
    return streams, logits


def mlp_branch_oracle(x, layer, cfg=ToyConfig()):
    w = toy_weights(cfg)
    p = f"l{layer}."
    m = _ln(x, w[p + "ln2_g"], w[p + "ln2_b"])
    return _gelu(m @ w[p + "w1"] + w[p + "b1"]) @ w[p + "w2"] + w[p + "b2"]


def byte_ids(text):
    return [b for b in text.encode("ascii")]
