"""Small trainable text encoder with exact analytic gradients.

Token + learned positional embeddings feed a stack of pre-norm
self-attention/feed-forward blocks; PAD positions are masked out of
attention and the final layer-normed states are mean-pooled over the
non-PAD positions. Everything is plain numpy so the backward pass can be
checked against finite differences in 64-bit arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LN_EPS = 1e-5
INIT_STD = 0.02

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    dim: int
    layers: int
    heads: int
    max_len: int
    ffn_mult: int = 4

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if min(self.vocab_size, self.dim, self.heads, self.max_len, self.ffn_mult) < 1:
            raise ValueError("config fields must be positive")
        if self.layers < 0:
            raise ValueError("layers must be non-negative")

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_mult * self.dim

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "dim": self.dim,
            "layers": self.layers,
            "heads": self.heads,
            "max_len": self.max_len,
            "ffn_mult": self.ffn_mult,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, h = config.dim, config.ffn_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_len, d),
        "ln_f.g": (d,),
        "ln_f.b": (d,),
    }
    for i in range(config.layers):
        p = f"layer{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn." + w] = (d, d)
        for b in ("bq", "bk", "bv", "bo"):
            shapes[p + "attn." + b] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "ffn.w1"] = (d, h)
        shapes[p + "ffn.b1"] = (h,)
        shapes[p + "ffn.w2"] = (h, d)
        shapes[p + "ffn.b2"] = (d,)
    return shapes


def init_params(config: EncoderConfig, seed: int, dtype=np.float32) -> Params:
    """Scaled-normal weights (std 0.02), layer-norm gain 1 / bias 0."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith((".b", ".b1", ".b2", "bq", "bk", "bv", "bo")):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = rng.normal(0.0, INIT_STD, size=shape).astype(dtype)
    return params


def cast_params(params: Params, dtype) -> Params:
    return {k: v.astype(dtype) for k, v in params.items()}


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv_std
    return g * xhat + b, (xhat, inv_std)

def _layer_norm_backward(dy: np.ndarray, g: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv_std = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def forward_batch(params: Params, config: EncoderConfig, ids: np.ndarray, attn_lens: np.ndarray):
    """Pooled embeddings for a batch; returns (pooled (B,d), cache).

    ids is (B, max_len) int; attn_lens (B,) counts of non-PAD positions.
    """
    if ids.shape[1] != config.max_len:
        raise ValueError("sequence length does not match config max_len")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError("token id out of vocabulary range")
    dtype = params["tok_emb"].dtype
    B, T = ids.shape
    key_mask = np.arange(T)[None, :] < attn_lens[:, None]  # (B,T)

    x = params["tok_emb"][ids] + params["pos_emb"][None, :, :]
    x = x.astype(dtype)
    layer_caches = []
    for i in range(config.layers):
        p = f"layer{i}."
        x_in = x
        h1, ln1_cache = _layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = _split_heads(h1 @ params[p + "attn.wq"] + params[p + "attn.bq"], config.heads)
        k = _split_heads(h1 @ params[p + "attn.wk"] + params[p + "attn.bk"], config.heads)
        v = _split_heads(h1 @ params[p + "attn.wv"] + params[p + "attn.bv"], config.heads)
        dh = config.dim // config.heads
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(np.asarray(dh, dtype=dtype))
        scores = np.where(key_mask[:, None, None, :], scores, -np.inf)
        scores = scores - scores.max(axis=-1, keepdims=True)
        exps = np.exp(scores)
        attn = exps / exps.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(attn @ v)
        attn_out = ctx @ params[p + "attn.wo"] + params[p + "attn.bo"]
        x = x_in + attn_out

        x_mid = x
        h2, ln2_cache = _layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        u = np.tanh(h2 @ params[p + "ffn.w1"] + params[p + "ffn.b1"])
        ffn_out = u @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
        x = x_mid + ffn_out
        layer_caches.append(
            {"x_in": x_in, "h1": h1, "ln1": ln1_cache, "q": q, "k": k, "v": v,
             "attn": attn, "ctx": ctx, "x_mid": x_mid, "h2": h2, "ln2": ln2_cache, "u": u}
        )

    y, lnf_cache = _layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    pool_mask = key_mask.astype(dtype)
    pooled = (y * pool_mask[:, :, None]).sum(axis=1) / attn_lens[:, None].astype(dtype)
    cache = {
        "ids": ids, "attn_lens": attn_lens, "key_mask": key_mask,
        "layers": layer_caches, "x_final": x, "y": y, "lnf": lnf_cache, "dtype": dtype,
    }
    return pooled, cache


def backward_batch(params: Params, config: EncoderConfig, cache, d_pooled: np.ndarray) -> Params:
    """Exact reverse-mode gradients for every encoder parameter."""
    dtype = cache["dtype"]
    ids = cache["ids"]
    attn_lens = cache["attn_lens"]
    key_mask = cache["key_mask"]
    B, T = ids.shape
    grads: Params = {name: np.zeros_like(params[name]) for name in params}

    pool_mask = key_mask.astype(dtype)
    dy = (d_pooled[:, None, :] / attn_lens[:, None, None].astype(dtype)) * pool_mask[:, :, None]
    dx, dg, db = _layer_norm_backward(dy, params["ln_f.g"], cache["lnf"])
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db

    for i in reversed(range(config.layers)):
        p = f"layer{i}."
        c = cache["layers"][i]
        # FFN block: x = x_mid + tanh(ln2(x_mid) W1 + b1) W2 + b2
        d_ffn_out = dx
        du = d_ffn_out @ params[p + "ffn.w2"].T
        grads[p + "ffn.w2"] += np.einsum("bth,btd->hd", c["u"], d_ffn_out)
        grads[p + "ffn.b2"] += d_ffn_out.sum(axis=(0, 1))
        dpre = du * (1.0 - c["u"] ** 2)
        grads[p + "ffn.w1"] += np.einsum("btd,bth->dh", c["h2"], dpre)
        grads[p + "ffn.b1"] += dpre.sum(axis=(0, 1))
        dh2 = dpre @ params[p + "ffn.w1"].T
        dx_mid, dg2, db2 = _layer_norm_backward(dh2, params[p + "ln2.g"], c["ln2"])
        grads[p + "ln2.g"] += dg2
        grads[p + "ln2.b"] += db2
        dx = dx + dx_mid  # residual

        # Attention block: x_mid = x_in + (merge(attn @ v)) Wo + bo
        d_attn_out = dx
        grads[p + "attn.wo"] += np.einsum("btd,bte->de", c["ctx"], d_attn_out)
        grads[p + "attn.bo"] += d_attn_out.sum(axis=(0, 1))
        dctx = _split_heads(d_attn_out @ params[p + "attn.wo"].T, config.heads)
        dattn = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = c["attn"].transpose(0, 1, 3, 2) @ dctx
        dscores = c["attn"] * (dattn - (dattn * c["attn"]).sum(axis=-1, keepdims=True))
        dh = config.dim // config.heads
        dscores = dscores / np.sqrt(np.asarray(dh, dtype=dtype))
        dq = dscores @ c["k"]
        dk = dscores.transpose(0, 1, 3, 2) @ c["q"]
        dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
        dh1 = np.zeros_like(c["h1"])
        for w, b, dmat in (("wq", "bq", dq), ("wk", "bk", dk), ("wv", "bv", dv)):
            grads[p + "attn." + w] += np.einsum("btd,bte->de", c["h1"], dmat)
            grads[p + "attn." + b] += dmat.sum(axis=(0, 1))
            dh1 += dmat @ params[p + "attn." + w].T
        dx_in, dg1, db1 = _layer_norm_backward(dh1, params[p + "ln1.g"], c["ln1"])
        grads[p + "ln1.g"] += dg1
        grads[p + "ln1.b"] += db1
        dx = dx + dx_in  # residual

    np.add.at(grads["tok_emb"], ids, dx)
    grads["pos_emb"] += dx.sum(axis=0)
    return grads


def forward(params: Params, config: EncoderConfig, ids: np.ndarray, attn_lens: np.ndarray) -> np.ndarray:
    """Pooled embeddings without keeping the backward cache."""
    pooled, _ = forward_batch(params, config, ids, attn_lens)
    return pooled
