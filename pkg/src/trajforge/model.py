"""Small decoder-only token model: numpy forward, hand-written backward, LoRA."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715
_LN_EPS = 1e-5


class InvalidConfig(ValueError):
    pass


class SequenceTooLong(ValueError):
    pass


class TokenOutOfRange(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 256
    dropout: float = 0.0

    def __post_init__(self):
        if self.vocab_size < 1 or self.d_model < 1 or self.n_layers < 1:
            raise InvalidConfig("vocab_size, d_model, n_layers must be positive")
        if self.d_model % self.n_heads != 0:
            raise InvalidConfig(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


# Matrices LoRA can adapt (per layer); attention W_Q and W_V by default.
DEFAULT_LORA_TARGETS = ("wq", "wv")


@dataclass
class LoraAdapter:
    """Low-rank update per adapted matrix: forward adds (alpha/r) * B(Ax)."""

    rank: int
    alpha: float
    dropout: float
    # param name -> (A [r, d_in], B [d_out, r]); B zero-initialized
    matrices: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def init_model(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministic float32 initialization from scaled normals."""
    rng = np.random.default_rng(seed)
    d, f, v, s = config.d_model, config.d_ff, config.vocab_size, config.max_seq_len

    def normal(shape, std=0.02):
        return rng.normal(0.0, std, size=shape).astype(np.float32)

    params: dict[str, np.ndarray] = {
        "tok_emb": normal((v, d)),
        "pos_emb": normal((s, d), std=0.01),
    }
    for i in range(config.n_layers):
        p = f"layer{i}."
        params[p + "ln1.g"] = np.ones(d, dtype=np.float32)
        params[p + "ln1.b"] = np.zeros(d, dtype=np.float32)
        for name in ("wq", "wk", "wv", "wo"):
            params[p + name] = normal((d, d))
        params[p + "ln2.g"] = np.ones(d, dtype=np.float32)
        params[p + "ln2.b"] = np.zeros(d, dtype=np.float32)
        params[p + "w1"] = normal((d, f))
        params[p + "b1"] = np.zeros(f, dtype=np.float32)
        params[p + "w2"] = normal((f, d))
        params[p + "b2"] = np.zeros(d, dtype=np.float32)
    params["lnf.g"] = np.ones(d, dtype=np.float32)
    params["lnf.b"] = np.zeros(d, dtype=np.float32)
    params["wout"] = normal((d, v))
    params["bout"] = np.zeros(v, dtype=np.float32)
    return params


def init_lora(
    config: ModelConfig,
    rank: int = 16,
    alpha: float = 32.0,
    dropout: float = 0.02,
    seed: int = 0,
    targets: tuple[str, ...] = DEFAULT_LORA_TARGETS,
) -> LoraAdapter:
    """A from a scaled normal, B zero so the initial update is the identity."""
    rng = np.random.default_rng(seed)
    d = config.d_model
    matrices = {}
    for i in range(config.n_layers):
        for t in targets:
            name = f"layer{i}.{t}"
            a = rng.normal(0.0, 0.02, size=(rank, d)).astype(np.float32)
            b = np.zeros((d, rank), dtype=np.float32)
            matrices[name] = (a, b)
    return LoraAdapter(rank=rank, alpha=alpha, dropout=dropout, matrices=matrices)


def lora_forward(
    w0: np.ndarray, a: np.ndarray, b: np.ndarray, x: np.ndarray, alpha: float, r: int
) -> np.ndarray:
    """W0 x + (alpha/r) * B (A x), without materializing the dense update."""
    if w0.shape[1] != x.shape[0] or a.shape[1] != x.shape[0] or b.shape[1] != a.shape[0]:
        raise ShapeMismatch(
            f"W0 {w0.shape}, A {a.shape}, B {b.shape}, x {x.shape} do not conform"
        )
    return w0 @ x + (alpha / r) * (b @ (a @ x))


def _gelu(x):
    u = _GELU_C * (x + _GELU_A * x**3)
    return 0.5 * x * (1.0 + np.tanh(u))


def _gelu_grad(x):
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * _GELU_A * x**2)


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv)


def _layernorm_backward(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _adapted_matmul(x, w, adapter, name, drop_mask, cache):
    """x @ w plus the LoRA branch when `name` is adapted; caches intermediates."""
    y = x @ w
    if adapter is not None and name in adapter.matrices:
        a, b = adapter.matrices[name]
        xa = x if drop_mask is None else x * drop_mask
        p = xa @ a.T
        y = y + adapter.scale * (p @ b.T)
        cache[name] = (xa, p)
    return y


def _check_ids(ids: np.ndarray, config: ModelConfig):
    if ids.shape[-1] > config.max_seq_len:
        raise SequenceTooLong(
            f"sequence length {ids.shape[-1]} exceeds max_seq_len {config.max_seq_len}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise TokenOutOfRange("token id outside [0, vocab_size)")


def _forward(params, config, ids, adapter=None, drop_masks=None, want_cache=False):
    """Causal forward over a [B, S] id matrix; returns logits [B, S, V]."""
    ids = np.asarray(ids)
    _check_ids(ids, config)
    B, S = ids.shape
    nh, dh = config.n_heads, config.d_head
    dtype = params["tok_emb"].dtype
    cache = {"ids": ids, "lora": {}} if want_cache else None

    x = params["tok_emb"][ids] + params["pos_emb"][:S]
    x = x.astype(dtype)
    mask = np.triu(np.ones((S, S), dtype=bool), k=1)

    for i in range(config.n_layers):
        p = f"layer{i}."
        a_in, ln1c = _layernorm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        lora_cache = cache["lora"] if want_cache else {}
        dm = drop_masks.get(p + "wq") if drop_masks else None
        q = _adapted_matmul(a_in, params[p + "wq"], adapter, p + "wq", dm, lora_cache)
        k = a_in @ params[p + "wk"]
        dm = drop_masks.get(p + "wv") if drop_masks else None
        v = _adapted_matmul(a_in, params[p + "wv"], adapter, p + "wv", dm, lora_cache)

        qh = q.reshape(B, S, nh, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(B, S, nh, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(B, S, nh, dh).transpose(0, 2, 1, 3)
        scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh).astype(dtype)
        scores = np.where(mask, np.asarray(-1e9, dtype=dtype), scores)
        scores = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=-1, keepdims=True)
        oh = attn @ vh
        o = oh.transpose(0, 2, 1, 3).reshape(B, S, config.d_model)
        dm = drop_masks.get(p + "wo") if drop_masks else None
        y = _adapted_matmul(o, params[p + "wo"], adapter, p + "wo", dm, lora_cache)
        x1 = x + y

        b_in, ln2c = _layernorm(x1, params[p + "ln2.g"], params[p + "ln2.b"])
        h_pre = b_in @ params[p + "w1"] + params[p + "b1"]
        h = _gelu(h_pre)
        f_out = h @ params[p + "w2"] + params[p + "b2"]
        x2 = x1 + f_out

        if want_cache:
            cache[p] = {
                "x": x, "a_in": a_in, "ln1c": ln1c, "qh": qh, "kh": kh, "vh": vh,
                "attn": attn, "o": o, "x1": x1, "b_in": b_in, "ln2c": ln2c,
                "h_pre": h_pre, "h": h,
            }
        x = x2

    xf, lnfc = _layernorm(x, params["lnf.g"], params["lnf.b"])
    logits = xf @ params["wout"] + params["bout"]
    if want_cache:
        cache["x_final"] = x
        cache["lnfc"] = lnfc
        cache["xf"] = xf
    return logits, cache


def forward_logits(params, config, ids, adapter: LoraAdapter | None = None) -> np.ndarray:
    """Logits for one sequence: [len, vocab_size], causally masked."""
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise ShapeMismatch("expected a single sequence of token ids")
    if ids.shape[0] < 1:
        raise ShapeMismatch("sequence must be non-empty")
    logits, _ = _forward(params, config, ids[None, :], adapter=adapter)
    return logits[0]


def _backward(params, config, cache, dlogits, adapter=None, mode="full", drop_masks=None):
    grads: dict[str, np.ndarray] = {}
    full = mode == "full"
    nh, dh = config.n_heads, config.d_head
    ids = cache["ids"]
    B, S = ids.shape
    dtype = params["tok_emb"].dtype

    def flat(t):
        return t.reshape(-1, t.shape[-1])

    xf = cache["xf"]
    if full:
        grads["wout"] = flat(xf).T @ flat(dlogits)
        grads["bout"] = flat(dlogits).sum(axis=0)
    dxf = dlogits @ params["wout"].T
    dx, dg, db = _layernorm_backward(dxf, params["lnf.g"], cache["lnfc"])
    if full:
        grads["lnf.g"], grads["lnf.b"] = dg, db

    for i in reversed(range(config.n_layers)):
        p = f"layer{i}."
        c = cache[p]

        # feed-forward branch
        dh_out = dx  # gradient on x2 = x1 + f_out
        dh_mid = dh_out @ params[p + "w2"].T
        if full:
            grads[p + "w2"] = flat(c["h"]).T @ flat(dh_out)
            grads[p + "b2"] = flat(dh_out).sum(axis=0)
        dh_pre = dh_mid * _gelu_grad(c["h_pre"])
        if full:
            grads[p + "w1"] = flat(c["b_in"]).T @ flat(dh_pre)
            grads[p + "b1"] = flat(dh_pre).sum(axis=0)
        db_in = dh_pre @ params[p + "w1"].T
        dx1_ln, dg, dbb = _layernorm_backward(db_in, params[p + "ln2.g"], c["ln2c"])
        if full:
            grads[p + "ln2.g"], grads[p + "ln2.b"] = dg, dbb
        dx1 = dx + dx1_ln

        # attention output projection (possibly adapted)
        dy = dx1
        do = dy @ params[p + "wo"].T
        if full:
            grads[p + "wo"] = flat(c["o"]).T @ flat(dy)
        do = do + _lora_backward(grads, cache, adapter, p + "wo", dy, drop_masks)

        doh = do.reshape(B, S, nh, dh).transpose(0, 2, 1, 3)
        attn, vh, qh, kh = c["attn"], c["vh"], c["qh"], c["kh"]
        dattn = doh @ vh.transpose(0, 1, 3, 2)
        dvh = attn.transpose(0, 1, 3, 2) @ doh
        ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        ds = ds / np.sqrt(dh).astype(dtype)
        dqh = ds @ kh
        dkh = ds.transpose(0, 1, 3, 2) @ qh

        dq = dqh.transpose(0, 2, 1, 3).reshape(B, S, config.d_model)
        dk = dkh.transpose(0, 2, 1, 3).reshape(B, S, config.d_model)
        dv = dvh.transpose(0, 2, 1, 3).reshape(B, S, config.d_model)

        a_in = c["a_in"]
        if full:
            grads[p + "wq"] = flat(a_in).T @ flat(dq)
            grads[p + "wk"] = flat(a_in).T @ flat(dk)
            grads[p + "wv"] = flat(a_in).T @ flat(dv)
        da = dq @ params[p + "wq"].T + dk @ params[p + "wk"].T + dv @ params[p + "wv"].T
        da = da + _lora_backward(grads, cache, adapter, p + "wq", dq, drop_masks)
        da = da + _lora_backward(grads, cache, adapter, p + "wv", dv, drop_masks)

        dx_ln, dg, dbb = _layernorm_backward(da, params[p + "ln1.g"], c["ln1c"])
        if full:
            grads[p + "ln1.g"], grads[p + "ln1.b"] = dg, dbb
        dx = dx1 + dx_ln

    if full:
        grads["pos_emb"] = np.zeros_like(params["pos_emb"])
        grads["pos_emb"][:S] = dx.sum(axis=0)
        grads["tok_emb"] = np.zeros_like(params["tok_emb"])
        np.add.at(grads["tok_emb"], ids, dx)
    return grads


def _lora_backward(grads, cache, adapter, name, dy, drop_masks):
    """Accumulate A/B gradients for one adapted matrix; returns input gradient."""
    if adapter is None or name not in cache["lora"]:
        return 0.0
    a, b = adapter.matrices[name]
    xa, pmat = cache["lora"][name]
    scale = adapter.scale

    def flat(t):
        return t.reshape(-1, t.shape[-1])

    dp = scale * (dy @ b)
    grads[name + ".lora_B"] = scale * (flat(dy).T @ flat(pmat))
    grads[name + ".lora_A"] = flat(dp).T @ flat(xa)
    dxa = dp @ a
    if drop_masks and drop_masks.get(name) is not None:
        dxa = dxa * drop_masks[name]
    return dxa


def loss_and_grad(
    params,
    config: ModelConfig,
    batch: list[list[int]],
    adapter: LoraAdapter | None = None,
    mode: str = "full",
    lora_rng: np.random.Generator | None = None,
):
    """Mean next-token cross-entropy (nats/token) and gradients.

    `full` returns gradients for every base parameter (plus adapter matrices
    when an adapter is attached); `lora-only` returns only A/B gradients.
    Padding positions past each sequence's end are excluded from the loss.
    """
    if mode not in ("full", "lora-only"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "lora-only" and adapter is None:
        raise ValueError("lora-only mode requires an adapter")
    if not batch:
        raise ValueError("empty batch")
    lengths = [len(s) for s in batch]
    if min(lengths) < 2:
        raise ValueError("every sequence needs length >= 2")
    S = max(lengths)
    B = len(batch)
    ids = np.zeros((B, S), dtype=np.int64)
    for r, seq in enumerate(batch):
        ids[r, : len(seq)] = seq
    _check_ids(ids, config)

    drop_masks = None
    if adapter is not None and adapter.dropout > 0 and lora_rng is not None:
        dtype = params["tok_emb"].dtype
        keep = 1.0 - adapter.dropout
        drop_masks = {
            name: (lora_rng.random((B, S - 1, config.d_model)) < keep).astype(dtype) / keep
            for name in adapter.matrices
        }

    inputs = ids[:, :-1]
    targets = ids[:, 1:]
    loss_mask = np.zeros((B, S - 1), dtype=params["tok_emb"].dtype)
    for r, n in enumerate(lengths):
        loss_mask[r, : n - 1] = 1.0
    n_pred = loss_mask.sum()

    logits, cache = _forward(
        params, config, inputs, adapter=adapter, drop_masks=drop_masks, want_cache=True
    )
    z = logits - logits.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1))
    tgt_logit = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    nll = (logsumexp - tgt_logit) * loss_mask
    loss = float(nll.sum() / n_pred)

    probs = np.exp(z - logsumexp[..., None])
    dlogits = probs
    np.put_along_axis(
        dlogits,
        targets[..., None],
        np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0,
        axis=-1,
    )
    dlogits = dlogits * (loss_mask[..., None] / n_pred)

    grads = _backward(
        params, config, cache, dlogits, adapter=adapter, mode=mode, drop_masks=drop_masks
    )
    return loss, grads
