"""Small causal transformer that predicts the next clean token.

Inputs are raw (de-normalized) embedding vectors rather than token ids, so
the same forward pass serves clean tokens, noise-perturbed window slots, and
sinusoidal timestep encodings. Timestep slots are interleaved immediately
after the noisy position that owns them; attention-mask rules, not physical
order, define the semantics:

  * main positions attend causally among themselves,
  * a noisy main additionally attends to its own timestep slot,
  * timestep slots attend only to themselves and emit no logits row.

Positions are learned and indexed by main-sequence order; a timestep slot
shares its owner's position index, so sliding-window decoding keeps main
positions stable. Parameters are float32 (checkpoints round-trip bit-exactly);
all math follows the compute dtype, float64 in the gradient tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .embedding_space import EmbeddingTable
from .errors import CapacityError, ConfigurationError, ContractViolation
from .schedules import CLEAN, TimestepGrid

TIMESTEP_SCALE = 1000.0


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 66
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    context_len: int = 640
    eps_sigma: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigurationError("vocab_size must be >= 2")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.embed_dim % 2 != 0:
            raise ConfigurationError("embed_dim must be even (sinusoidal encodings)")
        if self.context_len < 2:
            raise ConfigurationError("context_len must be >= 2")


def bos_token(config: ModelConfig) -> int:
    """Begin-of-sequence id; specials occupy the top of the vocabulary."""
    return config.vocab_size - 2


def pad_token(config: ModelConfig) -> int:
    return config.vocab_size - 1


def init_params(config: ModelConfig) -> dict:
    """Scaled-normal initialization (gain 0.02), float32."""
    rng = np.random.default_rng(config.seed)
    D, V, C = config.embed_dim, config.vocab_size, config.context_len

    def w(*shape):
        return (rng.normal(0.0, 0.02, size=shape)).astype(np.float32)

    p = {
        "tok_emb": w(V, D),
        "pos_emb": w(C, D),
        "ln_f.g": np.ones(D, dtype=np.float32),
        "ln_f.b": np.zeros(D, dtype=np.float32),
        "head.w": w(D, V),
        "head.b": np.zeros(V, dtype=np.float32),
    }
    for i in range(config.num_layers):
        p[f"l{i}.ln1.g"] = np.ones(D, dtype=np.float32)
        p[f"l{i}.ln1.b"] = np.zeros(D, dtype=np.float32)
        p[f"l{i}.qkv.w"] = w(D, 3 * D)
        p[f"l{i}.qkv.b"] = np.zeros(3 * D, dtype=np.float32)
        p[f"l{i}.proj.w"] = w(D, D)
        p[f"l{i}.proj.b"] = np.zeros(D, dtype=np.float32)
        p[f"l{i}.ln2.g"] = np.ones(D, dtype=np.float32)
        p[f"l{i}.ln2.b"] = np.zeros(D, dtype=np.float32)
        p[f"l{i}.fc1.w"] = w(D, 4 * D)
        p[f"l{i}.fc1.b"] = np.zeros(4 * D, dtype=np.float32)
        p[f"l{i}.fc2.w"] = w(4 * D, D)
        p[f"l{i}.fc2.b"] = np.zeros(D, dtype=np.float32)
    return p


class ToyModel:
    """Parameter container plus the embedding table derived from them."""

    def __init__(self, config: ModelConfig, params: dict | None = None,
                 train_step: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config)
        self.train_step = train_step
        self._table = None

    @property
    def table(self) -> EmbeddingTable:
        if self._table is None:
            self._table = EmbeddingTable(self.params["tok_emb"],
                                         eps_sigma=self.config.eps_sigma)
        return self._table

    def refresh_table(self):
        """Drop cached embedding stats; call after mutating tok_emb."""
        self._table = None

    def param_names(self):
        return sorted(self.params)


# ---------------------------------------------------------------------------
# timestep encodings
# ---------------------------------------------------------------------------

def timestep_encoding(t: float, dim: int, table: EmbeddingTable,
                      scale: float = TIMESTEP_SCALE) -> np.ndarray:
    """Sinusoidal encoding of a noise level, matched to the embedding scale.

    The raw sinusoid is standardized to zero mean / unit variance and then
    de-normalized with the table statistics so its per-dimension distribution
    matches the token embeddings.
    """
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"timestep {t} outside [0, 1]")
    half = dim // 2
    i = np.arange(half, dtype=np.float64)
    angles = (t * scale) / np.power(10000.0, i / half)
    enc = np.concatenate([np.sin(angles), np.cos(angles)])
    enc = (enc - enc.mean()) / max(enc.std(), 1e-6)
    return table.sigma * enc + table.mu


# ---------------------------------------------------------------------------
# sequence layout and attention masks
# ---------------------------------------------------------------------------

@dataclass
class SequenceLayout:
    """Physical layout of a block: mains plus interleaved timestep slots."""

    is_ts: np.ndarray       # (P,) bool
    owner: np.ndarray       # (P,) local main index (own for mains)
    main_phys: np.ndarray   # (M,) physical index of each main

    @property
    def phys_len(self) -> int:
        return len(self.is_ts)

    @property
    def num_mains(self) -> int:
        return len(self.main_phys)


def layout_for_levels(levels) -> SequenceLayout:
    """Interleave a timestep slot after every non-CLEAN main position."""
    is_ts, owner, main_phys = [], [], []
    for m, lvl in enumerate(levels):
        main_phys.append(len(is_ts))
        is_ts.append(False)
        owner.append(m)
        if lvl != CLEAN:
            is_ts.append(True)
            owner.append(m)
    return SequenceLayout(np.array(is_ts, dtype=bool),
                          np.array(owner, dtype=np.int64),
                          np.array(main_phys, dtype=np.int64))


def mask_for_layout(layout: SequenceLayout, cache_len: int = 0) -> np.ndarray:
    """Boolean attention mask (P, cache_len + P) implementing the slot rules.

    Cached keys are earlier clean mains: visible to every main query, never
    to timestep-slot queries.
    """
    P = layout.phys_len
    mask = np.zeros((P, cache_len + P), dtype=bool)
    main_q = ~layout.is_ts
    if cache_len:
        mask[main_q, :cache_len] = True
    owner_q = layout.owner[:, None]
    owner_k = layout.owner[None, :]
    is_ts_k = layout.is_ts[None, :]
    block = np.zeros((P, P), dtype=bool)
    # main -> main: causal in main order
    block |= (~layout.is_ts[:, None]) & (~is_ts_k) & (owner_k <= owner_q)
    # main -> own timestep slot
    block |= (~layout.is_ts[:, None]) & is_ts_k & (owner_k == owner_q)
    # timestep slot -> itself only
    block |= layout.is_ts[:, None] & (np.arange(P)[:, None] == np.arange(P)[None, :])
    mask[:, cache_len:] = block
    return mask


def build_attention_mask(prefix_len: int, num_slots: int,
                         num_timestep_slots: int) -> np.ndarray:
    """Mask for the canonical decode block [prefix][slot ts slot ts ...].

    One timestep slot per noisy window slot; a window of clean slots passes
    num_timestep_slots=0 and degenerates to the plain causal mask.
    """
    if num_timestep_slots not in (0, num_slots):
        raise ContractViolation(
            f"need one timestep slot per window slot (or none), got "
            f"{num_timestep_slots} for {num_slots} slots"
        )
    lvl = CLEAN if num_timestep_slots == 0 else 0
    levels = [CLEAN] * prefix_len + [lvl] * num_slots
    return mask_for_layout(layout_for_levels(levels))


# ---------------------------------------------------------------------------
# forward / backward core
# ---------------------------------------------------------------------------

def _ln(x2d, g, b, eps=1e-5):
    return kernels.layer_norm(x2d, g, b, eps)


def _ln_backward(dy, x, mean, rstd, g):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dxhat = dy * g
    dg = np.sum(dy * xhat, axis=0)
    db = np.sum(dy, axis=0)
    dx = rstd[:, None] * (
        dxhat - dxhat.mean(axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dg, db


_GELU_C = 0.7978845608028654
_GELU_A = 0.044715


def _gelu_grad(x):
    x2 = x * x
    th = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)


def forward_core(params: dict, config: ModelConfig, x: np.ndarray,
                 mask: np.ndarray, past_kv=None, want_stash: bool = False,
                 want_kv: bool = False):
    """Transformer stack over pre-assembled input vectors.

    x: (B, P, D) content+position vectors; mask: (B, P, K) with K = C + P
    where C is the cached key count (0 in training). Returns
    (logits (B, P, V), new_kv, stash).
    """
    B, P, D = x.shape
    H = config.num_heads
    dh = D // H
    dt = x.dtype
    scale = dt.type(1.0 / np.sqrt(dh))

    def pp(name):
        return params[name].astype(dt, copy=False)

    stash = {"x0": x} if want_stash else None
    new_kv = [] if want_kv else None
    h = x
    for i in range(config.num_layers):
        g1, b1 = pp(f"l{i}.ln1.g"), pp(f"l{i}.ln1.b")
        a_in, mean1, rstd1 = _ln(h.reshape(B * P, D), g1, b1)
        qkv = a_in @ pp(f"l{i}.qkv.w") + pp(f"l{i}.qkv.b")
        qkv = qkv.reshape(B, P, 3, H, dh)
        q = np.ascontiguousarray(qkv[:, :, 0].transpose(0, 2, 1, 3))
        k = np.ascontiguousarray(qkv[:, :, 1].transpose(0, 2, 1, 3))
        v = np.ascontiguousarray(qkv[:, :, 2].transpose(0, 2, 1, 3))
        if past_kv is not None and past_kv[i] is not None:
            pk, pv = past_kv[i]
            k_full = np.concatenate([pk.astype(dt, copy=False), k], axis=2)
            v_full = np.concatenate([pv.astype(dt, copy=False), v], axis=2)
        else:
            k_full, v_full = k, v
        if want_kv:
            new_kv.append((k, v))
        scores = (q @ k_full.transpose(0, 1, 3, 2)) * scale
        probs = kernels.masked_softmax(scores, mask)
        ctx = (probs @ v_full).transpose(0, 2, 1, 3).reshape(B, P, D)
        attn_out = ctx @ pp(f"l{i}.proj.w") + pp(f"l{i}.proj.b")
        h_mid = h + attn_out
        g2, b2 = pp(f"l{i}.ln2.g"), pp(f"l{i}.ln2.b")
        m_in, mean2, rstd2 = _ln(h_mid.reshape(B * P, D), g2, b2)
        f1 = m_in @ pp(f"l{i}.fc1.w") + pp(f"l{i}.fc1.b")
        g_act = kernels.gelu(f1)
        f2 = g_act @ pp(f"l{i}.fc2.w") + pp(f"l{i}.fc2.b")
        h_next = h_mid + f2.reshape(B, P, D)
        if want_stash:
            stash[f"l{i}"] = dict(
                h=h, a_in=a_in, mean1=mean1, rstd1=rstd1, q=q, k=k_full,
                v=v_full, probs=probs, ctx=ctx, h_mid=h_mid, m_in=m_in,
                mean2=mean2, rstd2=rstd2, f1=f1, g_act=g_act,
            )
        h = h_next
    y, meanf, rstdf = _ln(h.reshape(B * P, D), pp("ln_f.g"), pp("ln_f.b"))
    logits = (y @ pp("head.w") + pp("head.b")).reshape(B, P, -1)
    if want_stash:
        stash["h_final"] = h
        stash["y"] = y
        stash["meanf"] = meanf
        stash["rstdf"] = rstdf
    return logits, new_kv, stash


def backward_core(params: dict, config: ModelConfig, stash: dict,
                  dlogits: np.ndarray):
    """Gradients of forward_core w.r.t. parameters and the input vectors.

    Only supports the no-cache path used in training. Returns (grads, dx)
    where dx has the shape of the assembled input (B, P, D); the caller
    routes dx into the embedding and position tables.
    """
    B, P, V = dlogits.shape
    D = config.embed_dim
    H = config.num_heads
    dh = D // H
    dt = dlogits.dtype
    scale = dt.type(1.0 / np.sqrt(dh))

    def pp(name):
        return params[name].astype(dt, copy=False)

    grads = {}
    dl2 = dlogits.reshape(B * P, V)
    y = stash["y"]
    grads["head.w"] = y.T @ dl2
    grads["head.b"] = dl2.sum(axis=0)
    dy = dl2 @ pp("head.w").T
    h_final = stash["h_final"].reshape(B * P, D)
    dh_flat, dgf, dbf = _ln_backward(dy, h_final, stash["meanf"],
                                     stash["rstdf"], pp("ln_f.g"))
    grads["ln_f.g"] = dgf
    grads["ln_f.b"] = dbf
    dres = dh_flat.reshape(B, P, D)

    for i in reversed(range(config.num_layers)):
        s = stash[f"l{i}"]
        # MLP branch
        df2 = dres.reshape(B * P, D)
        grads[f"l{i}.fc2.w"] = s["g_act"].T @ df2
        grads[f"l{i}.fc2.b"] = df2.sum(axis=0)
        dg_act = df2 @ pp(f"l{i}.fc2.w").T
        df1 = dg_act * _gelu_grad(s["f1"])
        grads[f"l{i}.fc1.w"] = s["m_in"].T @ df1
        grads[f"l{i}.fc1.b"] = df1.sum(axis=0)
        dm_in = df1 @ pp(f"l{i}.fc1.w").T
        h_mid = s["h_mid"].reshape(B * P, D)
        dh_mid_flat, dg2, db2 = _ln_backward(dm_in, h_mid, s["mean2"],
                                             s["rstd2"], pp(f"l{i}.ln2.g"))
        grads[f"l{i}.ln2.g"] = dg2
        grads[f"l{i}.ln2.b"] = db2
        dh_mid = dres + dh_mid_flat.reshape(B, P, D)
        # attention branch
        dattn = dh_mid.reshape(B * P, D)
        grads[f"l{i}.proj.w"] = s["ctx"].reshape(B * P, D).T @ dattn
        grads[f"l{i}.proj.b"] = dattn.sum(axis=0)
        dctx = (dattn @ pp(f"l{i}.proj.w").T).reshape(B, P, H, dh).transpose(0, 2, 1, 3)
        probs = s["probs"]
        dprobs = dctx @ s["v"].transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dctx
        dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
        dq = (dscores @ s["k"]) * scale
        dk = (dscores.transpose(0, 1, 3, 2) @ s["q"]) * scale
        dqkv = np.empty((B, P, 3, H, dh), dtype=dt)
        dqkv[:, :, 0] = dq.transpose(0, 2, 1, 3)
        dqkv[:, :, 1] = dk.transpose(0, 2, 1, 3)
        dqkv[:, :, 2] = dv.transpose(0, 2, 1, 3)
        dqkv = dqkv.reshape(B * P, 3 * D)
        grads[f"l{i}.qkv.w"] = s["a_in"].T @ dqkv
        grads[f"l{i}.qkv.b"] = dqkv.sum(axis=0)
        da_in = dqkv @ pp(f"l{i}.qkv.w").T
        h_in = s["h"].reshape(B * P, D)
        dh_in_flat, dg1, db1 = _ln_backward(da_in, h_in, s["mean1"],
                                            s["rstd1"], pp(f"l{i}.ln1.g"))
        grads[f"l{i}.ln1.g"] = dg1
        grads[f"l{i}.ln1.b"] = db1
        dres = dh_mid + dh_in_flat.reshape(B, P, D)
    return grads, dres


# ---------------------------------------------------------------------------
# inference entry point
# ---------------------------------------------------------------------------

@dataclass
class ForwardInput:
    """One decode-step block: new clean tokens plus the current window.

    window_levels holds a grid index per slot (CLEAN for fully denoised
    slots); noise levels must be non-strictly increasing across the window.
    window_embeddings are raw-space vectors, one row per slot.
    """

    prefix_tokens: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    window_embeddings: np.ndarray | None = None
    window_levels: list = field(default_factory=list)
    grid: TimestepGrid | None = None


class KVCache:
    """Per-layer key/value tensors for the accepted clean prefix."""

    def __init__(self, num_layers: int):
        self.kv = [None] * num_layers
        self.n_mains = 0

    def extend(self, new_kv, n_keep: int):
        if n_keep == 0:
            return
        for i, (k, v) in enumerate(new_kv):
            kn = k[:, :, :n_keep, :]
            vn = v[:, :, :n_keep, :]
            if self.kv[i] is None:
                self.kv[i] = (kn.copy(), vn.copy())
            else:
                pk, pv = self.kv[i]
                self.kv[i] = (np.concatenate([pk, kn], axis=2),
                              np.concatenate([pv, vn], axis=2))
        self.n_mains += n_keep


def forward(model: ToyModel, fwd: ForwardInput, cache: KVCache | None = None,
            extend_cache: int = 0, dtype=np.float32,
            table: EmbeddingTable | None = None) -> np.ndarray:
    """Single parallel forward pass; returns logits rows for every main.

    Rows [0, len(prefix_tokens)) correspond to the new clean tokens, rows
    after them to window slots. Timestep slots emit no rows. When a cache is
    given, the first `extend_cache` mains (the new clean tokens) are added
    to it. `table` overrides the statistics used for timestep encodings
    (normalization-off ablation).
    """
    cfg = model.config
    D = cfg.embed_dim
    prefix = np.asarray(fwd.prefix_tokens, dtype=np.int64)
    n_new = len(prefix)
    n_slots = 0 if fwd.window_embeddings is None else len(fwd.window_embeddings)
    if n_slots != len(fwd.window_levels):
        raise ContractViolation("window embeddings and levels must align")
    if np.any(prefix < 0) or np.any(prefix >= cfg.vocab_size):
        raise IndexError("prefix token id out of vocabulary range")

    levels = list(fwd.window_levels)
    if n_slots:
        noise = []
        for lvl in levels:
            if lvl == CLEAN:
                noise.append(0.0)
            else:
                if fwd.grid is None:
                    raise ContractViolation("noisy window slots require a grid")
                if not (0 <= lvl < fwd.grid.num_steps):
                    raise IndexError(f"grid index {lvl} out of range")
                noise.append(float(fwd.grid.values[lvl]))
        if any(b < a - 1e-12 for a, b in zip(noise, noise[1:])):
            raise ContractViolation(
                "window noise levels must be non-strictly increasing"
            )

    layout = layout_for_levels([CLEAN] * n_new + levels)
    P = layout.phys_len
    base = cache.n_mains if cache is not None else 0
    if base + layout.num_mains > cfg.context_len:
        raise CapacityError(
            f"sequence of {base + layout.num_mains} mains exceeds context "
            f"{cfg.context_len}"
        )

    x = np.zeros((P, D), dtype=np.float64)
    if table is None:
        table = model.table
    mains = layout.main_phys
    if n_new:
        x[mains[:n_new]] = model.params["tok_emb"][prefix]
    if n_slots:
        x[mains[n_new:]] = np.asarray(fwd.window_embeddings)
        enc_cache = {}
        for p in np.flatnonzero(layout.is_ts):
            lvl = levels[layout.owner[p] - n_new]
            if lvl not in enc_cache:
                enc_cache[lvl] = timestep_encoding(
                    float(fwd.grid.values[lvl]), D, table)
            x[p] = enc_cache[lvl]
    pos_idx = base + layout.owner
    x = x + model.params["pos_emb"][pos_idx]

    mask = mask_for_layout(layout, cache_len=base)
    want_kv = cache is not None and extend_cache > 0
    logits, new_kv, _ = forward_core(
        params=model.params, config=cfg, x=x[None].astype(dtype),
        mask=mask[None], past_kv=cache.kv if cache is not None else None,
        want_kv=want_kv,
    )
    if want_kv:
        cache.extend(new_kv, extend_cache)
    return logits[0, layout.main_phys, :]
