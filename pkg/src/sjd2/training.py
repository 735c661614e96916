"""Noise-augmented fine-tuning of the toy model.

The input sequence is tiled into randomly sized windows; inside a window,
equally sized segments step through consecutive grid levels from cleanest to
noisiest, mirroring the noise pattern a decode-time window sees. Labels are
always the clean next tokens, so the objective stays next-token prediction.

Embedding-table statistics are recomputed before every optimizer step but
treated as constants inside the step: gradients flow into the embedding rows
through the alpha-scaled noisy inputs, not through the statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .embedding_space import EmbeddingTable, denormalize
from .errors import ContractViolation
from .model import (CLEAN, ModelConfig, ToyModel, forward_core, backward_core,
                    layout_for_levels, mask_for_layout, timestep_encoding)
from .schedules import NoiseCoeffs, TimestepGrid
from .errors import TrainingDivergedError


# ---------------------------------------------------------------------------
# noise plans
# ---------------------------------------------------------------------------

@dataclass
class NoisePlan:
    """Per-position grid levels (CLEAN or a grid index) plus window tiling."""

    windows: list
    levels: np.ndarray
    grid: TimestepGrid | None

    def validate(self):
        pos = 0
        for start, length in self.windows:
            if start != pos or length < 1:
                raise ContractViolation("windows must tile the sequence")
            seg = self.levels[start:start + length]
            noisy = seg[seg != CLEAN]
            if len(noisy) and self.grid is None:
                raise ContractViolation("noisy plan without a grid")
            # noise ascends along a window <=> grid index descends
            if np.any(np.diff(seg) > 0):
                raise ContractViolation("levels must be noise-ascending in a window")
            pos += length
        if pos != len(self.levels):
            raise ContractViolation("windows do not cover the sequence")


def all_clean_plan(seq_len: int) -> NoisePlan:
    return NoisePlan(windows=[(0, seq_len)],
                     levels=np.full(seq_len, CLEAN, dtype=np.int64), grid=None)


def sample_noise_plan(seq_len: int, grid: TimestepGrid, rng,
                      window_min: int = 16, window_max: int = 96,
                      level_mode: str = "consecutive") -> NoisePlan:
    """Tile the sequence into windows and assign segment noise levels.

    Window lengths are uniform in [window_min, window_max] (clipped at the
    sequence end). A window of length L uses segment size ceil(L/T); in
    "consecutive" mode segment j carries grid index T-1-j (cleanest first),
    in "free" mode the segment levels are drawn at random and sorted
    noise-ascending.
    """
    if seq_len < 1:
        raise ContractViolation("seq_len must be >= 1")
    if level_mode not in ("consecutive", "free"):
        raise ContractViolation(f"unknown level_mode {level_mode!r}")
    T = grid.num_steps
    windows = []
    levels = np.empty(seq_len, dtype=np.int64)
    pos = 0
    while pos < seq_len:
        length = int(rng.integers(window_min, window_max + 1))
        length = min(length, seq_len - pos)
        seg_size = math.ceil(length / T)
        n_segs = math.ceil(length / seg_size)
        if level_mode == "consecutive":
            seg_levels = np.arange(T - 1, T - 1 - n_segs, -1)
        else:
            seg_levels = np.sort(rng.integers(0, T, size=n_segs))[::-1]
        for i in range(length):
            levels[pos + i] = seg_levels[i // seg_size]
        windows.append((pos, length))
        pos += length
    plan = NoisePlan(windows=windows, levels=levels, grid=grid)
    plan.validate()
    return plan


def apply_noise_plan(tokens: np.ndarray, plan: NoisePlan, table: EmbeddingTable,
                     coeffs: NoiseCoeffs, rng):
    """Noisy raw embeddings for a token sequence under a plan.

    Returns (embeddings (S, D) float64, alphas (S,)). CLEAN positions carry
    the exact embedding rows (alpha 1); noisy positions are perturbed in
    normalized space and de-normalized. alphas are the input-to-row gradient
    scale used by training.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) != len(plan.levels):
        raise ContractViolation(
            f"plan of length {len(plan.levels)} misaligned with "
            f"{len(tokens)} tokens"
        )
    S, D = len(tokens), table.dim
    eps = rng.standard_normal((S, D))
    levels = plan.levels
    noisy = levels != CLEAN
    t = np.zeros(S)
    if noisy.any():
        t[noisy] = plan.grid.values[levels[noisy]]
    alpha = coeffs.alpha(t)
    sigma = coeffs.sigma(t)
    e_star = table.normalized_rows()[tokens]
    e_t = alpha[:, None] * e_star + sigma[:, None] * eps
    out = denormalize(e_t, table)
    out[~noisy] = table.weights[tokens[~noisy]]  # exact rows, not a round trip
    return out, alpha


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class TrainBatch:
    """Padded physical-layout tensors ready for forward_core.

    The input content of a main position is x_base + alpha * tok_emb[row],
    reassembled from the live parameters on every loss evaluation so that
    embedding gradients are real; x_base holds the frozen noise/statistics
    part (and the timestep encodings, whose rows have alpha 0).
    """

    x_base: np.ndarray      # (B, P, D) float64, embedding-independent content
    pos_idx: np.ndarray     # (B, P) int
    mask: np.ndarray        # (B, P, P) bool
    labels: np.ndarray      # (B, P) int, -1 = unsupervised
    token_rows: np.ndarray  # (B, P) int, source vocab row of a main, -1 = none
    alpha: np.ndarray       # (B, P) float64 scale of the tok_emb contribution
    real: np.ndarray        # (B, P) bool, False on padding


def build_batch(sequences, model: ToyModel, coeffs: NoiseCoeffs,
                grid: TimestepGrid, rng, noise_augment: bool,
                bos_id: int, window_min: int = 16, window_max: int = 96,
                level_mode: str = "consecutive",
                plans=None) -> TrainBatch:
    """Assemble a batch: [BOS] + tokens as mains, timestep slots interleaved.

    Labels are the clean ids with one-position offset; they never depend on
    the sampled noise. Pass `plans` to pin noise plans (tests); otherwise one
    is sampled per sequence when noise_augment is set.
    """
    table = model.table
    D = model.config.embed_dim
    enc_cache = {}
    per_seq = []
    for si, seq in enumerate(sequences):
        seq = np.asarray(seq, dtype=np.int64)
        if plans is not None:
            plan = plans[si]
        elif noise_augment:
            plan = sample_noise_plan(len(seq), grid, rng, window_min,
                                     window_max, level_mode)
        else:
            plan = all_clean_plan(len(seq))
        emb, alpha = apply_noise_plan(seq, plan, table, coeffs, rng)
        tokens_in = np.concatenate([[bos_id], seq])
        levels_in = np.concatenate([[CLEAN], plan.levels])
        layout = layout_for_levels(levels_in)
        P = layout.phys_len
        alpha_in = np.concatenate([[1.0], alpha])
        x = np.zeros((P, D))
        # embedding-independent remainder; exact zero on clean positions
        x[layout.main_phys] = (np.concatenate([table.weights[bos_id][None], emb])
                               - alpha_in[:, None] * table.weights[tokens_in])
        a = np.zeros(P)
        a[layout.main_phys] = alpha_in
        for p in np.flatnonzero(layout.is_ts):
            lvl = int(levels_in[layout.owner[p]])
            if lvl not in enc_cache:
                enc_cache[lvl] = timestep_encoding(float(grid.values[lvl]), D, table)
            x[p] = enc_cache[lvl]
        labels = np.full(P, -1, dtype=np.int64)
        labels[layout.main_phys[:-1]] = seq  # row m supervises token m+1
        token_rows = np.full(P, -1, dtype=np.int64)
        token_rows[layout.main_phys] = tokens_in
        mask = mask_for_layout(layout)
        per_seq.append((x, layout.owner.copy(), mask, labels, token_rows, a))

    B = len(per_seq)
    Pmax = max(item[0].shape[0] for item in per_seq)
    x_base = np.zeros((B, Pmax, D))
    pos_idx = np.zeros((B, Pmax), dtype=np.int64)
    mask = np.zeros((B, Pmax, Pmax), dtype=bool)
    labels = np.full((B, Pmax), -1, dtype=np.int64)
    token_rows = np.full((B, Pmax), -1, dtype=np.int64)
    alpha = np.zeros((B, Pmax))
    real = np.zeros((B, Pmax), dtype=bool)
    for b, (x, owner, m, lab, tok, a) in enumerate(per_seq):
        P = x.shape[0]
        x_base[b, :P] = x
        pos_idx[b, :P] = owner
        mask[b, :P, :P] = m
        labels[b, :P] = lab
        token_rows[b, :P] = tok
        alpha[b, :P] = a
        real[b, :P] = True
        if P < Pmax:  # padding rows attend to themselves so softmax is defined
            idx = np.arange(P, Pmax)
            mask[b, idx, idx] = True
    return TrainBatch(x_base, pos_idx, mask, labels, token_rows, alpha, real)


# ---------------------------------------------------------------------------
# loss and gradients
# ---------------------------------------------------------------------------

def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean next-token cross-entropy over supervised rows.

    logits (B, P, V); labels (B, P) with -1 ignored. Returns (loss, dlogits)
    where dlogits is the gradient of the mean loss (same dtype as logits).
    """
    rows = labels >= 0
    n = int(rows.sum())
    if n == 0:
        raise ContractViolation("batch has no supervised positions")
    sel = logits[rows].astype(np.float64)
    lab = labels[rows]
    m = sel.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(sel - m).sum(axis=1))
    loss = float(np.mean(lse - sel[np.arange(n), lab]))
    p = np.exp(sel - lse[:, None])
    p[np.arange(n), lab] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[rows] = (p / n).astype(logits.dtype)
    return loss, dlogits


def loss_and_grads(params: dict, config: ModelConfig, batch: TrainBatch,
                   dtype=np.float32, want_grads: bool = True):
    """Loss (and parameter gradients) for a fixed, pre-assembled batch.

    The batch froze the embedding statistics and the noise draw, so this is
    a deterministic, differentiable function of the parameters; the
    finite-difference oracle in the tests perturbs parameters against it.
    """
    pos = params["pos_emb"].astype(dtype, copy=False)[batch.pos_idx]
    rows = np.maximum(batch.token_rows, 0)
    has_tok = (batch.token_rows >= 0).astype(dtype)
    emb = params["tok_emb"].astype(dtype, copy=False)[rows]
    scale = (batch.alpha.astype(dtype) * has_tok)[:, :, None]
    x = batch.x_base.astype(dtype) + scale * emb + pos
    logits, _, stash = forward_core(params, config, x, batch.mask,
                                    want_stash=want_grads)
    loss, dlogits = cross_entropy(logits, batch.labels)
    if not want_grads:
        return loss, None
    grads, dx = backward_core(params, config, stash, dlogits)
    g_tok = np.zeros(params["tok_emb"].shape, dtype=dtype)
    sel = batch.token_rows >= 0
    np.add.at(g_tok, batch.token_rows[sel],
              dx[sel] * batch.alpha[sel, None].astype(dtype))
    grads["tok_emb"] = g_tok
    g_pos = np.zeros(params["pos_emb"].shape, dtype=dtype)
    np.add.at(g_pos, batch.pos_idx[batch.real], dx[batch.real])
    grads["pos_emb"] = g_pos
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer and loop
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay on the matrix-shaped parameters."""

    def __init__(self, params: dict, lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float | None = None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name].astype(np.float64)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            new = p.astype(np.float64)
            if p.ndim >= 2:
                new -= lr * self.weight_decay * new
            new -= lr * upd
            p[...] = new.astype(p.dtype)


def cosine_lr(base_lr: float, step: int, total_steps: int,
              floor_frac: float = 0.1) -> float:
    if total_steps <= 1:
        return base_lr
    floor = base_lr * floor_frac
    frac = min(step / (total_steps - 1), 1.0)
    return floor + 0.5 * (base_lr - floor) * (1.0 + math.cos(math.pi * frac))


def grad_global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                             for g in grads.values())))


def train_model(model: ToyModel, sequences, steps: int, batch_size: int,
                coeffs: NoiseCoeffs, grid: TimestepGrid, *, lr: float = 3e-4,
                weight_decay: float = 0.01, seed: int = 0,
                noise_augment: bool = True, crop_len: int | None = None,
                window_min: int = 16, window_max: int = 96,
                level_mode: str = "consecutive", lr_schedule: str = "cosine",
                optimizer: AdamW | None = None):
    """Optimize the model in place; returns [(step, loss, lr, grad_norm), ...].

    Noise (plans and epsilon draws) is resampled fresh every step. Sequences
    longer than crop_len contribute a random contiguous crop per step.
    """
    rng = np.random.default_rng([seed, 0x7EA1])
    opt = optimizer or AdamW(model.params, lr=lr, weight_decay=weight_decay)
    history = []
    n_seq = len(sequences)
    for step in range(steps):
        idx = rng.integers(0, n_seq, size=batch_size)
        batch_seqs = []
        for i in idx:
            seq = sequences[int(i)]
            if crop_len is not None and len(seq) > crop_len:
                start = int(rng.integers(0, len(seq) - crop_len + 1))
                seq = seq[start:start + crop_len]
            batch_seqs.append(seq)
        model.refresh_table()
        batch = build_batch(batch_seqs, model, coeffs, grid, rng,
                            noise_augment, bos_id=model.config.vocab_size - 2,
                            window_min=window_min, window_max=window_max,
                            level_mode=level_mode)
        loss, grads = loss_and_grads(model.params, model.config, batch)
        gnorm = grad_global_norm(grads)
        step_lr = cosine_lr(lr, step, steps) if lr_schedule == "cosine" else lr
        if not math.isfinite(loss):
            raise TrainingDivergedError(step, step_lr, gnorm)
        opt.step(model.params, grads, lr=step_lr)
        model.train_step += 1
        history.append((step, loss, step_lr, gnorm))
    model.refresh_table()
    return history


def write_loss_csv(history, path: str):
    with open(path, "w") as f:
        f.write("step,loss,lr,grad_norm\n")
        for step, loss, lr, gnorm in history:
            f.write(f"{step},{loss!r},{lr!r},{gnorm!r}\n")
