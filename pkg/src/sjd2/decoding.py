"""Decoding engines: sequential, Jacobi fixed-point, and the speculative variants.

All engines share one session skeleton: a forward pass over the newly
accepted clean tokens (extending the KV cache) plus the current draft
window, a front-to-back verification scan, refinement of the unaccepted
slots, and a slide that removes the resolved prefix and appends fresh
maximum-noise drafts.

The draft probability q of a slot is the probability the previous
iteration's one-position-offset prediction assigned to the slot's current
draft token; freshly initialized slots carry a uniform prior. The full
previous distribution is kept per slot so strict speculative verification
can resample a rejection from the positive residual.

Decode math runs in float64 so that greedy baseline comparisons are not
sensitive to GEMM tiling differences between block shapes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .embedding_space import EmbeddingTable, nearest_token, denormalize, \
    token_to_normalized_embedding
from .errors import CapacityError, ConfigurationError, ContractViolation, \
    TruncationError
from .model import CLEAN, ForwardInput, KVCache, ToyModel, forward
from .schedules import NoiseCoeffs, TimestepGrid, build_schedule, denoise_step

MODES = ("ar", "jacobi", "sjd", "sjd2")
_DECODE_DTYPE = np.float64
_Q_FLOOR = 1e-12


@dataclass
class DecodeConfig:
    mode: str = "sjd2"
    window: int = 96                 # Jacobi window length L
    steps: int = 25                  # denoising steps T (grid size)
    temperature: float = 1.0         # 0 = greedy
    top_k: int = 2000                # clipped to the vocabulary
    acceptance_mode: str = "strict_speculative"   # or "paper_threshold"
    require_clean_for_accept: bool = False
    immediate_accept: bool = False
    normalization_enabled: bool = True
    max_forwards: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.window < 1:
            raise ConfigurationError("window length must be >= 1")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.acceptance_mode not in ("strict_speculative", "paper_threshold"):
            raise ConfigurationError(
                f"unknown acceptance_mode {self.acceptance_mode!r}")
        if self.mode == "jacobi" and self.temperature != 0.0:
            raise ConfigurationError("jacobi decoding is greedy only; set temperature=0")
        if self.temperature < 0 or self.top_k < 1:
            raise ConfigurationError("temperature must be >= 0 and top_k >= 1")


@dataclass
class WindowSlot:
    embedding: np.ndarray    # normalized-space vector e^{t_k}
    level: int               # grid index, or CLEAN once fully denoised
    draft_token: int
    draft_prob: float        # q(draft_token) under the previous prediction
    q_dist: np.ndarray       # full previous prediction (for residual resampling)


@dataclass
class JacobiWindow:
    slots: list
    start_pos: int = 0       # absolute sequence position of slot 0

    def __len__(self):
        return len(self.slots)

    def noise_levels(self, grid: TimestepGrid) -> np.ndarray:
        return np.array([0.0 if s.level == CLEAN else grid.values[s.level]
                         for s in self.slots])

    def check_invariant(self, grid: TimestepGrid, length: int):
        if len(self.slots) != length:
            raise ContractViolation(
                f"window length drifted to {len(self.slots)} (expected {length})")
        t = self.noise_levels(grid)
        if np.any(np.diff(t) < -1e-12):
            raise ContractViolation("window noise levels are not non-decreasing")


@dataclass
class IterationRecord:
    iteration: int
    window_start: int
    n_accept: int
    accepted: list
    slot_tokens: list
    slot_levels: list


@dataclass
class DecodeResult:
    tokens: list
    forwards: int
    trace: list
    mode: str
    wall_forward_ms: float = 0.0


# ---------------------------------------------------------------------------
# sampling helpers
# ---------------------------------------------------------------------------

def adjusted_probs(logits_row: np.ndarray, temperature: float, top_k: int) -> np.ndarray:
    """The decoding distribution: temperature then top-k, renormalized.

    temperature=0 degenerates to a one-hot at the argmax (first index on
    ties). This same distribution feeds sampling, verification ratios, and
    residuals, which is what makes strict speculative verification exact.
    """
    l = logits_row.astype(np.float64)
    if temperature == 0.0:
        p = np.zeros_like(l)
        p[int(np.argmax(l))] = 1.0
        return p
    l = l / temperature
    k = min(top_k, len(l))
    if k < len(l):
        thresh = np.partition(l, -k)[-k]
        l = np.where(l >= thresh, l, -np.inf)
    l -= l.max()
    p = np.exp(l)
    return p / p.sum()


def sample_categorical(p: np.ndarray, rng) -> int:
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    return min(idx, len(p) - 1)


# ---------------------------------------------------------------------------
# window state machine
# ---------------------------------------------------------------------------

def _fresh_slot(grid: TimestepGrid, rng, table: EmbeddingTable,
                vocab_size: int) -> WindowSlot:
    e = rng.standard_normal(table.dim)
    return WindowSlot(
        embedding=e,
        level=0,  # index of t_max
        draft_token=nearest_token(e, table),
        draft_prob=1.0 / vocab_size,
        q_dist=np.full(vocab_size, 1.0 / vocab_size),
    )


def init_window(length: int, grid: TimestepGrid, rng, table: EmbeddingTable,
                vocab_size: int, start_pos: int = 0) -> JacobiWindow:
    """Window filled with pure Gaussian noise at the maximal noise level."""
    if length < 1:
        raise ConfigurationError("window length must be >= 1")
    slots = [_fresh_slot(grid, rng, table, vocab_size) for _ in range(length)]
    return JacobiWindow(slots=slots, start_pos=start_pos)


def verify_prefix(probs, window: JacobiWindow, rng,
                  acceptance_mode: str = "strict_speculative",
                  require_clean: bool = False,
                  immediate_accept: bool = False,
                  immediate_cutoff: float | None = None):
    """Front-to-back acceptance scan.

    Slot i is accepted iff every slot before it was accepted and
    r < min(1, p_i(draft)/q_i(draft)), r ~ U[0,1). With immediate_accept, a
    CLEAN slot whose window offset is below the cutoff is accepted without a
    draw. In strict mode the first Eq-ratio rejection emits one token from
    the normalized positive residual max(0, p - q); an ineligible slot
    (noisy under require_clean) just stops the scan.

    Returns (n_accept, emitted_or_None).
    """
    for i, p in enumerate(probs):
        if abs(float(p.sum()) - 1.0) > 1e-6:
            raise ContractViolation(f"slot {i} probabilities sum to {p.sum()!r}")
    n_accept = 0
    emitted = None
    for i, slot in enumerate(window.slots):
        if (immediate_accept and slot.level == CLEAN
                and immediate_cutoff is not None and i < immediate_cutoff):
            n_accept += 1
            continue
        if require_clean and slot.level != CLEAN:
            break
        p_draft = float(probs[i][slot.draft_token])
        ratio = min(1.0, p_draft / max(slot.draft_prob, _Q_FLOOR))
        if rng.random() < ratio:
            n_accept += 1
            continue
        if acceptance_mode == "strict_speculative":
            residual = np.maximum(probs[i] - slot.q_dist, 0.0)
            total = residual.sum()
            if total > 0.0:
                emitted = sample_categorical(residual / total, rng)
            else:  # p == q exactly; unreachable for r < 1 draws, kept for safety
                emitted = sample_categorical(probs[i], rng)
        break
    return n_accept, emitted


def refine(window: JacobiWindow, probs, grid: TimestepGrid,
           coeffs: NoiseCoeffs, rng, table: EmbeddingTable, start: int = 0):
    """Refinement of unaccepted slots [start:] with this iteration's predictions.

    probs[i] is the one-position-offset prediction for slot i (from the
    logits row at slot i-1, or at the last accepted token for i=0). A noisy
    slot takes one denoising step toward the embedding of a clean token
    sampled from probs[i] and advances one grid level (CLEAN at the terminal
    level). A CLEAN slot is resampled when min(1, p/q) < 0.5 and retained
    otherwise. Every touched slot's draft probability is updated to the
    current prediction.
    """
    if len(probs) != len(window.slots):
        raise ContractViolation("one prediction per slot required")
    terminal = grid.num_steps - 1
    for i in range(start, len(window.slots)):
        slot = window.slots[i]
        p = probs[i]
        if slot.level != CLEAN:
            x_hat = sample_categorical(p, rng)
            e_hat0 = token_to_normalized_embedding(x_hat, table)
            slot.embedding = denoise_step(slot.embedding, e_hat0, slot.level,
                                          grid, coeffs)
            if slot.level == terminal:
                slot.level = CLEAN
                slot.draft_token = x_hat
            else:
                slot.level += 1
                slot.draft_token = nearest_token(slot.embedding, table)
        else:
            ratio = min(1.0, float(p[slot.draft_token]) / max(slot.draft_prob, _Q_FLOOR))
            if ratio < 0.5:
                slot.draft_token = sample_categorical(p, rng)
                slot.embedding = token_to_normalized_embedding(slot.draft_token, table)
        slot.draft_prob = float(p[slot.draft_token])
        slot.q_dist = p


def slide_and_refill(window: JacobiWindow, n_removed: int, grid: TimestepGrid,
                     rng, table: EmbeddingTable, vocab_size: int):
    """Drop the resolved prefix, append fresh maximum-noise slots."""
    if not (0 <= n_removed <= len(window.slots)):
        raise ContractViolation(
            f"cannot remove {n_removed} of {len(window.slots)} slots")
    if n_removed == 0:
        return
    window.slots = window.slots[n_removed:] + [
        _fresh_slot(grid, rng, table, vocab_size) for _ in range(n_removed)
    ]
    window.start_pos += n_removed


# ---------------------------------------------------------------------------
# decode session
# ---------------------------------------------------------------------------

class _Session:
    def __init__(self, model: ToyModel, config: DecodeConfig, grid, coeffs, rng):
        self.model = model
        self.config = config
        self.grid = grid
        self.coeffs = coeffs
        self.rng = rng
        self.cache = KVCache(model.config.num_layers)
        self.table = model.table if config.normalization_enabled else \
            EmbeddingTable(model.params["tok_emb"],
                           eps_sigma=model.config.eps_sigma, identity_stats=True)
        self.vocab = model.config.vocab_size
        self.top_k = min(config.top_k, self.vocab)
        self.forwards = 0
        self.wall_ms = 0.0
        self.last_row = None

    def run_forward(self, pending, window_embeddings=None, window_levels=None):
        fwd = ForwardInput(
            prefix_tokens=np.asarray(pending, dtype=np.int64),
            window_embeddings=window_embeddings,
            window_levels=list(window_levels) if window_levels is not None else [],
            grid=self.grid,
        )
        t0 = time.perf_counter()
        logits = forward(self.model, fwd, cache=self.cache,
                         extend_cache=len(pending), dtype=_DECODE_DTYPE,
                         table=self.table)
        self.wall_ms += (time.perf_counter() - t0) * 1e3
        self.forwards += 1
        if len(pending):
            self.last_row = logits[len(pending) - 1]
        return logits[len(pending):]

    def probs(self, row: np.ndarray) -> np.ndarray:
        return adjusted_probs(row, self.config.temperature, self.top_k)

    def slot_probs(self, slot_rows: np.ndarray):
        """One-position-offset predictions: slot i is predicted by row i-1."""
        out = [self.probs(self.last_row)]
        for i in range(len(slot_rows) - 1):
            out.append(self.probs(slot_rows[i]))
        return out

    def window_inputs(self, window: JacobiWindow):
        emb = np.empty((len(window.slots), self.model.config.embed_dim))
        levels = []
        for i, slot in enumerate(window.slots):
            if slot.level == CLEAN:
                emb[i] = self.model.params["tok_emb"][slot.draft_token]
            else:
                emb[i] = denormalize(slot.embedding, self.table)
            levels.append(slot.level)
        return emb, levels


def _decode_ar(sess: _Session, prompt, n_tokens, cap, trace):
    emitted = []
    pending = list(prompt)
    while len(emitted) < n_tokens:
        if sess.forwards >= cap:
            raise TruncationError(
                f"forward cap {cap} reached after {len(emitted)} tokens",
                partial=emitted)
        sess.run_forward(pending)
        p = sess.probs(sess.last_row)
        tok = int(np.argmax(p)) if sess.config.temperature == 0.0 \
            else sample_categorical(p, sess.rng)
        trace.append(IterationRecord(
            iteration=len(trace), window_start=len(prompt) + len(emitted),
            n_accept=1, accepted=[tok], slot_tokens=[], slot_levels=[]))
        emitted.append(tok)
        pending = [tok]
    return emitted


def _decode_jacobi(sess: _Session, prompt, n_tokens, cap, trace):
    L = sess.config.window
    rng = sess.rng
    drafts = [int(t) for t in rng.integers(0, sess.vocab, size=L)]
    start_pos = len(prompt)
    emitted = []
    pending = list(prompt)
    tok_emb = sess.model.params["tok_emb"]
    while len(emitted) < n_tokens:
        if sess.forwards >= cap:
            raise TruncationError(
                f"forward cap {cap} reached after {len(emitted)} tokens",
                partial=emitted)
        emb = tok_emb[np.asarray(drafts)]
        slot_rows = sess.run_forward(pending, emb, [CLEAN] * L)
        rows = np.vstack([sess.last_row[None], slot_rows[:-1]])
        y = np.argmax(rows, axis=1).astype(int)
        trace_tokens = list(drafts)
        # y[0] is exact; y[i] is exact while every earlier draft matched
        n_accept = 1
        for i in range(1, L):
            if drafts[i - 1] != y[i - 1]:
                break
            n_accept += 1
        accepted = [int(t) for t in y[:n_accept]]
        room = n_tokens - len(emitted)
        if len(accepted) > room:  # over-acceptance beyond the request is dropped
            accepted = accepted[:room]
        trace.append(IterationRecord(
            iteration=len(trace), window_start=start_pos, n_accept=len(accepted),
            accepted=accepted, slot_tokens=trace_tokens,
            slot_levels=[CLEAN] * L))
        emitted.extend(accepted)
        pending = accepted
        survivors = [int(t) for t in y[n_accept:]]
        drafts = survivors + [int(t) for t in rng.integers(0, sess.vocab,
                                                           size=n_accept)]
        start_pos += n_accept
    return emitted


def _decode_speculative(sess: _Session, prompt, n_tokens, cap, trace,
                        denoising: bool):
    """Shared loop for sjd (clean drafts) and sjd2 (noisy denoised drafts)."""
    cfg = sess.config
    rng = sess.rng
    L = cfg.window
    grid, coeffs, table = sess.grid, sess.coeffs, sess.table
    if denoising:
        window = init_window(L, grid, rng, table, sess.vocab, start_pos=len(prompt))
    else:
        slots = []
        for t in rng.integers(0, sess.vocab, size=L):
            slots.append(WindowSlot(
                embedding=token_to_normalized_embedding(int(t), table),
                level=CLEAN, draft_token=int(t), draft_prob=1.0 / sess.vocab,
                q_dist=np.full(sess.vocab, 1.0 / sess.vocab)))
        window = JacobiWindow(slots=slots, start_pos=len(prompt))
    cutoff = L / grid.num_steps if cfg.immediate_accept else None
    emitted = []
    pending = list(prompt)
    while len(emitted) < n_tokens:
        if sess.forwards >= cap:
            raise TruncationError(
                f"forward cap {cap} reached after {len(emitted)} tokens",
                partial=emitted)
        window.check_invariant(grid, L)
        emb, levels = sess.window_inputs(window)
        slot_rows = sess.run_forward(pending, emb, levels)
        probs = sess.slot_probs(slot_rows)
        trace_tokens = [s.draft_token for s in window.slots]
        trace_levels = [s.level for s in window.slots]
        n_accept, res_tok = verify_prefix(
            probs, window, rng, acceptance_mode=cfg.acceptance_mode,
            require_clean=cfg.require_clean_for_accept,
            immediate_accept=cfg.immediate_accept, immediate_cutoff=cutoff)
        accepted = [window.slots[i].draft_token for i in range(n_accept)]
        n_removed = n_accept
        if res_tok is not None:
            accepted.append(int(res_tok))
            n_removed += 1
        start_before = window.start_pos
        if denoising:
            refine(window, probs, grid, coeffs, rng, table, start=n_removed)
        else:
            for i in range(n_removed, L):
                slot = window.slots[i]
                slot.draft_token = sample_categorical(probs[i], rng)
                slot.draft_prob = float(probs[i][slot.draft_token])
                slot.q_dist = probs[i]
        slide_and_refill(window, n_removed, grid, rng, table, sess.vocab)
        room = n_tokens - len(emitted)
        if len(accepted) > room:  # over-acceptance beyond the request is dropped
            accepted = accepted[:room]
        trace.append(IterationRecord(
            iteration=len(trace), window_start=start_before,
            n_accept=len(accepted), accepted=accepted,
            slot_tokens=trace_tokens, slot_levels=trace_levels))
        emitted.extend(accepted)
        pending = accepted
    return emitted


def decode_session(model: ToyModel, prompt_tokens, n_tokens: int,
                   config: DecodeConfig, rng=None,
                   grid: TimestepGrid | None = None,
                   coeffs: NoiseCoeffs | None = None) -> DecodeResult:
    """Generate n_tokens continuation tokens after the prompt.

    The forward-pass count includes the prompt prefill (which emits the
    first prediction), so sequential decoding costs exactly n_tokens
    forwards. Hits of the max_forwards cap raise TruncationError carrying
    the partial output.
    """
    prompt = [int(t) for t in prompt_tokens]
    if n_tokens < 1:
        raise ConfigurationError("n_tokens must be >= 1")
    if not prompt:
        raise ConfigurationError("prompt must hold at least one token")
    if grid is None or coeffs is None:
        coeffs, grid = build_schedule(num_steps=config.steps)
    need = len(prompt) + n_tokens
    if config.mode in ("jacobi", "sjd", "sjd2"):
        need += config.window
    if need > model.config.context_len:
        raise CapacityError(
            f"prompt + n + window = {need} exceeds context {model.config.context_len}")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    cap = config.max_forwards
    if cap is None:
        cap = 4 * n_tokens + grid.num_steps + 64
    sess = _Session(model, config, grid, coeffs, rng)
    trace = []
    try:
        if config.mode == "ar":
            emitted = _decode_ar(sess, prompt, n_tokens, cap, trace)
        elif config.mode == "jacobi":
            emitted = _decode_jacobi(sess, prompt, n_tokens, cap, trace)
        else:
            emitted = _decode_speculative(sess, prompt, n_tokens, cap, trace,
                                          denoising=config.mode == "sjd2")
    except TruncationError as e:
        e.partial = DecodeResult(tokens=list(e.partial), forwards=sess.forwards,
                                 trace=trace, mode=config.mode,
                                 wall_forward_ms=sess.wall_ms)
        raise
    return DecodeResult(tokens=emitted[:n_tokens], forwards=sess.forwards,
                        trace=trace, mode=config.mode,
                        wall_forward_ms=sess.wall_ms)


# ---------------------------------------------------------------------------
# trace serialization (JSONL, consumed by the metrics module)
# ---------------------------------------------------------------------------

def write_trace(trace, path: str, config_hash: str = ""):
    import json
    with open(path, "w") as f:
        f.write(json.dumps({"trace_version": 1, "config_hash": config_hash},
                           separators=(",", ":")) + "\n")
        for rec in trace:
            f.write(json.dumps({
                "iteration": rec.iteration,
                "window_start": rec.window_start,
                "n_accept": rec.n_accept,
                "accepted": rec.accepted,
                "slot_tokens": rec.slot_tokens,
                "slot_levels": rec.slot_levels,
            }, separators=(",", ":")) + "\n")


def read_trace(path: str):
    import json
    from .errors import FormatError
    header = None
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "trace_version" in rec:
                header = rec
                continue
            try:
                records.append(IterationRecord(
                    iteration=rec["iteration"], window_start=rec["window_start"],
                    n_accept=rec["n_accept"], accepted=rec["accepted"],
                    slot_tokens=rec["slot_tokens"], slot_levels=rec["slot_levels"]))
            except KeyError as e:
                raise FormatError(f"{path}:{lineno}: trace record missing {e}") from e
    if header is None:
        raise FormatError(f"{path}: missing trace header record")
    return header, records


def replay_accepted(trace) -> list:
    """Accepted token sequence reconstructed from a trace."""
    out = []
    for rec in trace:
        out.extend(rec.accepted)
    return out
