"""Decoder-only autoregressive model over coded events, in plain numpy.

Forward, backward, and the optimizer are written out by hand in float64 so
gradients are checkable against finite differences and checkpoints round-trip
bitwise. Attention is block-local: each sequence is partitioned into blocks of
W consecutive positions, aligned so the final block (the one holding the
representation anchor) is always full, and attention never crosses block
boundaries. Combined with the causal mask inside each block, the logits at
position t depend only on tokens in (t - W, t], at any depth.

Event timestamps are not fed to the model; they only select the encode anchor.
"""

from __future__ import annotations

import json
import logging
import os
import time as _time
from dataclasses import dataclass, field
from datetime import datetime
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DataError, NumericError
from .manifest import derive_seed
from .vocab import TokenSequence

log = logging.getLogger(__name__)

LN_EPS = 1e-5
INIT_STD = 0.02
ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8
CLIP_NORM = 1.0
MASK_NEG = -1e30


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    attention_window: int = 32
    max_seq_len: int = 128

    def __post_init__(self):
        if min(self.vocab_size, self.n_layers, self.n_heads, self.d_model, self.d_ff,
               self.attention_window, self.max_seq_len) < 1:
            raise ConfigError("all model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def bos_id(self) -> int:
        return self.vocab_size

    @property
    def pad_id(self) -> int:
        return self.vocab_size + 1

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "attention_window": self.attention_window,
            "max_seq_len": self.max_seq_len,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Std-0.02 normal init for weights and embeddings; zero biases; unit LN gains."""
    rng = np.random.default_rng(seed)
    d, F = config.d_model, config.d_ff
    p: dict[str, np.ndarray] = {}

    def w(name, *shape):
        p[name] = rng.normal(0.0, INIT_STD, size=shape)

    def zeros(name, *shape):
        p[name] = np.zeros(shape)

    def ones(name, *shape):
        p[name] = np.ones(shape)

    w("tok_emb", config.vocab_size + 2, d)
    w("pos_emb", config.max_seq_len + 1, d)
    for i in range(config.n_layers):
        ones(f"l{i}.ln1_g", d)
        zeros(f"l{i}.ln1_b", d)
        for proj in ("q", "k", "v", "o"):
            w(f"l{i}.attn_w{proj}", d, d)
            zeros(f"l{i}.attn_b{proj}", d)
        ones(f"l{i}.ln2_g", d)
        zeros(f"l{i}.ln2_b", d)
        w(f"l{i}.ffn_w1", d, F)
        zeros(f"l{i}.ffn_b1", F)
        w(f"l{i}.ffn_w2", F, d)
        zeros(f"l{i}.ffn_b2", d)
    ones("lnf_g", d)
    zeros("lnf_b", d)
    return p


def parameter_count(config: ModelConfig) -> int:
    d, F, L = config.d_model, config.d_ff, config.n_layers
    per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * F + F) + (F * d + d)
    return (config.vocab_size + 2) * d + (config.max_seq_len + 1) * d + L * per_layer + 2 * d


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _gelu_grad(x, u=None):
    """d/dx of gelu; u = erf(x/sqrt(2)) may be passed in to skip recomputing it."""
    if u is None:
        u = erf(x / np.sqrt(2.0))
    phi = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return 0.5 * (1.0 + u) + x * phi


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(dy, cache, g):
    xhat, inv = cache
    d = xhat.shape[-1]
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def block_ids(lengths: np.ndarray, T: int, W: int) -> np.ndarray:
    """Right-aligned block index per position, shape (B, T).

    Blocks count back from each sequence's last real position, so the final
    min(n, W) positions always share one full block. Padding positions get
    unique negative ids so they attend only to themselves.
    """
    pos = np.arange(T)[None, :]
    n = lengths[:, None]
    ids = (n - 1 - pos) // W
    pad = pos >= n
    ids = np.where(pad, -(pos + 1), ids)
    return ids


def _attention_mask(lengths: np.ndarray, T: int, W: int) -> np.ndarray:
    """allow[b, q, k]: same block, causal, both real (pads self-attend only)."""
    blocks = block_ids(lengths, T, W)
    same = blocks[:, :, None] == blocks[:, None, :]
    causal = np.arange(T)[None, :, None] >= np.arange(T)[None, None, :]
    allow = same & causal
    eye = np.eye(T, dtype=bool)[None, :, :]
    return allow | eye


@dataclass
class Batch:
    ids: np.ndarray       # (B, T) int64, BOS-prefixed, PAD-padded
    lengths: np.ndarray   # (B,) true lengths including BOS

    @property
    def shape(self):
        return self.ids.shape


def make_batch(sequences: Sequence[Sequence[int]], config: ModelConfig) -> Batch:
    """Prefix BOS, truncate to the most recent max_seq_len tokens, pad to batch max."""
    rows = []
    for seq in sequences:
        ids = list(seq)[-config.max_seq_len:]
        if len(ids) == 0:
            raise DataError("empty timeline after OOV dropping")
        rows.append([config.bos_id] + ids)
    T = max(len(r) for r in rows)
    ids = np.full((len(rows), T), config.pad_id, dtype=np.int64)
    lengths = np.zeros(len(rows), dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
        lengths[i] = len(r)
    return Batch(ids, lengths)


def forward(params: dict, batch: Batch, config: ModelConfig, want_cache: bool = False):
    """Per-position logits over the vocabulary (BOS/PAD rows excluded from output).

    Masking is additive: disallowed scores get MASK_NEG, which dominates any
    finite score so their exps underflow to exactly zero after max-subtraction.
    """
    B, T = batch.ids.shape
    if T - 1 > config.max_seq_len:
        raise DataError(f"sequence length {T - 1} exceeds max_seq_len {config.max_seq_len}")
    H, dh, d = config.n_heads, config.head_dim, config.d_model
    scale = 1.0 / np.sqrt(dh)
    allow = _attention_mask(batch.lengths, T, config.attention_window)
    mask_bias = np.where(allow, 0.0, MASK_NEG)[:, None, :, :]
    x = params["tok_emb"][batch.ids] + params["pos_emb"][:T][None, :, :]
    cache = {"x0": x, "layers": []} if want_cache else None
    for i in range(config.n_layers):
        a, ln1c = _layer_norm(x, params[f"l{i}.ln1_g"], params[f"l{i}.ln1_b"])
        a2d = a.reshape(B * T, d)
        q = a2d @ params[f"l{i}.attn_wq"] + params[f"l{i}.attn_bq"]
        k = a2d @ params[f"l{i}.attn_wk"] + params[f"l{i}.attn_bk"]
        v = a2d @ params[f"l{i}.attn_wv"] + params[f"l{i}.attn_bv"]
        qh = q.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        scores = qh @ kh.transpose(0, 1, 3, 2)
        scores *= scale
        scores += mask_bias
        scores -= scores.max(axis=-1, keepdims=True)
        att = np.exp(scores, out=scores)
        att /= att.sum(axis=-1, keepdims=True)
        oh = att @ vh
        o = oh.transpose(0, 2, 1, 3).reshape(B, T, d)
        attn_out = (o.reshape(B * T, d) @ params[f"l{i}.attn_wo"]).reshape(B, T, d)
        attn_out += params[f"l{i}.attn_bo"]
        x = x + attn_out
        a2, ln2c = _layer_norm(x, params[f"l{i}.ln2_g"], params[f"l{i}.ln2_b"])
        h1 = (a2.reshape(B * T, d) @ params[f"l{i}.ffn_w1"]).reshape(B, T, config.d_ff)
        h1 += params[f"l{i}.ffn_b1"]
        u = erf(h1 / np.sqrt(2.0))
        g1 = 0.5 * h1 * (1.0 + u)
        ffn_out = (g1.reshape(B * T, config.d_ff) @ params[f"l{i}.ffn_w2"]).reshape(B, T, d)
        ffn_out += params[f"l{i}.ffn_b2"]
        x = x + ffn_out
        if want_cache:
            cache["layers"].append({
                "a": a, "ln1c": ln1c, "qh": qh, "kh": kh, "vh": vh, "att": att,
                "o": o, "a2": a2, "ln2c": ln2c, "h1": h1, "u": u, "g1": g1,
            })
    hN, lnfc = _layer_norm(x, params["lnf_g"], params["lnf_b"])
    logits = (hN.reshape(B * T, d) @ params["tok_emb"][:config.vocab_size].T
              ).reshape(B, T, config.vocab_size)
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits in forward pass")
    if want_cache:
        cache["hN"] = hN
        cache["lnfc"] = lnfc
        cache["x_final"] = x
        return logits, cache
    return logits


def forward_next_code_logits(params: dict, tokens: TokenSequence | Sequence[int],
                             config: ModelConfig) -> np.ndarray:
    """Logits for a single sequence; row t predicts the token after position t."""
    ids = tokens.ids if isinstance(tokens, TokenSequence) else tuple(tokens)
    if len(ids) == 0:
        raise DataError("empty timeline after OOV dropping")
    batch = make_batch([ids], config)
    return forward(params, batch, config)[0]


def loss_and_grads(params: dict, batch: Batch, config: ModelConfig
                   ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean next-token cross-entropy over real target positions, with gradients."""
    B, T = batch.ids.shape
    H, dh, d = config.n_heads, config.head_dim, config.d_model
    scale = 1.0 / np.sqrt(dh)
    logits, cache = forward(params, batch, config, want_cache=True)
    # position t predicts the token at t+1; the last real position has no target
    target_ok = (np.arange(T)[None, :] + 1) < batch.lengths[:, None]
    targets = np.zeros((B, T), dtype=np.int64)
    targets[:, :-1] = batch.ids[:, 1:]
    targets[~target_ok] = 0
    n_valid = int(target_ok.sum())
    if n_valid == 0:
        raise DataError("batch has no prediction targets")
    m = logits.max(axis=-1, keepdims=True)
    ex = np.exp(logits - m)
    Z = ex.sum(axis=-1, keepdims=True)
    logZ = np.log(Z) + m
    tgt_logit = np.take_along_axis(logits, targets[:, :, None], axis=-1)[:, :, 0]
    nll = (logZ[:, :, 0] - tgt_logit)
    loss = float(nll[target_ok].mean())
    if not np.isfinite(loss):
        raise NumericError("non-finite training loss")

    dlogits = ex / Z
    flat = dlogits.reshape(-1, config.vocab_size)
    flat[np.arange(B * T), targets.ravel()] -= 1.0
    dlogits *= (target_ok[:, :, None] / n_valid)

    BT = B * T
    F = config.d_ff
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    Ev = params["tok_emb"][:config.vocab_size]
    hN = cache["hN"]
    dl2 = dlogits.reshape(BT, config.vocab_size)
    grads["tok_emb"][:config.vocab_size] += dl2.T @ hN.reshape(BT, d)
    dhN = (dl2 @ Ev).reshape(B, T, d)
    dx, dg, db = _layer_norm_backward(dhN, cache["lnfc"], params["lnf_g"])
    grads["lnf_g"] += dg
    grads["lnf_b"] += db
    for i in reversed(range(config.n_layers)):
        c = cache["layers"][i]
        # FFN branch
        dffn = dx.reshape(BT, d)
        dg1 = dffn @ params[f"l{i}.ffn_w2"].T
        grads[f"l{i}.ffn_w2"] += c["g1"].reshape(BT, F).T @ dffn
        grads[f"l{i}.ffn_b2"] += dffn.sum(axis=0)
        dh1 = dg1 * _gelu_grad(c["h1"], c["u"]).reshape(BT, F)
        grads[f"l{i}.ffn_w1"] += c["a2"].reshape(BT, d).T @ dh1
        grads[f"l{i}.ffn_b1"] += dh1.sum(axis=0)
        da2 = (dh1 @ params[f"l{i}.ffn_w1"].T).reshape(B, T, d)
        dx2, dg, db = _layer_norm_backward(da2, c["ln2c"], params[f"l{i}.ln2_g"])
        grads[f"l{i}.ln2_g"] += dg
        grads[f"l{i}.ln2_b"] += db
        dx = dx + dx2
        # attention branch
        dattn_out = dx.reshape(BT, d)
        do = dattn_out @ params[f"l{i}.attn_wo"].T
        grads[f"l{i}.attn_wo"] += c["o"].reshape(BT, d).T @ dattn_out
        grads[f"l{i}.attn_bo"] += dattn_out.sum(axis=0)
        doh = do.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        att, qh, kh, vh = c["att"], c["qh"], c["kh"], c["vh"]
        dvh = att.transpose(0, 1, 3, 2) @ doh
        datt = doh @ vh.transpose(0, 1, 3, 2)
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dqh = (dscores @ kh) * scale
        dkh = (dscores.transpose(0, 1, 3, 2) @ qh) * scale
        dq = dqh.transpose(0, 2, 1, 3).reshape(BT, d)
        dk = dkh.transpose(0, 2, 1, 3).reshape(BT, d)
        dv = dvh.transpose(0, 2, 1, 3).reshape(BT, d)
        a2d = c["a"].reshape(BT, d)
        grads[f"l{i}.attn_wq"] += a2d.T @ dq
        grads[f"l{i}.attn_bq"] += dq.sum(axis=0)
        grads[f"l{i}.attn_wk"] += a2d.T @ dk
        grads[f"l{i}.attn_bk"] += dk.sum(axis=0)
        grads[f"l{i}.attn_wv"] += a2d.T @ dv
        grads[f"l{i}.attn_bv"] += dv.sum(axis=0)
        da = (dq @ params[f"l{i}.attn_wq"].T + dk @ params[f"l{i}.attn_wk"].T
              + dv @ params[f"l{i}.attn_wv"].T).reshape(B, T, d)
        dx1, dg, db = _layer_norm_backward(da, c["ln1c"], params[f"l{i}.ln1_g"])
        grads[f"l{i}.ln1_g"] += dg
        grads[f"l{i}.ln1_b"] += db
        dx = dx + dx1
    grads["pos_emb"][:T] += dx.sum(axis=0)
    np.add.at(grads["tok_emb"], batch.ids.ravel(), dx.reshape(-1, d))
    return loss, grads


def eval_loss(params: dict, batches: Iterable[Batch], config: ModelConfig) -> float:
    """Mean next-token cross-entropy over all target positions in the batches."""
    total = 0.0
    count = 0
    for batch in batches:
        B, T = batch.ids.shape
        logits = forward(params, batch, config)
        target_ok = (np.arange(T)[None, :] + 1) < batch.lengths[:, None]
        targets = np.zeros((B, T), dtype=np.int64)
        targets[:, :-1] = batch.ids[:, 1:]
        targets[~target_ok] = 0
        m = logits.max(axis=-1, keepdims=True)
        logZ = np.log(np.exp(logits - m).sum(axis=-1)) + m[:, :, 0]
        tgt = np.take_along_axis(logits, targets[:, :, None], axis=-1)[:, :, 0]
        nll = logZ - tgt
        total += float(nll[target_ok].sum())
        count += int(target_ok.sum())
    if count == 0:
        raise DataError("no prediction targets in evaluation corpus")
    return total / count


@dataclass
class TrainState:
    step: int = 0
    best_valid_loss: float = np.inf
    since_improvement: int = 0
    learning_rate: float = 0.0
    seed: int = 0
    started_at: float = field(default_factory=_time.perf_counter)
    time_to_best: float = 0.0
    best_step: int = 0


@dataclass
class PretrainResult:
    params: dict[str, np.ndarray]
    state: TrainState
    grid_table: list[dict]


class _Adam:
    def __init__(self, params: dict, lr: float):
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        gsq = 0.0
        for g in grads.values():
            gsq += float((g * g).sum())
        norm = np.sqrt(gsq)
        clip = min(1.0, CLIP_NORM / norm) if norm > 0 else 1.0
        self.t += 1
        b1c = 1.0 - ADAM_B1 ** self.t
        b2c = 1.0 - ADAM_B2 ** self.t
        for k, p in params.items():
            g = grads[k] * clip
            self.m[k] = ADAM_B1 * self.m[k] + (1 - ADAM_B1) * g
            self.v[k] = ADAM_B2 * self.v[k] + (1 - ADAM_B2) * (g * g)
            p -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + ADAM_EPS)


def _corpus_batches(sequences: list, config: ModelConfig, batch_size: int,
                    cap: int | None = None) -> list[Batch]:
    """Deterministic evaluation batches, longest sequences grouped together."""
    seqs = [s for s in sequences if len(s) > 0][:cap]
    if not seqs:
        raise DataError("no non-empty sequences")
    order = sorted(range(len(seqs)), key=lambda i: (len(seqs[i]), i))
    return [make_batch([seqs[j] for j in order[i:i + batch_size]], config)
            for i in range(0, len(order), batch_size)]


def _clean_corpus(corpus) -> list[tuple[int, ...]]:
    out = []
    n_empty = 0
    for seq in corpus:
        ids = tuple(seq.ids) if isinstance(seq, TokenSequence) else tuple(seq)
        if len(ids) == 0:
            n_empty += 1
            continue
        out.append(ids)
    if n_empty:
        log.info("dropped %d empty token sequences from corpus", n_empty)
    return out


def pretrain(init: dict[str, np.ndarray], train_corpus, valid_corpus, config: ModelConfig,
             lr_grid: Sequence[float] = (1e-3,), patience: int = 5, max_steps: int = 1000,
             seed: int = 0, eval_interval: int = 50, batch_size: int = 32,
             valid_cap: int = 512) -> PretrainResult:
    """Train per learning rate with early stopping; keep the best-validation run.

    Patience counts evaluation intervals without improvement. A NaN loss marks
    that grid cell failed; if every cell fails a NumericError is raised.
    """
    if not lr_grid:
        raise ConfigError("empty learning-rate grid")
    train_seqs = _clean_corpus(train_corpus)
    if not train_seqs:
        raise DataError("empty training corpus")
    valid_batches = _corpus_batches(_clean_corpus(valid_corpus), config, batch_size, valid_cap)
    best_cell = None
    table = []
    for cell_idx, lr in enumerate(lr_grid):
        params = {k: v.copy() for k, v in init.items()}
        state = TrainState(learning_rate=float(lr), seed=seed)
        opt = _Adam(params, float(lr))
        rng = np.random.default_rng(derive_seed(seed, "cell", cell_idx))
        order = rng.permutation(len(train_seqs))
        cursor = 0
        best_params = {k: v.copy() for k, v in params.items()}
        failed = False
        try:
            state.best_valid_loss = eval_loss(params, valid_batches, config)
        except NumericError:
            failed = True
        state.time_to_best = _time.perf_counter() - state.started_at
        while not failed and state.step < max_steps:
            idx = []
            while len(idx) < batch_size:
                if cursor >= len(order):
                    order = rng.permutation(len(train_seqs))
                    cursor = 0
                idx.append(int(order[cursor]))
                cursor += 1
            batch = make_batch([train_seqs[i] for i in idx], config)
            try:
                _, grads = loss_and_grads(params, batch, config)
            except NumericError:
                failed = True
                break
            opt.step(params, grads)
            state.step += 1
            if state.step % eval_interval == 0:
                try:
                    vloss = eval_loss(params, valid_batches, config)
                except NumericError:
                    failed = True
                    break
                if vloss < state.best_valid_loss:
                    state.best_valid_loss = vloss
                    state.since_improvement = 0
                    state.best_step = state.step
                    best_params = {k: v.copy() for k, v in params.items()}
                    state.time_to_best = _time.perf_counter() - state.started_at
                else:
                    state.since_improvement += 1
                    if state.since_improvement >= patience:
                        break
        table.append({
            "lr": float(lr),
            "best_valid_loss": None if failed else float(state.best_valid_loss),
            "steps": state.step,
            "best_step": state.best_step,
            "time_to_best_s": state.time_to_best,
            "failed": failed,
        })
        if failed:
            log.warning("pretrain: lr %.2e diverged; cell skipped", lr)
            continue
        if best_cell is None or state.best_valid_loss < best_cell[1].best_valid_loss:
            best_cell = (best_params, state)
    if best_cell is None:
        raise NumericError("pretraining diverged at every learning rate")
    return PretrainResult(best_cell[0], best_cell[1], table)


def continue_pretrain(checkpoint_params: dict, checkpoint_config: ModelConfig,
                      checkpoint_vocab_digest: str, tokenizer_vocab_digest: str,
                      train_corpus, valid_corpus, lr_grid: Sequence[float] = (1e-3,),
                      patience: int = 5, max_steps: int = 1000, seed: int = 0,
                      eval_interval: int = 50, batch_size: int = 32,
                      allow_vocab_mismatch: bool = False) -> PretrainResult:
    """The pretraining loop re-entered from a checkpoint on a new corpus."""
    if checkpoint_vocab_digest != tokenizer_vocab_digest and not allow_vocab_mismatch:
        raise ConfigError(
            f"checkpoint vocabulary digest {checkpoint_vocab_digest[:12]}... does not match "
            f"tokenizer digest {tokenizer_vocab_digest[:12]}...")
    return pretrain(checkpoint_params, train_corpus, valid_corpus, checkpoint_config,
                    lr_grid=lr_grid, patience=patience, max_steps=max_steps, seed=seed,
                    eval_interval=eval_interval, batch_size=batch_size)


def encode(params: dict, tokens: TokenSequence, prediction_time: datetime,
           config: ModelConfig, bos_fallback: bool = False) -> np.ndarray:
    """Final hidden state at the last token at or before the prediction time."""
    reps, _ = encode_batch(params, [tokens], [prediction_time], config,
                           bos_fallback=bos_fallback)
    return reps[0]


def encode_batch(params: dict, sequences: Sequence[TokenSequence],
                 prediction_times: Sequence[datetime], config: ModelConfig,
                 batch_size: int = 64, bos_fallback: bool = False
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Representations for many (sequence, prediction_time) anchors.

    Returns (reps, fallback_flags). Rows with no pre-prediction tokens raise
    unless bos_fallback is set, in which case they encode the bare BOS state
    and are flagged.
    """
    if len(sequences) != len(prediction_times):
        raise DataError("encode_batch: sequences and prediction_times misaligned")
    cut: list[tuple[int, ...]] = []
    flags = np.zeros(len(sequences), dtype=bool)
    for i, (seq, pt) in enumerate(zip(sequences, prediction_times)):
        n_keep = 0
        for t in seq.times:
            if t <= pt:
                n_keep += 1
            else:
                break
        ids = seq.ids[:n_keep][-config.max_seq_len:]
        if not ids:
            if not bos_fallback:
                raise DataError(
                    f"patient {seq.patient_id}: no tokens at or before the prediction time")
            flags[i] = True
            ids = ()
        cut.append(tuple(ids))
    reps = np.zeros((len(cut), config.d_model))
    # group rows by exact length so no padding is introduced: the representation
    # of a sequence then never depends on what else shares its batch
    by_len: dict[int, list[int]] = {}
    for i, ids in enumerate(cut):
        by_len.setdefault(len(ids), []).append(i)
    for n, members in sorted(by_len.items()):
        for start in range(0, len(members), batch_size):
            chunk = members[start:start + batch_size]
            ids = np.empty((len(chunk), n + 1), dtype=np.int64)
            for j, i in enumerate(chunk):
                ids[j, 0] = config.bos_id
                if n:
                    ids[j, 1:] = cut[i]
            batch = Batch(ids, np.full(len(chunk), n + 1, dtype=np.int64))
            hN = _hidden_states(params, batch, config)
            reps[chunk] = hN[:, -1]
    n_fb = int(flags.sum())
    if n_fb:
        log.warning("encode_batch: %d rows fell back to the BOS-only state", n_fb)
    return reps, flags


def _hidden_states(params: dict, batch: Batch, config: ModelConfig) -> np.ndarray:
    """Final post-norm hidden states (the vectors the output projection reads).

    Mirrors forward() operation for operation so states match the training
    path bitwise; only the output projection is skipped.
    """
    B, T = batch.ids.shape
    H, dh, d = config.n_heads, config.head_dim, config.d_model
    scale = 1.0 / np.sqrt(dh)
    allow = _attention_mask(batch.lengths, T, config.attention_window)
    mask_bias = np.where(allow, 0.0, MASK_NEG)[:, None, :, :]
    x = params["tok_emb"][batch.ids] + params["pos_emb"][:T][None, :, :]
    for i in range(config.n_layers):
        a, _ = _layer_norm(x, params[f"l{i}.ln1_g"], params[f"l{i}.ln1_b"])
        a2d = a.reshape(B * T, d)
        q = a2d @ params[f"l{i}.attn_wq"] + params[f"l{i}.attn_bq"]
        k = a2d @ params[f"l{i}.attn_wk"] + params[f"l{i}.attn_bk"]
        v = a2d @ params[f"l{i}.attn_wv"] + params[f"l{i}.attn_bv"]
        qh = q.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        scores = qh @ kh.transpose(0, 1, 3, 2)
        scores *= scale
        scores += mask_bias
        scores -= scores.max(axis=-1, keepdims=True)
        att = np.exp(scores, out=scores)
        att /= att.sum(axis=-1, keepdims=True)
        oh = att @ vh
        o = oh.transpose(0, 2, 1, 3).reshape(B, T, d)
        attn_out = (o.reshape(B * T, d) @ params[f"l{i}.attn_wo"]).reshape(B, T, d)
        attn_out += params[f"l{i}.attn_bo"]
        x = x + attn_out
        a2, _ = _layer_norm(x, params[f"l{i}.ln2_g"], params[f"l{i}.ln2_b"])
        h1 = (a2.reshape(B * T, d) @ params[f"l{i}.ffn_w1"]).reshape(B, T, config.d_ff)
        h1 += params[f"l{i}.ffn_b1"]
        u = erf(h1 / np.sqrt(2.0))
        g1 = 0.5 * h1 * (1.0 + u)
        ffn_out = (g1.reshape(B * T, config.d_ff) @ params[f"l{i}.ffn_w2"]).reshape(B, T, d)
        ffn_out += params[f"l{i}.ffn_b2"]
        x = x + ffn_out
    hN, _ = _layer_norm(x, params["lnf_g"], params["lnf_b"])
    if not np.isfinite(hN).all():
        raise NumericError("non-finite hidden states")
    return hN


MAGIC = "ehrfm-seqmodel"


def save_checkpoint(path: str | os.PathLike, params: dict, config: ModelConfig,
                    vocab_digest: str, provenance: dict | None = None) -> None:
    """JSON header line + named float64 tensors, little-endian C order."""
    names = sorted(params)
    header = {
        "format": 1,
        "kind": MAGIC,
        "config": config.to_dict(),
        "vocab_digest": vocab_digest,
        "provenance": provenance or {},
        "tensors": [{"name": n, "shape": list(params[n].shape), "dtype": "<f8"}
                    for n in names],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        fh.write(b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_checkpoint(path: str | os.PathLike, expected_vocab_digest: str | None = None,
                    allow_vocab_mismatch: bool = False
                    ) -> tuple[dict, ModelConfig, str, dict]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not a model checkpoint") from exc
        if header.get("kind") != MAGIC:
            raise DataError(f"{path}: not a model checkpoint")
        vocab_digest = header["vocab_digest"]
        if (expected_vocab_digest is not None and vocab_digest != expected_vocab_digest
                and not allow_vocab_mismatch):
            raise ConfigError(
                f"{path}: vocabulary digest mismatch (checkpoint {vocab_digest[:12]}..., "
                f"expected {expected_vocab_digest[:12]}...); pass allow_vocab_mismatch to override")
        config = ModelConfig.from_dict(header["config"])
        params = {}
        for spec in header["tensors"]:
            n = int(np.prod(spec["shape"])) if spec["shape"] else 1
            buf = fh.read(n * 8)
            if len(buf) != n * 8:
                raise DataError(f"{path}: truncated tensor {spec['name']}")
            params[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(spec["shape"]).copy()
    return params, config, vocab_digest, header.get("provenance", {})
