from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from ehrfm.errors import ConfigError, DataError, NumericError
from ehrfm.seqmodel import (Batch, ModelConfig, block_ids, continue_pretrain,
                            encode, encode_batch, eval_loss, forward,
                            forward_next_code_logits, init_params,
                            load_checkpoint, loss_and_grads, make_batch,
                            parameter_count, pretrain, save_checkpoint)
from ehrfm.vocab import TokenSequence

UTC = timezone.utc

MICRO = ModelConfig(vocab_size=50, n_layers=1, n_heads=2, d_model=16,
                    d_ff=32, attention_window=8, max_seq_len=32)
SMALL = ModelConfig(vocab_size=30, n_layers=2, n_heads=2, d_model=16,
                    d_ff=32, attention_window=6, max_seq_len=24)


def random_batch(rng, config, n_rows=4, min_len=3):
    seqs = []
    for _ in range(n_rows):
        n = int(rng.integers(min_len, config.max_seq_len))
        seqs.append(list(rng.integers(0, config.vocab_size, size=n)))
    return make_batch(seqs, config)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=0, n_layers=1, n_heads=2, d_model=16,
                    d_ff=32, attention_window=8, max_seq_len=32)
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, n_layers=1, n_heads=3, d_model=16,
                    d_ff=32, attention_window=8, max_seq_len=32)


def test_parameter_count_matches_init():
    params = init_params(MICRO, seed=0)
    assert parameter_count(MICRO) == sum(v.size for v in params.values())
    assert all(v.dtype == np.float64 for v in params.values())


def test_gradients_match_finite_differences():
    # directional derivative per tensor against central differences
    rng = np.random.default_rng(73)
    params = init_params(MICRO, seed=1)
    batch = random_batch(rng, MICRO, n_rows=4)
    _, grads = loss_and_grads(params, batch, MICRO)
    eps = 1e-5
    for name in sorted(params):
        direction = rng.normal(size=params[name].shape)
        direction /= np.linalg.norm(direction)
        analytic = float((grads[name] * direction).sum())
        saved = params[name].copy()
        params[name] = saved + eps * direction
        lp, _ = loss_and_grads(params, batch, MICRO)
        params[name] = saved - eps * direction
        lm, _ = loss_and_grads(params, batch, MICRO)
        params[name] = saved
        numeric = (lp - lm) / (2 * eps)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        assert rel <= 1e-4, f"{name}: analytic {analytic:.3e} vs numeric {numeric:.3e}"


def test_block_ids_right_aligned():
    lengths = np.array([10, 7, 3])
    ids = block_ids(lengths, T=10, W=4)
    # last W real positions share block 0, the next W block 1, and so on
    assert list(ids[0]) == [2, 2, 1, 1, 1, 1, 0, 0, 0, 0]
    assert list(ids[1][:7]) == [1, 1, 1, 0, 0, 0, 0]
    assert list(ids[2][:3]) == [0, 0, 0]
    # padding positions get unique negative ids
    assert len(set(ids[1][7:])) == 3
    assert all(i < 0 for i in ids[1][7:])


def test_perturbations_never_change_protected_logits():
    rng = np.random.default_rng(79)
    params = init_params(SMALL, seed=2)
    W = SMALL.attention_window
    for _ in range(200):
        batch = random_batch(rng, SMALL, n_rows=3)
        base = forward(params, batch, SMALL)
        b = int(rng.integers(batch.ids.shape[0]))
        n = int(batch.lengths[b])
        j = int(rng.integers(1, n))  # real token position, never the BOS
        old = batch.ids[b, j]
        choices = [c for c in range(SMALL.vocab_size) if c != old]
        batch.ids[b, j] = int(rng.choice(choices))
        new = forward(params, batch, SMALL)
        blocks = block_ids(batch.lengths, batch.ids.shape[1], W)[b]
        for p in range(n):
            protected = p < j or blocks[p] != blocks[j]
            if protected:
                assert np.array_equal(base[b, p], new[b, p]), \
                    f"position {p} changed after perturbing {j} (blocks {blocks[:n]})"
        # rows of other batch members are never touched
        for other in range(batch.ids.shape[0]):
            if other != b:
                assert np.array_equal(base[other], new[other])


def test_padding_rows_do_not_leak_into_real_rows():
    rng = np.random.default_rng(83)
    params = init_params(SMALL, seed=3)
    short = list(rng.integers(0, SMALL.vocab_size, size=5))
    long = list(rng.integers(0, SMALL.vocab_size, size=20))
    alone = forward(params, make_batch([short], SMALL), SMALL)
    padded = forward(params, make_batch([short, long], SMALL), SMALL)
    assert np.array_equal(alone[0], padded[0, :6])


def test_forward_next_code_logits_shape_and_bos_row():
    params = init_params(SMALL, seed=4)
    logits = forward_next_code_logits(params, [1, 2, 3], SMALL)
    # BOS row plus one row per token; vocabulary-sized output
    assert logits.shape == (4, SMALL.vocab_size)
    with pytest.raises(DataError):
        forward_next_code_logits(params, [], SMALL)


def test_nonfinite_parameters_raise():
    params = init_params(SMALL, seed=5)
    params["tok_emb"] = params["tok_emb"].copy()
    params["tok_emb"][0, 0] = np.inf
    batch = make_batch([[1, 2, 3]], SMALL)
    with pytest.raises(NumericError):
        forward(params, batch, SMALL)


def token_sequence(pid, ids, start, step_minutes=30):
    times = tuple(start + timedelta(minutes=step_minutes * i) for i in range(len(ids)))
    return TokenSequence(pid, tuple(ids), times)


def test_encode_respects_prediction_time():
    rng = np.random.default_rng(89)
    params = init_params(SMALL, seed=6)
    start = datetime(2020, 5, 1, 8, 0, tzinfo=UTC)
    ids = list(rng.integers(0, SMALL.vocab_size, size=12))
    seq = token_sequence("p1", ids, start)
    pt = seq.times[7]
    base = encode(params, seq, pt, SMALL)
    # tokens after the prediction time cannot matter
    tampered = TokenSequence("p1", tuple(ids[:8]) + (3, 3, 3, 3), seq.times)
    assert np.array_equal(base, encode(params, tampered, pt, SMALL))
    # the token exactly at the prediction time is included
    truncated = token_sequence("p1", ids[:7], start)
    assert not np.array_equal(base, encode(params, truncated, seq.times[6], SMALL))


def test_encode_batch_matches_single_and_ignores_batch_composition():
    rng = np.random.default_rng(97)
    params = init_params(SMALL, seed=7)
    start = datetime(2020, 5, 1, 8, 0, tzinfo=UTC)
    seqs, pts = [], []
    for i in range(17):
        n = int(rng.integers(1, 22))
        seqs.append(token_sequence(f"p{i}", list(rng.integers(0, SMALL.vocab_size, size=n)), start))
        pts.append(seqs[-1].times[int(rng.integers(n))])
    reps, flags = encode_batch(params, seqs, pts, SMALL, batch_size=5)
    assert not flags.any()
    for i in (0, 3, 11, 16):
        single = encode(params, seqs[i], pts[i], SMALL)
        assert np.array_equal(reps[i], single)
    # order of rows is irrelevant
    perm = list(rng.permutation(len(seqs)))
    reps_p, _ = encode_batch(params, [seqs[i] for i in perm], [pts[i] for i in perm],
                             SMALL, batch_size=7)
    for j, i in enumerate(perm):
        assert np.array_equal(reps_p[j], reps[i])


def test_encode_empty_prefix_fallback():
    params = init_params(SMALL, seed=8)
    start = datetime(2020, 5, 1, 8, 0, tzinfo=UTC)
    seq = token_sequence("p1", [1, 2, 3], start)
    before_everything = start - timedelta(days=1)
    with pytest.raises(DataError):
        encode(params, seq, before_everything, SMALL)
    reps, flags = encode_batch(params, [seq], [before_everything], SMALL, bos_fallback=True)
    assert flags[0]
    assert np.isfinite(reps[0]).all()


def corpus_with_structure(rng, n_seqs, vocab_size, length=18):
    """Deterministic bigram structure so a tiny model can actually learn."""
    out = []
    for _ in range(n_seqs):
        x = int(rng.integers(0, vocab_size))
        ids = [x]
        for _ in range(length - 1):
            x = (x * 7 + 3) % vocab_size if rng.uniform() < 0.9 else int(rng.integers(vocab_size))
            ids.append(x)
        out.append(tuple(ids))
    return out


def test_pretrain_learns_and_is_deterministic():
    rng = np.random.default_rng(101)
    train = corpus_with_structure(rng, 60, SMALL.vocab_size)
    valid = corpus_with_structure(rng, 12, SMALL.vocab_size)
    init = init_params(SMALL, seed=9)
    init_loss = eval_loss(init, [make_batch(valid, SMALL)], SMALL)
    r1 = pretrain(init, train, valid, SMALL, lr_grid=(1e-3,), patience=3,
                  max_steps=60, seed=10, eval_interval=20, batch_size=8)
    r2 = pretrain(init, train, valid, SMALL, lr_grid=(1e-3,), patience=3,
                  max_steps=60, seed=10, eval_interval=20, batch_size=8)
    assert r1.state.best_valid_loss < init_loss
    assert set(r1.params) == set(init)
    for k in r1.params:
        assert np.array_equal(r1.params[k], r2.params[k])
    assert r1.state.best_step == r2.state.best_step
    # the input params are not mutated
    init_loss_again = eval_loss(init, [make_batch(valid, SMALL)], SMALL)
    assert init_loss_again == init_loss
    assert len(r1.grid_table) == 1
    assert r1.grid_table[0]["failed"] is False


def test_pretrain_grid_picks_best_cell_and_survives_divergence():
    rng = np.random.default_rng(103)
    train = corpus_with_structure(rng, 40, SMALL.vocab_size)
    valid = corpus_with_structure(rng, 8, SMALL.vocab_size)
    init = init_params(SMALL, seed=11)
    res = pretrain(init, train, valid, SMALL, lr_grid=(1e150, 1e-3), patience=2,
                   max_steps=40, seed=12, eval_interval=20, batch_size=8)
    assert res.grid_table[0]["failed"] is True
    assert res.grid_table[1]["failed"] is False
    assert res.state.learning_rate == 1e-3
    with pytest.raises(NumericError):
        pretrain(init, train, valid, SMALL, lr_grid=(1e150,), patience=2,
                 max_steps=40, seed=12, eval_interval=20, batch_size=8)


def test_pretrain_zero_steps_returns_initial_params():
    rng = np.random.default_rng(107)
    train = corpus_with_structure(rng, 10, SMALL.vocab_size)
    init = init_params(SMALL, seed=13)
    res = pretrain(init, train, train, SMALL, lr_grid=(1e-3,), max_steps=0, seed=14)
    for k in init:
        assert np.array_equal(res.params[k], init[k])


def test_continue_pretrain_checks_vocab_digest():
    rng = np.random.default_rng(109)
    train = corpus_with_structure(rng, 10, SMALL.vocab_size)
    init = init_params(SMALL, seed=15)
    with pytest.raises(ConfigError, match="digest"):
        continue_pretrain(init, SMALL, "aaaa", "bbbb", train, train, max_steps=0)
    res = continue_pretrain(init, SMALL, "aaaa", "aaaa", train, train,
                            lr_grid=(1e-3,), max_steps=0, seed=16)
    for k in init:
        assert np.array_equal(res.params[k], init[k])


def test_checkpoint_round_trip(tmp_path):
    params = init_params(SMALL, seed=17)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, SMALL, vocab_digest="d" * 64,
                    provenance={"command": "test", "seed": 17})
    loaded, config, digest, prov = load_checkpoint(path)
    assert config == SMALL
    assert digest == "d" * 64
    assert prov["command"] == "test"
    assert set(loaded) == set(params)
    for k in params:
        assert np.array_equal(loaded[k], params[k])
        assert loaded[k].dtype == np.float64


def test_checkpoint_vocab_guard_and_corruption(tmp_path):
    params = init_params(SMALL, seed=18)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, SMALL, vocab_digest="d" * 64)
    with pytest.raises(ConfigError, match="digest"):
        load_checkpoint(path, expected_vocab_digest="e" * 64)
    load_checkpoint(path, expected_vocab_digest="e" * 64, allow_vocab_mismatch=True)
    clipped = tmp_path / "clipped.ckpt"
    clipped.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(clipped)
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint\n")
    with pytest.raises(DataError):
        load_checkpoint(junk)


def test_checkpoint_bytes_are_deterministic(tmp_path):
    params = init_params(SMALL, seed=19)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, params, SMALL, vocab_digest="d" * 64, provenance={"seed": 19})
    save_checkpoint(p2, params, SMALL, vocab_digest="d" * 64, provenance={"seed": 19})
    assert p1.read_bytes() == p2.read_bytes()


def test_eval_loss_matches_manual_cross_entropy():
    rng = np.random.default_rng(113)
    params = init_params(SMALL, seed=20)
    seq = list(rng.integers(0, SMALL.vocab_size, size=9))
    batch = make_batch([seq], SMALL)
    loss = eval_loss(params, [batch], SMALL)
    logits = forward(params, batch, SMALL)[0]
    total = 0.0
    for t in range(len(seq)):
        row = logits[t]
        z = row - row.max()
        logp = z - np.log(np.exp(z).sum())
        total += -logp[seq[t]]
    assert loss == pytest.approx(total / len(seq), rel=1e-12)
