import numpy as np
import pytest

from latentmt import numerics as nm
from latentmt.data import EOS_ID, SentencePair, make_batch
from latentmt.decoder import (
    beam_decode,
    decode_step,
    greedy_decode,
    init_decoder_params,
    initial_state,
    prepare_decode_context,
    score_sequence,
    teacher_forced_nll,
)
from latentmt.encoder import encode, init_encoder_params
from latentmt.numerics import Tensor

VOCAB = 11
D_EMB, D_HID, D_Z = 6, 5, 3


def make_setup(seed=0, vocab=VOCAB):
    rng = np.random.default_rng(seed)
    enc = init_encoder_params(vocab, vocab, D_EMB, D_HID, 2, rng)
    dec = init_decoder_params(vocab, D_EMB, D_HID, D_Z, 2, rng)
    return enc, dec, rng


def encode_source(enc, ids):
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.ones_like(ids, dtype=bool)
    return encode(enc, ids, mask, "source")


def test_step_attention_is_simplex_and_masks_pad():
    enc, dec, rng = make_setup()
    ids = np.array([[4, 5, 6, 0, 0], [7, 8, 9, 10, 4]])
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
    ctx = prepare_decode_context(dec, encode(enc, ids, mask, "source"))
    z = Tensor(np.zeros((2, D_Z), dtype=np.float32))
    log_probs, _, attn = decode_step(dec, enc.embed_tgt, np.array([2, 2]), initial_state(dec, ctx), ctx, z)
    assert np.all(attn.data >= 0)
    np.testing.assert_allclose(attn.data.sum(axis=1), [1.0, 1.0], atol=1e-6)
    assert np.all(attn.data[0, 3:] == 0.0)


def test_singleton_source_context_equals_lone_annotation():
    enc, dec, _ = make_setup()
    src_ann = encode_source(enc, [[4]])
    ctx = prepare_decode_context(dec, src_ann)
    z = Tensor(np.zeros((1, D_Z), dtype=np.float32))
    _, _, attn = decode_step(dec, enc.embed_tgt, np.array([2]), initial_state(dec, ctx), ctx, z)
    np.testing.assert_allclose(attn.data, [[1.0]], atol=1e-7)


def test_log_probabilities_sum_to_one():
    enc, dec, rng = make_setup(3)
    ctx = prepare_decode_context(dec, encode_source(enc, [[4, 9, 6]]))
    z = Tensor(rng.normal(size=(1, D_Z)).astype(np.float32))
    log_probs, _, _ = decode_step(dec, enc.embed_tgt, np.array([2]), initial_state(dec, ctx), ctx, z)
    assert abs(np.exp(log_probs.data).sum() - 1.0) < 1e-5


def test_uniform_distribution_with_all_zero_parameters():
    enc, dec, _ = make_setup()
    for t in list(enc.named_parameters().values()) + list(dec.named_parameters().values()):
        t.data[...] = 0.0
    pair = SentencePair(src=[4, 5], tgt=[2, 6, 7, 3])
    batch = make_batch([pair])
    ctx = prepare_decode_context(dec, encode(enc, batch.src, batch.src_mask, "source"))
    nll, counts = teacher_forced_nll(dec, enc.embed_tgt, batch, ctx, Tensor(np.zeros((1, D_Z), dtype=np.float32)))
    per_word = nll.item() / counts.sum()
    assert per_word == pytest.approx(np.log(VOCAB), rel=1e-5)


def test_duplicating_a_sentence_doubles_summed_nll():
    enc, dec, rng = make_setup(4)
    pair = SentencePair(src=[4, 5, 6], tgt=[2, 7, 8, 3])
    single = make_batch([pair])
    double = make_batch([pair, pair])
    z1 = Tensor(rng.normal(size=(1, D_Z)).astype(np.float32))
    z2 = Tensor(np.vstack([z1.data, z1.data]))
    ctx1 = prepare_decode_context(dec, encode(enc, single.src, single.src_mask, "source"))
    ctx2 = prepare_decode_context(dec, encode(enc, double.src, double.src_mask, "source"))
    nll1, c1 = teacher_forced_nll(dec, enc.embed_tgt, single, ctx1, z1)
    nll2, c2 = teacher_forced_nll(dec, enc.embed_tgt, double, ctx2, z2)
    assert nll2.data.sum() == pytest.approx(2 * nll1.data.sum(), rel=1e-5)
    assert nll2.data.sum() / c2.sum() == pytest.approx(nll1.data.sum() / c1.sum(), rel=1e-5)


def test_teacher_forcing_matches_stepwise_accumulation():
    enc, dec, rng = make_setup(5)
    pair = SentencePair(src=[4, 5, 6, 7], tgt=[2, 8, 9, 10, 3])
    batch = make_batch([pair])
    ctx = prepare_decode_context(dec, encode(enc, batch.src, batch.src_mask, "source"))
    z = Tensor(rng.normal(size=(1, D_Z)).astype(np.float32))
    nll, _ = teacher_forced_nll(dec, enc.embed_tgt, batch, ctx, z)

    state = initial_state(dec, ctx)
    total = 0.0
    for j in range(len(pair.tgt) - 1):
        log_probs, state, _ = decode_step(dec, enc.embed_tgt, batch.tgt[:, j], state, ctx, z)
        total -= float(log_probs.data[0, pair.tgt[j + 1]])
    assert nll.item() == pytest.approx(total, abs=1e-5)


def test_score_sequence_matches_generation_score():
    enc, dec, rng = make_setup(6)
    ctx = prepare_decode_context(dec, encode_source(enc, [[4, 8, 6]]))
    z = Tensor(rng.normal(size=(1, D_Z)).astype(np.float32))
    result = greedy_decode(dec, enc.embed_tgt, ctx, z, max_len=9)
    rescored = score_sequence(dec, enc.embed_tgt, ctx, z, result.tokens, result.ended_with_eos)
    assert rescored == pytest.approx(result.score, abs=1e-6)


def test_greedy_max_len_one_gives_single_token():
    enc, dec, _ = make_setup(7)
    ctx = prepare_decode_context(dec, encode_source(enc, [[4, 5]]))
    result = greedy_decode(dec, enc.embed_tgt, ctx, Tensor(np.zeros((1, D_Z), dtype=np.float32)), max_len=1)
    assert len(result.tokens) <= 1


def test_zeroed_latent_still_yields_a_distribution():
    enc, dec, _ = make_setup(8)
    ctx = prepare_decode_context(dec, encode_source(enc, [[4, 5, 6]]))
    z = Tensor(np.zeros((1, D_Z), dtype=np.float32))
    log_probs, _, _ = decode_step(dec, enc.embed_tgt, np.array([2]), initial_state(dec, ctx), ctx, z)
    assert abs(np.exp(log_probs.data).sum() - 1.0) < 1e-5


# ---------------------------------------------------------------------------
# beam search
# ---------------------------------------------------------------------------


def test_beam_width_one_equals_greedy_on_100_random_models():
    for seed in range(100):
        enc, dec, rng = make_setup(seed, vocab=9)
        length = int(rng.integers(1, 5))
        src = [[int(x) for x in rng.integers(4, 9, size=length)]]
        ctx = prepare_decode_context(dec, encode_source(enc, src))
        z = Tensor(rng.normal(size=(1, D_Z)).astype(np.float32))
        greedy = greedy_decode(dec, enc.embed_tgt, ctx, z, max_len=2 * length + 10)
        beam = beam_decode(dec, enc.embed_tgt, ctx, z, width=1, max_len=2 * length + 10)
        assert beam[0].tokens == greedy.tokens, f"seed {seed}"
        assert beam[0].score == pytest.approx(greedy.score, abs=1e-6), f"seed {seed}"


def test_beam_scores_non_increasing_in_rank():
    enc, dec, rng = make_setup(11)
    ctx = prepare_decode_context(dec, encode_source(enc, [[4, 5, 6, 7]]))
    z = Tensor(rng.normal(size=(1, D_Z)).astype(np.float32))
    results = beam_decode(dec, enc.embed_tgt, ctx, z, width=5, max_len=12)
    scores = [r.score for r in results]
    assert scores == sorted(scores, reverse=True)
    assert len(results) <= 5


def test_beam_top_score_dominates_greedy_on_100_random_cases():
    wins = 0
    for seed in range(100):
        enc, dec, rng = make_setup(1000 + seed, vocab=9)
        length = int(rng.integers(1, 5))
        src = [[int(x) for x in rng.integers(4, 9, size=length)]]
        ctx = prepare_decode_context(dec, encode_source(enc, src))
        z = Tensor(rng.normal(size=(1, D_Z)).astype(np.float32))
        greedy = greedy_decode(dec, enc.embed_tgt, ctx, z, max_len=length + 6)
        beam = beam_decode(dec, enc.embed_tgt, ctx, z, width=4, max_len=length + 6)
        assert beam[0].score >= greedy.score - 1e-6, f"seed {seed}"
        wins += beam[0].score > greedy.score + 1e-6
    assert wins > 0  # the beam finds strictly better sequences somewhere


def test_beam_finished_hypotheses_end_with_eos_flag():
    enc, dec, rng = make_setup(12)
    ctx = prepare_decode_context(dec, encode_source(enc, [[4, 5]]))
    z = Tensor(rng.normal(size=(1, D_Z)).astype(np.float32))
    for r in beam_decode(dec, enc.embed_tgt, ctx, z, width=3, max_len=30):
        assert EOS_ID not in r.tokens


def test_beam_rejects_bad_width():
    enc, dec, _ = make_setup(13)
    ctx = prepare_decode_context(dec, encode_source(enc, [[4]]))
    with pytest.raises(ValueError):
        beam_decode(dec, enc.embed_tgt, ctx, Tensor(np.zeros((1, D_Z), dtype=np.float32)), width=0, max_len=5)
