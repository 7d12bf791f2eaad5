import numpy as np
import pytest

from latentmt import numerics as nm
from latentmt.data import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    build_vocab,
    encode_pairs,
    make_batch,
    synth_corpus,
)
from latentmt.numerics import Tape, Tensor
from latentmt.training import (
    CheckpointError,
    ObjectiveBreakdown,
    TrainConfig,
    Trainer,
    batch_loss_terms,
    build_model,
    kl_warmup_alpha,
    load_checkpoint,
    metrics_row,
    new_trainer,
    objective,
    parse_kv_file,
    save_checkpoint,
    validate,
    word_dropout,
)

TINY = dict(d_emb=12, d_hid=12, d_z=4, layers=2, batch_size=8, min_freq=1)


def copy_setup(size=24, vocab_size=12, seed=3):
    src_lines, tgt_lines = synth_corpus("copy", size, vocab_size, seed=seed)
    vocab = build_vocab(src_lines + tgt_lines, 1)
    pairs = encode_pairs(list(zip(src_lines, tgt_lines)), vocab, vocab)
    return vocab, pairs


# ---------------------------------------------------------------------------
# schedules and objective
# ---------------------------------------------------------------------------


def test_warmup_alpha_declared_points():
    for epoch in range(1, 6):
        assert kl_warmup_alpha(epoch) == 0.0
    assert kl_warmup_alpha(10) == 0.5
    for epoch in (15, 16, 40):
        assert kl_warmup_alpha(epoch) == 1.0


def test_warmup_alpha_is_linear_on_the_ramp():
    assert kl_warmup_alpha(7) == pytest.approx(0.2)
    assert kl_warmup_alpha(12) == pytest.approx(0.7)


def sc(x):
    return Tensor(np.float64(x), dtype=np.float64)


def _cfg(**kw):
    base = dict(TINY)
    base.update(kw)
    return TrainConfig(**base)


def test_objective_kl_min_paper_row_values():
    cfg = _cfg(mode="cvae", mitigation="kl_min", kl_min=0.1)
    re, kl = sc(1.9677), sc(0.0788)
    b = objective(re, kl, cfg, epoch=1, word_count=100)
    assert b.j_per_word == pytest.approx(2.0677, abs=1e-9)
    assert b.j_per_word == re.item() + 0.1  # adds exactly the floor


def test_objective_kl_min_switches_to_kl_above_floor():
    cfg = _cfg(mode="cvae", mitigation="kl_min", kl_min=0.1)
    b = objective(sc(2.0), sc(0.25), cfg, epoch=1, word_count=10)
    assert b.j_per_word == pytest.approx(2.25)


def test_objective_kl_coeff():
    cfg = _cfg(mode="cvae", mitigation="kl_coeff", kl_coeff=0.25)
    b = objective(sc(2.0), sc(0.4), cfg, epoch=1, word_count=10)
    assert b.j_per_word == pytest.approx(2.1)
    assert b.alpha == 0.25


def test_objective_warmup_epoch3_is_re_only():
    cfg = _cfg(mode="cvae", mitigation="warmup")
    re = sc(1.5)
    b = objective(re, sc(7.0), cfg, epoch=3, word_count=10)
    assert b.j_per_word == re.item()
    assert b.alpha == 0.0


def test_objective_rejects_negative_kl():
    cfg = _cfg(mode="cvae")
    with pytest.raises(ValueError, match="negative KL"):
        objective(sc(1.0), sc(-0.1), cfg, epoch=1, word_count=1)


def test_objective_breakdown_identity_j_equals_re_plus_alpha_kl():
    cfg = _cfg(mode="cvae", mitigation="kl_coeff", kl_coeff=0.3)
    b = objective(sc(1.2), sc(0.5), cfg, epoch=2, word_count=10)
    assert b.j_per_word == pytest.approx(b.re_per_word + b.alpha * b.kl_per_word, abs=1e-9)


def test_kl_min_gradient_is_gradient_of_re_alone():
    # below the floor, d(J)/d(kl inputs) must be exactly zero
    with nm.default_dtype(np.float64):
        cfg = _cfg(mode="cvae", mitigation="kl_min", kl_min=0.5)
        x = Tensor([0.3], requires_grad=True)
        y = Tensor([0.1], requires_grad=True)

        def j_of(t):
            re = nm.tensor_sum(nm.tanh(t))
            kl = nm.tensor_sum(y * y)  # 0.01 < 0.5 floor
            return objective(re, kl, cfg, epoch=1, word_count=1).loss

        with Tape() as tape:
            grads = tape.backward(j_of(x))
        assert y not in grads  # no gradient path into the KL branch at all
        assert nm.grad_check(j_of, x) < 1e-8


# ---------------------------------------------------------------------------
# word dropout
# ---------------------------------------------------------------------------


def _dropout_batch(n_tokens=10_000):
    rng = np.random.default_rng(0)
    pairs = []
    from latentmt.data import SentencePair

    while sum(len(p.src) for p in pairs) < n_tokens:
        n = int(rng.integers(5, 12))
        content = [int(x) for x in rng.integers(4, 30, size=n)]
        pairs.append(SentencePair(src=content, tgt=[BOS_ID] + content + [EOS_ID]))
    return make_batch(pairs)


def test_dropout_rate_zero_returns_batch_unchanged():
    batch = _dropout_batch(200)
    out = word_dropout(batch, 0.0, np.random.default_rng(1))
    assert out is batch


def test_dropout_rate_one_masks_every_content_token():
    batch = _dropout_batch(200)
    out = word_dropout(batch, 1.0, np.random.default_rng(1))
    content = batch.src != PAD_ID
    assert np.all(out.src[content] == UNK_ID)
    tgt_content = (batch.tgt != PAD_ID) & (batch.tgt != BOS_ID) & (batch.tgt != EOS_ID)
    assert np.all(out.tgt[tgt_content] == UNK_ID)
    # specials untouched
    assert np.all(out.tgt[batch.tgt == BOS_ID] == BOS_ID)
    assert np.all(out.tgt[batch.tgt == EOS_ID] == EOS_ID)
    assert np.all(out.src[batch.src == PAD_ID] == PAD_ID)
    # the original is never mutated
    assert not np.any(batch.src == UNK_ID)


def test_dropout_rate_half_concentrates_binomially():
    batch = _dropout_batch(10_000)
    out = word_dropout(batch, 0.5, np.random.default_rng(2))
    content = batch.src != PAD_ID
    fraction = np.mean(out.src[content] == UNK_ID)
    assert abs(fraction - 0.5) < 0.02


def test_dropout_applies_to_translation_path_only():
    vocab, pairs = copy_setup()
    cfg = _cfg(mode="cvae", word_dropout_rate=1.0, seed=5)
    rng = np.random.default_rng(cfg.seed)
    model = build_model(cfg, vocab, vocab, rng)
    batch = make_batch(pairs[:4])
    corrupted = word_dropout(batch, 1.0, rng)
    eps = np.zeros((batch.size, cfg.d_z))
    # posterior from the clean batch differs from one fed corrupted inputs,
    # proving the inference path reads the original tokens
    clean_terms = batch_loss_terms(model, batch, eps, translation_batch=corrupted)
    fully_corrupted = batch_loss_terms(model, corrupted, eps, translation_batch=corrupted)
    assert not np.allclose(
        clean_terms.posterior.mean.data, fully_corrupted.posterior.mean.data
    )


# ---------------------------------------------------------------------------
# training loop behavior
# ---------------------------------------------------------------------------


def test_seq2seq_copy_re_strictly_decreases_over_first_five_epochs():
    vocab, pairs = copy_setup(size=24)
    cfg = _cfg(mode="seq2seq", epochs=5, seed=1)
    trainer = new_trainer(cfg, vocab, vocab, pairs, clock=lambda: 0.0)
    res = [trainer.train_epoch().re_per_word for _ in range(5)]
    assert all(a > b for a, b in zip(res, res[1:])), res


def test_cvae_prior_parameters_frozen_while_alpha_is_zero():
    vocab, pairs = copy_setup(size=16)
    cfg = _cfg(mode="cvae", mitigation="warmup", seed=2)
    trainer = new_trainer(cfg, vocab, vocab, pairs, clock=lambda: 0.0)
    before = {k: v.data.copy() for k, v in trainer.model.prior.named_parameters("prior").items()}
    trainer.train_epoch()  # epoch 1: alpha == 0
    for k, v in trainer.model.prior.named_parameters("prior").items():
        np.testing.assert_array_equal(before[k], v.data)
    # while everything else moved
    assert not np.array_equal(
        trainer.model.encoder.embed_src.data,
        build_model(cfg, vocab, vocab, np.random.default_rng(cfg.seed)).encoder.embed_src.data,
    )


def test_zeroed_kl_objective_gives_prior_exactly_zero_gradient():
    vocab, pairs = copy_setup(size=8)
    cfg = _cfg(mode="cvae", mitigation="kl_coeff", kl_coeff=0.0, seed=4)
    rng = np.random.default_rng(cfg.seed)
    model = build_model(cfg, vocab, vocab, rng)
    batch = make_batch(pairs[:4])
    eps = rng.standard_normal((batch.size, cfg.d_z))
    with Tape() as tape:
        terms = batch_loss_terms(model, batch, eps)
        re = terms.nll_sum * (1.0 / terms.word_count)
        kl = terms.kl_sum * (1.0 / terms.word_count)
        b = objective(re, kl, cfg, epoch=1, word_count=terms.word_count)
        grads = tape.backward(b.loss)
    prior_tensors = set(model.prior.named_parameters("prior").values())
    for t in prior_tensors:
        if t in grads:
            assert np.all(grads[t] == 0.0)
    # the posterior still learns through the reconstruction path
    post_grads = [np.abs(grads[t]).max() for t in model.posterior.named_parameters("p").values() if t in grads]
    assert max(post_grads) > 0


def test_warmup_kl_gradient_zero_before_epoch_six():
    vocab, pairs = copy_setup(size=8)
    cfg = _cfg(mode="cvae", mitigation="warmup", seed=6)
    rng = np.random.default_rng(cfg.seed)
    model = build_model(cfg, vocab, vocab, rng)
    batch = make_batch(pairs[:4])
    eps = rng.standard_normal((batch.size, cfg.d_z))

    def grads_for(epoch, re_only):
        with Tape() as tape:
            terms = batch_loss_terms(model, batch, eps)
            re = terms.nll_sum * (1.0 / terms.word_count)
            if re_only:
                loss = re
            else:
                kl = terms.kl_sum * (1.0 / terms.word_count)
                loss = objective(re, kl, cfg, epoch, terms.word_count).loss
            return tape.backward(loss)

    g_warm = grads_for(epoch=3, re_only=False)
    g_re = grads_for(epoch=3, re_only=True)
    named = model.parameters()
    for name, t in named.items():
        a = g_warm.get(t)
        b = g_re.get(t)
        if a is None and b is None:
            continue
        np.testing.assert_array_equal(a, b, err_msg=name)


def test_identical_seeds_produce_bitwise_identical_metrics():
    vocab, pairs = copy_setup()
    cfg = _cfg(mode="cvae", epochs=3, seed=9)
    rows = []
    for _ in range(2):
        trainer = new_trainer(cfg, vocab, vocab, pairs, val_pairs=pairs[:8], clock=lambda: 0.0)
        for _ in range(3):
            trainer.train_epoch()
        rows.append([metrics_row(m) for m in trainer.metrics])
    assert rows[0] == rows[1]


def test_validation_nelbo_is_re_plus_kl():
    vocab, pairs = copy_setup()
    cfg = _cfg(mode="cvae", seed=10)
    trainer = new_trainer(cfg, vocab, vocab, pairs, val_pairs=pairs[:8], clock=lambda: 0.0)
    trainer.train_epoch()
    val = [m for m in trainer.metrics if m.split == "val"][-1]
    assert val.nelbo_per_word == pytest.approx(val.re_per_word + val.kl_per_word, abs=1e-6)
    assert val.ppl == pytest.approx(np.exp(val.nelbo_per_word), rel=1e-9)


def test_seq2seq_validation_reports_nll_without_kl():
    vocab, pairs = copy_setup()
    cfg = _cfg(mode="seq2seq", seed=11)
    trainer = new_trainer(cfg, vocab, vocab, pairs, clock=lambda: 0.0)
    metric = validate(trainer.model, pairs[:8])
    assert metric.kl_per_word is None
    assert metric.ppl == pytest.approx(np.exp(metric.re_per_word), rel=1e-9)
    assert "NA" in metrics_row(metric)


def test_learning_rate_is_non_increasing_across_epochs():
    vocab, pairs = copy_setup(size=16)
    cfg = _cfg(mode="seq2seq", epochs=6, seed=12, patience=1)
    trainer = new_trainer(cfg, vocab, vocab, pairs, val_pairs=pairs[:4], clock=lambda: 0.0)
    lrs = [trainer.train_epoch().lr for _ in range(6)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_full_loss_gradient_matches_finite_differences_tiny_model():
    # two sentences, tiny dims, frozen noise, 64-bit; one representative
    # parameter per component here, the acceptance suite sweeps them all
    with nm.default_dtype(np.float64):
        vocab, pairs = copy_setup(size=4, vocab_size=8, seed=0)
        cfg = _cfg(mode="cvae", d_emb=5, d_hid=4, d_z=3, batch_size=2, seed=0)
        rng = np.random.default_rng(0)
        model = build_model(cfg, vocab, vocab, rng)
        batch = make_batch(pairs[:2])
        eps = rng.standard_normal((2, cfg.d_z))

        def loss_fn(_t):
            terms = batch_loss_terms(model, batch, eps)
            re = terms.nll_sum * (1.0 / terms.word_count)
            kl = terms.kl_sum * (1.0 / terms.word_count)
            return re + kl

        params = model.parameters()
        picked = [
            "encoder.embed_src", "encoder.l0.bwd.w", "decoder.l0.w", "decoder.out_b",
            "prior.mean_w", "prior.logvar_b", "posterior.proj_w", "posterior.logvar_w",
        ]
        worst = 0.0
        for name in picked:
            err = nm.grad_check(lambda t: loss_fn(t), params[name], h=1e-5)
            worst = max(worst, err)
        assert worst < 1e-4, worst


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_config_kv_roundtrip(tmp_path):
    cfg = _cfg(mode="cvae", mitigation="kl_coeff", kl_coeff=0.25, seed=13)
    path = tmp_path / "config.txt"
    path.write_text("\n".join(cfg.to_kv_lines()) + "\n# comment\n", encoding="utf-8")
    loaded = TrainConfig.from_kv(parse_kv_file(path))
    assert loaded == cfg


def test_config_rejects_unknown_key():
    with pytest.raises(ValueError, match="unknown configuration key"):
        TrainConfig.from_kv({"nope": "1"})


def test_config_rejects_bad_mode_and_mitigation():
    with pytest.raises(ValueError):
        TrainConfig(mode="transformer")
    with pytest.raises(ValueError):
        TrainConfig(mitigation="free_bits")


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def _trained_trainer(tmp_path, epochs=2):
    vocab, pairs = copy_setup()
    cfg = _cfg(mode="cvae", epochs=epochs, seed=14)
    trainer = new_trainer(cfg, vocab, vocab, pairs, val_pairs=pairs[:8], clock=lambda: 0.0)
    for _ in range(epochs):
        trainer.train_epoch()
    return trainer, pairs


def test_checkpoint_roundtrip_is_bitwise(tmp_path):
    trainer, _ = _trained_trainer(tmp_path)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, trainer)
    loaded = load_checkpoint(path)
    for name, p in trainer.model.parameters().items():
        np.testing.assert_array_equal(p.data, loaded.model.parameters()[name].data)
    for name in trainer.adam.m:
        np.testing.assert_array_equal(trainer.adam.m[name], loaded.adam.m[name])
        np.testing.assert_array_equal(trainer.adam.v[name], loaded.adam.v[name])
    assert loaded.adam.step == trainer.adam.step
    assert loaded.epoch == trainer.epoch
    assert loaded.scheduler.lr == trainer.scheduler.lr
    assert loaded.rng.bit_generator.state == trainer.rng.bit_generator.state
    assert loaded.model.cfg == trainer.model.cfg
    assert loaded.model.src_vocab.id_to_token == trainer.model.src_vocab.id_to_token


def test_checkpoint_save_is_deterministic(tmp_path):
    trainer, _ = _trained_trainer(tmp_path)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, trainer)
    save_checkpoint(b, trainer)
    assert a.read_bytes() == b.read_bytes()


def test_resume_reproduces_uninterrupted_trajectory(tmp_path):
    vocab, pairs = copy_setup()
    cfg = _cfg(mode="cvae", epochs=5, seed=15)
    straight = new_trainer(cfg, vocab, vocab, pairs, val_pairs=pairs[:8], clock=lambda: 0.0)
    for _ in range(5):
        straight.train_epoch()

    partial = new_trainer(cfg, vocab, vocab, pairs, val_pairs=pairs[:8], clock=lambda: 0.0)
    for _ in range(3):
        partial.train_epoch()
    path = tmp_path / "mid.ckpt"
    save_checkpoint(path, partial)
    resumed = load_checkpoint(path, train_pairs=pairs, val_pairs=pairs[:8], clock=lambda: 0.0)
    for _ in range(2):
        resumed.train_epoch()
    tail = [metrics_row(m) for m in resumed.metrics]
    expected = [metrics_row(m) for m in straight.metrics[6:]]  # epochs 4-5, train+val rows
    assert tail == expected


def test_truncated_checkpoint_errors(tmp_path):
    trainer, _ = _trained_trainer(tmp_path)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, trainer)
    blob = path.read_bytes()
    truncated = tmp_path / "short.ckpt"
    truncated.write_bytes(blob[: len(blob) - 64])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(truncated)


def test_version_mismatch_rejected(tmp_path):
    trainer, _ = _trained_trainer(tmp_path)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, trainer)
    blob = path.read_bytes().replace(b"latentmt-checkpoint 1", b"latentmt-checkpoint 9", 1)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(blob)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad)


def test_corrupt_section_names_failing_section(tmp_path):
    trainer, _ = _trained_trainer(tmp_path)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, trainer)
    blob = path.read_bytes().replace(b"[rng]\nstate=PCG64", b"[rng]\nstate=XXXXX", 1)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(blob)
    with pytest.raises(CheckpointError, match="rng"):
        load_checkpoint(bad)
