"""Training objectives, collapse mitigations, the epoch loop, checkpoints.

Three model modes share one parameter layout: "seq2seq" runs the decoder
with a zero latent and no inference networks; "cvae" adds the prior and the
co-attention posterior; "cvae_meanpool_posterior" swaps in the mean-pool
baseline posterior. Exactly one collapse mitigation is active per run:
linear KL warm-up, a KL floor, a constant KL coefficient, or none (full KL
from the first epoch).

All noise is drawn from a single generator owned by the run, in a fixed
order: parameter init first, then per batch the word-dropout masks (source
side, then target side, only when dropout is on) followed by the latent
noise. Validation draws from its own fixed-seed generator so that resuming
from a checkpoint reproduces the uninterrupted trajectory bitwise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, fields

import numpy as np

from . import numerics as nm
from .data import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    Batch,
    SentencePair,
    Vocabulary,
    make_batches,
    make_eval_batches,
)
from .decoder import DecoderParams, init_decoder_params, prepare_decode_context, teacher_forced_nll
from .encoder import EncoderParams, encode, init_encoder_params
from .latent import (
    GaussianNetParams,
    GaussianParams,
    init_gaussian_net,
    kl_diag_gauss,
    posterior_params,
    posterior_params_meanpool,
    prior_params,
    reparam_sample,
)
from .numerics import AdamState, PlateauScheduler, Tape, Tensor, optimizer_step

MODES = ("seq2seq", "cvae", "cvae_meanpool_posterior")
MITIGATIONS = ("warmup", "kl_min", "kl_coeff", "none")

CHECKPOINT_FORMAT_VERSION = 1
VALIDATION_SEED_OFFSET = 90001
BATCH_SEED_OFFSET = 70001


class CheckpointError(ValueError):
    """Unreadable, truncated or version-incompatible checkpoint file."""


@dataclass
class TrainConfig:
    """Model and run hyperparameters. Paths are deliberately not part of it."""

    mode: str = "cvae"
    mitigation: str = "warmup"
    kl_min: float = 0.1
    kl_coeff: float = 0.25
    word_dropout_rate: float = 0.0
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.002
    d_emb: int = 300
    d_hid: int = 300
    layers: int = 2
    d_z: int = 32
    seed: int = 0
    max_len: int = 100
    min_freq: int = 5
    beam: int = 10
    grad_clip: float = 0.0
    patience: int = 1
    lr_decay_factor: float = 0.5
    min_lr: float = 1e-5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.mitigation not in MITIGATIONS:
            raise ValueError(f"mitigation must be one of {MITIGATIONS}, got '{self.mitigation}'")
        if not 0.0 <= self.word_dropout_rate <= 1.0:
            raise ValueError(f"word_dropout_rate must be in [0, 1], got {self.word_dropout_rate}")

    @property
    def uses_latent(self) -> bool:
        return self.mode != "seq2seq"

    def to_kv_lines(self) -> list[str]:
        return [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]

    @classmethod
    def from_kv(cls, mapping: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        known = {f.name: f.type for f in fields(cls)}
        casts = {"str": str, "int": int, "float": float}
        for key, raw in mapping.items():
            if key not in known:
                raise ValueError(f"unknown configuration key '{key}'")
            kwargs[key] = casts[known[key]](raw)
        return cls(**kwargs)


def parse_kv_file(path) -> dict[str, str]:
    """Flat key=value configuration text; '#' starts a comment."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got '{line}'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def kl_warmup_alpha(epoch: int) -> float:
    """KL weight during warm-up: zero through epoch 5, 1.0 from epoch 15."""
    if epoch < 1:
        raise ValueError(f"epoch is 1-indexed, got {epoch}")
    return min(max((epoch - 5) / 10.0, 0.0), 1.0)


@dataclass
class ObjectiveBreakdown:
    """One batch's objective: per-word terms plus batch sums.

    `loss` is the tensor actually backpropagated (per-word J).
    """

    re_per_word: float
    kl_per_word: float
    alpha: float
    j_per_word: float
    re_sum: float
    kl_sum: float
    j_sum: float
    loss: Tensor | None = None


def objective(re: Tensor, kl: Tensor, cfg: TrainConfig, epoch: int, word_count: int) -> ObjectiveBreakdown:
    """Combine per-word reconstruction and KL terms under the active mitigation.

    warmup:   J = RE + alpha(epoch) * KL, with the KL term absent from the
              graph while alpha is 0 so it contributes exactly zero gradient.
    kl_min:   J = RE + max(KL, m); when KL < m the constant m is added with
              no gradient into the KL branch.
    kl_coeff: J = RE + c * KL.
    none:     J = RE + KL.
    """
    kl_value = kl.item()
    if kl_value < 0:
        raise ValueError(f"negative KL ({kl_value}) violates the KL invariant upstream")
    if cfg.mitigation == "warmup":
        alpha = kl_warmup_alpha(epoch)
        loss = re if alpha == 0.0 else re + alpha * kl
    elif cfg.mitigation == "kl_min":
        alpha = 1.0
        loss = re + cfg.kl_min if kl_value < cfg.kl_min else re + kl
    elif cfg.mitigation == "kl_coeff":
        alpha = cfg.kl_coeff
        loss = re + alpha * kl
    else:
        alpha = 1.0
        loss = re + kl
    re_pw = re.item()
    return ObjectiveBreakdown(
        re_per_word=re_pw,
        kl_per_word=kl_value,
        alpha=alpha,
        j_per_word=loss.item(),
        re_sum=re_pw * word_count,
        kl_sum=kl_value * word_count,
        j_sum=loss.item() * word_count,
        loss=loss,
    )


def word_dropout(batch: Batch, rate: float, rng: np.random.Generator) -> Batch:
    """Replace non-special tokens with UNK at probability `rate`.

    Applies to the translation path only: callers keep the original batch
    for the inference networks. BOS, EOS and PAD are never masked. Draws
    source masks first, then target masks.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    if rate == 0.0:
        return batch
    def corrupt(mat: np.ndarray) -> np.ndarray:
        eligible = (mat != PAD_ID) & (mat != BOS_ID) & (mat != EOS_ID)
        draw = rng.random(mat.shape) < rate
        out = mat.copy()
        out[eligible & draw] = UNK_ID
        return out

    src = corrupt(batch.src)
    tgt = corrupt(batch.tgt)
    return Batch(src, batch.src_len, batch.src_mask, tgt, batch.tgt_len, batch.tgt_mask)


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------


@dataclass
class Model:
    """Everything a run owns besides optimizer and schedule state."""

    cfg: TrainConfig
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    encoder: EncoderParams
    decoder: DecoderParams
    prior: GaussianNetParams | None
    posterior: GaussianNetParams | None

    def parameters(self) -> dict[str, Tensor]:
        out = self.encoder.named_parameters()
        out.update(self.decoder.named_parameters())
        if self.prior is not None:
            out.update(self.prior.named_parameters("prior"))
        if self.posterior is not None:
            out.update(self.posterior.named_parameters("posterior"))
        return out

    @property
    def dtype(self):
        return self.encoder.embed_src.dtype

    def zero_latent(self, batch_size: int) -> Tensor:
        return Tensor(np.zeros((batch_size, self.cfg.d_z), dtype=self.dtype))

    def posterior_for(self, src_ann, tgt_ann) -> GaussianParams:
        if self.cfg.mode == "cvae":
            return posterior_params(self.posterior, src_ann, tgt_ann)
        if self.cfg.mode == "cvae_meanpool_posterior":
            return posterior_params_meanpool(self.posterior, src_ann, tgt_ann)
        raise ValueError(f"mode '{self.cfg.mode}' has no posterior")


def build_model(cfg: TrainConfig, src_vocab: Vocabulary, tgt_vocab: Vocabulary, rng: np.random.Generator) -> Model:
    """Initialize all parameters in a fixed draw order.

    Order: encoder (embeddings, then LSTM layers), decoder, prior net,
    posterior net. All weights uniform in [-0.08, 0.08]; LSTM forget-gate
    biases start at 1.
    """
    enc = init_encoder_params(len(src_vocab), len(tgt_vocab), cfg.d_emb, cfg.d_hid, cfg.layers, rng)
    dec = init_decoder_params(len(tgt_vocab), cfg.d_emb, cfg.d_hid, cfg.d_z, cfg.layers, rng)
    prior = None
    posterior = None
    if cfg.uses_latent:
        d_pre = cfg.d_hid
        ann_width = 2 * cfg.d_hid
        prior = init_gaussian_net(ann_width, d_pre, cfg.d_z, rng)
        post_width = 4 * ann_width if cfg.mode == "cvae" else 2 * ann_width
        posterior = init_gaussian_net(post_width, d_pre, cfg.d_z, rng)
    return Model(cfg, src_vocab, tgt_vocab, enc, dec, prior, posterior)


# ---------------------------------------------------------------------------
# per-batch loss
# ---------------------------------------------------------------------------


@dataclass
class BatchTerms:
    nll_sum: Tensor          # summed over sentences and positions
    kl_sum: Tensor | None    # summed over sentences; None in seq2seq mode
    word_count: int
    prior: GaussianParams | None
    posterior: GaussianParams | None


def batch_loss_terms(
    model: Model,
    batch: Batch,
    eps: np.ndarray | None,
    translation_batch: Batch | None = None,
) -> BatchTerms:
    """Forward pass for one batch: reconstruction and (if latent) KL sums.

    Pure given its inputs: `eps` is the frozen reparameterization noise
    (B, d_z), None in seq2seq mode. When word dropout corrupted a copy of
    the batch, pass it as `translation_batch`; the inference networks
    always see the original.
    """
    cfg = model.cfg
    if translation_batch is None:
        translation_batch = batch
    src_ann_trans = encode(model.encoder, translation_batch.src, translation_batch.src_mask, "source")

    prior = posterior = None
    kl_sum = None
    if cfg.uses_latent:
        if translation_batch is batch:
            src_ann_inf = src_ann_trans
        else:
            src_ann_inf = encode(model.encoder, batch.src, batch.src_mask, "source")
        tgt_ann = encode(model.encoder, batch.tgt, batch.tgt_mask, "target")
        prior = prior_params(model.prior, src_ann_inf)
        posterior = model.posterior_for(src_ann_inf, tgt_ann)
        z = reparam_sample(posterior, eps)
        kl_sum = nm.tensor_sum(kl_diag_gauss(posterior, prior))
    else:
        z = model.zero_latent(batch.size)

    ctx = prepare_decode_context(model.decoder, src_ann_trans)
    nll, counts = teacher_forced_nll(
        model.decoder, model.encoder.embed_tgt, translation_batch, ctx, z
    )
    return BatchTerms(
        nll_sum=nm.tensor_sum(nll),
        kl_sum=kl_sum,
        word_count=int(counts.sum()),
        prior=prior,
        posterior=posterior,
    )


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    re_per_word: float
    kl_per_word: float | None
    alpha: float | None
    j_per_word: float | None
    nelbo_per_word: float
    ppl: float
    lr: float
    wall_clock_s: float


METRICS_HEADER = "epoch,split,re_per_word,kl_per_word,alpha,j_per_word,nelbo_per_word,ppl,lr,wall_clock_s"


def metrics_row(m: EpochMetrics) -> str:
    def num(x, fmt="{:.6f}"):
        return "NA" if x is None else fmt.format(x)

    return ",".join(
        [
            str(m.epoch),
            m.split,
            num(m.re_per_word),
            num(m.kl_per_word),
            num(m.alpha),
            num(m.j_per_word),
            num(m.nelbo_per_word),
            num(m.ppl, "{:.6g}"),
            num(m.lr, "{:.6g}"),
            num(m.wall_clock_s, "{:.3f}"),
        ]
    )


class Trainer:
    """Single-threaded epoch loop with Adam and plateau LR decay.

    `clock` exists so tests can pin the wall-clock column; it defaults to
    real time. Everything else about a run is a deterministic function of
    the configuration and data.
    """

    def __init__(
        self,
        model: Model,
        train_pairs: list[SentencePair],
        val_pairs: list[SentencePair] | None = None,
        clock=time.monotonic,
        rng: np.random.Generator | None = None,
    ):
        self.model = model
        self.train_pairs = train_pairs
        self.val_pairs = val_pairs
        self.clock = clock
        cfg = model.cfg
        self.adam = AdamState(lr=cfg.lr)
        self.scheduler = PlateauScheduler(
            lr=cfg.lr, patience=cfg.patience, factor=cfg.lr_decay_factor, min_lr=cfg.min_lr
        )
        # the run generator: build via new_trainer so the stream continues
        # from the init draws rather than restarting at the seed
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.epoch = 0
        self.metrics: list[EpochMetrics] = []
        self._start = self.clock()

    def train_epoch(self) -> EpochMetrics:
        cfg = self.model.cfg
        self.epoch += 1
        params = self.model.parameters()
        batches = make_batches(self.train_pairs, cfg.batch_size, seed=cfg.seed + BATCH_SEED_OFFSET + self.epoch)
        re_total = 0.0
        kl_total = 0.0
        j_total = 0.0
        alpha = None
        words_total = 0
        for batch_index, batch in enumerate(batches):
            try:
                with Tape() as tape:
                    terms = self._batch_terms(batch)
                    inv_words = 1.0 / terms.word_count
                    re = terms.nll_sum * inv_words
                    if cfg.uses_latent:
                        kl = terms.kl_sum * inv_words
                        breakdown = objective(re, kl, cfg, self.epoch, terms.word_count)
                    else:
                        re_pw = re.item()
                        breakdown = ObjectiveBreakdown(
                            re_per_word=re_pw,
                            kl_per_word=0.0,
                            alpha=0.0,
                            j_per_word=re_pw,
                            re_sum=re_pw * terms.word_count,
                            kl_sum=0.0,
                            j_sum=re_pw * terms.word_count,
                            loss=re,
                        )
                    grads = tape.backward(breakdown.loss)
            except nm.NonFiniteError as e:
                raise nm.NonFiniteError(
                    f"epoch {self.epoch} batch {batch_index} ({batch.size} sentences): {e}"
                ) from e
            named_grads = {name: grads[p] for name, p in params.items() if p in grads}
            if cfg.grad_clip > 0:
                nm.clip_grad_norm(named_grads, cfg.grad_clip)
            self.adam.lr = self.scheduler.lr
            optimizer_step(params, named_grads, self.adam)
            for p in params.values():
                p.zero_grad()
            re_total += breakdown.re_sum
            kl_total += breakdown.kl_sum
            j_total += breakdown.j_sum
            alpha = breakdown.alpha
            words_total += terms.word_count
        re_pw = re_total / words_total
        kl_pw = kl_total / words_total if cfg.uses_latent else None
        nelbo = re_pw + (kl_pw or 0.0)
        metric = EpochMetrics(
            epoch=self.epoch,
            split="train",
            re_per_word=re_pw,
            kl_per_word=kl_pw,
            alpha=alpha if cfg.uses_latent else None,
            j_per_word=j_total / words_total,
            nelbo_per_word=nelbo,
            ppl=float(np.exp(nelbo)),
            lr=self.scheduler.lr,
            wall_clock_s=self.clock() - self._start,
        )
        self.metrics.append(metric)
        if self.val_pairs:
            val_metric = self.validate()
            self.scheduler.step(val_metric.nelbo_per_word)
        return metric

    def _batch_terms(self, batch: Batch) -> BatchTerms:
        # draw order per batch: dropout masks (if any), then latent noise
        cfg = self.model.cfg
        translation_batch = None
        if cfg.word_dropout_rate > 0:
            translation_batch = word_dropout(batch, cfg.word_dropout_rate, self.rng)
        eps = None
        if cfg.uses_latent:
            eps = self.rng.standard_normal((batch.size, cfg.d_z))
        return batch_loss_terms(self.model, batch, eps, translation_batch)

    def validate(self) -> EpochMetrics:
        metric = validate(self.model, self.val_pairs, epoch=self.epoch, lr=self.scheduler.lr,
                          wall_clock_s=self.clock() - self._start)
        self.metrics.append(metric)
        return metric


def new_trainer(
    cfg: TrainConfig,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    train_pairs: list[SentencePair],
    val_pairs: list[SentencePair] | None = None,
    clock=time.monotonic,
) -> Trainer:
    """Standard run setup: one generator seeds init and all training noise."""
    rng = np.random.default_rng(cfg.seed)
    model = build_model(cfg, src_vocab, tgt_vocab, rng)
    return Trainer(model, train_pairs, val_pairs, clock=clock, rng=rng)


def validate(
    model: Model,
    pairs: list[SentencePair],
    epoch: int = 0,
    lr: float = 0.0,
    wall_clock_s: float = 0.0,
) -> EpochMetrics:
    """Held-out metrics: per-word RE, KL, NELBO = RE + KL, PPL = exp(NELBO).

    Uses one posterior sample per sentence drawn from a fixed-seed
    generator, so the reported bound is unbiased yet comparable across
    epochs. Seq2seq models report NLL and PPL = exp(NLL) with KL absent.
    """
    if not pairs:
        raise ValueError("validation set is empty")
    cfg = model.cfg
    eval_rng = np.random.default_rng(cfg.seed + VALIDATION_SEED_OFFSET)
    re_total = 0.0
    kl_total = 0.0
    words = 0
    for batch in make_eval_batches(pairs, cfg.batch_size):
        src_ann = encode(model.encoder, batch.src, batch.src_mask, "source")
        if cfg.uses_latent:
            tgt_ann = encode(model.encoder, batch.tgt, batch.tgt_mask, "target")
            prior = prior_params(model.prior, src_ann)
            posterior = model.posterior_for(src_ann, tgt_ann)
            eps = eval_rng.standard_normal((batch.size, cfg.d_z))
            z = reparam_sample(posterior, eps)
            kl_total += float(nm.tensor_sum(kl_diag_gauss(posterior, prior)).item())
        else:
            z = model.zero_latent(batch.size)
        ctx = prepare_decode_context(model.decoder, src_ann)
        nll, counts = teacher_forced_nll(model.decoder, model.encoder.embed_tgt, batch, ctx, z)
        re_total += float(nll.data.sum())
        words += int(counts.sum())
    re_pw = re_total / words
    kl_pw = kl_total / words if cfg.uses_latent else None
    nelbo = re_pw + (kl_pw or 0.0)
    return EpochMetrics(
        epoch=epoch,
        split="val",
        re_per_word=re_pw,
        kl_per_word=kl_pw,
        alpha=1.0 if cfg.uses_latent else None,
        j_per_word=None,
        nelbo_per_word=nelbo,
        ppl=float(np.exp(nelbo)),
        lr=lr,
        wall_clock_s=wall_clock_s,
    )


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def _rng_state_to_str(rng: np.random.Generator) -> str:
    state = rng.bit_generator.state
    return f"{state['bit_generator']}:{state['state']['state']}:{state['state']['inc']}:{state['has_uint32']}:{state['uinteger']}"


def _rng_state_from_str(s: str) -> np.random.Generator:
    kind, st, inc, has32, uint = s.split(":")
    if kind != "PCG64":
        raise CheckpointError(f"unsupported generator '{kind}' in [rng] section")
    gen = np.random.default_rng(0)
    gen.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(st), "inc": int(inc)},
        "has_uint32": int(has32),
        "uinteger": int(uint),
    }
    return gen


def save_checkpoint(path, trainer: Trainer) -> None:
    """Write the documented container: text header, then raw float32 data.

    Header sections: config, vocab_src, vocab_tgt, adam, scheduler, rng,
    tensors (name/shape/offset directory). Tensor payload is little-endian
    float32 in directory order; Adam moments ride along as tensors.
    """
    model = trainer.model
    params = model.parameters()
    tensors: list[tuple[str, np.ndarray]] = [(name, p.data) for name, p in params.items()]
    for name in params:
        if name in trainer.adam.m:
            tensors.append((f"adam.m.{name}", trainer.adam.m[name]))
            tensors.append((f"adam.v.{name}", trainer.adam.v[name]))

    lines = [f"latentmt-checkpoint {CHECKPOINT_FORMAT_VERSION}"]
    lines.append("[config]")
    lines.extend(model.cfg.to_kv_lines())
    lines.append("[vocab_src]")
    lines.extend(f"{t}\t{c}" for t, c in zip(model.src_vocab.id_to_token, model.src_vocab.frequencies))
    lines.append("[vocab_tgt]")
    lines.extend(f"{t}\t{c}" for t, c in zip(model.tgt_vocab.id_to_token, model.tgt_vocab.frequencies))
    lines.append("[adam]")
    lines.append(f"lr={trainer.adam.lr!r}")
    lines.append(f"beta1={trainer.adam.beta1!r}")
    lines.append(f"beta2={trainer.adam.beta2!r}")
    lines.append(f"eps={trainer.adam.eps!r}")
    lines.append(f"step={trainer.adam.step}")
    lines.append("[scheduler]")
    lines.append(f"lr={trainer.scheduler.lr!r}")
    lines.append(f"patience={trainer.scheduler.patience}")
    lines.append(f"factor={trainer.scheduler.factor!r}")
    lines.append(f"min_lr={trainer.scheduler.min_lr!r}")
    lines.append(f"best={'NA' if trainer.scheduler.best is None else repr(trainer.scheduler.best)}")
    lines.append(f"bad_epochs={trainer.scheduler.bad_epochs}")
    lines.append("[run]")
    lines.append(f"epoch={trainer.epoch}")
    lines.append("[rng]")
    lines.append(f"state={_rng_state_to_str(trainer.rng)}")
    lines.append("[tensors]")
    offset = 0
    for name, arr in tensors:
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"{name} {shape or '-'} {offset} {arr.size}")
        offset += arr.size
    lines.append("[data]")
    header = "\n".join(lines) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("utf-8"))
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(
    path,
    train_pairs: list[SentencePair] | None = None,
    val_pairs: list[SentencePair] | None = None,
    clock=time.monotonic,
) -> Trainer:
    """Rebuild a Trainer (model, optimizer, schedule, RNG) from a file."""
    with open(path, "rb") as f:
        blob = f.read()
    marker = b"[data]\n"
    split_at = blob.find(marker)
    if split_at < 0:
        raise CheckpointError("checkpoint missing [data] section")
    try:
        header = blob[:split_at].decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointError(f"checkpoint header is not valid UTF-8: {e}") from e
    payload = blob[split_at + len(marker):]

    lines = header.splitlines()
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != "latentmt-checkpoint":
        raise CheckpointError("not a latentmt checkpoint (bad magic line)")
    if int(magic[1]) != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {magic[1]} is not supported (expected {CHECKPOINT_FORMAT_VERSION})"
        )
    sections: dict[str, list[str]] = {}
    current = None
    for line in lines[1:]:
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is not None:
            sections[current].append(line)
    for required in ("config", "vocab_src", "vocab_tgt", "adam", "scheduler", "run", "rng", "tensors"):
        if required not in sections:
            raise CheckpointError(f"checkpoint missing [{required}] section")

    def kv(section: str) -> dict[str, str]:
        out = {}
        for line in sections[section]:
            if "=" not in line:
                raise CheckpointError(f"bad line in [{section}] section: '{line}'")
            k, v = line.split("=", 1)
            out[k] = v
        return out

    try:
        cfg = TrainConfig.from_kv(kv("config"))
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"bad [config] section: {e}") from e

    def vocab_from(section: str) -> Vocabulary:
        tokens, freqs = [], []
        for line in sections[section]:
            parts = line.split("\t")
            if len(parts) != 2:
                raise CheckpointError(f"bad entry in [{section}] section: '{line}'")
            tokens.append(parts[0])
            freqs.append(int(parts[1]))
        return Vocabulary(
            token_to_id={t: i for i, t in enumerate(tokens)},
            id_to_token=tokens,
            frequencies=freqs,
            min_freq=cfg.min_freq,
        )

    src_vocab = vocab_from("vocab_src")
    tgt_vocab = vocab_from("vocab_tgt")

    directory: list[tuple[str, tuple[int, ...], int, int]] = []
    for line in sections["tensors"]:
        parts = line.split()
        if len(parts) != 4:
            raise CheckpointError(f"bad entry in [tensors] section: '{line}'")
        name, shape_s, off_s, size_s = parts
        shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split(","))
        directory.append((name, shape, int(off_s), int(size_s)))
    total = sum(size for _, _, _, size in directory)
    if len(payload) != total * 4:
        raise CheckpointError(
            f"truncated or oversized [data] section: expected {total * 4} bytes, found {len(payload)}"
        )
    flat = np.frombuffer(payload, dtype="<f4")

    def read_tensor(name: str, shape, off: int, size: int) -> np.ndarray:
        return flat[off : off + size].reshape(shape).astype(np.float32)

    arrays = {name: read_tensor(name, shape, off, size) for name, shape, off, size in directory}

    # rebuild the model with a throwaway generator, then overwrite tensors
    model = build_model(cfg, src_vocab, tgt_vocab, np.random.default_rng(0))
    params = model.parameters()
    for name, p in params.items():
        if name not in arrays:
            raise CheckpointError(f"[tensors] section missing parameter '{name}'")
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(
                f"[tensors] shape mismatch for '{name}': file {arrays[name].shape} vs model {p.data.shape}"
            )
        p.data = arrays[name].astype(p.data.dtype)

    trainer = Trainer.__new__(Trainer)
    trainer.model = model
    trainer.train_pairs = train_pairs or []
    trainer.val_pairs = val_pairs
    trainer.clock = clock
    adam_kv = kv("adam")
    trainer.adam = AdamState(
        lr=float(adam_kv["lr"]),
        beta1=float(adam_kv["beta1"]),
        beta2=float(adam_kv["beta2"]),
        eps=float(adam_kv["eps"]),
        step=int(adam_kv["step"]),
    )
    for name in params:
        m_name, v_name = f"adam.m.{name}", f"adam.v.{name}"
        if m_name in arrays:
            trainer.adam.m[name] = arrays[m_name].astype(np.float32)
            trainer.adam.v[name] = arrays[v_name].astype(np.float32)
    sched_kv = kv("scheduler")
    trainer.scheduler = PlateauScheduler(
        lr=float(sched_kv["lr"]),
        patience=int(sched_kv["patience"]),
        factor=float(sched_kv["factor"]),
        min_lr=float(sched_kv["min_lr"]),
        best=None if sched_kv["best"] == "NA" else float(sched_kv["best"]),
        bad_epochs=int(sched_kv["bad_epochs"]),
    )
    trainer.rng = _rng_state_from_str(kv("rng")["state"])
    trainer.epoch = int(kv("run")["epoch"])
    trainer.metrics = []
    trainer._start = trainer.clock()
    return trainer
