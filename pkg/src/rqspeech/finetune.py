"""CTC finetuning of a pretrained encoder, plus decoding and scoring.

A character tokenizer (id 0 reserved for the CTC blank) and a single linear
head over the encoder's final state turn the model into a speech recognizer.
Finetuning keeps the encoder frozen for the first ``freeze_steps`` steps, then
trains jointly with distinct encoder/decoder learning-rate schedules.
SpecAugment runs on the input features during training only.

The CTC loss is the exact forward recursion in log space, differentiated by
the autodiff tape; decoding offers per-frame greedy collapse and a prefix beam
search that merges equivalent prefixes by log-sum-exp. No language model.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import pretrain
from .autodiff import Tensor
from .seeding import keyed_rng

BLANK_ID = 0
NEG_INF = -np.inf


class InfeasibleTargetError(ValueError):
    """Target cannot be aligned: too few frames for the collapsed sequence."""


class CharTokenizer:
    """Bijective character table; id 0 is the CTC blank and is never emitted
    by encoding text."""

    def __init__(self, alphabet: str):
        symbols = sorted(set(alphabet))
        if not symbols:
            raise ValueError("alphabet must be nonempty")
        self.alphabet = "".join(symbols)
        self._to_id = {ch: i + 1 for i, ch in enumerate(symbols)}
        self._to_char = {i + 1: ch for i, ch in enumerate(symbols)}

    @classmethod
    def from_texts(cls, texts) -> "CharTokenizer":
        chars = set()
        for text in texts:
            chars.update(text)
        chars.add(" ")
        return cls("".join(chars))

    @property
    def vocab_size(self) -> int:
        return len(self.alphabet) + 1  # + blank

    def encode(self, text: str) -> np.ndarray:
        try:
            return np.array([self._to_id[ch] for ch in text], dtype=np.int64)
        except KeyError as err:
            raise ValueError(f"character not in alphabet: {err.args[0]!r}") from None

    def decode(self, ids) -> str:
        return "".join(self._to_char[int(i)] for i in ids)


@dataclass(frozen=True)
class SpecAugmentConfig:
    num_time_masks: int = 2
    max_time_width: int = 80
    time_apply_prob: float = 0.2
    num_freq_masks: int = 2
    max_freq_width: int = 27


@dataclass(frozen=True)
class FinetuneConfig:
    encoder_lr: float = 2e-4
    decoder_lr: float = 2e-3
    warmup_steps: int = 1000
    freeze_steps: int = 1500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    spec_augment: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)

    def __post_init__(self):
        if self.encoder_lr <= 0 or self.decoder_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.freeze_steps < 0:
            raise ValueError("freeze_steps must be >= 0")


def spec_augment(mel: np.ndarray, cfg: SpecAugmentConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """Zero random frequency bands always; zero time spans behind a
    per-utterance coin with probability ``time_apply_prob``."""
    out = mel.copy()
    t, bins = out.shape
    apply_time = rng.random() < cfg.time_apply_prob
    if apply_time:
        for _ in range(cfg.num_time_masks):
            width = int(rng.integers(0, cfg.max_time_width + 1))
            width = min(width, t)
            start = int(rng.integers(0, t - width + 1))
            out[start: start + width, :] = 0.0
    for _ in range(cfg.num_freq_masks):
        width = int(rng.integers(0, cfg.max_freq_width + 1))
        width = min(width, bins)
        start = int(rng.integers(0, bins - width + 1))
        out[:, start: start + width] = 0.0
    return out


# CTC --------------------------------------------------------------------------

def _extended_targets(targets: np.ndarray):
    ext = np.full(2 * len(targets) + 1, BLANK_ID, dtype=np.int64)
    ext[1::2] = targets
    allow_skip = np.zeros(len(ext), dtype=bool)
    allow_skip[2:] = (ext[2:] != BLANK_ID) & (ext[2:] != ext[:-2])
    return ext, allow_skip


def ctc_loss(logprobs, targets):
    """Negative log-probability of all alignments of ``targets`` in ``logprobs``.

    ``logprobs`` is (T, V) of valid log-distributions (rows sum to one in
    probability space); returns a Tensor in nats. Raises
    InfeasibleTargetError when T cannot fit the collapsed target.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise ValueError("target must be nonempty")
    if np.any(targets == BLANK_ID) or np.any(targets < 0):
        raise ValueError("targets must be positive non-blank token ids")
    lp = ad.as_tensor(logprobs)
    t_frames, vocab = lp.shape
    if np.any(targets >= vocab):
        raise ValueError("target id outside vocabulary")

    repeats = int(np.sum(targets[1:] == targets[:-1]))
    min_frames = len(targets) + repeats
    if t_frames < min_frames:
        raise InfeasibleTargetError(
            f"{t_frames} frames cannot align a target needing {min_frames}")

    ext, allow_skip = _extended_targets(targets)
    s_len = len(ext)
    start_blocked = np.ones(s_len, dtype=bool)
    start_blocked[:2] = False
    alpha = ad.where_const(start_blocked, NEG_INF, ad.take_last_axis(lp[0], ext))
    for t in range(1, t_frames):
        prev1 = ad.pad1d(alpha, 1, 0, value=NEG_INF)[:s_len]
        prev2 = ad.pad1d(alpha, 2, 0, value=NEG_INF)[:s_len]
        prev2 = ad.where_const(~allow_skip, NEG_INF, prev2)
        combined = ad.logaddexp(ad.logaddexp(alpha, prev1), prev2)
        alpha = ad.add(combined, ad.take_last_axis(lp[t], ext))

    total = ad.logaddexp(alpha[s_len - 1], alpha[s_len - 2])
    if np.isneginf(total.data):
        raise InfeasibleTargetError("no feasible alignment (zero total probability)")
    return ad.mul(total, -1.0)


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple
    log_prob: float


def greedy_decode(logprobs) -> Hypothesis:
    """Per-frame argmax, collapse repeats, drop blanks; best-path score."""
    lp = logprobs.data if isinstance(logprobs, Tensor) else np.asarray(logprobs)
    path = np.argmax(lp, axis=1)
    score = float(lp[np.arange(len(path)), path].sum())
    tokens = []
    prev = -1
    for sym in path:
        if sym != prev and sym != BLANK_ID:
            tokens.append(int(sym))
        prev = sym
    return Hypothesis(tokens=tuple(tokens), log_prob=score)


def beam_decode(logprobs, beam_width: int) -> Hypothesis:
    """CTC prefix beam search merging equivalent prefixes by log-sum-exp."""
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    lp = logprobs.data if isinstance(logprobs, Tensor) else np.asarray(logprobs)
    t_frames, vocab = lp.shape

    beams = {(): (0.0, NEG_INF)}  # prefix -> (log P ending in blank, in non-blank)
    for t in range(t_frames):
        frame = lp[t]
        new: dict = {}

        def bump(prefix, blank_part, nonblank_part):
            pb, pnb = new.get(prefix, (NEG_INF, NEG_INF))
            new[prefix] = (np.logaddexp(pb, blank_part) if blank_part != NEG_INF else pb,
                           np.logaddexp(pnb, nonblank_part) if nonblank_part != NEG_INF else pnb)

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            bump(prefix, total + frame[BLANK_ID], NEG_INF)
            if prefix:
                bump(prefix, NEG_INF, pnb + frame[prefix[-1]])  # repeat collapses
            for c in range(1, vocab):
                extended = prefix + (c,)
                if prefix and c == prefix[-1]:
                    bump(extended, NEG_INF, pb + frame[c])  # needs a blank in between
                else:
                    bump(extended, NEG_INF, total + frame[c])

        ranked = sorted(new.items(), key=lambda kv: -np.logaddexp(kv[1][0], kv[1][1]))
        beams = dict(ranked[:beam_width])

    best, (pb, pnb) = max(beams.items(), key=lambda kv: np.logaddexp(kv[1][0], kv[1][1]))
    return Hypothesis(tokens=best, log_prob=float(np.logaddexp(pb, pnb)))


# scoring -----------------------------------------------------------------------

def edit_distance(ref, hyp) -> int:
    """Levenshtein distance over arbitrary token sequences."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def _units(text: str, unit: str):
    if unit == "word":
        return text.split()
    if unit == "char":
        return list(text)
    raise ValueError(f"unit must be 'word' or 'char', got {unit!r}")


def score(refs, hyps, unit: str = "word"):
    """(aggregate error rate percent, per-pair list of (edits, ref_len))."""
    if len(refs) != len(hyps):
        raise ValueError("refs and hyps must have equal length")
    pairs = []
    edits = 0
    total = 0
    for ref, hyp in zip(refs, hyps):
        r = _units(ref, unit)
        h = _units(hyp, unit)
        d = edit_distance(r, h)
        pairs.append((d, len(r)))
        edits += d
        total += len(r)
    if total == 0:
        raise ValueError("total reference length is zero")
    return 100.0 * edits / total, pairs


# finetune loop -------------------------------------------------------------------

@dataclass
class FinetuneState:
    encoder_cfg: enc.EncoderConfig
    cfg: FinetuneConfig
    tokenizer: CharTokenizer
    params: dict                  # encoder tensors + "ctc_head.*"
    adam_encoder: pretrain.AdamState
    adam_head: pretrain.AdamState
    step: int = 0

    def encoder_params(self) -> dict:
        return {k: p for k, p in self.params.items() if not k.startswith("ctc_head.")}

    def head_params(self) -> dict:
        return {k: p for k, p in self.params.items() if k.startswith("ctc_head.")}


def init_finetune_state(checkpoint_path, cfg: FinetuneConfig,
                        tokenizer: CharTokenizer) -> FinetuneState:
    """Load every encoder tensor from a pretraining checkpoint (full restore);
    the CTC head and both optimizers start fresh."""
    header, tensors = pretrain.read_checkpoint(checkpoint_path)
    encoder_cfg = enc.EncoderConfig(**header["encoder_config"])
    arrays = {}
    for name, shape in enc.count_params(encoder_cfg)[1].items():
        if name not in tensors:
            raise pretrain.CheckpointError(f"checkpoint missing tensor {name}")
        arrays[name] = tensors[name]
    arrays["ctc_head.weight"] = enc.init_param(
        "ctc_head.weight", (encoder_cfg.hidden, tokenizer.vocab_size), cfg.seed)
    arrays["ctc_head.bias"] = np.zeros(tokenizer.vocab_size, dtype=np.float32)
    params = enc.params_to_tensors(arrays)
    state = FinetuneState(
        encoder_cfg=encoder_cfg, cfg=cfg, tokenizer=tokenizer, params=params,
        adam_encoder=pretrain.AdamState.init(
            {k: p for k, p in params.items() if not k.startswith("ctc_head.")}),
        adam_head=pretrain.AdamState.init(
            {k: p for k, p in params.items() if k.startswith("ctc_head.")}))
    return state


def _ctc_logprobs(state: FinetuneState, feats: np.ndarray, lengths: np.ndarray,
                  train: bool, rng=None):
    out = enc.encode(state.params, state.encoder_cfg, feats, lengths,
                     train=train, rng=rng)
    logits = ad.linear(out.final, state.params["ctc_head.weight"],
                       state.params["ctc_head.bias"])
    return ad.log_softmax(logits, axis=-1), out.lengths


def finetune_step(state: FinetuneState, batch, transcripts: dict,
                  epoch: int) -> dict:
    """One CTC step; encoder updates are withheld while step <= freeze_steps."""
    cfg = state.cfg
    feats = batch.features.copy()
    targets = []
    for i, utt_id in enumerate(batch.utt_ids):
        t = int(batch.lengths[i])
        rng = keyed_rng(cfg.seed, "specaug", epoch, utt_id)
        feats[i, :t] = spec_augment(batch.features[i, :t], cfg.spec_augment, rng)
        targets.append(state.tokenizer.encode(transcripts[utt_id]))

    logprobs, out_lengths = _ctc_logprobs(
        state, feats, batch.lengths, train=True,
        rng=keyed_rng(cfg.seed, "dropout", epoch, state.step))
    per_utt = []
    for i in range(len(targets)):
        try:
            per_utt.append(ctc_loss(logprobs[i, : int(out_lengths[i])], targets[i]))
        except InfeasibleTargetError as err:
            raise InfeasibleTargetError(
                f"utterance {batch.utt_ids[i]}: {err}") from None
    loss = ad.mul(per_utt[0], 1.0 / len(per_utt))
    for term in per_utt[1:]:
        loss = ad.add(loss, ad.mul(term, 1.0 / len(per_utt)))

    loss_val = loss.item()
    if not np.isfinite(loss_val):
        raise pretrain.NonFiniteLossError(f"non-finite loss at step {state.step + 1}")

    for p in state.params.values():
        p.zero_grad()
    loss.backward()
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for name, p in state.params.items()}
    pretrain.clip_global_norm(grads, cfg.grad_clip)

    state.step += 1
    frozen = state.step <= cfg.freeze_steps
    lr_head = pretrain.lr_schedule(state.step, cfg.decoder_lr, cfg.warmup_steps)
    head = state.head_params()
    pretrain.adam_step(head, {k: grads[k] for k in head}, state.adam_head,
                       lr_head, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    if not frozen:
        lr_enc = pretrain.lr_schedule(state.step, cfg.encoder_lr, cfg.warmup_steps)
        encoder_group = state.encoder_params()
        pretrain.adam_step(encoder_group, {k: grads[k] for k in encoder_group},
                           state.adam_encoder, lr_enc,
                           cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    return {"step": state.step, "loss": loss_val, "frozen": frozen,
            "lr_head": lr_head,
            "lr_encoder": 0.0 if frozen else lr_enc}


def transcribe(state: FinetuneState, feats: np.ndarray, lengths: np.ndarray,
               beam_width: int = 0) -> list:
    """Decode a padded batch to text; beam_width 0 means greedy."""
    with ad.no_grad():
        logprobs, out_lengths = _ctc_logprobs(state, feats, lengths, train=False)
    texts = []
    for i in range(feats.shape[0]):
        lp = logprobs.data[i, : int(out_lengths[i])]
        hyp = greedy_decode(lp) if beam_width < 1 else beam_decode(lp, beam_width)
        texts.append(state.tokenizer.decode(hyp.tokens))
    return texts


# finetune checkpoints --------------------------------------------------------

def save_finetune_checkpoint(state: FinetuneState, path) -> None:
    shim = pretrain.TrainState(
        encoder_cfg=state.encoder_cfg,
        cfg=pretrain.PretrainConfig(seed=state.cfg.seed),
        params=state.params,
        adam=pretrain.AdamState(
            m={**state.adam_encoder.m, **state.adam_head.m},
            v={**state.adam_encoder.v, **state.adam_head.v},
            count=state.adam_head.count),
        quantizer_state=None,
        step=state.step,
        run_config={"kind": "finetune",
                    "alphabet": state.tokenizer.alphabet,
                    "finetune_config": {**asdict(state.cfg),
                                        "spec_augment": asdict(state.cfg.spec_augment)},
                    "adam_count_encoder": state.adam_encoder.count,
                    "adam_count_head": state.adam_head.count})
    pretrain.save_checkpoint(shim, path)


def load_finetune_checkpoint(path) -> FinetuneState:
    header, tensors = pretrain.read_checkpoint(path)
    run = header.get("run_config", {})
    if run.get("kind") != "finetune":
        raise pretrain.CheckpointError(f"not a finetune checkpoint: {path}")
    encoder_cfg = enc.EncoderConfig(**header["encoder_config"])
    tokenizer = CharTokenizer(run["alphabet"])
    ft_raw = dict(run["finetune_config"])
    ft_raw["spec_augment"] = SpecAugmentConfig(**ft_raw["spec_augment"])
    cfg = FinetuneConfig(**ft_raw)
    param_names = set(enc.count_params(encoder_cfg)[1]) | {"ctc_head.weight", "ctc_head.bias"}
    params = {}
    adam_m = {}
    adam_v = {}
    for name in sorted(param_names):
        if name not in tensors:
            raise pretrain.CheckpointError(f"checkpoint missing tensor {name}")
        params[name] = Tensor(tensors[name], requires_grad=True)
        adam_m[name] = tensors.get(f"opt.m.{name}", np.zeros_like(tensors[name]))
        adam_v[name] = tensors.get(f"opt.v.{name}", np.zeros_like(tensors[name]))
    is_head = lambda k: k.startswith("ctc_head.")
    state = FinetuneState(
        encoder_cfg=encoder_cfg, cfg=cfg, tokenizer=tokenizer, params=params,
        adam_encoder=pretrain.AdamState(
            m={k: v for k, v in adam_m.items() if not is_head(k)},
            v={k: v for k, v in adam_v.items() if not is_head(k)},
            count=int(run.get("adam_count_encoder", 0))),
        adam_head=pretrain.AdamState(
            m={k: v for k, v in adam_m.items() if is_head(k)},
            v={k: v for k, v in adam_v.items() if is_head(k)},
            count=int(run.get("adam_count_head", 0))),
        step=int(header["step"]))
    return state


def read_transcripts(path) -> dict:
    """Transcript manifest: one "id<TAB>text" per line, UTF-8."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected id<TAB>text")
            utt_id, text = line.split("\t", 1)
            out[utt_id] = text
    return out
