"""Self-supervised training loop: masked multi-softmax prediction.

The loop wires the other modules together: clean features produce frozen
labels (quantizer), a masked copy of the features feeds the encoder, and a
linear head over the stack-final state predicts, per codebook, the label of
every masked 40 ms frame. Adam with an inverse-square-root schedule, global
gradient-norm clipping at 1.0, and no weight decay.

Checkpoints (format "MSEC") carry every named tensor (encoder + head + Adam
moments), the step counter, and the run configuration. Three load modes:
``full`` restores everything, ``feature_extractor_only`` restores just the
``extractor.*`` tensors, ``none`` restores nothing. The quantizer is always
rebuilt from the seed and config of the *current* run.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import masking
from . import quantizer as quant
from .autodiff import Tensor
from .seeding import keyed_rng

CHECKPOINT_MAGIC = b"MSEC"
CHECKPOINT_VERSION = 1
LOAD_MODES = ("full", "feature_extractor_only", "none")


class CheckpointError(ValueError):
    """Version, magic, or tensor-shape mismatch while loading a checkpoint."""


class NonFiniteLossError(FloatingPointError):
    """Training step produced a non-finite loss; parameters were not updated."""


@dataclass(frozen=True)
class PretrainConfig:
    peak_lr: float = 8e-4
    warmup_steps: int = 4000
    total_steps: int = 100000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    mask: masking.MaskConfig = field(default_factory=masking.MaskConfig)
    quantizer: quant.QuantizerConfig = field(default_factory=quant.QuantizerConfig)

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")


@dataclass
class StepMetrics:
    step: int
    loss: float
    learning_rate: float
    masked_label_frames: int
    codebook_utilization: float


def lr_schedule(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear warmup to the peak, then inverse-square-root decay."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return float(peak_lr * min(step / warmup_steps, np.sqrt(warmup_steps / step)))


def multi_softmax_loss(logits, labels: np.ndarray, target_mask: np.ndarray):
    """Mean cross-entropy over (masked label frame, codebook) pairs, in nats.

    ``logits`` is (L, N, V) for one utterance (array or Tensor); only rows
    where ``target_mask`` is True contribute. Returns a Tensor so the loss can
    be differentiated; use ``.item()`` for the scalar value.
    """
    labels = np.asarray(labels)
    target_mask = np.asarray(target_mask, dtype=bool)
    logits = ad.as_tensor(logits)
    l, n, v = logits.shape
    if labels.shape != (l, n):
        raise ValueError(f"labels shape {labels.shape} does not match logits {(l, n)}")
    if target_mask.shape != (l,):
        raise ValueError(f"target_mask length {target_mask.shape} != {l}")
    if not target_mask.any():
        raise ValueError("no target positions; caller should skip this utterance")

    idx = np.flatnonzero(target_mask)
    picked = ad.take_rows(ad.reshape(logits, (l, n * v)), idx)
    picked = ad.reshape(picked, (len(idx), n, v))
    return _nll_mean(picked, labels[idx])


def _nll_mean(logits: Tensor, labels: np.ndarray) -> Tensor:
    """-mean log softmax(logits)[label] over all (row, codebook) pairs."""
    return ad.cross_entropy_mean(logits, labels)


def codebook_utilization(labels: np.ndarray, num_codebooks: int, vocab_size: int) -> float:
    """Fraction of (codebook, codeword) pairs observed in a label window."""
    labels = np.asarray(labels).reshape(-1, num_codebooks)
    if labels.size == 0:
        raise ValueError("need at least one label")
    distinct = 0
    for j in range(num_codebooks):
        distinct += np.unique(labels[:, j]).size
    return distinct / (num_codebooks * vocab_size)


# optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    count: int = 0

    @staticmethod
    def init(params: dict) -> "AdamState":
        return AdamState(m={k: np.zeros_like(p.data) for k, p in params.items()},
                         v={k: np.zeros_like(p.data) for k, p in params.items()})


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float, beta2: float, eps: float) -> None:
    """One Adam update (bias-corrected, no weight decay) in place."""
    state.count += 1
    t = state.count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


# training state --------------------------------------------------------------

@dataclass
class TrainState:
    encoder_cfg: enc.EncoderConfig
    cfg: PretrainConfig
    params: dict               # name -> Tensor (encoder + "head.*")
    adam: AdamState
    quantizer_state: quant.QuantizerState
    step: int = 0
    label_cache: dict = field(default_factory=dict)
    run_config: dict = field(default_factory=dict)


def init_head_params(encoder_cfg: enc.EncoderConfig, qcfg: quant.QuantizerConfig,
                     seed: int, dtype=np.float32) -> dict:
    n_out = qcfg.num_codebooks * qcfg.vocab_size
    return {
        "head.weight": enc.init_param("head.weight", (encoder_cfg.hidden, n_out), seed, dtype),
        "head.bias": np.zeros(n_out, dtype=dtype),
    }


def init_train_state(encoder_cfg: enc.EncoderConfig, cfg: PretrainConfig,
                     run_config: dict | None = None, dtype=np.float32) -> TrainState:
    arrays = enc.init_encoder_params(encoder_cfg, cfg.seed, dtype)
    arrays.update(init_head_params(encoder_cfg, cfg.quantizer, cfg.seed, dtype))
    params = enc.params_to_tensors(arrays)
    return TrainState(encoder_cfg=encoder_cfg, cfg=cfg, params=params,
                      adam=AdamState.init(params),
                      quantizer_state=quant.init_quantizer(cfg.seed, cfg.quantizer),
                      run_config=dict(run_config or {}))


def _labels_for(state: TrainState, utt_id: str, mel: np.ndarray,
                cropped: bool) -> np.ndarray:
    """Frozen labels for one utterance; cached when the crop cannot vary."""
    if not cropped and utt_id in state.label_cache:
        return state.label_cache[utt_id]
    labels = quant.labels_for_mel(state.quantizer_state, mel)
    if not cropped:
        state.label_cache[utt_id] = labels
    return labels


def prepare_masked_batch(state: TrainState, batch, epoch: int):
    """Per-utterance labels and mask plans, plus the noise-substituted features.

    Mask and noise streams are keyed by (seed, epoch, utterance id), so the
    result is independent of batch composition and worker scheduling.
    """
    feats = batch.features.copy()
    plans = []
    labels = []
    for i, utt_id in enumerate(batch.utt_ids):
        t = int(batch.lengths[i])
        mel = batch.features[i, :t]
        labels.append(_labels_for(state, utt_id, mel, bool(batch.cropped[i])))
        rng = keyed_rng(state.cfg.seed, "mask", epoch, utt_id)
        plan = masking.sample_mask(t, state.cfg.mask, rng)
        noise_rng = keyed_rng(state.cfg.seed, "noise", epoch, utt_id)
        feats[i, :t] = masking.apply_mask(mel, plan, state.cfg.mask, noise_rng)
        plans.append(plan)
    return feats, plans, labels


def train_step(state: TrainState, batch, epoch: int) -> StepMetrics | None:
    """One optimization step; returns None when the batch has no target frames."""
    cfg = state.cfg
    qcfg = cfg.quantizer
    feats, plans, labels = prepare_masked_batch(state, batch, epoch)

    label_lengths = batch.lengths // 4
    flat_rows = []   # row index into the flattened (B * Lmax) state matrix
    flat_labels = []
    l_max = feats.shape[1] // 4
    for i, plan in enumerate(plans):
        positions = np.flatnonzero(plan.target_mask)
        flat_rows.append(positions + i * l_max)
        flat_labels.append(labels[i][positions])
    flat_rows = np.concatenate(flat_rows)
    if flat_rows.size == 0:
        return None
    flat_labels = np.concatenate(flat_labels)

    out = enc.encode(state.params, state.encoder_cfg, feats, batch.lengths,
                     train=True, rng=keyed_rng(cfg.seed, "dropout", epoch, state.step))
    b, l_out, h = out.final.shape
    assert l_out == l_max and np.array_equal(out.lengths, label_lengths)

    rows = ad.take_rows(ad.reshape(out.final, (b * l_out, h)), flat_rows)
    logits = ad.linear(rows, state.params["head.weight"], state.params["head.bias"])
    logits = ad.reshape(logits, (flat_rows.size, qcfg.num_codebooks, qcfg.vocab_size))
    loss = _nll_mean(logits, flat_labels)

    loss_val = loss.item()
    if not np.isfinite(loss_val):
        raise NonFiniteLossError(f"non-finite loss at step {state.step + 1}: {loss_val}")

    for p in state.params.values():
        p.zero_grad()
    loss.backward()
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for name, p in state.params.items()}
    clip_global_norm(grads, cfg.grad_clip)

    state.step += 1
    lr = lr_schedule(state.step, cfg.peak_lr, cfg.warmup_steps)
    adam_step(state.params, grads, state.adam, lr,
              cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    return StepMetrics(
        step=state.step, loss=loss_val, learning_rate=lr,
        masked_label_frames=int(flat_rows.size),
        codebook_utilization=codebook_utilization(flat_labels, qcfg.num_codebooks,
                                                  qcfg.vocab_size))


# checkpoint I/O --------------------------------------------------------------

def _state_tensors(state: TrainState) -> dict:
    tensors = {name: p.data for name, p in state.params.items()}
    tensors.update({f"opt.m.{k}": v for k, v in state.adam.m.items()})
    tensors.update({f"opt.v.{k}": v for k, v in state.adam.v.items()})
    return tensors


def save_checkpoint(state: TrainState, path) -> None:
    """Write magic, version, length-prefixed JSON header, then f32 tensor data."""
    tensors = _state_tensors(state)
    entries = []
    offset = 0
    for name in sorted(tensors):
        shape = list(tensors[name].shape)
        entries.append({"name": name, "shape": shape, "offset": offset})
        offset += int(np.prod(shape)) * 4
    header = {
        "format_version": CHECKPOINT_VERSION,
        "step": state.step,
        "adam_count": state.adam.count,
        "encoder_config": state.encoder_cfg.to_dict(),
        "quantizer": ({"seed": state.quantizer_state.seed, **asdict(state.cfg.quantizer)}
                      if state.quantizer_state is not None else None),
        "run_config": state.run_config,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for entry in entries:
            f.write(tensors[entry["name"]].astype("<f4").tobytes())


def read_checkpoint(path):
    """(header dict, {name: float32 array}) from an MSEC file."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"no such checkpoint: {path}") from None
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"corrupt checkpoint: {path} (bad magic)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported "
                              f"(expected {CHECKPOINT_VERSION})")
    if len(raw) < 12 + header_len:
        raise CheckpointError(f"corrupt checkpoint: {path} (truncated header)")
    try:
        header = json.loads(raw[12: 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"corrupt checkpoint: {path} (bad header)") from None
    data = raw[12 + header_len:]
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        end = start + count * 4
        if end > len(data):
            raise CheckpointError(f"corrupt checkpoint: {path} (truncated data)")
        tensors[entry["name"]] = np.frombuffer(data[start:end], dtype="<f4") \
            .reshape(entry["shape"]).copy()
    return header, tensors


def load_checkpoint(path, mode: str, encoder_cfg: enc.EncoderConfig,
                    cfg: PretrainConfig, run_config: dict | None = None) -> TrainState:
    """Build a TrainState from a checkpoint under one of the three init modes.

    The quantizer always comes from ``cfg`` (seed and config of the current
    run); a continued run may deliberately pick a new quantizer seed.
    """
    if mode not in LOAD_MODES:
        raise ValueError(f"unknown load mode: {mode!r} (expected one of {LOAD_MODES})")
    state = init_train_state(encoder_cfg, cfg, run_config)
    if mode == "none":
        return state

    header, tensors = read_checkpoint(path)

    def restore(name: str, target: np.ndarray) -> np.ndarray:
        if name not in tensors:
            raise CheckpointError(f"checkpoint missing tensor {name}")
        arr = tensors[name]
        if arr.shape != target.shape:
            raise CheckpointError(
                f"shape mismatch for tensor {name}: checkpoint {arr.shape}, "
                f"config {target.shape}")
        return arr.astype(target.dtype)

    if mode == "feature_extractor_only":
        for name, p in state.params.items():
            if name.startswith("extractor."):
                p.data = restore(name, p.data)
        return state

    for name, p in state.params.items():
        p.data = restore(name, p.data)
    for name in state.adam.m:
        state.adam.m[name] = restore(f"opt.m.{name}", state.adam.m[name])
        state.adam.v[name] = restore(f"opt.v.{name}", state.adam.v[name])
    state.step = int(header["step"])
    state.adam.count = int(header.get("adam_count", header["step"]))
    return state


class MetricsWriter:
    """Appends one CSV row per training step."""

    FIELDS = ("step", "loss", "lr", "masked_frames", "utilization")

    def __init__(self, path):
        self.path = Path(path)
        new_file = not self.path.exists()
        self._f = open(self.path, "a", newline="")
        self._w = csv.writer(self._f)
        if new_file:
            self._w.writerow(self.FIELDS)

    def write(self, m: StepMetrics) -> None:
        self._w.writerow([m.step, f"{m.loss:.6f}", f"{m.learning_rate:.8f}",
                          m.masked_label_frames, f"{m.codebook_utilization:.6f}"])
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
