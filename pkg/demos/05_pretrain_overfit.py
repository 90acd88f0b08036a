"""A miniature self-supervised run: watch the masked-prediction loss fall.

Builds a small chirp corpus, then trains a tiny encoder to predict frozen
quantizer labels at masked positions. Loss starts at ln(vocab) and drops as
the model memorizes the corpus. Takes about half a minute on a laptop.
"""

import tempfile
import time
from pathlib import Path

import numpy as np

from rqspeech import datapipe, encoder, frontend, masking, pretrain
from rqspeech.quantizer import QuantizerConfig

root = Path(tempfile.mkdtemp(prefix="rqspeech_demo_")) / "corpus"
root.mkdir()
rng = np.random.default_rng(5)
for i in range(8):
    dur = 1.0 + i / 7.0
    n = int(dur * 16000)
    t = np.arange(n) / 16000
    x = sum(0.2 * np.sin(2 * np.pi * (f0 * t + (f1 - f0) * t**2 / (2 * dur)))
            for f0, f1 in rng.uniform(200, 3000, (3, 2)))
    frontend.write_wav(root / f"utt{i}.wav", np.clip(x, -0.99, 0.99), 16000)

index = datapipe.scan_corpus(root)
spec = datapipe.build_buckets(index, num_buckets=2, tokens_per_batch=600)
print(f"corpus: {len(index)} utterances, buckets "
      f"{[(b.max_frames, b.batch_size) for b in spec.buckets]}")

cfg = pretrain.PretrainConfig(
    peak_lr=2e-3, warmup_steps=50, total_steps=300, seed=0,
    mask=masking.MaskConfig(prob=0.4, span_frames=40),
    quantizer=QuantizerConfig(num_codebooks=2, vocab_size=512, dim=16))
enc_cfg = encoder.EncoderConfig(num_layers=2, hidden=48, ffn=96, heads=4)
state = pretrain.init_train_state(enc_cfg, cfg)
print(f"initial loss should sit near ln({cfg.quantizer.vocab_size}) = "
      f"{np.log(cfg.quantizer.vocab_size):.3f}")

start = time.monotonic()
epoch = 0
while state.step < cfg.total_steps:
    for batch in datapipe.iter_epoch(spec, index, cfg.seed, epoch):
        metrics = pretrain.train_step(state, batch, epoch)
        if metrics and metrics.step % 50 == 0:
            print(f"step {metrics.step:4d}  loss {metrics.loss:6.3f}  "
                  f"lr {metrics.learning_rate:.2e}  "
                  f"masked frames {metrics.masked_label_frames:3d}  "
                  f"codebook use {metrics.codebook_utilization:.3f}")
        if metrics and metrics.step >= cfg.total_steps:
            break
    epoch += 1
print(f"done in {time.monotonic() - start:.0f}s over {epoch} epochs")

ckpt = root.parent / "demo.msec"
pretrain.save_checkpoint(state, ckpt)
reloaded = pretrain.load_checkpoint(ckpt, "full", enc_cfg, cfg)
print(f"checkpoint saved ({ckpt.stat().st_size // 1024} KiB), "
      f"restored at step {reloaded.step}")
