"""CTC finetuning end to end: pretrain briefly, finetune, decode, score.

Uses a toy language where each character is a distinct tone, so a small model
can learn the mapping in a few hundred steps. Shows the freeze phase, greedy
and beam decoding, and WER/CER scoring.
"""

import tempfile
import time
from pathlib import Path

import numpy as np

from rqspeech import datapipe, encoder, finetune, frontend, masking, pretrain
from rqspeech.quantizer import QuantizerConfig

FREQS = {ch: 300.0 * (i + 1) for i, ch in enumerate("abcd")}
TEXTS = ["ab cd", "ba dc", "cad ab", "db ca"]


def speak(text):
    rng = np.random.default_rng(0)
    parts = []
    for ch in text:
        t = np.arange(2560) / 16000  # 0.16 s per character
        parts.append(0.01 * rng.standard_normal(2560) if ch == " "
                     else 0.4 * np.sin(2 * np.pi * FREQS[ch] * t))
    return np.concatenate(parts)


work = Path(tempfile.mkdtemp(prefix="rqspeech_demo_"))
corpus = work / "corpus"
corpus.mkdir()
transcripts = {}
for i, text in enumerate(TEXTS):
    frontend.write_wav(corpus / f"toy{i}.wav", speak(text), 16000)
    transcripts[f"toy{i}"] = text

index = datapipe.scan_corpus(corpus)
spec = datapipe.build_buckets(index, num_buckets=1, tokens_per_batch=1000)
enc_cfg = encoder.EncoderConfig(num_layers=2, hidden=48, ffn=96, heads=4)

# --- a short pretraining pass gives the encoder something to start from ----
pre_cfg = pretrain.PretrainConfig(
    peak_lr=2e-3, warmup_steps=50, total_steps=150, seed=0,
    mask=masking.MaskConfig(), quantizer=QuantizerConfig(2, 512, 16))
state = pretrain.init_train_state(enc_cfg, pre_cfg)
epoch = 0
while state.step < pre_cfg.total_steps:
    for batch in datapipe.iter_epoch(spec, index, 0, epoch):
        m = pretrain.train_step(state, batch, epoch)
        if m and m.step >= pre_cfg.total_steps:
            break
    epoch += 1
ckpt = work / "pretrained.msec"
pretrain.save_checkpoint(state, ckpt)
print(f"pretrained {state.step} steps -> {ckpt.name}")

# --- finetune with CTC -------------------------------------------------------
tok = finetune.CharTokenizer.from_texts(TEXTS)
print(f"tokenizer alphabet: {tok.alphabet!r} (+ blank), vocab {tok.vocab_size}")
ft_cfg = finetune.FinetuneConfig(encoder_lr=1e-3, decoder_lr=5e-3,
                                 warmup_steps=50, freeze_steps=40, seed=1)
ft = finetune.init_finetune_state(ckpt, ft_cfg, tok)

start = time.monotonic()
epoch = 0
while ft.step < 400:
    for batch in datapipe.iter_epoch(spec, index, ft_cfg.seed, epoch):
        m = finetune.finetune_step(ft, batch, transcripts, epoch)
        if m["step"] % 100 == 0:
            print(f"step {m['step']:3d}  ctc loss {m['loss']:7.3f}  "
                  f"encoder {'frozen' if m['frozen'] else 'training'}")
        if m["step"] >= 400:
            break
    epoch += 1
print(f"finetuned in {time.monotonic() - start:.0f}s")

# --- decode and score --------------------------------------------------------
refs, greedy_hyps, beam_hyps = [], [], []
for batch in datapipe.iter_epoch(spec, index, 0, epoch=999):
    refs.extend(transcripts[u] for u in batch.utt_ids)
    greedy_hyps.extend(finetune.transcribe(ft, batch.features, batch.lengths))
    beam_hyps.extend(finetune.transcribe(ft, batch.features, batch.lengths, beam_width=8))

for ref, hyp in zip(refs, greedy_hyps):
    print(f"  ref {ref!r:12} -> hyp {hyp!r}")
wer, _ = finetune.score(refs, greedy_hyps, unit="word")
cer, _ = finetune.score(refs, greedy_hyps, unit="char")
beam_cer, _ = finetune.score(refs, beam_hyps, unit="char")
print(f"greedy: WER {wer:.1f}%  CER {cer:.1f}%   beam-8 CER {beam_cer:.1f}%")
