"""Walk through the audio frontend: WAV files, resampling, log-Mel features.

Synthesizes a tone, writes it as 16-bit PCM, reads it back, resamples it, and
computes the log-Mel matrix the rest of the pipeline consumes.
"""

import tempfile
from pathlib import Path

import numpy as np

from rqspeech import frontend

workdir = Path(tempfile.mkdtemp(prefix="rqspeech_demo_"))

# --- write and read a WAV -------------------------------------------------
rate = 8000
t = np.arange(rate) / rate  # one second
tone = 0.5 * np.sin(2 * np.pi * 440.0 * t)
wav_path = workdir / "tone.wav"
frontend.write_wav(wav_path, tone, rate)

w = frontend.load_audio(wav_path)
print(f"loaded {wav_path.name}: {len(w.samples)} samples at {w.sample_rate} Hz "
      f"({w.duration:.2f} s)")

# --- resample to the 16 kHz analysis rate ----------------------------------
w16 = frontend.resample(w, 16000)
print(f"resampled to {w16.sample_rate} Hz: {len(w16.samples)} samples")

spectrum = np.abs(np.fft.rfft(w16.samples))
peak_hz = np.argmax(spectrum) * 16000 / len(w16.samples)
print(f"spectral peak after resampling: {peak_hz:.1f} Hz (expected 440)")

# --- log-Mel features -------------------------------------------------------
mel = frontend.log_mel(w16)
print(f"log-Mel shape: {mel.shape} (frames x bins), "
      f"expected frames = 1 + (samples - 400)//160 = {frontend.num_frames(len(w16.samples))}")
print(f"value range: [{mel.min():.2f}, {mel.max():.2f}] nats")

silence = frontend.log_mel(frontend.Waveform(np.zeros(1600), 16000))
print(f"silence maps to the log floor: {silence[0, 0]:.4f} = ln(1e-10) = {np.log(1e-10):.4f}")

loud = frontend.log_mel(frontend.Waveform(2 * w16.samples, 16000))
shift = np.median(loud - mel)
print(f"doubling amplitude shifts log-Mel by {shift:.4f} (ln 4 = {np.log(4):.4f})")
