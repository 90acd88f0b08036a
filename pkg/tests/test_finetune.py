import itertools

import numpy as np
import pytest

from rqspeech import encoder as enc
from rqspeech import finetune, pretrain
from rqspeech.quantizer import QuantizerConfig
from rqspeech.autodiff import Tensor
from rqspeech.datapipe import Batch
from rqspeech.finetune import (BLANK_ID, CharTokenizer, FinetuneConfig,
                               InfeasibleTargetError, SpecAugmentConfig, beam_decode,
                               ctc_loss, edit_distance, greedy_decode, score,
                               spec_augment)
from rqspeech.seeding import keyed_rng

TINY_ENC = enc.EncoderConfig(num_layers=1, hidden=16, ffn=32, heads=2, dropout=0.0)


def random_logprobs(rng, t, v):
    x = rng.standard_normal((t, v))
    x = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
    return x


def collapse(path):
    out = []
    prev = -1
    for sym in path:
        if sym != prev and sym != BLANK_ID:
            out.append(sym)
        prev = sym
    return tuple(out)


def enumerate_output_probs(logprobs):
    """Exhaustive oracle: probability of every collapsed output."""
    t, v = logprobs.shape
    table = {}
    for path in itertools.product(range(v), repeat=t):
        p = np.exp(sum(logprobs[i, sym] for i, sym in enumerate(path)))
        key = collapse(path)
        table[key] = table.get(key, 0.0) + p
    return table


class TestTokenizer:
    def test_round_trip_and_blank(self):
        tok = CharTokenizer.from_texts(["hello", "world"])
        ids = tok.encode("hello world")
        assert BLANK_ID not in ids
        assert tok.decode(ids) == "hello world"

    def test_space_always_included(self):
        tok = CharTokenizer.from_texts(["ab"])
        assert " " in tok.alphabet

    def test_unknown_char_rejected(self):
        tok = CharTokenizer("ab")
        with pytest.raises(ValueError, match="alphabet"):
            tok.encode("abc")

    def test_vocab_size_counts_blank(self):
        assert CharTokenizer("abc").vocab_size == 4


class TestCtcLoss:
    def test_single_frame_uniform(self):
        lp = np.log(np.full((1, 2), 0.5))
        loss = ctc_loss(lp, [1]).item()
        assert abs(loss - np.log(2)) < 1e-9

    def test_repeat_needs_blank(self):
        lp = np.log(np.full((2, 2), 0.5))
        with pytest.raises(InfeasibleTargetError):
            ctc_loss(lp, [1, 1])

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            t = int(rng.integers(2, 7))
            v = int(rng.integers(2, 5))
            lp = random_logprobs(rng, t, v)
            table = enumerate_output_probs(lp)
            targets = [k for k in table if 1 <= len(k) <= 3]
            for target in targets[:10]:
                reps = sum(a == b for a, b in zip(target, target[1:]))
                if t < len(target) + reps:
                    continue
                got = ctc_loss(lp, list(target)).item()
                assert abs(got - (-np.log(table[target]))) < 1e-9

    def test_probability_conservation(self):
        rng = np.random.default_rng(1)
        lp = random_logprobs(rng, 4, 3)
        table = enumerate_output_probs(lp)
        assert abs(sum(table.values()) - 1.0) < 1e-9
        total = np.exp(np.sum(lp[:, BLANK_ID]))  # empty output
        for target in table:
            if target:
                total += np.exp(-ctc_loss(lp, list(target)).item())
        assert abs(total - 1.0) < 1e-6

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        logits = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
        target = [1, 2, 1]
        from rqspeech import autodiff as ad

        def loss_of():
            return ctc_loss(ad.log_softmax(logits, axis=-1), target)

        loss_of().backward()
        g = logits.grad.copy()
        step = 1e-6
        flat = logits.data.reshape(-1)
        for i in rng.choice(flat.size, 8, replace=False):
            saved = flat[i]
            flat[i] = saved + step
            with ad.no_grad():
                hi = loss_of().item()
            flat[i] = saved - step
            with ad.no_grad():
                lo = loss_of().item()
            flat[i] = saved
            assert abs(g.reshape(-1)[i] - (hi - lo) / (2 * step)) < 1e-6

    def test_blank_in_target_rejected(self):
        with pytest.raises(ValueError, match="non-blank"):
            ctc_loss(np.zeros((3, 3)), [0, 1])

    def test_empty_target_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            ctc_loss(np.zeros((3, 3)), [])


class TestGreedyDecode:
    def test_collapse_rule(self):
        # frames argmax: blank, a, a, blank, b  (a=1, b=2)
        lp = np.log(np.full((5, 3), 0.1))
        for t, sym in enumerate([0, 1, 1, 0, 2]):
            lp[t, sym] = np.log(0.8)
        assert greedy_decode(lp).tokens == (1, 2)

    def test_all_blank_empty(self):
        lp = np.zeros((4, 3))
        lp[:, 0] = 5.0
        hyp = greedy_decode(lp)
        assert hyp.tokens == ()

    def test_blank_separates_repeats(self):
        lp = np.log(np.full((3, 2), 0.1))
        for t, sym in enumerate([1, 0, 1]):
            lp[t, sym] = np.log(0.9)
        assert greedy_decode(lp).tokens == (1, 1)

    def test_invariant_under_per_frame_rescaling(self):
        rng = np.random.default_rng(3)
        lp = random_logprobs(rng, 10, 5)
        scaled = lp + rng.uniform(0.1, 2.0, size=(10, 1))
        assert greedy_decode(lp).tokens == greedy_decode(scaled).tokens

    def test_log_prob_nonpositive(self):
        rng = np.random.default_rng(4)
        hyp = greedy_decode(random_logprobs(rng, 6, 4))
        assert hyp.log_prob <= 0.0


class TestBeamDecode:
    def test_beam_one_on_peaked_equals_greedy(self):
        rng = np.random.default_rng(5)
        lp = random_logprobs(rng, 6, 4) * 20  # peaked after renorm
        lp = lp - np.log(np.exp(lp).sum(axis=1, keepdims=True))
        assert beam_decode(lp, 1).tokens == greedy_decode(lp).tokens

    def test_matches_exhaustive_best_output(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            lp = random_logprobs(rng, 4, 3)
            table = enumerate_output_probs(lp)
            best = max(table.items(), key=lambda kv: kv[1])
            hyp = beam_decode(lp, 64)
            assert hyp.tokens == best[0]
            assert abs(np.exp(hyp.log_prob) - best[1]) < 1e-9

    def test_monotone_in_beam_width(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            lp = random_logprobs(rng, 6, 4)
            scores = [beam_decode(lp, w).log_prob for w in (1, 2, 4, 8)]
            assert all(b >= a - 1e-12 for a, b in zip(scores, scores[1:]))

    def test_rejects_zero_width(self):
        with pytest.raises(ValueError):
            beam_decode(np.zeros((2, 2)), 0)


class TestScore:
    def test_identical(self):
        rate, _ = score(["a b c"], ["a b c"])
        assert rate == 0.0

    def test_one_deletion(self):
        rate, pairs = score(["a b c"], ["a c"])
        assert rate == pytest.approx(100.0 / 3)
        assert pairs == [(1, 3)]

    def test_empty_hypothesis(self):
        rate, _ = score(["w x y z"], [""])
        assert rate == 100.0

    def test_char_unit(self):
        rate, _ = score(["abc"], ["axc"], unit="char")
        assert rate == pytest.approx(100.0 / 3)

    def test_zero_reference_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            score([""], [""])

    def test_edit_distance_symmetric_cases(self):
        assert edit_distance("kitten", "sitting") == 3
        assert edit_distance([], [1, 2]) == 2


class TestSpecAugment:
    def test_zero_widths_identity(self):
        cfg = SpecAugmentConfig(max_time_width=0, max_freq_width=0, time_apply_prob=1.0)
        rng = np.random.default_rng(0)
        mel = rng.standard_normal((50, 80)).astype(np.float32)
        out = spec_augment(mel, cfg, keyed_rng(0, "sa"))
        assert np.array_equal(out, mel)

    def test_freq_band_zeroed_others_untouched(self):
        cfg = SpecAugmentConfig(num_time_masks=0, time_apply_prob=0.0,
                                num_freq_masks=1, max_freq_width=27)
        rng = np.random.default_rng(1)
        mel = np.abs(rng.standard_normal((40, 80))).astype(np.float32) + 0.5
        out = spec_augment(mel, cfg, keyed_rng(3, "sa"))
        zero_cols = np.flatnonzero((out == 0).all(axis=0))
        if zero_cols.size:
            assert np.array_equal(zero_cols, np.arange(zero_cols[0], zero_cols[-1] + 1))
        touched = np.ones(80, bool)
        touched[zero_cols] = False
        assert np.array_equal(out[:, touched], mel[:, touched])

    def test_time_gate_frequency(self):
        cfg = SpecAugmentConfig()
        rng = np.random.default_rng(2)
        mel = np.abs(rng.standard_normal((60, 80))) + 0.5
        hits = 0
        trials = 10000
        for seed in range(trials):
            out = spec_augment(mel, cfg, keyed_rng(seed, "gate"))
            if (out == 0).all(axis=1).any():  # some frame fully zeroed
                hits += 1
        assert abs(hits / trials - 0.2) < 0.01


def char_pattern(ch):
    rng = keyed_rng(99, "charpat", ch)
    return rng.normal(0.0, 1.0, size=80).astype(np.float32)


def synth_batch(texts, frames_per_char=12):
    """Mel-space toy corpus: each character is a distinctive 12-frame block."""
    t_max = max(len(t) for t in texts) * frames_per_char
    feats = np.zeros((len(texts), t_max, 80), dtype=np.float32)
    lengths = np.zeros(len(texts), dtype=np.int64)
    ids = []
    for i, text in enumerate(texts):
        for k, ch in enumerate(text):
            feats[i, k * frames_per_char: (k + 1) * frames_per_char] = char_pattern(ch)
        lengths[i] = len(text) * frames_per_char
        ids.append(f"toy{i}")
    return Batch(features=feats, lengths=lengths, utt_ids=ids, epoch=0, bucket_id=0)


@pytest.fixture(scope="module")
def pretrained_ckpt(tmp_path_factory):
    """A small random-init checkpoint standing in for a pretrained encoder."""
    path = tmp_path_factory.mktemp("ft") / "enc.msec"
    state = pretrain.init_train_state(
        TINY_ENC, pretrain.PretrainConfig(
            seed=0, quantizer=QuantizerConfig(num_codebooks=1, vocab_size=8, dim=4)))
    pretrain.save_checkpoint(state, path)
    return path


class TestFinetuneLoop:
    def make_state(self, ckpt, texts, freeze_steps=2):
        tok = CharTokenizer.from_texts(texts)
        cfg = FinetuneConfig(encoder_lr=1e-3, decoder_lr=5e-3, warmup_steps=10,
                             freeze_steps=freeze_steps, seed=1,
                             spec_augment=SpecAugmentConfig(time_apply_prob=0.0,
                                                            max_freq_width=0))
        return finetune.init_finetune_state(ckpt, cfg, tok)

    def test_encoder_frozen_then_released(self, pretrained_ckpt):
        texts = ["ab", "ba", "aab"]
        state = self.make_state(pretrained_ckpt, texts, freeze_steps=2)
        batch = synth_batch(texts)
        transcripts = dict(zip(batch.utt_ids, texts))
        frozen_hash = {k: p.data.tobytes() for k, p in state.encoder_params().items()}
        head_before = state.params["ctc_head.weight"].data.copy()

        m1 = finetune.finetune_step(state, batch, transcripts, epoch=0)
        assert m1["frozen"]
        for k, p in state.encoder_params().items():
            assert p.data.tobytes() == frozen_hash[k]
        assert not np.array_equal(state.params["ctc_head.weight"].data, head_before)

        finetune.finetune_step(state, batch, transcripts, epoch=0)
        m3 = finetune.finetune_step(state, batch, transcripts, epoch=0)
        assert not m3["frozen"]
        changed = any(p.data.tobytes() != frozen_hash[k]
                      for k, p in state.encoder_params().items())
        assert changed

    def test_loss_decreases(self, pretrained_ckpt):
        texts = ["ab", "ba"]
        state = self.make_state(pretrained_ckpt, texts, freeze_steps=0)
        batch = synth_batch(texts)
        transcripts = dict(zip(batch.utt_ids, texts))
        losses = [finetune.finetune_step(state, batch, transcripts, epoch=0)["loss"]
                  for _ in range(50)]
        assert np.mean(losses[-5:]) < losses[0]

    def test_transcribe_shapes(self, pretrained_ckpt):
        texts = ["ab", "ba"]
        state = self.make_state(pretrained_ckpt, texts)
        batch = synth_batch(texts)
        out = finetune.transcribe(state, batch.features, batch.lengths)
        assert len(out) == 2
        out_beam = finetune.transcribe(state, batch.features, batch.lengths, beam_width=4)
        assert len(out_beam) == 2

    def test_checkpoint_round_trip(self, pretrained_ckpt, tmp_path):
        texts = ["ab", "ba"]
        state = self.make_state(pretrained_ckpt, texts, freeze_steps=0)
        batch = synth_batch(texts)
        transcripts = dict(zip(batch.utt_ids, texts))
        for _ in range(3):
            finetune.finetune_step(state, batch, transcripts, epoch=0)
        path = tmp_path / "ft.msec"
        finetune.save_finetune_checkpoint(state, path)
        loaded = finetune.load_finetune_checkpoint(path)
        assert loaded.step == state.step
        assert loaded.tokenizer.alphabet == state.tokenizer.alphabet
        a = finetune.transcribe(state, batch.features, batch.lengths)
        b = finetune.transcribe(loaded, batch.features, batch.lengths)
        assert a == b
        # continuing training from the restored state is identical
        ma = finetune.finetune_step(state, batch, transcripts, epoch=1)
        mb = finetune.finetune_step(loaded, batch, transcripts, epoch=1)
        assert ma["loss"] == pytest.approx(mb["loss"], rel=1e-6)


class TestTranscriptManifest:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "trans.tsv"
        path.write_text("u1\thello there\nu2\tok\n", encoding="utf-8")
        got = finetune.read_transcripts(path)
        assert got == {"u1": "hello there", "u2": "ok"}

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("no-tab-here\n")
        with pytest.raises(ValueError, match="id<TAB>text"):
            finetune.read_transcripts(path)
