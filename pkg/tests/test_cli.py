import numpy as np
import pytest

from rqspeech import config as cfgmod
from rqspeech import datapipe, finetune, frontend, pretrain, quantizer
from rqspeech.cli import main

from conftest import make_speechlike


def write_corpus(root, durations, seed=0):
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i, seconds in enumerate(durations):
        frontend.write_wav(root / f"utt{i:02d}.wav", make_speechlike(rng, seconds), 16000)


def write_pretrain_config(path, corpus, out_dir, seed=3, total_steps=4,
                          label_cache_dir=""):
    path.write_text(f"""
[run]
seed = {seed}
output_dir = {out_dir}

[corpus]
root = {corpus}

[encoder]
num_layers = 1
hidden = 16
ffn = 32
heads = 2

[quantizer]
num_codebooks = 2
vocab_size = 32
dim = 4

[masking]
prob = 0.4
span_frames = 10

[pretrain]
peak_lr = 1e-3
warmup_steps = 2
total_steps = {total_steps}
checkpoint_every = 2
label_cache_dir = {label_cache_dir}

[datapipe]
num_buckets = 2
tokens_per_batch = 400
""", encoding="utf-8")


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[run]\nseeed = 3\n")
        with pytest.raises(cfgmod.ConfigError, match="run.seeed"):
            cfgmod.load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[training]\nx = 1\n")
        with pytest.raises(cfgmod.ConfigError, match="training"):
            cfgmod.load_config(path)

    def test_type_error_names_key(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[encoder]\nhidden = lots\n")
        with pytest.raises(cfgmod.ConfigError, match="encoder.hidden"):
            cfgmod.load_config(path)

    def test_effective_config_round_trips(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[run]\nseed = 7\n[encoder]\ndropout = 0.1\n")
        cfg = cfgmod.load_config(path)
        out = tmp_path / "effective.ini"
        cfgmod.write_config(cfg, out)
        again = cfgmod.load_config(out)
        assert again.values == cfg.values

    def test_seed_env_override(self, tmp_path, monkeypatch):
        path = tmp_path / "c.ini"
        path.write_text("[run]\nseed = 7\n")
        monkeypatch.setenv(cfgmod.SEED_ENV_VAR, "42")
        assert cfgmod.load_config(path).seed == 42


class TestPretrainCommand:
    def test_missing_corpus_root_exit_2(self, tmp_path, capsys):
        path = tmp_path / "c.ini"
        path.write_text("[run]\noutput_dir = out\n")
        assert main(["pretrain", "--config", str(path)]) == 2
        assert 'corpus.root' in capsys.readouterr().err

    def test_init_mode_requires_init_from(self, tmp_path, capsys):
        corpus = tmp_path / "corpus"
        write_corpus(corpus, [0.6])
        path = tmp_path / "c.ini"
        write_pretrain_config(path, corpus, tmp_path / "out")
        code = main(["pretrain", "--config", str(path),
                     "--init-mode", "feature_extractor_only"])
        assert code == 2
        assert "--init-from" in capsys.readouterr().err

    def test_smoke_produces_artifacts(self, tmp_path):
        corpus = tmp_path / "corpus"
        write_corpus(corpus, [0.6, 0.9, 1.2])
        cfg_path = tmp_path / "c.ini"
        out_dir = tmp_path / "out"
        write_pretrain_config(cfg_path, corpus, out_dir)
        assert main(["pretrain", "--config", str(cfg_path)]) == 0
        assert (out_dir / "final.msec").is_file()
        assert (out_dir / "ckpt_000002.msec").is_file()
        assert (out_dir / "config.ini").is_file()
        lines = (out_dir / "metrics.csv").read_text().strip().splitlines()
        assert lines[0].startswith("step,loss")
        assert len(lines) == 5  # header + 4 steps

    def test_init_from_full_resumes_step(self, tmp_path):
        corpus = tmp_path / "corpus"
        write_corpus(corpus, [0.6, 0.9])
        cfg_path = tmp_path / "c.ini"
        out1 = tmp_path / "out1"
        write_pretrain_config(cfg_path, corpus, out1, total_steps=2)
        assert main(["pretrain", "--config", str(cfg_path)]) == 0
        header, _ = pretrain.read_checkpoint(out1 / "final.msec")
        assert header["step"] == 2
        cfg2 = tmp_path / "c2.ini"
        out2 = tmp_path / "out2"
        write_pretrain_config(cfg2, corpus, out2, total_steps=4)
        assert main(["pretrain", "--config", str(cfg2),
                     "--init-from", str(out1 / "final.msec"),
                     "--init-mode", "full"]) == 0
        header2, _ = pretrain.read_checkpoint(out2 / "final.msec")
        assert header2["step"] == 4


class TestQuantizeCommand:
    def test_writes_one_file_per_utterance_deterministically(self, tmp_path):
        corpus = tmp_path / "corpus"
        write_corpus(corpus, [0.5, 0.8, 1.1])
        cfg_path = tmp_path / "c.ini"
        write_pretrain_config(cfg_path, corpus, tmp_path / "out")
        cache1 = tmp_path / "cache1"
        cache2 = tmp_path / "cache2"
        assert main(["quantize", "--config", str(cfg_path), "--out", str(cache1)]) == 0
        assert main(["quantize", "--config", str(cfg_path), "--out", str(cache2)]) == 0
        files1 = sorted(cache1.glob("*.lab"))
        assert len(files1) == 3
        for f1 in files1:
            assert f1.read_bytes() == (cache2 / f1.name).read_bytes()

    def test_pretrain_with_warm_label_cache_matches_online(self, tmp_path):
        corpus = tmp_path / "corpus"
        write_corpus(corpus, [0.6, 0.9])
        cache = tmp_path / "cache"
        base = tmp_path / "base.ini"
        write_pretrain_config(base, corpus, tmp_path / "out_a", total_steps=3)
        assert main(["quantize", "--config", str(base), "--out", str(cache)]) == 0
        assert main(["pretrain", "--config", str(base)]) == 0

        cached_cfg = tmp_path / "cached.ini"
        write_pretrain_config(cached_cfg, corpus, tmp_path / "out_b", total_steps=3,
                              label_cache_dir=cache)
        assert main(["pretrain", "--config", str(cached_cfg)]) == 0
        a = (tmp_path / "out_a" / "metrics.csv").read_text()
        b = (tmp_path / "out_b" / "metrics.csv").read_text()
        assert a == b

    def test_offline_cache_matches_online_labels(self, tmp_path):
        corpus = tmp_path / "corpus"
        write_corpus(corpus, [0.5, 0.8])
        cfg_path = tmp_path / "c.ini"
        write_pretrain_config(cfg_path, corpus, tmp_path / "out")
        cache = tmp_path / "cache"
        assert main(["quantize", "--config", str(cfg_path), "--out", str(cache)]) == 0

        cfg = cfgmod.load_config(cfg_path)
        qs = quantizer.init_quantizer(cfg.seed, cfg.quantizer_config())
        index = datapipe.scan_corpus(corpus)
        for utt in index.entries:
            w = frontend.load_audio(utt.path)
            online = quantizer.labels_for_mel(qs, frontend.log_mel(w))
            cached = quantizer.read_label_cache(cache / (utt.utt_id + ".lab"))
            assert np.array_equal(online, cached)


@pytest.fixture
def finetuned_setup(tmp_path):
    """Corpus + transcripts + a finetuned checkpoint produced via the CLI."""
    corpus = tmp_path / "corpus"
    write_corpus(corpus, [0.6, 0.8, 1.0])
    texts = {"utt00": "ab", "utt01": "ba", "utt02": "abba"}
    trans = tmp_path / "transcripts.tsv"
    trans.write_text("".join(f"{k}\t{v}\n" for k, v in texts.items()), encoding="utf-8")

    pre_cfg = tmp_path / "pre.ini"
    pre_out = tmp_path / "pre_out"
    write_pretrain_config(pre_cfg, corpus, pre_out, total_steps=2)
    assert main(["pretrain", "--config", str(pre_cfg)]) == 0

    ft_cfg = tmp_path / "ft.ini"
    ft_out = tmp_path / "ft_out"
    ft_cfg.write_text(f"""
[run]
seed = 5
output_dir = {ft_out}

[corpus]
root = {corpus}
transcripts = {trans}

[encoder]
num_layers = 1
hidden = 16
ffn = 32
heads = 2

[finetune]
checkpoint = {pre_out / 'final.msec'}
encoder_lr = 1e-3
decoder_lr = 5e-3
warmup_steps = 5
freeze_steps = 1
total_steps = 3
time_apply_prob = 0.0
max_freq_width = 0

[datapipe]
num_buckets = 1
tokens_per_batch = 1000
""", encoding="utf-8")
    assert main(["finetune", "--config", str(ft_cfg)]) == 0
    ckpt = ft_out / "finetuned.msec"
    assert ckpt.is_file()

    manifest = tmp_path / "manifest.tsv"
    index = datapipe.scan_corpus(corpus)
    manifest.write_text("".join(f"{u.utt_id}\t{u.path}\t{u.duration}\n"
                                for u in index.entries), encoding="utf-8")
    return ckpt, manifest, trans, tmp_path


class TestDecodeAndScore:
    def test_decode_writes_hypotheses(self, finetuned_setup):
        ckpt, manifest, _, tmp = finetuned_setup
        hyp = tmp / "hyp.tsv"
        assert main(["decode", "--ckpt", str(ckpt), "--manifest", str(manifest),
                     "--out", str(hyp), "--greedy"]) == 0
        got = finetune.read_transcripts(hyp)
        assert set(got) == {"utt00", "utt01", "utt02"}

    def test_beam_one_equals_greedy(self, finetuned_setup):
        ckpt, manifest, _, tmp = finetuned_setup
        h1 = tmp / "h1.tsv"
        h2 = tmp / "h2.tsv"
        assert main(["decode", "--ckpt", str(ckpt), "--manifest", str(manifest),
                     "--out", str(h1), "--greedy"]) == 0
        assert main(["decode", "--ckpt", str(ckpt), "--manifest", str(manifest),
                     "--out", str(h2), "--beam", "1"]) == 0
        assert finetune.read_transcripts(h1) == finetune.read_transcripts(h2)

    def test_score_identical_files_zero(self, finetuned_setup, capsys):
        _, _, trans, tmp = finetuned_setup
        report = tmp / "report.csv"
        assert main(["score", "--refs", str(trans), "--hyps", str(trans),
                     "--report", str(report)]) == 0
        out = capsys.readouterr().out
        assert "WER 0.00" in out and "CER 0.00" in out
        assert report.read_text().splitlines()[-1].startswith("TOTAL")

    def test_score_mismatched_ids_exit_2(self, finetuned_setup, capsys):
        _, _, trans, tmp = finetuned_setup
        partial = tmp / "partial.tsv"
        lines = trans.read_text().splitlines()
        partial.write_text("\n".join(lines[:-1]) + "\n", encoding="utf-8")
        assert main(["score", "--refs", str(trans), "--hyps", str(partial)]) == 2
        assert "utt02" in capsys.readouterr().err

    def test_finetune_infeasible_transcript_exit_1(self, finetuned_setup, tmp_path, capsys):
        # a transcript far longer than the utterance's label frames cannot align
        _, _, _, base = finetuned_setup
        bad_trans = tmp_path / "bad.tsv"
        bad_trans.write_text("utt00\t" + "ab " * 80 + "\nutt01\tba\nutt02\tab\n",
                             encoding="utf-8")
        cfg = tmp_path / "bad_ft.ini"
        cfg.write_text(f"""
[run]
seed = 5
output_dir = {tmp_path / 'bad_out'}

[corpus]
root = {base / 'corpus'}
transcripts = {bad_trans}

[encoder]
num_layers = 1
hidden = 16
ffn = 32
heads = 2

[finetune]
checkpoint = {base / 'pre_out' / 'final.msec'}
total_steps = 2

[datapipe]
num_buckets = 1
tokens_per_batch = 1000
""", encoding="utf-8")
        assert main(["finetune", "--config", str(cfg)]) == 1
        assert "utt00" in capsys.readouterr().err

    def test_decode_corrupt_checkpoint_exit_1(self, finetuned_setup):
        ckpt, manifest, _, tmp = finetuned_setup
        bad = tmp / "bad.msec"
        bad.write_bytes(ckpt.read_bytes()[:50])
        assert main(["decode", "--ckpt", str(bad), "--manifest", str(manifest)]) == 1


class TestInspectCommand:
    def test_checkpoint_listing(self, finetuned_setup, capsys):
        ckpt, _, _, _ = finetuned_setup
        assert main(["inspect", "--ckpt", str(ckpt)]) == 0
        out = capsys.readouterr().out
        assert "extractor.conv1.weight\t240x16" in out
        assert "step: 3" in out
        assert "parameters:" in out

    def test_corrupt_checkpoint_exit_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.msec"
        bad.write_bytes(b"garbage")
        assert main(["inspect", "--ckpt", str(bad)]) == 1
        assert "corrupt" in capsys.readouterr().err

    def test_reference_scale_count_from_config(self, tmp_path, capsys):
        path = tmp_path / "reference.ini"
        path.write_text("""
[encoder]
num_layers = 24
hidden = 1024
ffn = 4096
heads = 8
conv_kernel = 5
dropout = 0.1
""", encoding="utf-8")
        assert main(["inspect", "--config", str(path)]) == 0
        out = capsys.readouterr().out
        total = int(out.strip().splitlines()[-1].split(":")[1])
        assert abs(total - 630e6) / 630e6 < 0.05

    def test_desk_scale_count_matches_shape_sum(self, tmp_path, capsys):
        path = tmp_path / "desk.ini"
        path.write_text("[encoder]\n", encoding="utf-8")
        assert main(["inspect", "--config", str(path)]) == 0
        out = capsys.readouterr().out
        lines = [l for l in out.strip().splitlines() if "\t" in l]
        total = int(out.strip().splitlines()[-1].split(":")[1])
        assert total == sum(int(l.split("\t")[1]) for l in lines)
