"""End-to-end CLI tests: exit codes, determinism, help, config
validation, and the synth -> train -> distill -> separate -> eval chain."""

import hashlib
import json
from pathlib import Path

import pytest

from tinysep.cli import run
from tinysep.mixer import read_corpus
from tinysep.wavio import read_wav

TINY_SETS = [
    "--set", "model.num_layers=1",
    "--set", "model.attn_dim=8",
    "--set", "model.num_heads=2",
    "--set", "model.ffn_dim=16",
    "--set", "model.rel_pos_clip=8",
    "--set", "model.freq_bins=33",
    "--set", "optim.total_steps=12",
    "--set", "optim.warmup_steps=2",
    "--set", "optim.batch_size=2",
    "--set", "stft.sample_rate=8000",
    "--set", "stft.frame_length=64",
    "--set", "stft.hop=32",
    "--set", "stft.fft_size=64",
    "--set", "segment_frames=30",
]
SYNTH_SETS = [
    "--set", "sample_rate=8000",
    "--set", "duration_range=[0.2,0.35]",
]


def _dir_hash(path: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    code = run(["synth", "--n", "10", "--out", str(out), "--seed", "7", *SYNTH_SETS])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def teacher_dir(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp("teacher")
    code = run([
        "train-teacher", "--corpus", str(corpus_dir / "manifest.jsonl"),
        "--out", str(out), "--seed", "1", *TINY_SETS,
    ])
    assert code == 0
    return out


class TestSynth:
    def test_deterministic_reruns(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["synth", "--n", "6", "--out", str(out), "--seed", "3",
                        *SYNTH_SETS]) == 0
        assert _dir_hash(a) == _dir_hash(b)

    def test_idempotent_overwrite(self, tmp_path):
        out = tmp_path / "c"
        assert run(["synth", "--n", "4", "--out", str(out), "--seed", "5",
                    *SYNTH_SETS]) == 0
        first = _dir_hash(out)
        assert run(["synth", "--n", "4", "--out", str(out), "--seed", "5",
                    *SYNTH_SETS]) == 0
        assert _dir_hash(out) == first

    def test_unlabeled_flag(self, tmp_path):
        out = tmp_path / "u"
        assert run(["synth", "--n", "3", "--out", str(out), "--unlabeled",
                    "--seed", "2", *SYNTH_SETS]) == 0
        assert all(s.references is None for s in read_corpus(out / "manifest.jsonl"))

    def test_workers_do_not_change_output(self, tmp_path):
        a, b = tmp_path / "w1", tmp_path / "w2"
        run(["synth", "--n", "6", "--out", str(a), "--seed", "4", *SYNTH_SETS])
        run(["synth", "--n", "6", "--out", str(b), "--seed", "4", "--workers", "2",
             *SYNTH_SETS])
        assert _dir_hash(a) == _dir_hash(b)

    def test_unknown_config_key_rejected_by_name(self, tmp_path, capsys):
        code = run(["synth", "--n", "2", "--out", str(tmp_path / "x"),
                    "--set", "bogus_knob=1", *SYNTH_SETS])
        assert code == 1
        assert "bogus_knob" in capsys.readouterr().err

    def test_missing_config_file_is_usage_error(self, tmp_path, capsys):
        code = run(["synth", "--n", "2", "--out", str(tmp_path / "x"),
                    "--config", str(tmp_path / "nope.json")])
        assert code == 1
        assert "nope.json" in capsys.readouterr().err


class TestUsageErrors:
    def test_distill_without_teacher_checkpoint_names_it(self, capsys):
        code = run(["distill", "--mode", "lts_os", "--corpus", "x.jsonl"])
        assert code == 1
        assert "--teacher-checkpoint" in capsys.readouterr().err

    def test_unlabeled_mode_without_unlabeled_corpus(self, corpus_dir, capsys, tmp_path):
        code = run([
            "distill", "--mode", "unlabeled_lts_os",
            "--teacher-checkpoint", "t.ckpt",
            "--corpus", str(corpus_dir / "manifest.jsonl"),
            "--out", str(tmp_path),
        ])
        assert code == 1
        assert "unlabeled" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert run(["frobnicate"]) == 1

    def test_runtime_error_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "not_a_checkpoint.ckpt"
        bad.write_bytes(b"garbage header")
        code = run(["separate", "--checkpoint", str(bad),
                    "--input", "missing.wav", "--out", str(tmp_path)])
        assert code == 2


class TestHelp:
    def test_synth_help_lists_config_keys(self, capsys):
        assert run(["synth", "--help"]) == 0
        out = capsys.readouterr().out
        for key in ("duration_range", "type_weights", "noise_snr_range_db",
                    "low_f0_range", "source_dir"):
            assert key in out

    def test_train_help_lists_config_keys(self, capsys):
        assert run(["train-teacher", "--help"]) == 0
        out = capsys.readouterr().out
        for key in ("model.num_layers", "optim.peak_lr", "optim.total_steps",
                    "stft.frame_length", "segment_frames"):
            assert key in out

    def test_distill_help_lists_modes(self, capsys):
        assert run(["distill", "--help"]) == 0
        out = capsys.readouterr().out
        for mode in ("vanilla_ts", "lts", "os", "lts_os", "unlabeled_lts_os"):
            assert mode in out

    def test_separate_help_lists_css_keys(self, capsys):
        assert run(["separate", "--help"]) == 0
        out = capsys.readouterr().out
        for key in ("css.window_seconds", "css.hop_seconds", "stft.hop"):
            assert key in out


class TestTrainCli:
    def test_teacher_writes_checkpoint_and_log(self, teacher_dir):
        assert (teacher_dir / "teacher.ckpt").exists()
        log = (teacher_dir / "teacher_log.jsonl").read_text().strip().splitlines()
        assert len(log) == 12
        rec = json.loads(log[0])
        assert {"step", "lr", "pit", "total"} <= set(rec)

    def test_baseline(self, corpus_dir, tmp_path):
        code = run([
            "train-baseline", "--corpus", str(corpus_dir / "manifest.jsonl"),
            "--out", str(tmp_path), "--seed", "2", *TINY_SETS,
        ])
        assert code == 0
        assert (tmp_path / "baseline.ckpt").exists()

    def test_env_var_checkpoint_dir(self, corpus_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("TINYSEP_CHECKPOINT_DIR", str(tmp_path / "envout"))
        code = run([
            "train-baseline", "--corpus", str(corpus_dir / "manifest.jsonl"),
            "--seed", "2", *TINY_SETS,
        ])
        assert code == 0
        assert (tmp_path / "envout" / "baseline.ckpt").exists()

    def test_missing_out_is_usage_error(self, corpus_dir, capsys, monkeypatch):
        monkeypatch.delenv("TINYSEP_CHECKPOINT_DIR", raising=False)
        code = run([
            "train-baseline", "--corpus", str(corpus_dir / "manifest.jsonl"),
            *TINY_SETS,
        ])
        assert code == 1
        assert "--out" in capsys.readouterr().err


class TestDistillCli:
    @pytest.mark.parametrize("mode", ["vanilla_ts", "lts", "os", "lts_os"])
    def test_modes_run(self, mode, corpus_dir, teacher_dir, tmp_path):
        code = run([
            "distill", "--mode", mode,
            "--teacher-checkpoint", str(teacher_dir / "teacher.ckpt"),
            "--corpus", str(corpus_dir / "manifest.jsonl"),
            "--out", str(tmp_path), "--seed", "3", *TINY_SETS,
        ])
        assert code == 0
        assert (tmp_path / f"{mode}.ckpt").exists()

    def test_lts_on_unlabeled_corpus_alone(self, teacher_dir, tmp_path):
        unl = tmp_path / "unl"
        assert run(["synth", "--n", "5", "--out", str(unl), "--unlabeled",
                    "--seed", "8", *SYNTH_SETS]) == 0
        code = run([
            "distill", "--mode", "lts",
            "--teacher-checkpoint", str(teacher_dir / "teacher.ckpt"),
            "--unlabeled-corpus", str(unl / "manifest.jsonl"),
            "--out", str(tmp_path / "out"), "--seed", "3", *TINY_SETS,
        ])
        assert code == 0
        assert (tmp_path / "out" / "lts.ckpt").exists()

    def test_unlabeled_two_stage(self, corpus_dir, teacher_dir, tmp_path):
        unl = tmp_path / "unl"
        assert run(["synth", "--n", "5", "--out", str(unl), "--unlabeled",
                    "--seed", "9", *SYNTH_SETS]) == 0
        code = run([
            "distill", "--mode", "unlabeled_lts_os",
            "--teacher-checkpoint", str(teacher_dir / "teacher.ckpt"),
            "--corpus", str(corpus_dir / "manifest.jsonl"),
            "--unlabeled-corpus", str(unl / "manifest.jsonl"),
            "--stage1-steps", "6",
            "--out", str(tmp_path / "out"), "--seed", "3", *TINY_SETS,
        ])
        assert code == 0
        assert (tmp_path / "out" / "unlabeled_lts_os.ckpt").exists()


class TestSeparateAndEval:
    def test_separate_writes_sources_and_trace(self, corpus_dir, teacher_dir, tmp_path):
        mix_wav = corpus_dir / "mix_00000.wav"
        out = tmp_path / "sep"
        code = run([
            "separate", "--checkpoint", str(teacher_dir / "teacher.ckpt"),
            "--input", str(mix_wav), "--out", str(out),
            "--trace", str(tmp_path / "trace.jsonl"),
            "--set", "stft.sample_rate=8000",
            "--set", "stft.frame_length=64",
            "--set", "stft.hop=32",
            "--set", "stft.fft_size=64",
            "--set", "css.window_seconds=0.2",
            "--set", "css.hop_seconds=0.1",
        ])
        assert code == 0
        outputs = sorted(out.glob("*.wav"))
        assert len(outputs) == 2
        original = read_wav(mix_wav)
        for wav in outputs:
            assert read_wav(wav).num_samples == original.num_samples
        assert (tmp_path / "trace.jsonl").read_text().strip()

    def test_eval_reports_and_is_deterministic(self, corpus_dir, teacher_dir, tmp_path, capsys):
        args = [
            "eval", "--checkpoint", str(teacher_dir / "teacher.ckpt"),
            "--corpus", str(corpus_dir / "manifest.jsonl"),
            "--out-csv", str(tmp_path / "report.csv"),
            "--out-json", str(tmp_path / "report.json"),
            "--set", "stft.sample_rate=8000",
            "--set", "stft.frame_length=64",
            "--set", "stft.hop=32",
            "--set", "stft.fft_size=64",
            "--set", "css.window_seconds=0.2",
            "--set", "css.hop_seconds=0.1",
        ]
        assert run(args) == 0
        first = (tmp_path / "report.csv").read_bytes()
        out = capsys.readouterr().out
        assert "mean SI-SNR" in out
        assert run(args) == 0
        assert (tmp_path / "report.csv").read_bytes() == first


class TestSchedules:
    def test_csv_midpoint_half(self, tmp_path):
        out = tmp_path / "sched.csv"
        code = run([
            "schedules", "--k", "1e-4", "--t0", "150000", "--total", "300000",
            "--stride", "1000", "--out", str(out),
        ])
        assert code == 0
        rows = out.read_text().strip().splitlines()
        assert rows[0] == "t,lambda,lr"
        table = {int(r.split(",")[0]): r.split(",") for r in rows[1:]}
        assert float(table[150000][1]) == 0.5
        lams = [float(r.split(",")[1]) for r in rows[1:]]
        assert all(b < a for a, b in zip(lams, lams[1:]))
        # lr column follows the warmup/decay shape
        warmup = int(round(300000 * 10000 / 260000))
        peak = max(float(r.split(",")[2]) for r in rows[1:])
        assert peak <= 1e-4
        assert float(table[300000][2]) == 0.0
