"""Command-line driver: exit codes, reproducibility, the full artifact flow."""

import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from specmap import formats
from specmap.cli import main

SRC = Path(__file__).resolve().parent.parent / "src"


def run_cli(*argv) -> int:
    try:
        return main(list(argv))
    except SystemExit as exc:  # argparse usage failures
        return exc.code


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Corpus plus trained artifacts shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "corpus"
    assert run_cli("synth-data", "--out", str(data), "--train", "10", "--dev", "5",
                   "--test", "4", "--classes", "6", "--seed", "3") == 0
    clf = root / "clf.ck"
    assert run_cli("train-classifier", "--arch", "dnn", "--data", str(data),
                   "--out", str(clf), "--epochs", "3", "--lr", "1e-3") == 0
    mapper = root / "map.ck"
    assert run_cli("pretrain-mapper", "--arch", "resnet", "--data", str(data),
                   "--out", str(mapper), "--epochs", "1",
                   "--filters", "2,2,3,3", "--fc-width", "8") == 0
    return {"root": root, "data": data, "clf": clf, "mapper": mapper}


class TestSynthData:
    def test_zero_train_usage_error(self, tmp_path, capsys):
        assert run_cli("synth-data", "--out", str(tmp_path), "--train", "0") == 2
        assert "usage" in capsys.readouterr().err

    def test_determinism_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert run_cli("synth-data", "--out", str(tmp_path / name), "--train", "4",
                           "--dev", "2", "--test", "2", "--classes", "5",
                           "--seed", "7") == 0
        for rel in sorted(p.relative_to(tmp_path / "a")
                          for p in (tmp_path / "a").rglob("*") if p.is_file()):
            assert (tmp_path / "a" / rel).read_bytes() == \
                (tmp_path / "b" / rel).read_bytes(), rel

    def test_default_sizes(self, tmp_path, capsys):
        # defaults are 200/69/55; too slow to generate here, so check the
        # declared constants instead and generate a tiny corpus explicitly
        from specmap import synth
        assert synth.DEFAULT_SPLIT_SIZES == {"train": 200, "dev": 69, "test": 55}


class TestTrainingCommands:
    def test_bad_arch_usage_error(self, workspace):
        assert run_cli("train-classifier", "--arch", "cnn",
                       "--data", str(workspace["data"]), "--out", "/tmp/x.ck") == 2

    def test_missing_corpus_io_error(self, tmp_path):
        assert run_cli("train-classifier", "--arch", "dnn",
                       "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "x.ck")) == 3

    def test_checkpoint_has_config_echo_and_trace(self, workspace):
        ck = formats.load_checkpoint(workspace["mapper"])
        assert ck.config["role"] == "mapper"
        assert ck.config["arch"] == "resnet"
        assert ck.config["command"] == "pretrain-mapper"
        assert ck.config["cli_epochs"] == "1"
        trace = Path(str(workspace["mapper"]) + ".trace.csv")
        assert trace.exists()
        assert trace.read_text().splitlines()[0] == \
            "step,lr,fidelity,mimic,joint,dev_fidelity,dev_ce"

    def test_wrong_role_checkpoint_exit_5(self, workspace, tmp_path):
        assert run_cli("train-mimic", "--mapper", str(workspace["clf"]),
                       "--classifier", str(workspace["clf"]),
                       "--data", str(workspace["data"]),
                       "--out", str(tmp_path / "m.ck")) == 5

    def test_resume_arch_mismatch_exit_5(self, workspace, tmp_path):
        assert run_cli("pretrain-mapper", "--arch", "dnn",
                       "--data", str(workspace["data"]),
                       "--out", str(tmp_path / "m.ck"),
                       "--resume", str(workspace["mapper"])) == 5

    def test_mimic_classifier_class_count_mismatch_exit_5(self, workspace, tmp_path):
        other = tmp_path / "corpus12"
        assert run_cli("synth-data", "--out", str(other), "--train", "3", "--dev", "2",
                       "--test", "2", "--classes", "12", "--seed", "1") == 0
        assert run_cli("train-mimic", "--mapper", str(workspace["mapper"]),
                       "--classifier", str(workspace["clf"]),
                       "--data", str(other), "--out", str(tmp_path / "m.ck")) == 5

    def test_mimic_writes_new_mapper_keeps_classifier(self, workspace, tmp_path):
        clf_before = workspace["clf"].read_bytes()
        out = tmp_path / "mimic.ck"
        assert run_cli("train-mimic", "--mapper", str(workspace["mapper"]),
                       "--classifier", str(workspace["clf"]),
                       "--data", str(workspace["data"]),
                       "--out", str(out), "--epochs", "1") == 0
        assert out.exists()
        assert workspace["clf"].read_bytes() == clf_before
        assert formats.load_checkpoint(out).config["cli_alpha"] == "0.1"

    def test_mimic_default_alpha_tracks_classifier_arch(self, workspace, tmp_path):
        wrbn_ck = tmp_path / "wrbn.ck"
        assert run_cli("train-classifier", "--arch", "wrbn",
                       "--data", str(workspace["data"]), "--out", str(wrbn_ck),
                       "--epochs", "1", "--channels", "2,3,4", "--lstm-hidden", "4",
                       "--linear-width", "4") == 0
        out = tmp_path / "m.ck"
        assert run_cli("train-mimic", "--mapper", str(workspace["mapper"]),
                       "--classifier", str(wrbn_ck), "--data", str(workspace["data"]),
                       "--out", str(out), "--epochs", "0") == 0
        assert formats.load_checkpoint(out).config["cli_alpha"] == "0.05"

    def test_divergence_exit_4(self, workspace, tmp_path):
        assert run_cli("pretrain-mapper", "--arch", "dnn",
                       "--data", str(workspace["data"]),
                       "--out", str(tmp_path / "d.ck"),
                       "--epochs", "2", "--lr", "1e10", "--hidden", "8") == 4


class TestEnhance:
    def test_wav_to_smap(self, workspace, tmp_path):
        wav = next((workspace["data"] / "dev").glob("*_noisy.wav"))
        out = tmp_path / "den.smap"
        assert run_cli("enhance", "--mapper", str(workspace["mapper"]),
                       "--in", str(wav), "--out", str(out)) == 0
        mat = formats.read_smap(out)
        from specmap.dsp import frame_count
        wave = formats.read_wav(wav)
        assert mat.shape == (frame_count(len(wave)), 257)

    def test_smap_roundtrip_deterministic(self, workspace, tmp_path):
        wav = next((workspace["data"] / "dev").glob("*_noisy.wav"))
        a, b = tmp_path / "a.smap", tmp_path / "b.smap"
        for out in (a, b):
            assert run_cli("enhance", "--mapper", str(workspace["mapper"]),
                           "--in", str(wav), "--out", str(out)) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_enhancing_clean_changes_less_than_noisy(self, workspace, tmp_path):
        from specmap import dsp
        recs = formats.read_manifest(workspace["data"] / "manifest.tsv")[1]
        dev = [r for r in recs if r.split == "dev"]
        closer, total = 0, 0
        for rec in dev:
            out_c, out_n = tmp_path / "c.smap", tmp_path / "n.smap"
            assert run_cli("enhance", "--mapper", str(workspace["mapper"]),
                           "--in", str(rec.clean_path), "--out", str(out_c)) == 0
            assert run_cli("enhance", "--mapper", str(workspace["mapper"]),
                           "--in", str(rec.noisy_path), "--out", str(out_n)) == 0
            clean = dsp.mean_normalize(dsp.spectrogram(formats.read_wav(rec.clean_path))).frames
            d_clean = np.mean((formats.read_smap(out_c) - clean) ** 2)
            d_noisy = np.mean((formats.read_smap(out_n) - clean) ** 2)
            closer += d_clean < d_noisy
            total += 1
        assert closer > total / 2

    def test_unreadable_input_exit_3(self, workspace, tmp_path):
        assert run_cli("enhance", "--mapper", str(workspace["mapper"]),
                       "--in", str(tmp_path / "missing.wav"),
                       "--out", str(tmp_path / "o.smap")) == 3

    def test_wrong_width_smap_exit_5(self, workspace, tmp_path):
        bad = tmp_path / "bad.smap"
        formats.write_smap(bad, np.zeros((10, 100)))
        assert run_cli("enhance", "--mapper", str(workspace["mapper"]),
                       "--in", str(bad), "--out", str(tmp_path / "o.smap")) == 5


class TestEval:
    def test_report_structure_and_aggregation(self, workspace, tmp_path, capsys):
        out = tmp_path / "report.json"
        assert run_cli("eval", "--mapper", str(workspace["mapper"]),
                       "--classifier", str(workspace["clf"]),
                       "--data", str(workspace["data"]), "--split", "dev",
                       "--out", str(out)) == 0
        report = json.loads(out.read_text())
        assert report["split"] == "dev"
        assert "note" in report
        total = report["overall"]
        acc = 0.0
        frames = 0
        fid = 0.0
        nll = 0.0
        for bucket in report["per_snr"].values():
            frames += bucket["frames"]
            fid += bucket["fidelity"] * bucket["frames"]
            nll += bucket["cross_entropy"] * bucket["frames"]
            acc += bucket["frame_accuracy"] * bucket["frames"]
        assert frames == total["frames"]
        assert fid / frames == pytest.approx(total["fidelity"], abs=1e-9)
        assert nll / frames == pytest.approx(total["cross_entropy"], abs=1e-9)
        assert acc / frames == pytest.approx(total["frame_accuracy"], abs=1e-9)

    def test_passthrough_equals_raw_distance(self, workspace, tmp_path, capsys):
        from specmap import data as data_mod
        from specmap.training import split_fidelity
        out = tmp_path / "r.json"
        assert run_cli("eval", "--passthrough", "--classifier", str(workspace["clf"]),
                       "--data", str(workspace["data"]), "--split", "dev",
                       "--out", str(out)) == 0
        report = json.loads(out.read_text())
        dev = data_mod.load_split(workspace["data"] / "manifest.tsv", "dev")
        assert report["overall"]["fidelity"] == pytest.approx(split_fidelity(dev), rel=1e-9)
        assert report["enhancement"] == "passthrough"


class TestExportSpectrogram:
    def test_export(self, workspace, tmp_path):
        smap = tmp_path / "m.smap"
        formats.write_smap(smap, np.random.default_rng(0).standard_normal((20, 257)))
        out = tmp_path / "m.pgm"
        assert run_cli("export-spectrogram", "--in", str(smap), "--out", str(out)) == 0
        assert out.read_bytes().startswith(b"P5\n20 257\n255\n")

    def test_unreadable_exit_3(self, tmp_path):
        assert run_cli("export-spectrogram", "--in", str(tmp_path / "no.smap"),
                       "--out", str(tmp_path / "x.pgm")) == 3


class TestConfigFile:
    def test_precedence_flags_over_file_over_defaults(self, workspace, tmp_path):
        cfg = tmp_path / "cfg"
        cfg.write_text("epochs=1\nhidden=12\n")
        out = tmp_path / "c.ck"
        assert run_cli("train-classifier", "--arch", "dnn",
                       "--data", str(workspace["data"]), "--out", str(out),
                       "--config", str(cfg), "--hidden", "16", "--lr", "1e-3") == 0
        ck = formats.load_checkpoint(out)
        assert ck.config["hidden"] == "16"        # flag beats file
        assert ck.config["cli_epochs"] == "1"     # file beats default
        assert ck.config["cli_lr"] == "0.001"


class TestModuleEntryPoint:
    def test_python_dash_m_runs(self, tmp_path):
        env = dict(os.environ, PYTHONPATH=str(SRC))
        proc = subprocess.run([sys.executable, "-m", "specmap", "synth-data",
                               "--out", str(tmp_path / "c"), "--train", "2",
                               "--dev", "1", "--test", "1", "--classes", "4"],
                              capture_output=True, text=True, env=env)
        assert proc.returncode == 0
        assert (tmp_path / "c" / "manifest.tsv").exists()
