"""Command-line behavior: config precedence, the settings echo, exit codes,
and one smoke run per subcommand."""

import shutil
import subprocess

import pytest

from dien.cli import main
from dien.data import parse_corpus
from dien.model import DienModel, ModelVariant

SYNTH_FLAGS = ["--n-users", "80", "--n-items", "120", "--n-cats", "10",
               "--seq-len", "6", "--seed", "7"]
TINY_TRAIN_FLAGS = ["--epochs", "1", "--batch-size", "32", "--embed-dim", "4",
                    "--hidden-size", "8", "--mlp-hidden", "8"]


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", *SYNTH_FLAGS, "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def train_dir(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp("train")
    rc = main(["train", "--corpus", str(corpus_dir / "corpus.tsv"),
               *TINY_TRAIN_FLAGS, "--out", str(out)])
    assert rc == 0
    return out


class TestSynth:
    def test_writes_corpus_and_echo(self, corpus_dir):
        corpus = parse_corpus(corpus_dir / "corpus.tsv")
        assert len(corpus.instances) == 160
        echo = (corpus_dir / "synth_config.ini").read_text()
        assert echo.startswith("[synth]")
        assert "n_users = 80" in echo
        assert "drift_prob = 0.3" in echo

    def test_echo_regenerates_artifact(self, corpus_dir, tmp_path):
        # the resolved-settings echo alone must reproduce the corpus
        rc = main(["synth", "--config", str(corpus_dir / "synth_config.ini"),
                   "--out", str(tmp_path)])
        assert rc == 0
        assert (tmp_path / "corpus.tsv").read_bytes() == \
            (corpus_dir / "corpus.tsv").read_bytes()


class TestConfigResolution:
    def write_cfg(self, tmp_path, body):
        path = tmp_path / "cfg.ini"
        path.write_text(body)
        return path

    def test_flag_beats_file_beats_default(self, tmp_path):
        cfg = self.write_cfg(tmp_path, "[synth]\nseq_len = 4\n")
        base = ["synth", "--n-users", "10", "--n-items", "20", "--n-cats", "3"]

        assert main([*base, "--out", str(tmp_path / "a")]) == 0
        assert "seq_len = 10" in (tmp_path / "a" / "synth_config.ini").read_text()

        assert main([*base, "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
        assert "seq_len = 4" in (tmp_path / "b" / "synth_config.ini").read_text()

        assert main([*base, "--config", str(cfg), "--seq-len", "5",
                     "--out", str(tmp_path / "c")]) == 0
        assert "seq_len = 5" in (tmp_path / "c" / "synth_config.ini").read_text()

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = self.write_cfg(tmp_path, "[synth]\nbogus = 1\n")
        rc = main(["synth", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "bogus" in capsys.readouterr().err
        assert not (tmp_path / "out").exists()

    def test_unknown_section_rejected(self, tmp_path, capsys):
        cfg = self.write_cfg(tmp_path, "[nonsense]\nx = 1\n")
        rc = main(["synth", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "nonsense" in capsys.readouterr().err

    def test_bad_flag_value(self, tmp_path, capsys):
        rc = main(["train", "--corpus", "unused.tsv", "--epochs", "three",
                   "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "expected an integer" in capsys.readouterr().err

    def test_missing_required_setting(self, tmp_path, capsys):
        rc = main(["train", "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "corpus" in capsys.readouterr().err

    def test_usage_problems_exit_1(self):
        for argv in (["--no-such-flag"], ["frobnicate"], []):
            with pytest.raises(SystemExit) as exc:
                main(argv)
            assert exc.value.code == 1

    def test_missing_corpus_file_is_runtime_failure(self, tmp_path, train_dir):
        rc = main(["eval", "--checkpoint", str(train_dir / "model.ckpt"),
                   "--corpus", str(tmp_path / "absent.tsv"),
                   "--out", str(tmp_path / "out")])
        assert rc == 2


class TestTrain:
    def test_outputs(self, train_dir):
        model = DienModel.load(train_dir / "model.ckpt")
        assert model.variant is ModelVariant.DIEN
        curves = (train_dir / "curves.csv").read_text().splitlines()
        assert curves[0] == "epoch,step,l_target,l_aux,l_total"
        assert len(curves) == 1 + 5  # 144 train rows in batches of 32
        echo = (train_dir / "train_config.ini").read_text()
        assert "variant = dien" in echo
        assert "mlp_hidden = 8" in echo

    def test_rerun_is_byte_identical(self, corpus_dir, train_dir, tmp_path):
        rc = main(["train", "--corpus", str(corpus_dir / "corpus.tsv"),
                   *TINY_TRAIN_FLAGS, "--out", str(tmp_path)])
        assert rc == 0
        assert (tmp_path / "model.ckpt").read_bytes() == \
            (train_dir / "model.ckpt").read_bytes()
        assert (tmp_path / "curves.csv").read_bytes() == \
            (train_dir / "curves.csv").read_bytes()


class TestEval:
    def run_eval(self, corpus_dir, train_dir, out, workers="1"):
        return main(["eval", "--checkpoint", str(train_dir / "model.ckpt"),
                     "--corpus", str(corpus_dir / "corpus.tsv"),
                     "--workers", workers, "--out", str(out)])

    def test_metrics_file(self, corpus_dir, train_dir, tmp_path):
        assert self.run_eval(corpus_dir, train_dir, tmp_path) == 0
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == "variant,seed,auc"
        name, seed, value = lines[1].split(",")
        assert name == "dien" and seed == "0"
        assert 0.0 <= float(value) <= 1.0

    def test_worker_count_is_invisible(self, corpus_dir, train_dir, tmp_path):
        a, b = tmp_path / "w1", tmp_path / "w4"
        assert self.run_eval(corpus_dir, train_dir, a, "1") == 0
        assert self.run_eval(corpus_dir, train_dir, b, "4") == 0
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


class TestGradcheck:
    def test_pass_run(self, tmp_path, capsys):
        rc = main(["gradcheck", "--out", str(tmp_path)])
        out = capsys.readouterr().out
        assert rc == 0
        assert "[ok]" in out
        assert "PASS: worst group" in out
        assert (tmp_path / "gradcheck_config.ini").exists()

    def test_unreachable_tolerance_fails_with_2(self, tmp_path, capsys):
        rc = main(["gradcheck", "--tolerance", "1e-15", "--out", str(tmp_path)])
        assert rc == 2
        assert "FAIL" in capsys.readouterr().out


class TestViz:
    def test_outputs(self, corpus_dir, train_dir, tmp_path):
        rc = main(["viz", "--checkpoint", str(train_dir / "model.ckpt"),
                   "--corpus", str(corpus_dir / "corpus.tsv"),
                   "--steps", "6", "--out", str(tmp_path)])
        assert rc == 0
        traj = (tmp_path / "viz_trajectories.csv").read_text().splitlines()
        attn = (tmp_path / "viz_attention.csv").read_text().splitlines()
        assert traj[0] == "probe,step,x,y"
        assert attn[0] == "probe,step,score"
        assert len(traj) == len(attn) == 1 + 3 * 6  # two probes plus none
        assert any(line.startswith("none,") for line in attn[1:])

    def test_flat_model_rejected(self, corpus_dir, tmp_path, capsys):
        rc = main(["train", "--corpus", str(corpus_dir / "corpus.tsv"),
                   "--variant", "base", "--epochs", "0", *TINY_TRAIN_FLAGS[2:],
                   "--out", str(tmp_path / "flat")])
        assert rc == 0
        rc = main(["viz", "--checkpoint", str(tmp_path / "flat" / "model.ckpt"),
                   "--corpus", str(corpus_dir / "corpus.tsv"),
                   "--steps", "6", "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "no evolution layer" in capsys.readouterr().err


class TestAblation:
    def test_two_variant_run(self, corpus_dir, tmp_path):
        rc = main(["ablation", "--corpus", str(corpus_dir / "corpus.tsv"),
                   "--variants", "base,gru_augru", "--n-repeats", "1",
                   *TINY_TRAIN_FLAGS, "--out", str(tmp_path)])
        assert rc == 0
        metrics = (tmp_path / "metrics.csv").read_text().splitlines()
        summary = (tmp_path / "summary.csv").read_text().splitlines()
        assert len(metrics) == 1 + 2 and len(summary) == 1 + 2
        assert metrics[1].startswith("base,0,")
        assert metrics[2].startswith("gru_augru,0,")
        assert summary[1].split(",")[0] == "base"


class TestConsoleScript:
    def test_entry_point_installed(self):
        exe = shutil.which("dien")
        assert exe, "console script not on PATH"
        done = subprocess.run([exe, "train", "--help"], capture_output=True,
                              text=True, timeout=60)
        assert done.returncode == 0
        assert "--learning-rate" in done.stdout
