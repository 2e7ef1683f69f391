import csv
import hashlib
import json
import math
import os
import subprocess
import sys

import pytest

from ssgan import cli, data
from ssgan.config import RunConfig, parse_config, serialize_config
from ssgan.errors import ConfigError


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def tree(tmp_path_factory):
    root = tmp_path_factory.mktemp("tree")
    ds = data.make_synthetic(4, 100, 8, seed=0)
    data.write_dataset_tree(ds, str(root))
    return root


@pytest.fixture
def run_toml(tmp_path):
    cfg = RunConfig(batch_size=8, iterations=4, latent_dim=4, channel_widths=(4, 8),
                    eval_interval=1, image_shape=(1, 8, 8), seed=3, out=str(tmp_path / "run"))
    path = tmp_path / "run.toml"
    path.write_text(serialize_config(cfg))
    return path


def split(tree, out, *extra):
    manifest = os.path.join(out, "manifest.json")
    code = cli.main(["split", "--root", str(tree), "--protocol", "indian", "--unlabeled", "0.5",
                     "--image-shape", "1x8x8", "--seed", "7", "--manifest", manifest, *extra])
    return code, manifest


class TestSplit:
    def test_indian(self, tree, tmp_path):
        code, manifest = split(tree, tmp_path)
        assert code == 0
        entries = json.load(open(manifest))["samples"].values()
        for cls in ("disc", "ring", "cross", "hstripes"):
            mine = [e for e in entries if e["class"] == cls]
            train = [e for e in mine if e["split"] == "train"]
            assert len(train) == 80 and len(mine) - len(train) == 20
            assert sum(e["labeled"] == "unlabeled" for e in train) == 40

    def test_rerun_identical_bytes(self, tree, tmp_path):
        _, a = split(tree, tmp_path / "a")
        _, b = split(tree, tmp_path / "b")
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_bad_fraction(self, tree, tmp_path, capsys):
        assert cli.main(["split", "--root", str(tree), "--unlabeled", "1.5",
                         "--out", str(tmp_path)]) == 1
        assert "1.5" in capsys.readouterr().err

    def test_too_few_images_names_class(self, tree, tmp_path, capsys):
        code = cli.main(["split", "--root", str(tree), "--protocol", "eth", "--image-shape",
                         "1x8x8", "--out", str(tmp_path)])
        assert code != 0
        assert "'cross'" in capsys.readouterr().err

    def test_missing_root(self, tmp_path):
        assert cli.main(["split", "--root", str(tmp_path / "none"), "--out", str(tmp_path)]) == 1


@pytest.fixture
def manifest(tree, tmp_path):
    _, path = split(tree, tmp_path)
    return path


def train(run_toml, manifest, *extra):
    return cli.main(["train", "--config", str(run_toml), "--manifest", manifest, *extra])


def metric_rows(out):
    with open(os.path.join(out, "metrics.csv")) as fh:
        return list(csv.DictReader(fh))


class TestTrain:
    def test_metrics_header(self, run_toml, manifest, tmp_path):
        assert train(run_toml, manifest) == 0
        out = tmp_path / "run"
        header = open(out / "metrics.csv").readline().strip()
        assert header == "iter,epoch,theta,delta,total,gen_loss,top1,top5,top10"
        assert len(metric_rows(out)) == 4
        assert (out / "last.ssgn").exists()

    def test_zero_iterations(self, run_toml, manifest, tmp_path):
        assert train(run_toml, manifest, "--iterations", "0") == 0
        assert sorted(p for p in os.listdir(tmp_path / "run") if p.endswith(".ssgn")) == \
            ["initial.ssgn"]

    def test_missing_manifest(self, run_toml, tmp_path):
        assert train(run_toml, str(tmp_path / "nope.json")) == 1

    def test_vanilla(self, run_toml, manifest, tmp_path):
        assert train(run_toml, manifest, "--algorithm", "vanilla") == 0
        rows = metric_rows(tmp_path / "run")
        assert rows[0]["theta"] == "" and rows[0]["top1"] == ""

    def test_resume_matches(self, run_toml, manifest, tmp_path):
        assert train(run_toml, manifest, "--out", str(tmp_path / "full")) == 0
        assert train(run_toml, manifest, "--out", str(tmp_path / "half"),
                     "--iterations", "2") == 0
        assert train(run_toml, manifest, "--out", str(tmp_path / "half"),
                     "--resume", str(tmp_path / "half" / "last.ssgn")) == 0
        full, half = metric_rows(tmp_path / "full"), metric_rows(tmp_path / "half")
        assert [r["iter"] for r in half] == ["1", "2", "3", "4"]
        for a, b in zip(full, half):
            for key in ("theta", "delta", "total", "gen_loss"):
                assert abs(float(a[key]) - float(b[key])) <= 1e-12

    def test_override_beats_file(self, run_toml, manifest, tmp_path):
        assert train(run_toml, manifest, "--iterations", "2") == 0
        saved = parse_config(open(tmp_path / "run" / "run.toml").read())
        assert saved.iterations == 2 and saved.batch_size == 8


class TestEval:
    def test_formats(self, run_toml, manifest, tmp_path):
        train(run_toml, manifest)
        out = tmp_path / "run"
        code = cli.main(["eval", "--config", str(run_toml), "--manifest", manifest,
                         "--format", "csv", "--format", "json", "--format", "table"])
        assert code == 0
        for name in ("report.csv", "report.json", "report.txt"):
            assert (out / name).exists()

    def test_fresh_model_near_chance(self, run_toml, manifest, tmp_path):
        train(run_toml, manifest, "--iterations", "0")
        assert cli.main(["eval", "--config", str(run_toml), "--manifest", manifest,
                         "--format", "json"]) == 0
        report = json.load(open(tmp_path / "run" / "report.json"))
        n = report["count"]
        assert abs(report["top1"] / 100 - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / n)

    def test_wrong_k(self, run_toml, manifest, tree, tmp_path, capsys):
        train(run_toml, manifest)
        other = tmp_path / "three"
        data.write_dataset_tree(data.make_synthetic(3, 100, 8, seed=0), str(other))
        _, m3 = split(other, tmp_path / "m3")
        code = cli.main(["eval", "--config", str(run_toml), "--manifest", m3])
        assert code != 0
        assert "d.head.weight" in capsys.readouterr().err

    def test_missing_checkpoint(self, run_toml, manifest, tmp_path):
        assert cli.main(["eval", "--config", str(run_toml), "--manifest", manifest,
                         "--checkpoint", str(tmp_path / "none.ssgn")]) != 0


class TestGenerate:
    def test_grid_and_determinism(self, run_toml, manifest, tmp_path):
        train(run_toml, manifest, "--iterations", "1")
        pngs = []
        for name in ("a.png", "b.png"):
            png = str(tmp_path / name)
            assert cli.main(["generate", "--config", str(run_toml), "--count", "64",
                             "--grid", "8x8", "--png", png]) == 0
            pngs.append(sha(png))
        assert pngs[0] == pngs[1]

    def test_over_capacity(self, run_toml, manifest, tmp_path):
        train(run_toml, manifest, "--iterations", "1")
        assert cli.main(["generate", "--config", str(run_toml), "--count", "10",
                         "--grid", "3x3"]) == 1

    def test_unwritable(self, run_toml, manifest, tmp_path):
        train(run_toml, manifest, "--iterations", "1")
        code = cli.main(["generate", "--config", str(run_toml), "--count", "4", "--grid", "2x2",
                         "--png", str(tmp_path / "no" / "such" / "dir.png")])
        assert code == 2


class TestGradcheck:
    def test_subset_passes(self, capsys):
        assert cli.main(["gradcheck", "--ops", "dense,sigmoid", "--trials", "3"]) == 0
        assert "dense" in capsys.readouterr().out

    def test_flags_honored(self, capsys):
        assert cli.main(["gradcheck", "--precision", "double", "--trials", "50",
                         "--ops", "leaky_relu"]) == 0
        assert "precision=double trials=50" in capsys.readouterr().out

    def test_injected_fault(self, capsys):
        code = cli.main(["gradcheck", "--ops", "dense,softmax", "--trials", "2",
                         "--inject-fault", "matmul"])
        assert code != 0
        assert "dense" in capsys.readouterr().err

    def test_unknown_op(self):
        assert cli.main(["gradcheck", "--ops", "fft"]) == 1


class TestConfig:
    def test_roundtrip_bytes(self, run_toml):
        text = run_toml.read_text()
        assert serialize_config(parse_config(text)) == text

    def test_unknown_key(self, tmp_path, manifest):
        bad = tmp_path / "bad.toml"
        bad.write_text('learning_rate = 0.1\n')
        assert cli.main(["train", "--config", str(bad), "--manifest", manifest]) == 1
        with pytest.raises(ConfigError, match="learning_rate"):
            parse_config(bad.read_text())

    def test_wrong_type(self):
        with pytest.raises(ConfigError):
            parse_config('iterations = "many"\n')

    def test_syntax_error(self):
        with pytest.raises(ConfigError):
            parse_config("iterations = \n")


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ssgan", "train", "--batch-size", "3"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 1
    assert "batch_size" in proc.stderr
