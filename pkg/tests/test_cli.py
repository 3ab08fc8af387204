import csv
import json

import numpy as np
import pytest

import vardfs.diffcore as dc
from vardfs import cli
from vardfs.dataio import write_idx, write_synthetic_corpus
from vardfs.diffcore import Tensor


def write_spec(path, dataset, model=None, train=None, output="out"):
    model = model or {"arch": "deepsets", "hidden_dim": 8, "num_blocks": 1, "pooling": "masked-mean"}
    train = train or {"budget": 2, "epochs": 3, "batch_size": 32, "lr": 3e-3, "seed": 0}
    lines = []
    for name, sec in (("dataset", dataset), ("model", model), ("train", train), ("output", {"dir": output})):
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in sec.items())
    path.write_text("\n".join(lines) + "\n")
    return path


def oracle_spec(tmp_path, name="oracle.ini", output="out", **train):
    ds = {"kind": "synthetic-oracle", "n_train": 300, "n_test": 60, "agreement_trials": 200,
          "agreement_steps": 2}
    tr = {"budget": 2, "epochs": 4, "batch_size": 32, "lr": 3e-3, "seed": 0}
    tr.update(train)
    return write_spec(tmp_path / name, ds, train=tr, output=output)


@pytest.fixture
def image_spec(tmp_path):
    rng = np.random.default_rng(0)
    images = (rng.random((40, 8, 8)) * 255).astype(np.uint8)
    labels = rng.integers(0, 3, size=40).astype(np.uint8)
    write_idx(tmp_path / "img.idx", images)
    write_idx(tmp_path / "lab.idx", labels)
    ds = {"kind": "image-idx", "train_images": "img.idx", "train_labels": "lab.idx",
          "test_images": "img.idx", "test_labels": "lab.idx", "sample_count": 20}
    return write_spec(tmp_path / "img.ini", ds)


@pytest.fixture
def bow_spec(tmp_path):
    write_synthetic_corpus(tmp_path / "c.tsv", tmp_path / "e.txt", np.random.default_rng(1), n_docs=80)
    ds = {"kind": "bow", "corpus": "c.tsv", "embeddings": "e.txt", "sample_count": 10}
    return write_spec(tmp_path / "bow.ini", ds)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestRunSpec:
    def test_paths_relative_to_spec(self, bow_spec, tmp_path):
        spec = cli.load_run_spec(bow_spec)
        assert spec.dataset["corpus"] == tmp_path / "c.tsv"
        assert spec.output == tmp_path / "out"

    def test_missing_path_names_field(self, tmp_path, capsys):
        ds = {"kind": "bow", "corpus": "nope.tsv", "embeddings": "e.txt"}
        path = write_spec(tmp_path / "bad.ini", ds)
        assert cli.main(["train", "--spec", str(path)]) == 2
        assert "dataset.corpus" in capsys.readouterr().err

    @pytest.mark.parametrize("section,key,value", [
        ("dataset", "kind", "video"),
        ("train", "budget", "0"),
        ("train", "lr", "fast"),
        ("train", "temperatures", ""),
        ("model", "arch", "rnn"),
        ("model", "pooling", "max"),
    ])
    def test_invalid_fields(self, tmp_path, capsys, section, key, value):
        ds = {"kind": "synthetic-oracle", "n_train": 50}
        model = {"arch": "deepsets", "hidden_dim": 8, "num_blocks": 1, "pooling": "masked-mean"}
        train = {"budget": 2, "epochs": 1}
        {"dataset": ds, "model": model, "train": train}[section][key] = value
        path = write_spec(tmp_path / "bad.ini", ds, model, train)
        assert cli.main(["train", "--spec", str(path)]) == 2
        assert capsys.readouterr().err.startswith("vardfs:")

    def test_missing_spec_file(self, tmp_path):
        assert cli.main(["train", "--spec", str(tmp_path / "none.ini")]) == 2


class TestTrain:
    def test_outputs(self, tmp_path):
        path = oracle_spec(tmp_path)
        assert cli.main(["train", "--spec", str(path)]) == 0
        out = tmp_path / "out"
        assert (out / "checkpoint.npz").is_file()
        rows = read_csv(out / "loss.csv")
        assert rows[0] == ["epoch", "mean_loss"]
        assert len(rows) == 5
        summary = json.loads((out / "summary.json").read_text())
        assert summary["epoch_losses"][-1] < summary["initial_loss"]

    def test_deterministic(self, tmp_path):
        a = oracle_spec(tmp_path, "a.ini", output="a")
        b = oracle_spec(tmp_path, "b.ini", output="b")
        assert cli.main(["train", "--spec", str(a)]) == 0
        assert cli.main(["train", "--spec", str(b)]) == 0
        assert (tmp_path / "a" / "loss.csv").read_text() == (tmp_path / "b" / "loss.csv").read_text()

    def test_seed_override_changes_run(self, tmp_path):
        path = oracle_spec(tmp_path)
        cli.main(["train", "--spec", str(path)])
        first = (tmp_path / "out" / "loss.csv").read_text()
        cli.main(["train", "--spec", str(path), "--seed", "5"])
        assert (tmp_path / "out" / "loss.csv").read_text() != first

    def test_divergence_exit_code(self, tmp_path, capsys):
        path = oracle_spec(tmp_path, lr=1e200)
        with np.errstate(all="ignore"):
            assert cli.main(["train", "--spec", str(path)]) == 3
        assert "numerical failure" in capsys.readouterr().err


class TestEval:
    def test_rows_and_random_column(self, bow_spec, tmp_path):
        assert cli.main(["train", "--spec", str(bow_spec)]) == 0
        assert cli.main(["eval", "--spec", str(bow_spec), "--budgets", "1,3,5",
                         "--with-random-baseline"]) == 0
        rows = read_csv(tmp_path / "out" / "eval.csv")
        assert rows[0] == ["budget", "accuracy", "n", "random_accuracy"]
        assert [r[0] for r in rows[1:]] == ["1", "3", "5"]
        assert (tmp_path / "out" / "checkpoint_random.npz").is_file()
        for r in rows[1:]:
            assert 0.0 <= float(r[1]) <= 1.0 and 0.0 <= float(r[3]) <= 1.0

    def test_dimension_mismatch(self, bow_spec, tmp_path, capsys):
        oracle = oracle_spec(tmp_path)
        assert cli.main(["train", "--spec", str(oracle)]) == 0
        ckpt = tmp_path / "out" / "checkpoint.npz"
        assert cli.main(["eval", "--spec", str(bow_spec), "--checkpoint", str(ckpt)]) == 2
        assert "token_dim" in capsys.readouterr().err

    def test_missing_checkpoint(self, bow_spec):
        assert cli.main(["eval", "--spec", str(bow_spec)]) == 2


class TestHeatmap:
    def test_grid_and_pgm(self, image_spec, tmp_path):
        assert cli.main(["train", "--spec", str(image_spec)]) == 0
        assert cli.main(["heatmap", "--spec", str(image_spec), "--budget", "1"]) == 0
        grid = np.loadtxt(tmp_path / "out" / "heatmap.csv", delimiter=",")
        assert grid.shape == (8, 8)
        assert grid.sum() == 40
        raw = (tmp_path / "out" / "heatmap.pgm").read_bytes()
        assert raw.startswith(b"P5 8 8 255\n")
        pixels = np.frombuffer(raw[len(b"P5 8 8 255\n"):], dtype=np.uint8)
        assert pixels.size == 64 and pixels.max() == 255

    def test_non_image_rejected(self, bow_spec):
        assert cli.main(["heatmap", "--spec", str(bow_spec)]) == 2


class TestOracleCheck:
    def test_oracle_policy_agrees(self, tmp_path):
        path = oracle_spec(tmp_path)
        assert cli.main(["oracle-check", "--spec", str(path), "--policy", "oracle"]) == 0
        report = json.loads((tmp_path / "out" / "oracle_report.json").read_text())
        assert report["agreement"] == [1.0, 1.0]
        assert report["brute_force_max_abs_diff"] < 1e-10
        rows = read_csv(tmp_path / "out" / "cmi_tables.csv")
        assert rows[0] == ["trial", "step", "feature", "cmi"]

    def test_random_policy_near_one_in_d(self, tmp_path):
        ds = {"kind": "synthetic-oracle", "n_train": 10, "agreement_trials": 2000,
              "agreement_steps": 1}
        path = write_spec(tmp_path / "r.ini", ds)
        assert cli.main(["oracle-check", "--spec", str(path), "--policy", "random"]) == 0
        report = json.loads((tmp_path / "out" / "oracle_report.json").read_text())
        assert report["agreement"][0] == pytest.approx(0.1, abs=0.025)

    def test_trained_policy_trains_when_missing(self, tmp_path):
        path = oracle_spec(tmp_path)
        assert cli.main(["oracle-check", "--spec", str(path)]) == 0
        assert (tmp_path / "out" / "checkpoint.npz").is_file()

    def test_requires_oracle_dataset(self, bow_spec):
        assert cli.main(["oracle-check", "--spec", str(bow_spec)]) == 2


class TestSelfcheck:
    def test_passes(self, capsys):
        assert cli.main(["selfcheck"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 3

    def test_injected_gradient_bug_fails(self, monkeypatch, capsys):
        def bad_relu(x):
            keep = x.data > 0
            return Tensor._make(np.where(keep, x.data, 0.0), (x,), lambda g: (g,))

        monkeypatch.setattr(dc, "relu", bad_relu)
        assert cli.main(["selfcheck"]) == 1
        assert "FAIL gradients" in capsys.readouterr().out
