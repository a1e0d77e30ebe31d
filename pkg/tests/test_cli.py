import csv
import hashlib
import math
import shutil

import numpy as np
import pytest

from afsrl import cli
from afsrl import numerics
from afsrl.augmentation import make_pair
from afsrl.errors import NumericalError
from afsrl.losses import cosine_sim
from afsrl.pointcloud import load_corpus
from afsrl.trainer import TrainConfig, batches, forward_losses, new_state

TINY = ["--k", "5", "--batch", "4", "--encoder-dims", "3,8,16", "--head-dims", "16,16,8"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert run("gen-data", "--per-class", 4, "--points", 64, "--seed", 3, "--out", d) == 0
    return d


def test_gen_data_full_size_and_determinism(tmp_path):
    assert run("gen-data", "--per-class", 50, "--out", tmp_path / "a") == 0
    assert run("gen-data", "--per-class", 50, "--out", tmp_path / "b") == 0
    ds = load_corpus(tmp_path / "a")
    assert len(ds) == 200 and len(ds.train_idx) == 152 and len(ds.test_idx) == 48
    assert (tmp_path / "a" / "manifest.tsv").exists()
    assert len(list((tmp_path / "a" / "clouds").rglob("*.xyz"))) == 200
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    run("gen-data", "--per-class", 50, "--seed", 1, "--out", tmp_path / "c")
    assert (tmp_path / "a" / "corpus.txt").read_text() != (tmp_path / "c" / "corpus.txt").read_text()


def test_gen_data_usage_errors(tmp_path):
    assert run("gen-data", "--classes", "cone", "--out", tmp_path) == 1
    assert run("gen-data", "--per-class", 0, "--out", tmp_path) == 1
    assert run("gen-data") == 1
    assert run("no-such-command") == 1


def test_written_cloud_files_load_as_directory_corpus(corpus, tmp_path):
    shutil.copytree(corpus / "clouds", tmp_path / "files")
    from_files = load_corpus(tmp_path / "files")
    from_manifest = load_corpus(corpus)
    assert from_files.class_names == sorted(from_manifest.class_names)
    assert sorted(c.points.tobytes() for c in from_files.clouds) == sorted(c.points.tobytes() for c in from_manifest.clouds)


def test_mesh_directory_corpus(tmp_path):
    tet = "OFF\n4 4 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 1 3\n3 0 2 3\n3 1 2 3\n"
    quad = "OFF\n4 2 0\n0 0 0\n2 0 0\n2 1 0\n0 1 0\n3 0 1 2\n3 0 2 3\n"
    for name, text in (("tet", tet), ("plane", quad)):
        (tmp_path / name).mkdir()
        for i in range(4):
            (tmp_path / name / f"{i}.off").write_text(text)
    ds = load_corpus(tmp_path, n_points=100)
    assert len(ds) == 8 and ds.class_names == ["plane", "tet"]
    assert all(len(c) == 100 and c.points.min() >= -0.5 and c.points.max() <= 0.5 for c in ds.clouds)


def test_pretrain_one_epoch_on_full_corpus(tmp_path):
    run("gen-data", "--out", tmp_path / "data")
    before = tree_hash(tmp_path / "data")
    assert run("pretrain", "--data", tmp_path / "data", "--out", tmp_path / "run", "--epochs", 1) == 0
    out = tmp_path / "run"
    for name in ("model.afsr", "optimizer.afsr", "state.txt", "metrics.csv", "run_manifest.txt"):
        assert (out / name).exists()
    manifest = (out / "run_manifest.txt").read_text()
    assert "dataset_fingerprint=" in manifest and "epochs=1" in manifest and "started_at=" in manifest
    assert tree_hash(tmp_path / "data") == before  # input corpus untouched


def test_pretrain_is_deterministic(corpus, tmp_path):
    for name in ("a", "b"):
        assert run("pretrain", "--data", corpus, "--out", tmp_path / name, "--epochs", 2, *TINY) == 0
    for f in ("metrics.csv", "model.afsr", "optimizer.afsr", "state.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_resume_matches_uninterrupted(corpus, tmp_path):
    run("pretrain", "--data", corpus, "--out", tmp_path / "full", "--epochs", 3, *TINY)
    run("pretrain", "--data", corpus, "--out", tmp_path / "part", "--epochs", 1, *TINY)
    assert run("pretrain", "--data", corpus, "--out", tmp_path / "part", "--resume", "--epochs", 3) == 0
    for f in ("metrics.csv", "model.afsr", "optimizer.afsr"):
        assert (tmp_path / "full" / f).read_bytes() == (tmp_path / "part" / f).read_bytes()
    assert run("pretrain", "--data", corpus, "--out", tmp_path / "empty", "--resume") == 2


def test_config_precedence(corpus, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# flag or field names\nepochs=1\ntau=0.3\nk_neighbors=6\nbatch=4\n")
    assert run("pretrain", "--data", corpus, "--out", tmp_path / "r", "--config", cfg, "--tau", 0.7) == 0
    state = (tmp_path / "r" / "state.txt").read_text().splitlines()
    assert "tau=0.7" in state and "epochs=1" in state and "k_neighbors=6" in state and "batch_size=4" in state
    assert "sample_ratio=0.8" in state  # untouched default
    cfg.write_text("temperature=0.3\n")
    assert run("pretrain", "--data", corpus, "--out", tmp_path / "r2", "--config", cfg) == 1
    assert run("pretrain", "--data", corpus, "--out", tmp_path / "r3", "--config", tmp_path / "missing.txt") == 1


def test_inactive_loss_columns_are_logged(corpus, tmp_path):
    for arm, flag in (("da", "--beta"), ("fa", "--alpha")):
        assert run("pretrain", "--data", corpus, "--out", tmp_path / arm, "--epochs", 1, flag, 0, *TINY) == 0
    da, fa = read_csv(tmp_path / "da" / "metrics.csv"), read_csv(tmp_path / "fa" / "metrics.csv")
    assert all(math.isfinite(float(r["loss_fa"])) and float(r["loss_fa"]) > 0 for r in da)
    assert all(math.isfinite(float(r["loss_da"])) and float(r["loss_da"]) > 0 for r in fa)
    assert all(float(r["loss_total"]) == float(r["loss_da"]) for r in da)
    assert all(float(r["loss_total"]) == float(r["loss_fa"]) for r in fa)


def test_zero_epsilon_logs_duplicated_positive_loss(corpus, tmp_path):
    assert run("pretrain", "--data", corpus, "--out", tmp_path, "--epochs", 1, "--epsilon", 0, *TINY) == 0
    first = read_csv(tmp_path / "metrics.csv")[0]

    # replay the first step and evaluate the identical-views loss in closed form
    cfg = TrainConfig(k_neighbors=5, batch_size=4, epsilon=0.0, epochs=1, encoder_dims=(3, 8, 16), head_dims=(16, 16, 8))
    ds = load_corpus(corpus)
    clouds = ds.subset(ds.train_idx)
    state = new_state(cfg)
    idx = batches(len(clouds), cfg.batch_size, state.rng)[0]
    pairs = [make_pair(clouds[i], cfg.k_neighbors, cfg.sample_ratio, state.rng, int(i)) for i in idx]
    _, l_fa, _, h, zu = forward_losses(pairs, state.params, cfg, state.rng)
    z = zu.data
    n, tau = len(z), cfg.tau
    per = [math.log(1 + 2 * sum(math.exp((cosine_sim(z[a], z[k]) - 1) / tau) for k in range(n) if k != a))
           for a in range(n)]
    assert float(first["loss_fa"]) == l_fa.item()
    assert abs(float(first["loss_fa"]) - np.mean(per)) < 1e-12


def test_numerical_failure_exit_code(corpus, tmp_path, monkeypatch):
    def blow_up(*a, **k):
        raise NumericalError("non-finite loss at step 0")

    monkeypatch.setattr(cli, "train", blow_up)
    assert run("pretrain", "--data", corpus, "--out", tmp_path, "--epochs", 1) == 3


def test_probe_outputs(corpus, tmp_path):
    run("pretrain", "--data", corpus, "--out", tmp_path / "run", "--epochs", 1, *TINY)
    assert run("probe", "--data", corpus, "--checkpoint", tmp_path / "run", "--out", tmp_path / "p",
               "--segmentation", "--confusion", "--probe-epochs", 100) == 0
    rows = read_csv(tmp_path / "p" / "probe_metrics.csv")
    keys = [(r["metric"], r["split"]) for r in rows]
    assert len(keys) == len(set(keys)) == 5
    assert ("miou", "test") in keys and all(0 <= float(r["value"]) <= 1 for r in rows)
    cm = list(csv.reader(open(tmp_path / "p" / "confusion_test.csv")))
    assert cm[0] == ["true", "sphere", "cube", "cylinder", "torus"]
    assert sum(int(x) for row in cm[1:] for x in row[1:]) == len(load_corpus(corpus).test_idx)


def test_probe_errors(corpus, tmp_path):
    assert run("probe", "--data", corpus, "--checkpoint", tmp_path / "none", "--out", tmp_path / "p") == 2
    assert run("probe", "--data", corpus, "--out", tmp_path / "p") == 1
    assert run("probe", "--data", corpus, "--untrained", "--out", tmp_path / "u", "--probe-epochs", 50, *TINY) == 0


def test_ablate_grid_rows_and_zero_epsilon_cell(corpus, tmp_path):
    common = ["--epochs", 1, "--probe-epochs", 50, *TINY]
    assert run("ablate", "--data", corpus, "--out", tmp_path / "ab", "--arms", "fused", *common) == 0
    rows = read_csv(tmp_path / "ab" / "ablation.csv")
    assert len(rows) == 18
    assert sorted({float(r["epsilon"]) for r in rows}) == [0.0, 0.25, 0.5, 1.0, 2.0, 5.0]
    summary = read_csv(tmp_path / "ab" / "ablation_summary.csv")
    assert len(summary) == 6

    # the eps = 0 cell is the same run as a plain pretrain with --epsilon 0, probed the same way
    cell = next(r for r in rows if float(r["epsilon"]) == 0.0 and r["seed"] == "1")
    run("pretrain", "--data", corpus, "--out", tmp_path / "e0", "--epsilon", 0, "--seed", 1, *common[:2], *TINY)
    run("probe", "--data", corpus, "--checkpoint", tmp_path / "e0", "--out", tmp_path / "e0p", "--probe-epochs", 50)
    probe = {(r["metric"], r["split"]): r["value"] for r in read_csv(tmp_path / "e0p" / "probe_metrics.csv")}
    assert float(probe[("accuracy", "test")]) == float(cell["test_accuracy"])


def test_ablate_single_arms(corpus, tmp_path):
    assert run("ablate", "--data", corpus, "--out", tmp_path, "--arms", "da_only,fa_only", "--seeds", "0,1",
               "--epochs", 1, "--probe-epochs", 20, *TINY) == 0
    rows = read_csv(tmp_path / "ablation.csv")
    assert [(r["arm"], r["alpha"], r["beta"]) for r in rows] == [
        ("da_only", "1.0", "0.0"), ("da_only", "1.0", "0.0"), ("fa_only", "0.0", "1.0"), ("fa_only", "0.0", "1.0")]
    assert run("ablate", "--data", corpus, "--out", tmp_path, "--arms", "bogus") == 1


def test_selftest_passes_and_reports(tmp_path, capsys):
    assert run("selftest", "--quick", "--out", tmp_path) == 0
    report = (tmp_path / "selftest.txt").read_text()
    for suite in ("op_gradients", "fused_gradient", "ntxent_oracle", "knn_exact", "permutation"):
        assert suite in report
    assert "max_error=" in report and report.rstrip().endswith("ALL PASS")


def test_selftest_catches_corrupted_backward(monkeypatch, capsys):
    def bad_relu(a):
        mask = a.data > 0
        out = numerics.Tensor(a.data * mask, (a,), "relu")

        def _backward():
            a.grad += 2.0 * out.grad * mask  # wrong by a factor of two

        out._backward = _backward
        return out

    monkeypatch.setattr(numerics, "relu", bad_relu)
    assert run("selftest", "--quick") != 0
    assert "FAIL" in capsys.readouterr().out
