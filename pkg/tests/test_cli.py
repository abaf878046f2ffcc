import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from dtn.cli import main
from dtn.training import TrainingLog


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def run_dir_from(out):
    return next(line.split("\t", 1)[1] for line in out.splitlines() if line.startswith("run\t"))


@pytest.fixture
def trained_run(capsys, tmp_path, synthetic_cache, tiny_config_file):
    code, out, err = run(capsys, "--data-dir", synthetic_cache, "--out", tmp_path / "runs",
                         "train", tiny_config_file)
    assert code == 0, err
    return run_dir_from(out)


@pytest.fixture
def trained_classifier(capsys, tmp_path, synthetic_cache, tiny_config_file):
    cfg = tmp_path / "clf.cfg"
    cfg.write_text(tiny_config_file.read_text().replace("run.task = dtn", "run.task = eval_classifier"))
    code, out, err = run(capsys, "train", cfg, "--data-dir", synthetic_cache, "--out", tmp_path / "clf")
    assert code == 0, err
    return run_dir_from(out)


def test_help_and_usage_errors(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    with pytest.raises(SystemExit) as info:
        main(["bogus"])
    assert info.value.code == 2


def test_fetch_cached(capsys, synthetic_cache):
    code, out, _ = run(capsys, "fetch", "mnist", "test", "--data-dir", synthetic_cache)
    assert code == 0
    name, count, digest, state = out.strip().split("\t")
    assert (name, count, state) == ("mnist/test", "60", "cached")
    assert digest.startswith("sha256=")


def test_fetch_unknown_split(capsys, tmp_path):
    code, _, err = run(capsys, "fetch", "svhn", "validation", "--data-dir", tmp_path)
    assert code == 2 and "svhn/validation" in err


def test_fetch_dry_run_touches_nothing(capsys, tmp_path):
    code, out, _ = run(capsys, "fetch", "svhn", "extra", "--data-dir", tmp_path / "c", "--dry-run")
    assert code == 0 and "not cached" in out
    assert not (tmp_path / "c").exists()


def test_fetch_unreachable_is_runtime_error(capsys, tmp_path, monkeypatch):
    from dtn import data

    def fail(url, *a, **k):
        raise data.DownloadError(url, "unreachable")

    monkeypatch.setattr(data, "download", fail)
    code, _, err = run(capsys, "fetch", "mnist", "test", "--data-dir", tmp_path)
    assert code == 1 and "unreachable" in err


def test_train_dry_run(capsys, tmp_path, tiny_config_file):
    code, out, _ = run(capsys, "train", "--config", tiny_config_file, "--dry-run", "--out", tmp_path / "r")
    assert code == 0 and out.startswith("config ok")
    assert not (tmp_path / "r").exists()


def test_train_config_errors(capsys, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.seed = 1\ntrain.speed = 2\n")
    code, _, err = run(capsys, "train", bad, "--dry-run")
    assert code == 2 and "train.speed" in err and "line 2" in err
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 2


def test_train_writes_run_directory(trained_run):
    from pathlib import Path

    run = Path(trained_run)
    assert (run / "config.cfg").exists()
    manifest = json.loads((run / "manifest.json").read_text())
    assert {"run_id", "config", "config_hash", "git_or_build_version"} <= set(manifest)
    assert "train_log.jsonl" in manifest["artifacts"]
    records = TrainingLog.read(run / "train_log.jsonl")
    assert [r["step"] for r in records] == list(range(1, 7))
    assert (run / "latest" / "manifest.json").exists()
    assert (run / "f" / "latest" / "f.pt").exists()


def test_train_is_deterministic(capsys, tmp_path, synthetic_cache, tiny_config_file):
    logs = []
    for name in ("a", "b"):
        code, out, err = run(capsys, "train", tiny_config_file, "--data-dir", synthetic_cache,
                             "--out", tmp_path / name, "--seed", 5)
        assert code == 0, err
        records = TrainingLog.read(f"{run_dir_from(out)}/train_log.jsonl")
        logs.append([{k: v for k, v in r.items() if k != "wall_ms"} for r in records])
    assert logs[0] == logs[1]


def test_train_missing_data_fails(capsys, tmp_path, tiny_config_file, monkeypatch):
    from dtn import data

    monkeypatch.setattr(data, "download", lambda url, *a, **k: (_ for _ in ()).throw(
        data.DownloadError(url, "offline")))
    code, _, err = run(capsys, "train", tiny_config_file, "--data-dir", tmp_path / "empty",
                       "--out", tmp_path / "r")
    assert code == 1 and "offline" in err


def test_eval_suites(capsys, trained_run, trained_classifier, synthetic_cache):
    from pathlib import Path

    code, out, err = run(capsys, "eval", trained_run, "accuracy", "--classifier", trained_classifier,
                         "--data-dir", synthetic_cache)
    assert code == 0, err
    acc = json.loads((Path(trained_run) / "metrics/accuracy.json").read_text())
    assert acc["sample_count"] == 40 and 0 <= acc["accuracy"] <= 1
    assert (Path(trained_run) / "artifacts/transfer_grid.png").exists()

    code, out, err = run(capsys, "eval", trained_run, "basis", "--data-dir", synthetic_cache)
    assert code == 0, err
    assert "tiles=16" in out
    assert Image.open(Path(trained_run) / "artifacts/basis.png").size == (4 * 32, 4 * 32)

    code, out, err = run(capsys, "eval", trained_run, "adapt-nn", "--classifier", trained_classifier,
                         "--data-dir", synthetic_cache)
    assert code == 0, err
    assert "adapt-nn-raw-pixels" in out

    code, out, err = run(capsys, "eval", trained_run, "per-class", "--classifier", trained_classifier,
                         "--data-dir", synthetic_cache)
    assert code == 0 and out.count("class ") == 10

    manifest = json.loads((Path(trained_run) / "manifest.json").read_text())
    assert "metrics/accuracy.json" in manifest["metrics"]
    assert "artifacts/basis.png" in manifest["artifacts"]


def test_eval_errors(capsys, trained_run, tmp_path):
    code, _, err = run(capsys, "eval", trained_run, "fidelity")
    assert code == 2 and "accuracy" in err
    code, _, err = run(capsys, "eval", trained_run, "accuracy", "--data-dir", tmp_path)
    assert code == 1 and "classifier" in err
    code, _, err = run(capsys, "eval", trained_run, "reverse")
    assert code == 2
    code, _, _ = run(capsys, "eval", tmp_path, "basis")
    assert code == 1


def write_pngs(folder, n, mode="RGB", size=(32, 32)):
    folder.mkdir(exist_ok=True)
    rng = np.random.default_rng(0)
    paths = []
    for i in range(n):
        shape = size[::-1] + ((3,) if mode == "RGB" else ())
        arr = rng.integers(0, 256, shape, dtype=np.uint8)
        path = folder / f"img{i}.png"
        Image.fromarray(arr, mode).save(path)
        paths.append(path)
    return paths


def test_transfer_images(capsys, tmp_path, trained_run):
    inputs = write_pngs(tmp_path / "in", 8)
    code, out, err = run(capsys, "transfer", trained_run, *inputs, "-o", tmp_path / "out")
    assert code == 0, err
    outs = sorted((tmp_path / "out").glob("*_transferred.png"))
    assert len(outs) == 8
    assert Image.open(outs[0]).size == (32, 32)
    grid = Image.open(tmp_path / "out/grid.png")
    assert grid.size == (16 * 32, 32)


def test_transfer_grayscale_and_odd_sizes(capsys, tmp_path, trained_run):
    inputs = write_pngs(tmp_path / "in", 2, mode="L", size=(28, 28))
    (tmp_path / "in/broken.png").write_bytes(b"not an image")
    code, out, _ = run(capsys, "transfer", trained_run, *inputs, tmp_path / "in/broken.png",
                       "-o", tmp_path / "out")
    assert code == 0
    assert "broken.png" in out
    assert len(list((tmp_path / "out").glob("*_transferred.png"))) == 2


def test_transfer_needs_inputs(capsys, tmp_path, trained_run):
    code, _, err = run(capsys, "transfer", trained_run)
    assert code == 2
    (tmp_path / "junk.png").write_bytes(b"x")
    code, _, _ = run(capsys, "transfer", trained_run, tmp_path / "junk.png", "-o", tmp_path / "o")
    assert code == 1


def test_ablate_table(capsys, tmp_path, synthetic_cache, tiny_config_file):
    from pathlib import Path

    code, out, err = run(capsys, "ablate", tiny_config_file, "--data-dir", synthetic_cache,
                         "--out", tmp_path / "abl")
    assert code == 0, err
    table = (Path(run_dir_from(out)) / "table.tsv").read_text().splitlines()
    assert len(table) == 9
    assert table[1].startswith("Baseline method\t") and table[-1].startswith("Original SVHN image\t")


def test_ablate_unseen(capsys, tmp_path, synthetic_cache, tiny_config_file):
    from pathlib import Path

    code, out, err = run(capsys, "ablate", tiny_config_file, "--suite", "unseen", "--digit", "3",
                         "--data-dir", synthetic_cache, "--out", tmp_path / "u")
    assert code == 0, err
    rows = (Path(run_dir_from(out)) / "unseen_table.tsv").read_text().splitlines()
    assert rows[0] == "method\taccuracy_of_3" and len(rows) == 6


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dtn.cli", "eval", str(tmp_path), "nope"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
