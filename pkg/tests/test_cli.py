import numpy as np
import pytest

import dsplat.training
from dsplat.cli import main
from dsplat.errors import NumericalAbort
from dsplat.render import read_ppm, write_ppm
from dsplat.scenegen import Dataset, generate
from dsplat.scenegen import preset as scene_preset
from dsplat.training import TrainConfig, read_metrics, save_checkpoint


def report(text):
    """key<TAB>value lines into a dict."""
    return dict(line.split("\t", 1) for line in text.strip().splitlines() if "\t" in line)


def test_eval_identical_directories(tmp_path, capsys, rng):
    for d in ("a", "b"):
        (tmp_path / d / "0").mkdir(parents=True)
    for i in range(3):
        img = rng.uniform(size=(16, 16, 3))
        write_ppm(tmp_path / "a" / "0" / f"{i}.ppm", img)
        write_ppm(tmp_path / "b" / "0" / f"{i}.ppm", img)
    code = main(["eval", "--pred", str(tmp_path / "a"), "--gt", str(tmp_path / "b"),
                 "--out", str(tmp_path / "rep")])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "image\tpsnr\tssim"
    assert lines[-1] == "mean\t99\t1"
    assert (tmp_path / "rep" / "eval_psnr.png").exists()


def test_generate_twice_identical_manifests(tmp_path, capsys):
    for d in ("a", "b"):
        assert main(["generate", "--preset", "mini", "--seed", "7", "--out", str(tmp_path / d)]) == 0
    a = (tmp_path / "a" / "manifest.txt").read_text()
    assert a == (tmp_path / "b" / "manifest.txt").read_text()
    assert "seed = 7" in a
    rep = report(capsys.readouterr().out.split("command\tgenerate")[1])
    assert rep["gaussians"] == "250" and rep["dynamic"] == "50"


@pytest.mark.parametrize(
    "argv, code",
    [
        ([], 1),
        (["fly"], 1),
        (["fit", "--bogus"], 1),
        (["fit", "--set", "no_such_key=1", "--steps", "5"], 1),
        (["fit", "--set", "separation_at=10", "--set", "early_end=20"], 1),
        (["fit", "--set", "steps"], 1),
        (["render"], 1),
        (["eval", "--pred", "/nonexistent/a", "--gt", "/nonexistent/b"], 2),
        (["fit", "--config", "/nonexistent/cfg.txt"], 2),
        (["render", "--checkpoint", "/nonexistent/c.dsckpt"], 2),
    ],
)
def test_exit_codes(argv, code, capsys):
    assert main(argv) == code
    assert capsys.readouterr().err.strip()


def test_numerical_abort_exit_code(tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise NumericalAbort("non-finite loss at step 3", "ckpt.dsckpt")
    monkeypatch.setattr(dsplat.training, "fit", boom)
    assert main(["fit", "--preset", "smoke", "--out", str(tmp_path)]) == 3
    assert "ckpt.dsckpt" in capsys.readouterr().err


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert main(["fit", "--preset", "smoke", "--seed", "0", "--out", str(out / "run")]) == 0
    return out


def test_fit_writes_artifacts(smoke_run):
    run = smoke_run / "run"
    for name in ("metrics.csv", "checkpoint.dsckpt", "partition.txt", "prune_report.txt",
                 "config_resolved.txt", "training_curves.png", "partition.png"):
        assert (run / name).exists(), name
    rows = read_metrics(run / "metrics.csv")
    assert rows[-1]["step"] == 60


def test_config_echo_reproduces_run(smoke_run):
    run = smoke_run / "run"
    assert main(["fit", "--config", str(run / "config_resolved.txt"), "--out",
                 str(smoke_run / "again")]) == 0
    for name in ("metrics.csv", "checkpoint.dsckpt", "partition.txt"):
        assert (run / name).read_bytes() == (smoke_run / "again" / name).read_bytes()


def test_flags_override_config_file(smoke_run, capsys):
    run = smoke_run / "run"
    assert main(["fit", "--config", str(run / "config_resolved.txt"), "--steps", "45",
                 "--set", "filter_at=40", "--out", str(smoke_run / "short")]) == 0
    text = (smoke_run / "short" / "config_resolved.txt").read_text()
    assert "steps = 45\n" in text and "filter_at = 40\n" in text
    assert report(capsys.readouterr().out)["steps"] == "45"


def test_resume_matches_uninterrupted(smoke_run):
    run = smoke_run / "run"
    cfg = TrainConfig.from_text((run / "config_resolved.txt").read_text())
    mid = smoke_run / "mid.dsckpt"

    def snapshot(state):
        if state.step == 30:
            save_checkpoint(state, mid)
    dataset = Dataset.from_generated(generate(scene_preset(cfg.scene_preset, seed=cfg.seed)))
    dsplat.training.fit(cfg, dataset, progress=snapshot)
    assert main(["fit", "--config", str(run / "config_resolved.txt"), "--resume", str(mid),
                 "--out", str(smoke_run / "resumed")]) == 0
    for name in ("metrics.csv", "partition.txt", "prune_report.txt"):
        assert (smoke_run / "resumed" / name).read_text() == (run / name).read_text()


def test_render_from_checkpoint(smoke_run, capsys):
    out = smoke_run / "renders"
    assert main(["render", "--checkpoint", str(smoke_run / "run" / "checkpoint.dsckpt"),
                 "--t", "0.5", "--view", "1", "--oracle", "--out", str(out)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    head = lines[0].split("\t")
    row = dict(zip(head, lines[1].split("\t")))
    img = read_ppm(row["file"])
    assert img.shape == (32, 32, 3)
    assert row["width"] == "32" and row["height"] == "32"
    assert np.isfinite(float(row["psnr_vs_oracle"]))
    assert main(["render", "--checkpoint", str(smoke_run / "run" / "checkpoint.dsckpt"),
                 "--t", "1.5"]) == 1


def test_classify_oracle_and_checkpoint(smoke_run, capsys):
    out = smoke_run / "cls"
    assert main(["classify", "--preset", "smoke", "--out", str(out)]) == 0
    rep = report(capsys.readouterr().out)
    assert float(rep["precision"]) >= 0.95 and float(rep["recall"]) >= 0.95
    assert (out / "partition.txt").exists() and (out / "partition.png").exists()
    assert main(["classify", "--preset", "smoke", "--checkpoint",
                 str(smoke_run / "run" / "checkpoint.dsckpt"), "--out", str(out / "ck")]) == 0
    assert "precision" not in report(capsys.readouterr().out)


def test_prune_report(smoke_run, capsys):
    out = smoke_run / "prune"
    assert main(["prune-report", "--preset", "smoke", "--checkpoint",
                 str(smoke_run / "run" / "checkpoint.dsckpt"), "--tau", "0.02",
                 "--out", str(out)]) == 0
    rep = report(capsys.readouterr().out)
    lines = (out / "prune_report.txt").read_text().splitlines()
    assert len(lines) - 1 == int(rep["would_remove"])


def test_log_env_echoes_config(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("DSPLAT_LOG", "INFO")
    assert main(["generate", "--preset", "tiny", "--out", str(tmp_path)]) == 0
    assert "resolved config" in capsys.readouterr().err
