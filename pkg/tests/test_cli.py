import csv

import numpy as np
import pytest

from featsr import synthdata
from featsr.cli import main
from featsr.numerics import read_tensor

TINY = [
    "base_channels=2", "levels=2", "embed_dim=4", "steps=3", "batch_size=2", "microbatch=2",
    "sampler_steps=4", "n_identities=6", "n_images_per_identity=4", "log_every=1",
]


def _sets(*extra):
    out = []
    for kv in TINY + list(extra):
        out += ["--set", kv]
    return out


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    import os

    for k in list(os.environ):
        if k.startswith("FEATSR_"):
            monkeypatch.delenv(k)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A synthesized dataset and a 3-step checkpoint shared by the slower tests."""
    root = tmp_path_factory.mktemp("run")
    assert main(["-q", "synth", "--out", str(root / "data")] + _sets()) == 0
    assert main(["-q", "train", "--out", str(root / "train")] + _sets()) == 0
    return root


def test_synth_default_writes_200_identities(tmp_path):
    assert main(["-q", "synth", "--out", str(tmp_path / "a"), "--set", "n_images_per_identity=3"]) == 0
    lines = (tmp_path / "a" / "identities.csv").read_text().splitlines()
    assert len(lines) == 1 + 200
    assert (tmp_path / "a" / "resolved_config.txt").exists()


def test_synth_deterministic_manifests(tmp_path):
    for d in ("a", "b"):
        assert main(["-q", "synth", "--out", str(tmp_path / d)] + _sets()) == 0
    for name in ("identities.csv", "split.csv", "gallery/00003.pgm", "features/00002_1.tnsr"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_rejects_two_images_and_non_empty_dir(tmp_path, capsys):
    assert main(["-q", "synth", "--out", str(tmp_path / "a"), "--set", "n_images_per_identity=2"]) == 1
    (tmp_path / "b").mkdir()
    (tmp_path / "b" / "x").write_text("")
    assert main(["-q", "synth", "--out", str(tmp_path / "b")] + _sets()) == 1
    assert "not empty" in capsys.readouterr().err
    assert main(["-q", "synth", "--out", str(tmp_path / "b"), "--force"] + _sets()) == 0


def test_unknown_key_and_env_override(tmp_path, monkeypatch, capsys):
    assert main(["-q", "synth", "--out", str(tmp_path / "a"), "--set", "n_identitys=3"]) == 1
    assert "unknown key" in capsys.readouterr().err
    monkeypatch.setenv("FEATSR_N_IDENTITIES", "3")
    assert main(["-q", "synth", "--out", str(tmp_path / "b"), "--set", "n_images_per_identity=3"]) == 0
    assert len((tmp_path / "b" / "identities.csv").read_text().splitlines()) == 4


def test_train_smoke_and_outputs(run):
    d = run / "train"
    trace = np.loadtxt(d / "loss_trace.csv", delimiter=",", skiprows=1)
    assert trace.shape == (3, 3) and np.all(np.isfinite(trace))
    assert (d / "checkpoint.fasr").exists() and (d / "loss.png").exists()
    assert "steps = 3" in (d / "resolved_config.txt").read_text()


def test_train_identical_seeds_identical_checkpoints(run, tmp_path):
    assert main(["-q", "train", "--out", str(tmp_path)] + _sets()) == 0
    assert (tmp_path / "checkpoint.fasr").read_bytes() == (run / "train" / "checkpoint.fasr").read_bytes()


def test_train_resume_continues_numbering(run, tmp_path):
    ck = run / "train" / "checkpoint.fasr"
    assert main(["-q", "train", "--out", str(tmp_path), "--resume", str(ck)] + _sets()) == 0
    steps = np.loadtxt(tmp_path / "loss_trace.csv", delimiter=",", skiprows=1)[:, 0]
    assert steps.tolist() == [4, 5, 6]


def test_train_on_dataset_source(run, tmp_path):
    assert main(["-q", "train", "--out", str(tmp_path), "--dataset", str(run / "data")]
                + _sets("train_source=dataset")) == 0
    assert main(["-q", "train", "--out", str(tmp_path / "x")] + _sets("train_source=dataset")) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(tmp_path, capsys):
    assert main(["-q", "train", "--out", str(tmp_path)] + _sets("learning_rate=1e300")) == 2
    assert "step" in capsys.readouterr().err


def test_sr_dimensions_determinism_and_fallback(run, tmp_path):
    ck = str(run / "train" / "checkpoint.fasr")
    probe = str(run / "data" / "probe" / "00000.pgm")
    feats = [str(p) for p in sorted((run / "data" / "feature_images").glob("00000_*.pgm"))]
    outs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.pgm"
        assert main(["-q", "sr", "--checkpoint", ck, "--probe", probe, "--out", str(out), "--features"] + feats
                    + _sets()) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    img = synthdata.read_pgm(tmp_path / "a.pgm")
    assert img.shape == synthdata.read_pgm(probe).shape
    # no feature images: features come from the probe itself
    assert main(["-q", "sr", "--checkpoint", ck, "--probe", probe, "--out", str(tmp_path / "c.pgm"),
                 "--trace", str(tmp_path / "trace.csv")] + _sets()) == 0
    assert len((tmp_path / "trace.csv").read_text().splitlines()) == 1 + 4 + 1
    assert main(["-q", "sr", "--checkpoint", ck, "--probe", probe, "--out", str(tmp_path / "d.pgm"),
                 "--features-only"] + _sets()) == 0
    assert (tmp_path / "a.config.txt").exists()


def test_sr_arch_mismatch_is_config_error(run, tmp_path, capsys):
    ck = str(run / "train" / "checkpoint.fasr")
    probe = str(run / "data" / "probe" / "00000.pgm")
    assert main(["-q", "sr", "--checkpoint", ck, "--probe", probe, "--out", str(tmp_path / "a.pgm")]
                + _sets("base_channels=3")) == 1
    assert "architecture" in capsys.readouterr().err


def test_eval_report_rows(run, tmp_path, capsys):
    ck = str(run / "train" / "checkpoint.fasr")
    assert main(["-q", "eval", "--checkpoint", ck, "--dataset", str(run / "data"), "--out", str(tmp_path)]
                + _sets()) == 0
    with open(tmp_path / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["row"] for r in rows] == ["LR-baseline", "FASR-toy"]
    assert list(rows[0]) == ["row", "AUC", "Rank-1", "Rank-5", "Rank-10", "PSNR"]
    assert read_tensor(tmp_path / "similarity_FASR-toy.tnsr").shape == (6, 6)
    assert (tmp_path / "cmc.png").exists() and (tmp_path / "samples.png").exists()
    assert "FASR-toy" in capsys.readouterr().out


def test_eval_ablation_rows(run, tmp_path):
    ck = str(run / "train" / "checkpoint.fasr")
    assert main(["-q", "eval", "--checkpoint", ck, "--dataset", str(run / "data"), "--out", str(tmp_path),
                 "--single-feature", "--unconditional-features", "--trace", str(tmp_path / "t.csv")] + _sets()) == 0
    with open(tmp_path / "report.csv") as fh:
        names = [r["row"] for r in csv.DictReader(fh)]
    assert names == ["LR-baseline", "FASR-toy", "single-feature", "unconditional-features"]
    assert np.load(tmp_path / "sr_single-feature.npy").shape == (6, 32, 32)


def test_eval_resolved_config_reproduces_report(run, tmp_path):
    ck = str(run / "train" / "checkpoint.fasr")
    assert main(["-q", "eval", "--checkpoint", ck, "--dataset", str(run / "data"), "--out", str(tmp_path / "a")]
                + _sets()) == 0
    assert main(["-q", "eval", "--checkpoint", ck, "--dataset", str(run / "data"), "--out", str(tmp_path / "b"),
                 "--config", str(tmp_path / "a" / "resolved_config.txt")]) == 0
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()


@pytest.mark.slow
def test_check_passes_on_fresh_build(capsys):
    assert main(["-q", "check"]) == 0
    assert "all" in capsys.readouterr().out


@pytest.mark.slow
def test_check_reports_schedule_and_corrupted_layer(capsys):
    assert main(["-q", "check", "--set", "sigma_max=0.001", "--corrupt-layer", "enc1.ss.w"]) == 3
    err = capsys.readouterr().err
    assert "schedule.invariants" in err
    assert "gradient.enc1.ss.w" in err
    assert "gradient.in.conv.w" not in err
