import json
import subprocess
import sys
import time

import pytest

from navlab.cli import SUBCOMMANDS, main
from navlab.trainer import read_metrics_csv, thread_cap

TINY = "seed = 3\nframes_budget = 4000\nworkers = 4\neval_every = 2000\neval_episodes = 3\neval_cap = 60\nsuccess_cap = 40\n"


def gen(tmp_path, count=2):
    d = tmp_path / "scenes"
    assert main(["--quiet", "gen-scenes", "--seed", "1", "--count", str(count), "--out", str(d),
                 "--width", "5", "--height", "5", "--targets", "2", "--percept-dim", "16"]) == 0
    return d


def cfg_file(tmp_path, text=TINY):
    p = tmp_path / "c.toml"
    p.write_text(text)
    return p


def test_help_lists_subcommands(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    assert all(c in out for c in SUBCOMMANDS)


def test_unknown_subcommand(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_no_subcommand():
    assert main([]) == 1


def test_train_requires_config(capsys):
    assert main(["train", "--scenes", "s", "--out", "o"]) == 1
    assert "--config" in capsys.readouterr().err


def test_bad_config_exit_1(tmp_path, capsys):
    scenes = gen(tmp_path)
    assert main(["train", "--config", str(cfg_file(tmp_path, "gamma = 1.5\n")), "--scenes", str(scenes),
                 "--out", str(tmp_path / "o")]) == 1
    assert "gamma" in capsys.readouterr().err


def test_missing_scene_dir_exit_1(tmp_path):
    assert main(["train", "--config", str(cfg_file(tmp_path)), "--scenes", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o")]) == 1


def test_corrupt_checkpoint_exit_2(tmp_path):
    scenes = gen(tmp_path)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"junk")
    assert main(["eval", "--checkpoint", str(bad), "--scenes", str(scenes), "--out", str(tmp_path / "e")]) == 2


def test_minimal_config_echoes_defaults(tmp_path, capsys):
    scenes = gen(tmp_path)
    cfg = cfg_file(tmp_path, "seed = 9\nframes_budget = 500\n")
    assert main(["train", "--config", str(cfg), "--scenes", str(scenes), "--out", str(tmp_path / "o")]) == 0
    err = capsys.readouterr().err
    assert "seed = 9" in err and "gamma = 0.99" in err and "rmsprop_eps = 0.1" in err


def test_quiet_silences_info(tmp_path, capsys):
    gen(tmp_path)
    assert capsys.readouterr().err == ""


def test_end_to_end_smoke(tmp_path):
    t0 = time.perf_counter()
    scenes = gen(tmp_path)
    cfg = cfg_file(tmp_path)
    run, ev, plots = tmp_path / "run", tmp_path / "ev", tmp_path / "plots"
    assert main(["--quiet", "train", "--config", str(cfg), "--scenes", str(scenes), "--out", str(run)]) == 0
    assert main(["--quiet", "eval", "--config", str(cfg), "--checkpoint", str(run / "final.ckpt"),
                 "--scenes", str(scenes), "--out", str(ev)]) == 0
    assert main(["--quiet", "plot", str(run / "metrics.csv"), "--out", str(plots)]) == 0
    assert time.perf_counter() - t0 < 60
    for d in (scenes, run, ev, plots):
        m = json.loads((d / "manifest.json").read_text())
        assert m["status"] == "ok"
    assert 0 < read_metrics_csv(run / "metrics.csv")[-1].frames_so_far <= 4000
    assert (ev / "eval.csv").read_text().splitlines()[-1].startswith("ALL,")
    assert (plots / "metrics.svg").read_text().startswith("<svg")


def test_rerun_reproduces_metrics(tmp_path):
    scenes = gen(tmp_path)
    cfg = cfg_file(tmp_path)
    for d in ("a", "b"):
        assert main(["--quiet", "train", "--config", str(cfg), "--scenes", str(scenes),
                     "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()


def test_freeze_core_and_init(tmp_path):
    scenes = gen(tmp_path)
    cfg = cfg_file(tmp_path)
    assert main(["--quiet", "train", "--config", str(cfg), "--scenes", str(scenes), "--out", str(tmp_path / "a")]) == 0
    assert main(["--quiet", "train", "--config", str(cfg), "--scenes", str(scenes), "--out", str(tmp_path / "b"),
                 "--freeze-core", "--init", str(tmp_path / "a/final.ckpt")]) == 0
    from navlab.checkpoint import load_model
    a, b = load_model(tmp_path / "a/final.ckpt"), load_model(tmp_path / "b/final.ckpt")
    assert a.core.flat.tobytes() == b.core.flat.tobytes()


@pytest.mark.parametrize("method", ["random", "shortest", "a3c1"])
def test_baseline(tmp_path, method):
    scenes = gen(tmp_path)
    out = tmp_path / method
    assert main(["--quiet", "baseline", "--method", method, "--config", str(cfg_file(tmp_path)),
                 "--scenes", str(scenes), "--out", str(out)]) == 0
    assert (out / "eval.csv").exists()


def test_baseline_rejects_unknown_method(tmp_path):
    assert main(["baseline", "--method", "ppo", "--config", "c", "--scenes", "s", "--out", "o"]) == 1


def test_analyze_embedding(tmp_path):
    scenes = gen(tmp_path)
    cfg = cfg_file(tmp_path)
    assert main(["--quiet", "train", "--config", str(cfg), "--scenes", str(scenes), "--out", str(tmp_path / "a")]) == 0
    assert main(["--quiet", "analyze-embedding", "--checkpoint", str(tmp_path / "a/final.ckpt"),
                 "--scenes", str(scenes), "--out", str(tmp_path / "emb"), "--max-pairs", "200"]) == 0
    assert (tmp_path / "emb/embedding_pca.csv").exists()


def test_exp_embedding(tmp_path):
    cfg = cfg_file(tmp_path, TINY + "seeds = [0]\nscene_width = 5\nscene_height = 5\npercept_dim = 16\n"
                                   "n_targets = 2\nmax_pairs = 200\n")
    out = tmp_path / "exp"
    assert main(["--quiet", "exp", "embedding", "--config", str(cfg), "--out", str(out)]) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert m["status"] == "ok" and m["note"] == "single-seed run"
    assert any(k.endswith("final.ckpt") for k in m["outputs"])


def test_console_script_entry():
    r = subprocess.run([sys.executable, "-m", "navlab.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-scenes" in r.stdout


def test_thread_cap(monkeypatch):
    monkeypatch.delenv("NAVLAB_THREADS", raising=False)
    assert thread_cap(8) == 8
    monkeypatch.setenv("NAVLAB_THREADS", "2")
    assert thread_cap(8) == 2
    monkeypatch.setenv("NAVLAB_THREADS", "zero")
    with pytest.raises(Exception, match="NAVLAB_THREADS"):
        thread_cap(8)


def test_hogwild_under_thread_cap(tmp_path, monkeypatch):
    monkeypatch.setenv("NAVLAB_THREADS", "1")
    scenes = gen(tmp_path)
    cfg = cfg_file(tmp_path, TINY + 'mode = "hogwild"\n')
    assert main(["--quiet", "train", "--config", str(cfg), "--scenes", str(scenes), "--out", str(tmp_path / "h")]) == 0
