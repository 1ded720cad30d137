import csv

import pytest

from actdiff import cli
from actdiff.core import dataset_read


def _run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert _run("gen-data", "--env", "maze", "--preset", "low", "--n", 6, "--seed", 7,
                "--out", d / "d.bin") == 0
    assert _run("train", "--data", d / "d.bin", "--out", d / "c.ck", "--steps", 30,
                "--hidden", "16,16", "--l", 4, "--set", "train.eval_every=10") == 0
    return d


def test_gen_data_outputs(workdir):
    ds = dataset_read(workdir / "d.bin")
    assert len(ds) == 6 and ds.meta["seed"] == 7 and ds.meta["preset"]["name"] == "low"
    text = (workdir / "d.bin.manifest.ini").read_text()
    assert "[run]" in text and "command = gen-data" in text and "seed = 7" in text
    assert "[outputs]" in text


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as err:
        _run("eval", "--ckpt", "x", "--out", "y", "--frobnicate")
    assert err.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_config_error_names_key(workdir, capsys):
    assert _run("eval", "--ckpt", workdir / "c.ck", "--out", workdir / "x.csv",
                "--set", "strategy.kind=beam") == 2
    assert "strategy" in capsys.readouterr().err
    bad = workdir / "bad.ini"
    bad.write_text("[train]\nbatch_sise = 3\n")
    assert _run("train", "--data", workdir / "d.bin", "--out", workdir / "x.ck", "--config", bad) == 2
    assert "train.batch_sise" in capsys.readouterr().err


def test_creates_output_dirs(workdir, tmp_path):
    out = tmp_path / "a" / "b" / "d.bin"
    assert _run("gen-data", "--n", 2, "--out", out) == 0
    assert out.is_file() and (out.parent / "d.bin.manifest.ini").is_file()


def test_missing_input_is_error(workdir):
    assert _run("train", "--data", workdir / "nope.bin", "--out", workdir / "x.ck") == 1


def _rate(path):
    with open(path) as f:
        return float(next(csv.DictReader(f))["success_rate"])


def test_eval_neutral_beta(workdir):
    common = ["--ckpt", workdir / "c.ck", "--env", "maze", "--episodes", 20, "--seed", 1,
              "--set", "env.preset_jitter=false"]
    assert _run("eval", *common, "--strategy", "selfgad", "--beta", 0, "--out", workdir / "g.csv") == 0
    assert _run("eval", *common, "--strategy", "random", "--out", workdir / "r.csv") == 0
    # beta = 0 draws the same noise and takes the same steps as random
    assert _rate(workdir / "g.csv") == _rate(workdir / "r.csv")


def test_every_command_reruns_bit_exact(workdir, tmp_path):
    d = workdir
    assert _run("eval", "--ckpt", d / "c.ck", "--strategy", "coherence", "--n-samples", 2,
                "--episodes", 3, "--out", d / "e.csv") == 0
    assert _run("tune-beta", "--ckpt", d / "c.ck", "--betas", "0,0.5", "--episodes", 2,
                "--out", d / "t.csv") == 0
    assert _run("sweep", "--ckpt", f"maze:low={d / 'c.ck'}", "--set", "sweep.preset=low",
                "--set", "sweep.h=1,2", "--episodes", 2, "--out", d / "s.csv",
                "--plots", d / "plots") == 0
    assert _run("plot", "--csv", d / "s.csv", "--out-dir", d / "p2") == 0
    manifests = ["d.bin", "c.ck", "e.csv", "t.csv", "s.csv", "p2/plots"]
    for i, m in enumerate(manifests):
        out = tmp_path / f"re{i}"
        assert _run("rerun", d / f"{m}.manifest.ini", "--out-dir", out) == 0, m
        original = d / m if not m.endswith("plots") else None
        if original is not None:
            assert (out / original.name).read_bytes() == original.read_bytes()


def test_rerun_detects_tampering(workdir, tmp_path):
    m = workdir / "d.bin.manifest.ini"
    text = m.read_text()
    lines = [ln if not ln.startswith(str(workdir / "d.bin") + " = ") else ln[:-4] + "0000"
             for ln in text.splitlines()]
    bad = tmp_path / "bad.manifest.ini"
    bad.write_text("\n".join(lines) + "\n")
    assert _run("rerun", bad, "--out-dir", tmp_path / "o") == 1


def test_eval_infers_env_from_checkpoint(tmp_path):
    d = tmp_path
    assert _run("gen-data", "--env", "push", "--n", 2, "--out", d / "p.bin") == 0
    assert _run("train", "--data", d / "p.bin", "--out", d / "p.ck", "--steps", 2, "--hidden", "8",
                "--l", 4) == 0
    assert _run("eval", "--ckpt", d / "p.ck", "--episodes", 1, "--out", d / "e.csv") == 0
    with open(d / "e.csv") as f:
        assert next(csv.DictReader(f))["env_id"] == "push"
    # an explicit env still wins, and the mismatch is a config error
    assert _run("eval", "--ckpt", d / "p.ck", "--env", "maze", "--episodes", 1, "--out", d / "m.csv") == 2
