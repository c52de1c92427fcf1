"""End-to-end CLI tests at miniature scale: every stage runs in-process
through main(), outputs are loadable artifacts, reruns are byte-identical,
and error paths map to the documented exit codes."""

import os

import numpy as np
import pytest

from advseg.data import load_dataset
from advseg.harness import (EXIT_CONFIG, EXIT_OK, EXIT_REGRESSION,
                            EXIT_USAGE, main)
from advseg.metrics import parse_results_csv
from advseg.models import load_checkpoint

MINI_DATA = """
[data]
count = 10
extra_count = 4
split = 8,4,2
image_size = 32
"""

MINI_TRAIN = """
[data]
dir = {data_dir}

[model]
architecture = unet
stages = 2
base_channels = 4

[train]
epochs = 2
lr = 1e-3
batch_size = 4
augment = false

[attack]
norm = linf
steps = 1
"""


def write_config(tmp_path, name, text):
    path = str(tmp_path / name)
    with open(path, "w") as fh:
        fh.write(text)
    return path


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    """One shared gen-data + train chain for the read-only stage tests."""
    root = tmp_path_factory.mktemp("mini")
    data_dir = str(root / "data")
    cfg = write_config(root, "data.ini", MINI_DATA)
    assert main(["gen-data", "--config", cfg, "--out", data_dir, "--seed", "0"]) == EXIT_OK
    train_dir = str(root / "train")
    tcfg = write_config(root, "train.ini", MINI_TRAIN.format(data_dir=data_dir))
    assert main(["train", "--config", tcfg, "--out", train_dir, "--seed", "0"]) == EXIT_OK
    return {"root": root, "data_dir": data_dir, "train_dir": train_dir,
            "train_cfg": tcfg}


def test_gen_data_produces_loadable_dataset(mini_run):
    ds = load_dataset(mini_run["data_dir"])
    assert len(ds) == 14
    assert len(ds.indices("train")) == 8
    assert len(ds.indices("val")) == 4
    assert len(ds.indices("test")) == 2
    assert os.path.exists(os.path.join(mini_run["data_dir"], "summary.md"))
    assert os.path.exists(os.path.join(mini_run["data_dir"], "config.ini"))


def test_train_stage_artifacts(mini_run):
    out = mini_run["train_dir"]
    rows = parse_results_csv(open(os.path.join(out, "results.csv")).read())
    splits = {r["split"] for r in rows}
    assert splits == {"train", "val", "test"}
    tags = {r["attack"] for r in rows}
    assert "clean" in tags and len(tags) == 2  # clean + default attack
    assert all(r["stage"] == "train" and r["model"] == "unet" for r in rows)
    model = load_checkpoint(os.path.join(out, "checkpoints", "final"))
    assert model.architecture == "unet"
    load_checkpoint(os.path.join(out, "checkpoints", "best"))
    assert os.path.exists(os.path.join(out, "record.csv"))
    assert os.path.exists(os.path.join(out, "qualitative.png"))
    assert os.path.exists(os.path.join(out, "summary.md"))
    assert not os.path.exists(out + ".partial")


def test_rerun_is_byte_identical(mini_run):
    again = str(mini_run["root"] / "train-again")
    assert main(["train", "--config", mini_run["train_cfg"], "--out", again,
                 "--seed", "0"]) == EXIT_OK
    for name in ("results.csv", "record.csv"):
        a = open(os.path.join(mini_run["train_dir"], name), "rb").read()
        b = open(os.path.join(again, name), "rb").read()
        assert a == b, f"{name} differs between identical reruns"


def test_overwrite_guard(mini_run):
    cfg = mini_run["train_cfg"]
    out = mini_run["train_dir"]
    assert main(["train", "--config", cfg, "--out", out, "--seed", "0"]) == EXIT_CONFIG
    assert main(["train", "--config", cfg, "--out", out, "--seed", "0",
                 "--overwrite"]) == EXIT_OK


def test_adv_train_and_attack_eval(mini_run, tmp_path):
    root = mini_run["root"]
    adv_dir = str(tmp_path / "adv")
    assert main(["adv-train", "--config", mini_run["train_cfg"], "--out", adv_dir,
                 "--seed", "0"]) == EXIT_OK
    rows = parse_results_csv(open(os.path.join(adv_dir, "results.csv")).read())
    assert any(r["attack"].startswith("pgd-linf") for r in rows)

    eval_cfg = write_config(tmp_path, "eval.ini", f"""
[data]
dir = {mini_run['data_dir']}

[model]
checkpoint = {os.path.join(adv_dir, 'checkpoints', 'final')}

[attack]
norm = linf
steps = 1

[attack.l2]
norm = l2
epsilon = 1.0
alpha = 0.25
steps = 1
""")
    eval_dir = str(tmp_path / "eval")
    assert main(["attack-eval", "--config", eval_cfg, "--out", eval_dir,
                 "--seed", "0"]) == EXIT_OK
    rows = parse_results_csv(open(os.path.join(eval_dir, "results.csv")).read())
    tags = {r["attack"] for r in rows}
    assert "clean" in tags
    assert any(t.startswith("pgd-linf") for t in tags)
    assert any(t.startswith("pgd-l2") for t in tags)


def test_robustify_then_robust_train(mini_run, tmp_path):
    ckpt = os.path.join(mini_run["train_dir"], "checkpoints", "final")
    rcfg = write_config(tmp_path, "robustify.ini", f"""
[data]
dir = {mini_run['data_dir']}

[model]
checkpoint = {ckpt}

[robustify]
steps = 2
step_norm = 0.1
batch_size = 8
""")
    robust_dir = str(tmp_path / "robust-data")
    assert main(["robustify", "--config", rcfg, "--out", robust_dir,
                 "--seed", "0"]) == EXIT_OK
    original = load_dataset(mini_run["data_dir"])
    robust = load_dataset(robust_dir)
    assert len(robust) == len(original)
    np.testing.assert_array_equal(robust.masks, original.masks)
    np.testing.assert_array_equal(robust.split_tags, original.split_tags)
    dist_lines = open(os.path.join(robust_dir, "distances.csv")).read().strip().split("\n")
    assert dist_lines[0] == "index,source,initial_distance,final_distance"
    assert len(dist_lines) == len(original) + 1

    rt_cfg = write_config(tmp_path, "robust-train.ini", f"""
[data]
dir = {robust_dir}
eval_dir = {mini_run['data_dir']}

[model]
stages = 2
base_channels = 4

[train]
epochs = 1
lr = 1e-3
batch_size = 4
augment = false

[attack]
steps = 1
""")
    rt_dir = str(tmp_path / "robust-train")
    assert main(["robust-train", "--config", rt_cfg, "--out", rt_dir,
                 "--seed", "0"]) == EXIT_OK
    rows = parse_results_csv(open(os.path.join(rt_dir, "results.csv")).read())
    assert {r["split"] for r in rows} == {"train", "val", "test"}
    assert all(r["stage"] == "robust-train" for r in rows)


def test_viz_stage(mini_run, tmp_path):
    cfg = write_config(tmp_path, "viz.ini", f"""
[data]
dir = {mini_run['data_dir']}

[model]
checkpoint = {os.path.join(mini_run['train_dir'], 'checkpoints', 'final')}

[viz]
index = 1
layers = dec1, enc1
""")
    out = str(tmp_path / "viz")
    assert main(["viz", "--config", cfg, "--out", out, "--seed", "0"]) == EXIT_OK
    assert os.path.exists(os.path.join(out, "sample.png"))
    assert os.path.exists(os.path.join(out, "activations_dec1.png"))
    assert os.path.exists(os.path.join(out, "activations_enc1.png"))


def test_compare_deltas_and_regression_flag(mini_run, tmp_path, capsys):
    base = os.path.join(mini_run["train_dir"], "results.csv")
    # candidate = baseline -> all deltas zero, no regression even at tol 0
    assert main(["compare", base, base, "--tolerance", "0.0"]) == EXIT_OK
    text = open(base).read()
    worse = text.replace("0.", "0.0", 1)  # damage one miou value
    cand_path = str(tmp_path / "cand.csv")
    with open(cand_path, "w") as fh:
        fh.write(worse)
    out_path = str(tmp_path / "cmp.md")
    code = main(["compare", base, cand_path, "--tolerance", "0.001",
                 "--out", out_path])
    assert code == EXIT_REGRESSION
    assert "REGRESSION" in capsys.readouterr().out
    assert os.path.exists(out_path)


def test_exit_codes_for_bad_invocations(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == EXIT_USAGE
    # missing out
    cfg = write_config(tmp_path, "c.ini", MINI_DATA)
    env_out = os.environ.pop("ADVSEG_OUT", None)
    try:
        assert main(["gen-data", "--config", cfg]) == EXIT_CONFIG
    finally:
        if env_out is not None:
            os.environ["ADVSEG_OUT"] = env_out
    # nonexistent config file
    assert main(["gen-data", "--config", str(tmp_path / "missing.ini"),
                 "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    # dataset dir that does not exist
    bad = write_config(tmp_path, "bad.ini", "[data]\ndir = /nonexistent/ds\n")
    assert main(["train", "--config", bad, "--out", str(tmp_path / "y")]) == EXIT_CONFIG
    capsys.readouterr()


def test_seed_and_out_precedence(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, "c.ini", MINI_DATA + "\n[run]\nseed = 5\n")
    env_dir = str(tmp_path / "from-env")
    monkeypatch.setenv("ADVSEG_OUT", env_dir)
    monkeypatch.setenv("ADVSEG_SEED", "7")
    assert main(["gen-data", "--config", cfg]) == EXIT_OK
    assert os.path.isdir(env_dir)  # out came from the environment
    echoed = open(os.path.join(env_dir, "config.ini")).read()
    assert "seed = 7" in echoed  # env seed beat the config's 5
    cli_dir = str(tmp_path / "from-cli")
    assert main(["gen-data", "--config", cfg, "--out", cli_dir,
                 "--seed", "9"]) == EXIT_OK
    assert "seed = 9" in open(os.path.join(cli_dir, "config.ini")).read()
    ds_env = load_dataset(env_dir)
    ds_cli = load_dataset(cli_dir)
    assert (ds_env.images != ds_cli.images).any()  # different seeds, different data
