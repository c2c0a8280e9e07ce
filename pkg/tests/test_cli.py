import csv
import json
import subprocess
import sys

import pytest

import refereerl.experiments as experiments
from refereerl.cli import build_parser, main
from refereerl.experiments import wilson_interval

TINY = """
[env]
target = "stick"
horizon = 20

[train]
iterations = 2
rollout_steps = 16
num_envs = 2
minibatch_size = 16
update_epochs = 1

[policy]
hidden = [16, 16]

[run]
eval_episodes = 3
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY + f'output_dir = "{(tmp_path / "runs").as_posix()}"\n')
    return path


def _only_run(tmp_path):
    runs = sorted((tmp_path / "runs").iterdir())
    assert len(runs) == 1
    return runs[0]


def test_train_persists_run_record(tmp_path, tiny, capsys):
    assert main(["train", "--config", str(tiny), "--reward-mode", "ER+AR4", "--seed", "3"]) == 0
    run = _only_run(tmp_path)
    assert run.name.endswith("-s3")
    for name in ("config.toml", "metrics.csv", "record.json", "training.png"):
        assert (run / name).is_file()
    assert (run / "checkpoints" / "final.ckpt").is_file()
    assert len(list((run / "traces").glob("episode_*.csv"))) == 3
    record = json.loads((run / "record.json").read_text())
    assert record["git_describe"] and record["checkpoints"] == ["checkpoints/final.ckpt"]
    assert 'reward_mode = "ER+AR4"' in (run / "config.toml").read_text()
    assert "eval success" in capsys.readouterr().out


def test_rerun_from_snapshot_is_byte_identical(tmp_path, tiny):
    assert main(["train", "--config", str(tiny), "--reward-mode", "ER+LAR", "--no-eval", "--no-plot"]) == 0
    first = _only_run(tmp_path)
    again = tmp_path / "again"
    assert main(["train", "--config", str(first / "config.toml"), "--output-dir", str(again), "--no-eval", "--no-plot"]) == 0
    (second,) = list(again.iterdir())
    assert (first / "metrics.csv").read_bytes() == (second / "metrics.csv").read_bytes()

    def snapshot(run):
        return [ln for ln in (run / "config.toml").read_text().splitlines() if not ln.startswith("output_dir")]

    assert snapshot(first) == snapshot(second)


def test_missing_recipe_file_exit_2(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[env]\nrecipe = "nowhere/recipes.toml"\n')
    assert main(["train", "--config", str(cfg)]) == 2
    assert "nowhere/recipes.toml" in capsys.readouterr().err


def test_invalid_fields_reported_together(tiny, capsys):
    code = main(["train", "--config", str(tiny), "--set", "train.gamma=1.5", "--set", "train.bogus=1", "--set", "policy.hidden=3"])
    assert code == 2
    err = capsys.readouterr().err
    assert "train.bogus: unknown field" in err and "gamma" in err and "policy.hidden" in err


def test_unknown_reward_mode_is_usage_error(tiny):
    assert main(["train", "--config", str(tiny), "--reward-mode", "ER+AR3"]) == 2


def test_eval_defaults_and_errors(tmp_path, tiny, capsys):
    args = build_parser().parse_args(["eval", "--checkpoint", "x.ckpt"])
    assert args.episodes == 30 and args.mode == "greedy"
    ckpt = tmp_path / "rand.ckpt"
    assert main(["init", "--config", str(tiny), "--out", str(ckpt)]) == 0
    assert main(["eval", "--checkpoint", str(ckpt), "--episodes", "0"]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 2


def test_eval_random_checkpoint_on_long_chain(tmp_path, capsys):
    ckpt = tmp_path / "rand.ckpt"
    assert main(["init", "--target", "enchanted_sword", "--out", str(ckpt)]) == 0
    traces = tmp_path / "traces"
    assert main(["eval", "--checkpoint", str(ckpt), "--episodes", "30", "--trace-dir", str(traces)]) == 0
    rows = list(csv.DictReader((traces / "summary.csv").open()))
    assert rows[0]["episodes"] == "30" and float(rows[0]["success_rate"]) <= 0.05
    assert len(list(traces.glob("episode_*.csv"))) == 30
    assert "Wilson" in capsys.readouterr().out


def test_eval_dimension_mismatch_exit_2(tmp_path, capsys):
    book = tmp_path / "book.toml"
    book.write_text(
        "schema_version = 1\nhorizon = 20\n[spawn]\ntree = [2, 2]\n"
        '[[skill]]\nid = "chop"\nrequires = { tree = 1 }\nconsumes = { tree = 1 }\nyields = { log = 1 }\n'
    )
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'[env]\nrecipe = "{book.as_posix()}"\ntarget = "log"\n')
    ckpt = tmp_path / "small.ckpt"
    assert main(["init", "--config", str(cfg), "--out", str(ckpt)]) == 0
    assert main(["eval", "--checkpoint", str(ckpt), "--episodes", "2", "--trace-dir", str(tmp_path / "t")]) == 0
    assert main(["eval", "--checkpoint", str(ckpt), "--config", str(tmp_path / "none.toml")]) == 2
    default = tmp_path / "default.toml"
    default.write_text("")
    assert main(["eval", "--checkpoint", str(ckpt), "--config", str(default)]) == 2
    assert "inputs" in capsys.readouterr().err


def _ablate_cfg(tmp_path):
    path = tmp_path / "ablate.toml"
    path.write_text(
        TINY.replace("horizon = 20\n", "")
        + f'output_dir = "{(tmp_path / "runs").as_posix()}"\n'
        + "\n[ablate]\nseeds = [0, 1]\n[ablate.horizon]\nstick = 10\n[ablate.iterations]\nstick = 1\n"
    )
    return path


def test_ablate_table_shape(tmp_path, capsys):
    cfg = _ablate_cfg(tmp_path)
    assert main(["ablate", "--config", str(cfg)]) == 0
    out = _only_run(tmp_path)
    md = (out / "table.md").read_text().splitlines()
    assert md[0] == "| reward | stick | wooden_pickaxe | stone_pickaxe | iron_pickaxe |"
    assert [line.split("|")[1].strip() for line in md[2:]] == ["ER", "ER+LAR", "ER+AR2", "ER+AR4"]
    rows = list(csv.reader((out / "table.csv").open()))
    assert len(rows) == 5 and all(len(r) == 5 for r in rows)
    assert all("±" in cell for r in rows[1:] for cell in r[1:])
    cells = list(csv.DictReader((out / "cells.csv").open()))
    assert len(cells) == 4 * 4 * 2
    assert (out / "ablation.png").is_file()
    assert (out / "cells" / "stick" / "ER+AR4" / "s1" / "final.ckpt").is_file()


def test_ablate_failed_cell_exit_1(tmp_path, monkeypatch, capsys):
    real = experiments.run_cell

    def flaky(cfg, out_dir=None):
        if cfg.train.reward_mode == "ER+AR2":
            raise RuntimeError("boom")
        return real(cfg, out_dir)

    monkeypatch.setattr(experiments, "run_cell", flaky)
    cfg = _ablate_cfg(tmp_path)
    assert main(["ablate", "--config", str(cfg), "--tasks", "stick"]) == 1
    md = (_only_run(tmp_path) / "table.md").read_text()
    assert "| ER+AR2 | FAILED |" in md


def test_ablate_needs_two_seeds(tmp_path):
    assert main(["ablate", "--config", str(_ablate_cfg(tmp_path)), "--seeds", "0"]) == 2


def test_analyze_outputs(tmp_path, capsys):
    out = tmp_path / "an"
    assert main(["analyze", "--max-offset", "200", "--out", str(out)]) == 0
    rows = list(csv.reader((out / "closed_form.csv").open()))
    assert rows[0] == ["offset", "A_t"] and len(rows) - 1 == 201
    assert float(rows[1][1]) == 1.0
    assert float(rows[-1][1]) == pytest.approx(4.68e-6, rel=0.01)
    assert (out / "vanishment.png").is_file()
    assert main(["analyze", "--max-offset", "5", "--no-plot", "--out", str(tmp_path / "b")]) == 0
    assert not (tmp_path / "b" / "vanishment.png").exists()


def test_analyze_rejects_unit_decay(tmp_path):
    assert main(["analyze", "--gamma", "1.0", "--lam", "1.0", "--out", str(tmp_path)]) == 2
    assert main(["analyze", "--gamma", "0.99", "--lam", "1.5", "--out", str(tmp_path)]) == 2


def test_wilson_interval():
    lo, hi = wilson_interval(0, 30)
    assert lo == 0.0 and hi == pytest.approx(0.11352, abs=1e-4)
    lo, hi = wilson_interval(15, 30)
    assert lo == pytest.approx(0.33150, abs=1e-4) and hi == pytest.approx(0.66850, abs=1e-4)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "refereerl", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "ablate" in res.stdout
