import json

import pytest

from checkpoint import load_adapter, load_matrices
from main import run_command
from reports import fieldnames, read_report

TINY = {
    "task": "teacher-student",
    "ranks": [4, 8],
    "steps": 5,
    "seeds": 1,
    "batch_size": 4,
    "probe_every": 2,
    "model": {"d_model": 8, "depth": 1, "d_in": 4, "d_out": 3, "nonlinearity": "tanh", "layernorm": False},
    "lr_sweep": {"grid": [0.001, 0.01], "low_rank": 4, "reference_rank": 8},
    "theory": {"ranks": [4, 16], "rules": ["lora", "rslora"], "n_seeds": 4, "n_eval": 16},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY), encoding="utf-8")
    return path


def test_gamma_prints_value(capsys):
    assert run_command(["gamma", "--rule", "rslora", "--alpha", "16", "--rank", "256"]) == 0
    assert capsys.readouterr().out == "1\n"


def test_gamma_power_rule(capsys):
    assert run_command(["gamma", "--rule", "power", "--nu", "0.25", "--alpha", "1", "--rank", "16"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(0.5)


def test_gamma_rejects_unknown_rule(capsys):
    assert run_command(["gamma", "--rule", "cubic", "--rank", "4"]) == 1
    assert "cubic" in capsys.readouterr().err


def test_gamma_rejects_zero_rank(capsys):
    assert run_command(["gamma", "--rank", "0"]) == 1
    assert capsys.readouterr().err.startswith("Error:")


@pytest.mark.parametrize(
    "argv",
    [
        ["frobnicate"],
        [],
        ["gamma", "--rank", "four"],
        ["gamma"],
        ["sweep", "--ranks", "4,x"],
        ["moments", "--bogus-flag"],
    ],
)
def test_usage_errors_exit_2(capsys, argv):
    assert run_command(argv) == 2
    err = capsys.readouterr().err
    assert "usage:" in err
    assert "error:" in err


def test_help_exits_0(capsys):
    assert run_command(["--help"]) == 0
    assert "gradcheck" in capsys.readouterr().out


def test_gradcheck(capsys):
    assert run_command(["gradcheck", "--cases", "10"]) == 0
    assert "10 cases" in capsys.readouterr().out


def test_moments_writes_reports(tmp_path, tiny_config):
    out = tmp_path / "dir"
    assert run_command(["moments", "--config", str(tiny_config), "--out", str(out)]) == 0
    for kind in ("moments", "slopes"):
        lines = (out / f"{kind}.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0].startswith("# config: {")
        assert lines[1] == ",".join(fieldnames(kind))
    assert len(read_report(out / "moments.csv", "moments")) == 2 * 2 * 2
    assert len(read_report(out / "slopes.csv", "slopes")) == 2 * 2


def test_moments_flags_override_theory_keys(tmp_path, tiny_config):
    out = tmp_path / "out"
    argv = ["moments", "--config", str(tiny_config), "--out", str(out), "--rule", "rslora", "--ranks", "4,8,16"]
    assert run_command(argv) == 0
    rows = read_report(out / "moments.csv", "moments")
    assert {row["rule"] for row in rows} == {"rslora"}
    assert sorted({row["rank"] for row in rows}) == [4, 8, 16]


def test_invalid_config_names_the_key(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"model": {"d_model": -3}}), encoding="utf-8")
    assert run_command(["sweep", "--config", str(path), "--out", str(tmp_path / "out")]) == 1
    assert "model.d_model" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_invalid_override(tmp_path, tiny_config, capsys):
    assert run_command(["sweep", "--config", str(tiny_config), "--threads", "0"]) == 1
    assert "threads" in capsys.readouterr().err


def test_missing_config(tmp_path, capsys):
    assert run_command(["sweep", "--config", str(tmp_path / "nope.json")]) == 1
    assert "not found" in capsys.readouterr().err


def test_sweep_is_byte_identical(tmp_path, tiny_config):
    for name in ("a", "b"):
        assert run_command(["sweep", "--config", str(tiny_config), "--out", str(tmp_path / name)]) == 0
    first = (tmp_path / "a" / "trajectory.csv").read_bytes()
    assert first == (tmp_path / "b" / "trajectory.csv").read_bytes()
    # 2 rules x 2 ranks x 1 seed, records at steps 1, 3, 5
    assert len(read_report(tmp_path / "a" / "trajectory.csv", "trajectory")) == 12


def test_sweep_rank_override(tmp_path, tiny_config):
    out = tmp_path / "out"
    assert run_command(["sweep", "--config", str(tiny_config), "--out", str(out), "--ranks", "2,4", "--seed", "5"]) == 0
    rows = read_report(out / "trajectory.csv", "trajectory")
    assert sorted({row["rank"] for row in rows}) == [2, 4]
    assert '"seed":5' in (out / "trajectory.csv").read_text(encoding="utf-8").splitlines()[0]


@pytest.mark.parametrize("kind", ["sgd", "rules"])
def test_other_sweeps(tmp_path, tiny_config, kind):
    out = tmp_path / kind
    assert run_command(["sweep", "--kind", kind, "--config", str(tiny_config), "--out", str(out)]) == 0
    assert read_report(out / "trajectory.csv", "trajectory")


def test_ablations(tmp_path, tiny_config):
    out = tmp_path / "out"
    assert run_command(["ablate", "--kind", "lr", "--config", str(tiny_config), "--out", str(out)]) == 0
    rows = read_report(out / "lrsweep.csv", "lrsweep")
    assert len(rows) == 3
    assert run_command(["ablate", "--config", str(tiny_config), "--out", str(out)]) == 0
    rules = {row["rule"] for row in read_report(out / "trajectory.csv", "trajectory")}
    assert rules == {"none", "lora"}


def test_trajectory_checks(tmp_path, tiny_config, capsys):
    out = tmp_path / "out"
    argv = ["trajectory", "--config", str(tiny_config), "--out", str(out), "--cases", "5"]
    assert run_command(argv) == 0
    assert "step 1" in capsys.readouterr().out
    rows = read_report(out / "slopes.csv", "slopes")
    assert [row["statistic"] for row in rows] == ["remainder", "remainder"]


def test_unwritable_output(tmp_path, tiny_config, capsys):
    blocker = tmp_path / "blocker"
    blocker.write_text("", encoding="utf-8")
    assert run_command(["sweep", "--config", str(tiny_config), "--out", str(blocker)]) == 1
    assert capsys.readouterr().err.startswith("Error:")


@pytest.mark.parametrize("command", ["gradcheck", "trajectory"])
def test_case_count_must_be_positive(capsys, command):
    assert run_command([command, "--cases", "0"]) == 1
    assert "--cases" in capsys.readouterr().err


@pytest.mark.parametrize("rule", ["lora", "rslora", "none"])
def test_nu_with_a_non_power_rule_is_a_usage_error(capsys, rule):
    assert run_command(["gamma", "--rule", rule, "--nu", "0.25", "--rank", "16"]) == 2
    assert "--nu" in capsys.readouterr().err


def test_nu_alone_selects_the_power_rule(capsys):
    assert run_command(["gamma", "--nu", "0.25", "--alpha", "1", "--rank", "16"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(0.5)


def test_sweep_saves_adapters_and_merged_weights(tmp_path, tiny_config):
    saved = tmp_path / "adapters"
    argv = ["sweep", "--config", str(tiny_config), "--out", str(tmp_path / "out"), "--save-adapters", str(saved)]
    assert run_command(argv) == 0
    cells = sorted(p.name for p in saved.iterdir())
    assert cells == sorted(
        f"{rule}-r{rank}-s0-lr5e-05" for rule in ("lora", "rslora") for rank in (4, 8)
    )
    for name in cells:
        # the default placement hosts only the hidden layer of the tiny model
        adapter = load_adapter(saved / name / "layer1.adapter.yaml")
        assert adapter.config.rank == int(name.split("-")[1][1:])
        merged = load_matrices(saved / name / "merged.yaml")
        assert list(merged) == ["layer1"]
        assert merged["layer1"].shape == (8, 8)


def test_sweep_without_save_adapters_writes_only_reports(tmp_path, tiny_config):
    out = tmp_path / "out"
    assert run_command(["sweep", "--config", str(tiny_config), "--out", str(out)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["cfg.json", "out"]
    assert [p.name for p in out.iterdir()] == ["trajectory.csv"]


def test_ablate_saves_adapters(tmp_path, tiny_config):
    saved = tmp_path / "adapters"
    argv = ["ablate", "--config", str(tiny_config), "--out", str(tmp_path / "out"), "--save-adapters", str(saved)]
    assert run_command(argv) == 0
    assert sorted(p.name.split("-r")[0] for p in saved.iterdir()) == ["lora"] * 2 + ["none"] * 2
