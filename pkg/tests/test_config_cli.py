import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from dacrl.checkpoint import file_sha256
from dacrl.cli import EXIT_INVALID, EXIT_OK, Context, datasets, load_data, main
from dacrl.config import WORKSPACE_ENV, ConfigError, RunPaths, build_config, load_config, read_config_text
from dacrl.evaluation import discounted_returns
from dacrl.pipeline import DESK_OVERRIDES, VARIANTS, desk_config
from dacrl.rewards import terminal_rewards
from dacrl.trainer import ABLATIONS

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SMOKE = str(CONFIGS / "smoke.cfg")


# --- config parsing ----------------------------------------------------------


def test_parse_values_and_include(tmp_path):
    (tmp_path / "base.cfg").write_text("seed = 3\ntrain.clip = 0.2, 5\nname = \"base\"\n")
    (tmp_path / "run.cfg").write_text("include = base.cfg\n# comment\nname = \"run\"\ntrain.no_iptw = true\n")
    cfg = load_config(tmp_path / "run.cfg")
    assert cfg.seed == 3 and cfg.name == "run"
    assert cfg.train.clip == (0.2, 5.0) and cfg.train.no_iptw
    assert cfg.train.seed == 3 and cfg.synthetic.seed == 3


def test_include_cycle_rejected(tmp_path):
    (tmp_path / "a.cfg").write_text("include = b.cfg\n")
    (tmp_path / "b.cfg").write_text("include = a.cfg\n")
    with pytest.raises(ConfigError, match="cycle"):
        read_config_text(tmp_path / "a.cfg")


@pytest.mark.parametrize(
    "values, field",
    [
        ({"train.lr": "fast"}, "train.lr"),
        ({"train.nope": 1}, "train.nope"),
        ({"synthetic.n_survivor": 1.5}, "synthetic.n_survivor"),
        ({"train": 1}, "train"),
        ({"adapt.fraction": 2.0}, "adapt.fraction"),
        ({"train.clip": 0.1}, "train.clip"),
    ],
)
def test_config_errors_name_the_field(values, field):
    with pytest.raises(ConfigError) as exc:
        build_config(values)
    assert str(exc.value).startswith(field)


def test_config_text_roundtrip(tmp_path):
    cfg = load_config(SMOKE, {"seed": 4})
    (tmp_path / "snap.cfg").write_text(cfg.to_text())
    assert load_config(tmp_path / "snap.cfg").config_hash == cfg.config_hash


def test_desk_file_matches_desk_overrides():
    assert load_config(CONFIGS / "desk.cfg").config_hash == desk_config().config_hash
    assert read_config_text(CONFIGS / "desk.cfg") == DESK_OVERRIDES


def test_ablation_flags_map_onto_variants():
    assert set(ABLATIONS) == {"rsp", "dcf", "short", "long"}
    assert VARIANTS == {"DAC": (), **{f"DAC-{a}": (a,) for a in ABLATIONS}}
    ids = {build_config({f"train.{f}": True}).run_id for f in ABLATIONS.values()}
    assert len(ids) == 4


# --- CLI end to end ----------------------------------------------------------


def _run(*args):
    return main(list(args))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    with pytest.MonkeyPatch.context() as mp:
        mp.setenv(WORKSPACE_ENV, str(root))
        assert _run("generate", "--config", SMOKE) == EXIT_OK
        assert _run("train", "--config", SMOKE) == EXIT_OK
        yield root


@pytest.fixture
def ws(trained, monkeypatch):
    monkeypatch.setenv(WORKSPACE_ENV, str(trained))
    return RunPaths.for_config(load_config(SMOKE), trained)


def test_generate_is_byte_identical(tmp_path, monkeypatch, capsys):
    hashes = []
    for sub in ("a", "b"):
        monkeypatch.setenv(WORKSPACE_ENV, str(tmp_path / sub))
        assert _run("generate", "--config", SMOKE) == EXIT_OK
        paths = RunPaths.for_config(load_config(SMOKE), tmp_path / sub)
        hashes.append({p.name: file_sha256(p) for p in sorted(paths.data.iterdir())})
    assert hashes[0] == hashes[1]
    assert _run("generate", "--config", SMOKE) == EXIT_INVALID
    assert "--force" in capsys.readouterr().err
    assert _run("generate", "--config", SMOKE, "--force") == EXIT_OK


def test_default_config_emits_4000_patients(tmp_path, monkeypatch):
    monkeypatch.setenv(WORKSPACE_ENV, str(tmp_path))
    assert _run("generate") == EXIT_OK
    data = RunPaths.for_config(load_config()).data
    lines = (data / "source.jsonl").read_text().splitlines()
    assert len(lines) - 1 == 4000
    assert sum(json.loads(x)["outcome"] for x in lines[1:]) == 3000


def test_malformed_config_exits_with_field_path(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("include = %s\ntrain.lr = fast\n" % json.dumps(SMOKE))
    assert _run("generate", "--config", str(bad)) == EXIT_INVALID
    assert "train.lr" in capsys.readouterr().err


def test_train_writes_checkpoints_and_log(ws):
    ck = ws.checkpoints
    for name in ("risk", "clone", "numerator", "policy", "dac_epoch001", "dac_epoch002"):
        assert (ck / f"{name}.npz").exists()
    log = [json.loads(x) for x in (ws.run_dir / "train_log.jsonl").read_text().splitlines()]
    assert log[0]["run_id"] == ws.run_id
    assert [r["epoch"] for r in log[1:]] == [1, 2]
    assert _run("train", "--config", SMOKE) == EXIT_INVALID


def test_resume_continues_epoch_counter(trained, tmp_path, monkeypatch):
    root = tmp_path / "ws"
    shutil.copytree(trained, root)
    monkeypatch.setenv(WORKSPACE_ENV, str(root))
    paths = RunPaths.for_config(load_config(SMOKE), root)
    ck = paths.checkpoints
    pre = {n: file_sha256(ck / f"{n}.npz") for n in ("risk", "clone", "numerator")}
    # interrupt after epoch 1
    (ck / "dac_epoch002.npz").unlink()
    (ck / "policy.npz").unlink()
    log = paths.run_dir / "train_log.jsonl"
    log.write_text("\n".join(log.read_text().splitlines()[:2]) + "\n")
    assert _run("train", "--config", SMOKE, "--resume") == EXIT_OK
    epochs = [json.loads(x).get("epoch") for x in log.read_text().splitlines()[1:]]
    assert epochs == [1, 2]
    assert (ck / "dac_epoch002.npz").exists() and (ck / "policy.npz").exists()
    assert {n: file_sha256(ck / f"{n}.npz") for n in pre} == pre


def test_ablate_flag_selects_a_distinct_run(trained, monkeypatch):
    monkeypatch.setenv(WORKSPACE_ENV, str(trained))
    base = load_config(SMOKE)
    for name, field in ABLATIONS.items():
        cfg = load_config(SMOKE, {f"train.{field}": True})
        assert cfg.run_id != base.run_id
        assert cfg.data_hash() == base.data_hash()
    assert _run("train", "--config", SMOKE, "--ablate", "rsp") == EXIT_OK
    ablated = RunPaths.for_config(load_config(SMOKE, {"train.no_resample": True}), trained)
    assert (ablated.checkpoints / "policy.npz").exists()


def _decisions(path):
    with open(path) as f:
        rows = list(csv.reader(f))
    return rows[1:]  # drop the stamp line; keep the header


def test_adapt_with_zero_target_patients_reproduces_source(tmp_path, trained, monkeypatch):
    cfg_file = tmp_path / "zero.cfg"
    cfg_file.write_text(f"include = {json.dumps(SMOKE)}\nadapt.fraction = 0\n")
    # same data and encoder; only the adaptation fraction differs, so reuse the trained run
    monkeypatch.setenv(WORKSPACE_ENV, str(trained))
    cfg = load_config(cfg_file)
    paths = RunPaths.for_config(cfg, trained)
    src = RunPaths.for_config(load_config(SMOKE), trained)
    shutil.copytree(src.checkpoints, paths.checkpoints)
    assert _run("adapt", "--config", str(cfg_file)) == EXIT_OK
    reports = paths.reports
    source = _decisions(reports / f"{cfg.run_id}_source_decisions.csv")
    adapted = _decisions(reports / f"{cfg.run_id}_adapted_decisions.csv")
    assert len(source) > 1
    assert source == adapted
    summary = json.loads((reports / f"{cfg.run_id}_adaptation.json").read_text())
    assert summary["target_patients"] == 0 and summary["agreement"] == 1.0
    assert summary["zero_shot_wis"] == summary["adapted_wis"]


def test_adapt_with_target_data(ws):
    assert _run("adapt", "--config", SMOKE) == EXIT_OK
    summary = json.loads((ws.reports / f"{ws.run_id}_adaptation.json").read_text())
    assert summary["target_patients"] > 0
    assert (ws.checkpoints / "dynamics_target.npz").exists()


def test_evaluate_clinician_wis_is_average_return(ws, capsys):
    assert _run("evaluate", "--config", SMOKE, "--policy", "clinician") == EXIT_OK
    out = capsys.readouterr().out
    assert "EM" in out and "WIS" in out and "ACC-3" in out and "ACC-1" in out
    rep = json.loads((ws.reports / f"{ws.run_id}_eval_clinician.json").read_text())
    cfg = load_config(SMOKE)
    ds = datasets(Context(cfg, ws), load_data(Context(cfg, ws)))
    ret = discounted_returns(terminal_rewards(ds.test.outcome, ds.test.step_mask), ds.test.step_mask, cfg.train.gamma)
    assert rep["wis"] == pytest.approx(float(np.mean(ret)), rel=1e-12)
    assert rep["config_hash"] == cfg.config_hash


def test_evaluate_report_and_verify(ws, capsys):
    assert _run("evaluate", "--config", SMOKE) == EXIT_OK
    rep = json.loads((ws.reports / f"{ws.run_id}_eval_dac.json").read_text())
    assert 0 <= rep["em"] <= 1 and 0 <= rep["acc3"] <= rep["acc1"] <= 1
    assert _run("report", "--config", SMOKE) == EXIT_OK
    figs = sorted(ws.reports.glob(f"{ws.run_id}_dac_*.png"))
    assert len(figs) == 4
    first = {p.name: p.read_bytes() for p in figs}
    assert _run("report", "--config", SMOKE) == EXIT_OK
    assert {p.name: p.read_bytes() for p in figs} == first
    capsys.readouterr()
    assert _run("verify", "--config", SMOKE) == EXIT_OK
    assert "verified" in capsys.readouterr().out


def test_verify_detects_tampering(trained, tmp_path, monkeypatch, capsys):
    root = tmp_path / "ws"
    shutil.copytree(trained, root)
    monkeypatch.setenv(WORKSPACE_ENV, str(root))
    paths = RunPaths.for_config(load_config(SMOKE), root)
    assert _run("verify", "--config", SMOKE) == EXIT_OK
    log = paths.run_dir / "train_log.jsonl"
    log.write_text(log.read_text() + "\n")
    assert _run("verify", "--config", SMOKE) == EXIT_INVALID
    assert "train_log.jsonl" in capsys.readouterr().err


def test_evaluate_without_data_is_rejected(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(WORKSPACE_ENV, str(tmp_path))
    assert _run("evaluate", "--config", SMOKE) == EXIT_INVALID
    assert "generate" in capsys.readouterr().err
