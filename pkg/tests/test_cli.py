import csv
import json

import numpy as np
import pytest

from safelora import adapt, cli, nn

HEADER = "run_id,seed,env_steps,mean_ep_reward,value_loss,failures_cum,interventions_cum,action_rate,trainable_params"


def _config(tmp_path, **overrides):
    cfg = {"task": "tracker", "seeds": [0], "budgets": {"pretrain": 2048, "finetune": 4096},
           "output_dir": str(tmp_path / "runs")}
    cfg.update(overrides)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_missing_required_field_exits_2(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seeds": [0]}))
    assert cli.main(["pretrain", "--config", str(path)]) == cli.EXIT_CONFIG
    assert "task" in capsys.readouterr().err


@pytest.mark.parametrize("bad, needle", [
    ({"colour": 1}, "colour"),
    ({"adapt": {"rnak": 2}}, "rnak"),
    ({"ppo_hyper": {"gamma": 1.5}}, "ppo_hyper"),
    ({"seeds": []}, "seeds"),
    ({"budgets": {"pretrain": -1}}, "budgets.pretrain"),
    ({"adapt": {"mode": "lora", "rank": 0}}, "adapt"),
])
def test_invalid_config_names_the_field(tmp_path, capsys, bad, needle):
    assert cli.main(["pretrain", "--config", str(_config(tmp_path, **bad))]) == cli.EXIT_CONFIG
    assert needle in capsys.readouterr().err


def test_json_syntax_error_reports_line(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text('{\n  "task": "tracker",\n  oops\n}')
    assert cli.main(["pretrain", "--config", str(path)]) == cli.EXIT_CONFIG
    assert "line 3" in capsys.readouterr().err


def test_resolved_config_round_trips(tmp_path):
    cfg = cli.load_config(_config(tmp_path, adapt={"rank": 4}))
    again = cli.parse_config(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.adapt_config() == cfg.adapt_config()
    assert cfg.budgets["extended"] == 1.0 and cfg.adapt["placement"] == "all_layers"


def test_pretrain_finetune_layout_and_determinism(tmp_path):
    path = _config(tmp_path)
    out = tmp_path / "runs"
    assert cli.main(["pretrain", "--config", str(path)]) == 0
    pre = out / "pretrain"
    for name in ("config.resolved.json", "metrics.csv", "summary.txt", "checkpoints/seed_0/policy.npz",
                 "checkpoints/seed_0/meta.json"):
        assert (pre / name).exists(), name
    assert (pre / "metrics.csv").read_text().splitlines()[0] == HEADER
    assert cli.main(["finetune", "--config", str(path)]) == 0
    ft = out / "finetune" / "lora_r1_all_layers_actor_critic_safe"
    first = (ft / "metrics.csv").read_bytes()
    lines = first.decode().splitlines()
    assert lines[0] == HEADER and len(lines) == 3
    assert [int(l.split(",")[2]) for l in lines[1:]] == [2048, 4096]
    assert (ft / "update_rank.csv").exists()
    assert cli.main(["finetune", "--config", str(path)]) == 0
    assert (ft / "metrics.csv").read_bytes() == first


def test_missing_checkpoint_exits_4_naming_path(tmp_path, capsys):
    path = _config(tmp_path)
    assert cli.main(["finetune", "--config", str(path)]) == cli.EXIT_ARTIFACT
    assert "seed_0" in capsys.readouterr().err


def test_corrupt_checkpoint_exits_4(tmp_path, capsys):
    path = _config(tmp_path)
    ck = tmp_path / "runs" / "pretrain" / "checkpoints" / "seed_0"
    ck.mkdir(parents=True)
    (ck / "policy.npz").write_bytes(b"not a zip")
    assert cli.main(["finetune", "--config", str(path)]) == cli.EXIT_ARTIFACT
    assert "corrupt" in capsys.readouterr().err


def test_flags_and_environment_override_config(tmp_path, monkeypatch):
    path = _config(tmp_path)
    monkeypatch.setenv("SAFELORA_BUDGET", "0")
    monkeypatch.setenv("SAFELORA_SEEDS", "3")
    assert cli.main(["pretrain", "--config", str(path), "--out", str(tmp_path / "alt")]) == 0
    resolved = json.loads((tmp_path / "alt" / "pretrain" / "config.resolved.json").read_text())
    assert resolved["budgets"]["pretrain"] == 0 and resolved["seeds"] == [3]
    assert (tmp_path / "alt" / "pretrain" / "checkpoints" / "seed_3" / "policy.npz").exists()
    assert cli.main(["pretrain", "--config", str(path), "--out", str(tmp_path / "alt2"),
                     "--budget", "2048"]) == 0
    resolved = json.loads((tmp_path / "alt2" / "pretrain" / "config.resolved.json").read_text())
    assert resolved["budgets"]["pretrain"] == 2048


def test_extended_multiplies_finetune_budget(tmp_path):
    cfg = cli.load_config(_config(tmp_path))
    args = type("A", (), {"extended": "2.5", "out": None, "seeds": None, "budget": None})()
    assert cli.apply_overrides(cfg, args, "finetune").finetune_budget == 10240


def test_numeric_failure_exits_3(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise nn.NumericError("non-finite activation in actor layer 1")
    monkeypatch.setattr(adapt, "pretrain", boom)
    assert cli.main(["pretrain", "--config", str(_config(tmp_path))]) == cli.EXIT_NUMERIC


def test_verify_theory_exit_code_and_outputs(tmp_path, capsys):
    assert cli.main(["verify-theory", "--prop", "2", "--trials", "5", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "overall: PASS" in text
    rows = list(csv.DictReader(open(tmp_path / "theory" / "prop2.csv")))
    assert len(rows) == 5 and all(r["passed"] == "True" for r in rows)
    assert cli.main(["verify-theory", "--prop", "7", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_verify_theory_failure_gives_nonzero(tmp_path, monkeypatch):
    from safelora import theory
    monkeypatch.setattr(theory, "verify_all", lambda *a, **k: [theory.Report("x", passed=False)])
    assert cli.main(["verify-theory", "--prop", "1", "--out", str(tmp_path)]) == cli.EXIT_VERIFY_FAILED


def test_ablate_rank_writes_one_row_per_rank(tmp_path):
    path = _config(tmp_path, budgets={"pretrain": 0, "finetune": 2048})
    assert cli.main(["pretrain", "--config", str(path)]) == 0
    assert cli.main(["ablate", "rank", "--config", str(path)]) == 0
    run = tmp_path / "runs" / "ablate_rank"
    rows = list(csv.DictReader(open(run / "comparison.csv")))
    assert [r["arm"] for r in rows] == ["rank_1", "rank_2", "rank_4", "rank_8"]
    assert [int(r["trainable_params"]) for r in rows] == [523, 1045, 2089, 4177]
    assert (run / "rank_8" / "metrics.csv").exists()
    assert cli.main(["report", str(run)]) == 0
    assert len(list((run / "curves").glob("*.dat"))) == 4


def test_report_empty_and_corrupt(tmp_path, capsys):
    (tmp_path / "metrics.csv").write_text(HEADER + "\n")
    assert cli.main(["report", str(tmp_path)]) == 0
    assert "no rollouts" in capsys.readouterr().out
    (tmp_path / "metrics.csv").write_text(HEADER + "\nr,0,2048,-1.0,0.1,0,0,0.2,5\nr,0,4096,abc,0.1,0,0,0.2,5\n")
    assert cli.main(["report", str(tmp_path)]) == cli.EXIT_ARTIFACT
    assert "row 3" in capsys.readouterr().err
    assert cli.main(["report", str(tmp_path / "nowhere")]) == cli.EXIT_ARTIFACT


def test_report_matches_independent_recomputation(tmp_path):
    rewards = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 10.0]
    lines = [HEADER] + [f"a-s0,0,{2048 * (i + 1)},{r!r},0.0,0,0,{0.5 - 0.05 * i!r},9" for i, r in enumerate(rewards)]
    (tmp_path / "metrics.csv").write_text("\n".join(lines) + "\n")
    assert cli.main(["report", str(tmp_path)]) == 0
    curve = np.loadtxt(tmp_path / "curves" / "a-s0.dat")
    expected = [np.mean(rewards[i:i + 5]) for i in range(len(rewards) - 4)]
    assert curve[0, 1] == 3.0 and curve[0, 0] == 5 * 2048
    assert np.allclose(curve[:, 1], expected)
