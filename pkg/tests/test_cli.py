import json

import pytest

from coordiff.cli import main

TINY = {
    "n_episodes": 1, "max_steps": 8, "sde_steps": 3, "mc_samples": 4,
    "demos": {"episodes": 2, "joint_episodes": 2},
    "train": {"hidden_sizes": [16], "step_count": 300, "batch_size": 64},
    "cost_model": {"hidden_sizes": [8], "step_count": 5, "batch_size": 16},
    "finetune": {"iterations": 1, "rollouts_per_state": 4, "states_per_step": 1, "step_count": 3, "sample_steps": 3},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(TINY))
    return d


def run(d, *argv):
    return main([argv[0], "--config", str(d / "cfg.json"), *argv[1:]])


@pytest.fixture(scope="module")
def artifacts(workdir):
    d = workdir
    assert run(d, "gen-demos", "--out", str(d / "demos.cdf")) == 0
    assert run(d, "gen-demos", "--joint", "--out", str(d / "joint.cdf")) == 0
    assert run(d, "train", "--data", str(d / "demos.cdf"), "--out", str(d / "pol.cdf")) == 0
    assert run(d, "train", "--data", str(d / "joint.cdf"), "--out", str(d / "joint_pol.cdf")) == 0
    assert run(d, "train", "--data", str(d / "joint.cdf"), "--target", "cost", "--out", str(d / "cost.cdf")) == 0
    return d


def test_verify(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") == 7


def test_rollout_and_eval(artifacts, capsys):
    d = artifacts
    assert run(d, "rollout", "--model", str(d / "pol.cdf"), "--out", str(d / "trace.jsonl"), "--deterministic") == 0
    assert (d / "trace.jsonl").read_text().count("\n") >= 1
    rc = run(d, "eval", "--model", str(d / "pol.cdf"), "--model", str(d / "joint_pol.cdf"), "--model",
             str(d / "cost.cdf"), "--method", "codi,unguided,cg-joint", "--out", str(d / "m.jsonl"))
    assert rc == 0
    capsys.readouterr()
    assert main(["inspect", str(d / "m.jsonl")]) == 0
    assert len(json.loads(capsys.readouterr().out)) == 3


def test_finetune(artifacts):
    d = artifacts
    assert run(d, "finetune", "--model", str(d / "joint_pol.cdf"), "--data", str(d / "joint.cdf"),
               "--method", "expo", "--out", str(d / "expo.cdf")) == 0
    assert run(d, "rollout", "--model", str(d / "expo.cdf"), "--method", "expo") == 0


def test_inspect_checkpoint(artifacts, capsys):
    assert main(["inspect", str(artifacts / "pol.cdf")]) == 0
    assert json.loads(capsys.readouterr().out)["method"] == "policy"


@pytest.mark.parametrize("argv", [["bogus"], ["eval", "--method", "ppo"], ["train"], ["gen-demos"],
                                  ["rollout", "--method", "nope"]])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1


def test_missing_artifact_is_usage(artifacts):
    assert run(artifacts, "rollout", "--method", "dpmd", "--model", str(artifacts / "pol.cdf")) == 1


def test_bad_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"lamda": 1}')
    assert main(["verify", "--config", str(p)]) == 1
    p.write_text("{not json")
    assert main(["verify", "--config", str(p)]) == 1


def test_corrupt_checkpoint_is_runtime(artifacts, tmp_path):
    bad = tmp_path / "bad.cdf"
    data = bytearray((artifacts / "pol.cdf").read_bytes())
    data[-5] ^= 0xFF
    bad.write_bytes(bytes(data))
    assert main(["inspect", str(bad)]) == 2


def test_finetune_needs_method(artifacts):
    d = artifacts
    assert run(d, "finetune", "--model", str(d / "joint_pol.cdf"), "--data", str(d / "joint.cdf"),
               "--out", str(d / "x.cdf")) == 1
