import csv
import json

import numpy as np
import pytest

from dmpo.cli import main
from dmpo.envs import gen_demos
from dmpo.io import (
    CheckpointError,
    load_checkpoint,
    load_dataset,
    parse_config,
    save_checkpoint,
    save_dataset,
    write_metrics_csv,
)
from dmpo.meanflow import Stage1Config
from dmpo.nets import init_value_net, init_velocity_net, param_checksum


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_identical(tmp_path):
    net = init_velocity_net(3, 4, 2)
    vnet = init_value_net(3, 4)
    path = tmp_path / "ck.json"
    save_checkpoint(path, {"policy": net, "value": vnet}, state={"note": "x", "arr": np.arange(3.0)})
    nets, state = load_checkpoint(path)
    assert param_checksum(nets["policy"]) == param_checksum(net)
    assert param_checksum(nets["value"]) == param_checksum(vnet)
    assert state["note"] == "x"
    np.testing.assert_array_equal(state["arr"], [0.0, 1.0, 2.0])


def test_checkpoint_corruption_detected(tmp_path):
    net = init_velocity_net(4, 3, 2)
    path = tmp_path / "ck.json"
    save_checkpoint(path, {"policy": net})
    raw = path.read_text()
    # flip one base64 payload character
    i = raw.index('"data": "') + len('"data": "') + 5
    ch = "A" if raw[i] != "A" else "B"
    path.write_text(raw[:i] + ch + raw[i + 1 :])
    with pytest.raises(CheckpointError, match="checksum|unreadable"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    import hashlib

    net = init_velocity_net(5, 3, 2)
    path = tmp_path / "ck.json"
    save_checkpoint(path, {"policy": net})
    env = json.loads(path.read_text())
    env.pop("checksum")
    env["format_version"] = 99
    canon = json.dumps(env, sort_keys=True, separators=(",", ":")).encode()
    env["checksum"] = hashlib.sha256(canon).hexdigest()
    path.write_text(json.dumps(env))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_truncated_file(tmp_path):
    net = init_velocity_net(6, 3, 2)
    path = tmp_path / "ck.json"
    save_checkpoint(path, {"policy": net})
    path.write_text(path.read_text()[: 100])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


# ---------------------------------------------------------------------------
# datasets and metrics


def test_dataset_jsonl_round_trip(tmp_path):
    ds = gen_demos("point-reach", 5, seed=2)
    path = tmp_path / "d.jsonl"
    save_dataset(path, ds)
    back = load_dataset(path)
    np.testing.assert_array_equal(back.obs, ds.obs)
    np.testing.assert_array_equal(back.actions, ds.actions)
    np.testing.assert_array_equal(back.episode_ids, ds.episode_ids)
    np.testing.assert_array_equal(back.ts, ds.ts)
    # format: one JSON object per line with the documented keys
    line = json.loads(path.read_text().splitlines()[0])
    assert set(line) == {"obs", "action", "episode", "t"}


def test_metrics_csv_header_and_values(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics_csv(path, ("a", "b"), [{"a": 1, "b": 0.5}, {"a": 2, "b": 1.0 / 3.0}])
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["a", "b"]
    assert float(rows[2][1]) == 1.0 / 3.0  # full round-trip precision


def test_parse_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown config keys"):
        parse_config({"epochs": 3, "bogus": 1}, Stage1Config)
    cfg = parse_config({"epochs": 3}, Stage1Config)
    assert cfg.epochs == 3 and cfg.alpha_disp == 0.1  # defaults filled


# ---------------------------------------------------------------------------
# CLI end to end


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "demos.jsonl"
    ck = root / "pre.json"
    assert main(["gen-data", "--env", "point-reach", "--episodes", "6", "--seed", "0",
                 "--out", str(data)]) == 0
    cfg = root / "s1.json"
    cfg.write_text(json.dumps({"epochs": 5, "batch_size": 32, "seed": 0}))
    assert main(["pretrain", "--config", str(cfg), "--data", str(data), "--out", str(ck)]) == 0
    return root, data, ck


def test_cli_pretrain_outputs(pipeline):
    root, data, ck = pipeline
    assert ck.exists()
    echo = json.loads((root / "pre.json.config.json").read_text())
    assert echo["alpha_disp"] == 0.1  # defaults resolved into the echo
    assert echo["epochs"] == 5
    metrics = (root / "pre.json.metrics.csv").read_text().splitlines()
    assert metrics[0] == "epoch,step,mf_loss,disp_loss,total_loss,d_eff,wall_ms"
    assert len(metrics) == 6


def test_cli_eval_nfe_accounting(pipeline, capsys):
    root, data, ck = pipeline
    assert main(["eval", "--checkpoint", str(ck), "--env", "point-reach",
                 "--episodes", "3", "-K", "1", "--seed", "1"]) == 0
    out1 = dict(l.split("=", 1) for l in capsys.readouterr().out.strip().splitlines())
    assert float(out1["mean_nfe"]) == 1.0
    assert main(["eval", "--checkpoint", str(ck), "--env", "point-reach",
                 "--episodes", "3", "-K", "5", "--seed", "1"]) == 0
    out5 = dict(l.split("=", 1) for l in capsys.readouterr().out.strip().splitlines())
    assert float(out5["mean_nfe"]) == 5.0


def test_cli_finetune_and_inspect(pipeline, tmp_path):
    root, data, ck = pipeline
    cfg = tmp_path / "s2.json"
    cfg.write_text(json.dumps({"env_kind": "point-reach-shifted", "iterations": 2,
                               "rollout_steps": 64, "n_envs": 4, "seed": 0}))
    out = tmp_path / "ft.json"
    assert main(["finetune", "--config", str(cfg), "--checkpoint", str(ck),
                 "--out", str(out)]) == 0
    nets, state = load_checkpoint(out)
    assert set(nets) == {"policy", "value"}
    assert state["env_kind"] == "point-reach-shifted"
    assert (tmp_path / "ft.json.metrics.csv").exists()
    assert main(["inspect", "--checkpoint", str(out)]) == 0


def test_cli_finetune_requires_env_kind(pipeline, tmp_path, capsys):
    root, data, ck = pipeline
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"iterations": 1}))
    rc = main(["finetune", "--config", str(cfg), "--checkpoint", str(ck),
               "--out", str(tmp_path / "x.json")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_cli_bench_csv(pipeline, tmp_path):
    root, data, ck = pipeline
    out = tmp_path / "bench.csv"
    assert main(["bench", "--checkpoint", str(ck), "--env", "point-reach",
                 "-K", "1,2", "--samples", "5", "--warmup", "1", "--csv", str(out)]) == 0
    with open(out) as f:
        rows = list(csv.DictReader(f))
    assert [r["K"] for r in rows] == ["1", "2"]
    assert [r["nfe"] for r in rows] == ["1", "2"]


def test_cli_runtime_failure_exit_code(capsys):
    assert main(["eval", "--checkpoint", "/nonexistent.json", "--env", "point-reach"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert "\n" == err[-1] and err.count("\n") == 1  # one-line machine-parsable


def test_cli_bad_flags_exit_two():
    with pytest.raises(SystemExit) as e:
        main(["eval", "--env", "point-reach"])  # missing --checkpoint
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["not-a-command"])
    assert e.value.code == 2


def test_pretrain_checkpoint_round_trips_into_eval(pipeline):
    # loading a pretrain checkpoint must reproduce its eval metrics exactly
    from dmpo.envs import evaluate

    root, data, ck = pipeline
    nets, _ = load_checkpoint(ck)
    first = evaluate(nets["policy"], "point-reach", 5, 1, seed=3)
    nets2, _ = load_checkpoint(ck)
    again = evaluate(nets2["policy"], "point-reach", 5, 1, seed=3)
    assert first == again


def test_cli_rerun_from_echoed_config(pipeline, tmp_path):
    root, data, ck = pipeline
    echo = json.loads((root / "pre.json.config.json").read_text())
    for k in ("command", "data", "out"):
        echo.pop(k)
    cfg2 = tmp_path / "echo.json"
    cfg2.write_text(json.dumps(echo))
    out2 = tmp_path / "pre2.json"
    assert main(["pretrain", "--config", str(cfg2), "--data", str(data), "--out", str(out2)]) == 0
    a, _ = load_checkpoint(ck)
    b, _ = load_checkpoint(out2)
    assert param_checksum(a["policy"]) == param_checksum(b["policy"])
