import csv
import json

import numpy as np
import pytest

from kdarek import cli
from kdarek.serialize import SCHEMA, load_model

FAST_TRAIN = ["--set", "train.epochs=30"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert cli.main(["train", "--seed", "1", "--out", str(out), *FAST_TRAIN]) == 0
    return out


def _bound(capsys, model, *xs):
    argv = ["bound", str(model)]
    for x in xs:
        argv += ["--x", x]
    assert cli.main(argv) == 0
    return json.loads(capsys.readouterr().out)


def test_train_writes_model_and_manifest(trained):
    man = json.loads((trained / "manifest.json").read_text())
    assert man["schema"] == SCHEMA and man["command"] == "train" and man["seed"] == 1
    assert man["outputs"] == ["model.json"]
    assert all(v >= 0 for v in man["timings"].values())
    assert len(man["config_hash"]) == 64
    _, _, meta = load_model(trained / "model.json")
    assert meta["lipschitz_f"] == 10.0


def test_bound_at_knot_is_abs_residual(trained, capsys):
    _, triple, _ = load_model(trained / "model.json")
    j = 4
    doc = _bound(capsys, trained / "model.json", repr(float(triple.T[j, 0])))
    assert doc["schema"] == SCHEMA
    q = doc["queries"][0]
    assert q["total"][0] == pytest.approx(abs(triple.E[j, 0]), abs=1e-8)
    assert q["nearest_knots"][0]["id"] == int(triple.indices[j])


def test_bound_grows_past_edge(trained, capsys):
    doc = _bound(capsys, trained / "model.json", "7.0", "8.5")
    t = [q["total"][0] for q in doc["queries"]]
    assert t[0] <= t[1]
    for q in doc["queries"]:
        assert set(q) == {"x", "f_hat", "total", "spline_term", "mlp_term", "nearest_knots"}


def test_bound_lipschitz_override_scales(trained, capsys):
    lo = _bound(capsys, trained / "model.json", "9.0")["queries"][0]["total"][0]
    assert cli.main(["bound", str(trained / "model.json"), "--x", "9.0", "--set", "lipschitz_f=20",
                     "--set", "lipschitz_kp1=20"]) == 0
    hi = json.loads(capsys.readouterr().out)["queries"][0]["total"][0]
    assert hi > lo


def test_bound_errors(tmp_path, trained, capsys):
    assert cli.main(["bound", str(tmp_path / "missing.json"), "--x", "1"]) == cli.EXIT_MODEL_FILE
    (tmp_path / "bad.json").write_text("{\n\n  oops")
    assert cli.main(["bound", str(tmp_path / "bad.json"), "--x", "1"]) == cli.EXIT_MODEL_FILE
    assert "bad.json:3" in capsys.readouterr().err
    assert cli.main(["bound", str(trained / "model.json")]) == cli.EXIT_CONFIG
    assert cli.main(["bound", str(trained / "model.json"), "--x", "a"]) == cli.EXIT_CONFIG
    assert cli.main(["bound", str(trained / "model.json"), "--x", "1,2"]) == cli.EXIT_CONFIG


def test_train_from_csv_darek(tmp_path):
    x = np.linspace(-2, 2, 40)
    rows = "\n".join(f"{float(a)!r},{float(b)!r}" for a, b in zip(x, np.sin(x)))
    (tmp_path / "d.csv").write_text("x,y\n" + rows + "\n")
    cfg = {"schema": SCHEMA, "model": "darek", "data_csv": str(tmp_path / "d.csv"), "m_k": 8, "train": {"epochs": 20}}
    (tmp_path / "c.json").write_text(json.dumps(cfg, indent=1))
    assert cli.main(["train", "--seed", "0", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 0
    model, _, _ = load_model(tmp_path / "o" / "model.json")
    assert model.kind == "darek"


@pytest.mark.parametrize("text, where", [
    ('{\n "schema": "kdarek/v1",\n "m_k": 9,\n "bogus": 1\n}', ":4: unknown key 'bogus'"),
    ('{\n "train": {\n  "epochs": 5,\n  "lr": 0.1\n }\n}', ":4: unknown key 'train.lr'"),
    ('{\n "m_k": "nine"\n}', ":2: m_k must be an integer"),
    ('{\n "m_k": 9,\n "stride": 2.5\n}', ":3: stride must be an integer"),
    ('{\n "m_k": 9,\n', ":3:"),
    ('{"schema": "kdarek/v0"}', "expected schema"),
    ('[1, 2]', "must be a JSON object"),
    ('{"train": {"epochs": 0}}', "epochs must be >= 1"),
])
def test_config_diagnostics(tmp_path, capsys, text, where):
    (tmp_path / "c.json").write_text(text)
    rc = cli.main(["train", "--seed", "0", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_CONFIG
    assert where in capsys.readouterr().err


def test_seed_required_for_campaigns(tmp_path):
    for cmd in ("cosine", "bench", "safectrl", "train"):
        with pytest.raises(SystemExit) as e:
            cli.main([cmd, "--out", str(tmp_path)])
        assert e.value.code == 2


def test_seed_range():
    with pytest.raises(SystemExit):
        cli.main(["train", "--seed", "-1", "--out", "x"])
    with pytest.raises(SystemExit):
        cli.main(["train", "--seed", str(2 ** 64), "--out", "x"])


def test_set_override_changes_hash(tmp_path):
    a = cli.load_config("train")
    b = cli.load_config("train", overrides=["train.epochs=7", "mlp_widths=[1,5,5]"])
    assert b.train.epochs == 7 and b.mlp_widths == [1, 5, 5]
    assert cli.config_hash(a, 0) != cli.config_hash(b, 0)
    assert cli.config_hash(a, 0) != cli.config_hash(a, 1)
    with pytest.raises(cli.ConfigError):
        cli.load_config("train", overrides=["nope=1"])
    with pytest.raises(cli.ConfigError):
        cli.load_config("train", overrides=["epochs"])


def test_manifest_rejects_negative_timing():
    with pytest.raises(ValueError):
        cli.RunManifest("x", "h", "b", 0, 1, {"a": -1.0}, [])


def test_bench_csv(tmp_path):
    argv = ["bench", "--seed", "0", "--out", str(tmp_path), "--set", "sizes=[20,40]", "--set", "repetitions=1",
            "--set", 'models=["K-DAREK","GP"]', "--set", "cosine.train.epochs=5"]
    assert cli.main(argv) == 0
    raw = (tmp_path / "bench.csv").read_bytes()
    assert b"\r" not in raw
    rows = list(csv.DictReader(raw.decode().splitlines()))
    assert [(r["n"], r["model"]) for r in rows] == [("20", "K-DAREK"), ("20", "GP"), ("40", "K-DAREK"), ("40", "GP")]
    assert all(float(r["train_s"]) >= 0 and float(r["infer_s"]) >= 0 for r in rows)


def test_safectrl_grid_complete(tmp_path):
    argv = ["safectrl", "--seed", "2", "--out", str(tmp_path), "--set", "n_trials=2", "--set", "n_data=300",
            "--set", "epochs=5", "--set", "m_k=16", "--set", "d_p_grid=[0,1]", "--set", "d_v_grid=[0,2]",
            "--set", "trajectory_trials=1", "--set", "world.max_steps=60"]
    assert cli.main(argv) == 0
    rows = list(csv.DictReader((tmp_path / "safectrl.csv").read_text().splitlines()))
    cells = {(r["model"], float(r["d_p"]), float(r["d_v"])) for r in rows}
    assert cells == {(m, p, v) for m in ("D2", "K-D2", "K-D3") for p in (0.0, 1.0) for v in (0.0, 2.0)}
    for r in rows:
        assert int(r["success"]) + int(r["collision"]) + int(r["stuck"]) == 2
    traj = list(csv.DictReader((tmp_path / "trajectories.csv").read_text().splitlines()))
    assert traj and set(traj[0]) == set(cli.ex.TRAJECTORY_HEADER)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["outputs"] == ["safectrl.csv", "trajectories.csv"]
    assert {"data", "train", "campaign"} <= set(man["timings"])


def test_unwritable_out_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    rc = cli.main(["train", "--seed", "0", "--out", str(blocker / "sub"), *FAST_TRAIN])
    assert rc == cli.EXIT_IO
