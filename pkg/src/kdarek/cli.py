"""Command-line harness: ``kdarek {cosine,bench,bound,safectrl,train}``.

Every run writes its data files plus ``manifest.json`` into ``--out``. Data
files depend only on the config and seed; timings live in the manifest.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import re
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as ex
from .errors import ConfigError, KdarekError, ModelFileError
from .netcore import TrainConfig
from .serialize import SCHEMA, dumps

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_MODEL_FILE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4, 5
U64_MAX = 2 ** 64 - 1


@dataclasses.dataclass
class TrainCmdConfig:
    model: str = "kdarek"
    data_csv: str = ""
    n_inputs: int = 1
    knot_strategy: str = "auto"
    m_k: int = 9
    mlp_widths: list = dataclasses.field(default_factory=lambda: [1, 5])
    hidden: int = 5
    order: int = 3
    stride: int = 2
    lipschitz_f: float = 10.0
    lipschitz_kp1: float = 10.0
    cosine: ex.CosineConfig = dataclasses.field(default_factory=ex.CosineConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.model not in ("kdarek", "darek"):
            raise ValueError("model must be 'kdarek' or 'darek'")


@dataclasses.dataclass
class BoundCmdConfig:
    lipschitz_f: float | None = None
    lipschitz_kp1: float | None = None


CONFIG_TYPES = {"cosine": ex.CosineConfig, "bench": ex.BenchConfig, "safectrl": ex.SafeCtrlConfig,
                "train": TrainCmdConfig, "bound": BoundCmdConfig}


@dataclasses.dataclass
class RunManifest:
    command: str
    config_hash: str
    build: str
    seed: int | None
    jobs: int
    timings: dict
    outputs: list

    def __post_init__(self):
        if any(v < 0 for v in self.timings.values()):
            raise ValueError("timings must be nonnegative")

    def to_dict(self):
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# config


def _line_of(text, key):
    if not text:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _where(src, text, key):
    line = _line_of(text, key)
    return f"{src}:{line}" if line else src


def _coerce(value, default, name, src, text):
    def bad(kind):
        return ConfigError(f"{_where(src, text, name.rsplit('.', 1)[-1])}: {name} must be {kind}, got {value!r}")

    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise bad("a boolean")
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("an integer" if isinstance(default, int) else "a number")
        if isinstance(default, int) and not isinstance(value, int):
            raise bad("an integer")
        return float(value) if isinstance(default, float) else value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise bad("a string")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, list):
            raise bad("a list")
        return tuple(value) if isinstance(default, tuple) else value
    return value


def build_config(cls, data, src="<config>", text="", prefix=""):
    """Instantiate dataclass ``cls`` from a JSON object, rejecting unknown keys and ill-typed values."""
    if not isinstance(data, dict):
        raise ConfigError(f"{src}: section {prefix or '<root>'} must be a JSON object")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{_where(src, text, key)}: unknown key {prefix + key!r}; "
                              f"expected one of {sorted(names)}")
    kwargs = {}
    for key, value in data.items():
        default = getattr(defaults, key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = build_config(type(default), value, src, text, prefix + key + ".")
        else:
            kwargs[key] = _coerce(value, default, prefix + key, src, text)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{src}: invalid {prefix.rstrip('.') or 'config'}: {e}") from e


def _apply_override(data, assignment):
    if "=" not in assignment:
        raise ConfigError(f"--set expects KEY=VALUE, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {p} is not a section")
    node[parts[-1]] = value


def load_config(command, path=None, overrides=()):
    text, data, src = "", {}, "<defaults>"
    if path is not None:
        src = str(path)
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid JSON ({e.msg})") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}:1: config must be a JSON object")
        schema = data.pop("schema", SCHEMA)
        if schema != SCHEMA:
            raise ConfigError(f"{_where(src, text, 'schema')}: expected schema {SCHEMA!r}, got {schema!r}")
    for o in overrides:
        _apply_override(data, o)
    return build_config(CONFIG_TYPES[command], data, src, text)


def config_hash(cfg, seed):
    payload = dumps({"config": dataclasses.asdict(cfg), "seed": seed})
    return hashlib.sha256(payload.encode()).hexdigest()


def build_id():
    try:
        from importlib.metadata import version

        ver = version("artifact")
    except Exception:
        ver = "unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{ver}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return ver


# ---------------------------------------------------------------------------
# output


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(r[h]) for h in header] if isinstance(r, dict) else [_cell(v) for v in r])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="\n")


def write_json(path, obj):
    Path(path).write_text(dumps({"schema": SCHEMA, **obj}), encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# commands


def cmd_cosine(cfg: ex.CosineConfig, args, out, timings):
    summary, curves = ex.run_cosine(cfg, args.seed, args.jobs, timings)
    write_csv(out / "cosine_summary.csv", ["model", "mse", "violation_pct", "n_params"], summary)
    write_csv(out / "cosine_curves.csv", ["model", "x", "f", "f_hat", "u"], curves)
    for r in summary:
        n = "-" if r["n_params"] is None else r["n_params"]
        print(f"{r['model']:<9} mse={r['mse']:.4g} violation={r['violation_pct']:.1f}% params={n}")
    return ["cosine_summary.csv", "cosine_curves.csv"]


def cmd_bench(cfg: ex.BenchConfig, args, out, timings):
    t0 = time.perf_counter()
    rows = ex.run_bench(cfg, args.seed, args.jobs)
    timings["bench"] = time.perf_counter() - t0
    write_csv(out / "bench.csv", ["n", "model", "train_s", "infer_s", "total_s"], rows)
    for r in rows:
        print(f"n={r['n']:<5} {r['model']:<9} train={r['train_s']:.3g}s infer={r['infer_s']:.3g}s")
    return ["bench.csv"]


def cmd_safectrl(cfg: ex.SafeCtrlConfig, args, out, timings):
    rows, traj = ex.run_safectrl(cfg, args.seed, args.jobs, timings)
    header = ["model", "d_p", "d_v", "success", "collision", "stuck", "mean_steps", "seed0"]
    write_csv(out / "safectrl.csv", header, rows)
    outputs = ["safectrl.csv"]
    if cfg.trajectory_trials > 0:
        write_csv(out / "trajectories.csv", ex.TRAJECTORY_HEADER, traj)
        outputs.append("trajectories.csv")
    for r in rows:
        print(f"{r['model']:<5} d_p={r['d_p']:g} d_v={r['d_v']:g} success={r['success']} "
              f"collision={r['collision']} stuck={r['stuck']}")
    return outputs


def _read_data_csv(path, n_inputs):
    try:
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except OSError as e:
        raise ConfigError(f"cannot read data file {path}: {e}") from e
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e
    if arr.shape[1] <= n_inputs:
        raise ConfigError(f"{path}: need more than n_inputs={n_inputs} columns, found {arr.shape[1]}")
    return arr[:, :n_inputs], arr[:, n_inputs:]


def cmd_train(cfg: TrainCmdConfig, args, out, timings):
    from .baselines import darek_train
    from .bounds import compute_feature_knots, select_knots
    from .netcore import KdarekModel, train
    from .serialize import save_model

    if cfg.data_csv:
        X, Y = _read_data_csv(cfg.data_csv, cfg.n_inputs)
    else:
        x, y = ex.cosine_data(cfg.cosine, args.seed)
        X, Y = x[:, None], y[:, None]
    t0 = time.perf_counter()
    triple = select_knots(X, Y, cfg.m_k, cfg.knot_strategy)
    tcfg = TrainConfig(**{**dataclasses.asdict(cfg.train), "seed": args.seed})
    if cfg.model == "kdarek":
        model = KdarekModel.build(triple.T, triple.Y, cfg.mlp_widths, Y.shape[1], cfg.order, cfg.stride,
                                  cfg.lipschitz_f, args.seed)
        train(model, X, Y, tcfg)
    else:
        model, _ = darek_train(X, Y, triple.T, triple.Y, tcfg, cfg.hidden, cfg.order, cfg.stride)
    triple = compute_feature_knots(model, triple)
    timings["train"] = time.perf_counter() - t0
    mse = float(np.mean((np.asarray(model.predict(X)).reshape(Y.shape) - Y) ** 2))
    meta = {"lipschitz_f": cfg.lipschitz_f, "lipschitz_kp1": cfg.lipschitz_kp1, "train_mse": mse}
    save_model(out / "model.json", model, triple, meta)
    print(f"{cfg.model} trained: {model.n_params()} parameters, train mse={mse:.4g}")
    return ["model.json"]


def bound_report(model, triple, meta, queries, lipschitz_f=None, lipschitz_kp1=None):
    """JSON-ready decomposition of the bound at each query."""
    from .baselines import DarekModel
    from .bounds import budget_for, darek_budget, darek_two_layer_bound, total_bound_batch

    L_f = float(lipschitz_f if lipschitz_f is not None else meta.get("lipschitz_f", 1.0))
    L_kp1 = float(lipschitz_kp1 if lipschitz_kp1 is not None else meta.get("lipschitz_kp1", L_f))
    d = triple.T.shape[1]
    Q = np.asarray(queries, dtype=float).reshape(-1, d)
    nearest = np.abs(Q[:, None, :] - triple.T[None, :, :]).argmin(axis=1)
    if isinstance(model, DarekModel):
        kind = "darek"
        f_hat, total, first, second = darek_two_layer_bound(model, Q, triple, darek_budget(L_f, L_kp1, model.order))
        names = ("out_term", "in_term")
    else:
        kind = "kdarek"
        f_hat, total, first, second = total_bound_batch(model, Q, triple, budget_for(model, L_f, L_kp1))
        names = ("spline_term", "mlp_term")
    rows = []
    for i in range(Q.shape[0]):
        rows.append({
            "x": Q[i].tolist(),
            "f_hat": np.atleast_1d(f_hat[i]).tolist(),
            "total": np.atleast_1d(total[i]).tolist(),
            names[0]: np.atleast_1d(first[i]).tolist(),
            names[1]: float(second[i]),
            "nearest_knots": [{"id": int(triple.indices[j]) if triple.indices is not None else int(j),
                               "x": triple.T[j].tolist()} for j in nearest[i]],
        })
    return {"model": kind, "lipschitz_f": L_f, "lipschitz_kp1": L_kp1, "queries": rows}


def _parse_query(s):
    try:
        return [float(v) for v in s.split(",")]
    except ValueError as e:
        raise ConfigError(f"--x expects comma-separated numbers, got {s!r}") from e


def cmd_bound(cfg: BoundCmdConfig, args, out, timings):
    from .serialize import load_model

    model, triple, meta = load_model(args.model)
    if not args.x:
        raise ConfigError("bound needs at least one --x query")
    queries = [_parse_query(s) for s in args.x]
    d = triple.T.shape[1]
    if any(len(q) != d for q in queries):
        raise ConfigError(f"each --x needs {d} comma-separated values")
    t0 = time.perf_counter()
    report = bound_report(model, triple, meta, queries, cfg.lipschitz_f, cfg.lipschitz_kp1)
    timings["bound"] = time.perf_counter() - t0
    sys.stdout.write(dumps({"schema": SCHEMA, **report}))
    if out is not None:
        write_json(out / "bound.json", report)
        return ["bound.json"]
    return []


COMMANDS = {"cosine": cmd_cosine, "bench": cmd_bench, "safectrl": cmd_safectrl, "train": cmd_train,
            "bound": cmd_bound}


# ---------------------------------------------------------------------------
# entry point


def _seed(s):
    try:
        v = int(s, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {s!r}")
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _jobs(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("--jobs must be >= 1")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="kdarek", description="Distance-aware error bounds: experiments and queries.")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {"cosine": "compare K-DAREK, DAREK, GP and Ensemble on 10cos(x)",
             "bench": "train/inference timing over dataset sizes",
             "safectrl": "safe-control outcome grid over noise levels",
             "train": "train a model and save it with its knots",
             "bound": "query the error bound of a saved model"}
    for name, h in helps.items():
        sp = sub.add_parser(name, help=h)
        sp.add_argument("--config", type=Path, help="JSON config file")
        sp.add_argument("--seed", type=_seed, required=name != "bound", help="unsigned 64-bit seed")
        sp.add_argument("--out", type=Path, required=name != "bound", help="output directory")
        sp.add_argument("--jobs", type=_jobs, default=1, help="worker processes")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field (dotted path, JSON value)")
        if name == "bound":
            sp.add_argument("model", type=Path, help="model file written by 'train'")
            sp.add_argument("--x", action="append", default=[], help="query point, comma-separated per input")
    return p


def run(argv=None):
    args = build_parser().parse_args(argv)
    timings = {}
    t_start = time.perf_counter()
    cfg = load_config(args.command, args.config, args.set)
    out = args.out
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OSError(f"cannot create output directory {out}: {e.strerror}") from e
    timings["config"] = time.perf_counter() - t_start
    outputs = COMMANDS[args.command](cfg, args, out, timings)
    timings["total"] = time.perf_counter() - t_start
    if out is not None:
        manifest = RunManifest(args.command, config_hash(cfg, args.seed), build_id(), args.seed, args.jobs,
                               timings, outputs)
        write_json(out / "manifest.json", manifest.to_dict())
    return EXIT_OK


def main(argv=None):
    try:
        return run(argv)
    except ConfigError as e:
        print(f"kdarek: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelFileError as e:
        print(f"kdarek: model file error: {e}", file=sys.stderr)
        return EXIT_MODEL_FILE
    except KdarekError as e:
        print(f"kdarek: numerical error ({type(e).__name__}): {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"kdarek: i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
