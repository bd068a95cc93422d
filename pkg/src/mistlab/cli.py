"""``mistlab`` command line: gen-toy, train, attack, eval, ablate, report (and rerun).

Every run writes its outputs plus ``run.cfg`` (the effective configuration) and
``manifest.json`` into one directory. Outputs are staged and only moved into
place when the command succeeds.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import os
import platform
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import __version__
from .exceptions import ConfigurationError, InvariantError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ASSERT = 0, 2, 3, 4
OUTPUT_ENV = "MISTLAB_OUTPUT_DIR"

# flag -> config key; every flag defaults to None so file values survive
FLAGS = {
    "--seed": "run.seed",
    "--out": "run.output_dir",
    "--data-dir": "data.dir",
    "--train-size": "data.train_size",
    "--n-eval": "data.n_eval",
    "--roster": "models.roster",
    "--surrogate": "models.surrogate",
    "--models-dir": "models.dir",
    "--estimator": "attack.estimator",
    "--epsilon": "attack.epsilon",
    "--epsilon-units": "attack.epsilon_units",
    "--n-iter": "attack.n_iter",
    "--decay": "attack.decay",
    "--step-size": "attack.step_size",
    "--n": "mist.n",
    "--lambda-min": "mist.lambda_min",
    "--shift": "mist.shift",
    "--max-shift": "mist.max_shift",
    "--m2": "admix.m2",
    "--eta": "admix.eta",
    "--m": "sim.m",
    "--p": "dim.p",
    "--rate": "dim.rate",
    "--tim-size": "tim.size",
    "--defenses": "eval.defenses",
    "--sweep": "ablate.sweep",
    "--grid": "ablate.grid",
    "--n-points": "toy.n_points",
    "--epsilon-factor": "toy.epsilon_factor",
    "--per-class": "toy.per_class",
    "--input": "report.input",
}

COMMANDS = ("gen-toy", "train", "attack", "eval", "ablate", "report")


class _Run:
    """Staging directory for one command's outputs."""

    def __init__(self, config, command: str):
        self.config = config
        self.command = command
        self.final = Path(config.raw("run.output_dir"))
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=".partial-", dir=self.final.parent))
        self.outputs: List[str] = []
        self.extra: Dict[str, object] = {}

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.stage / name

    def write_text(self, name: str, text: str):
        self.path(name).write_text(text)

    def commit(self):
        self.write_text("run.cfg", self.config.to_text())
        manifest = {
            "command": self.command,
            "seed": self.config.get("run.seed"),
            "config": self.config.effective(),
            "versions": _versions(),
            "outputs": {n: _sha256(self.stage / n) for n in sorted(set(self.outputs)) if n != "manifest.json"},
        }
        manifest.update(self.extra)
        self.path("manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        self.final.mkdir(parents=True, exist_ok=True)
        for name in sorted(set(self.outputs)):
            target = self.final / name
            target.parent.mkdir(parents=True, exist_ok=True)
            shutil.move(str(self.stage / name), str(target))
        shutil.rmtree(self.stage, ignore_errors=True)

    def abort(self):
        shutil.rmtree(self.stage, ignore_errors=True)


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> Dict[str, str]:
    import sklearn

    return {"mistlab": __version__, "python": platform.python_version(), "numpy": np.__version__, "scikit-learn": sklearn.__version__}


# ---------------------------------------------------------------------------
# shared helpers


def build_specs(config):
    """Estimator spec tuple from ``attack.estimator`` with per-component settings applied."""
    from .attacks import estimator_specs
    from .transforms import DIM, MIST, SIM, TIM, Admix

    specs = []
    sim_m = config.get("sim.m")
    for s in estimator_specs(config.get("attack.estimator")):
        if isinstance(s, MIST):
            s = MIST(
                n=config.get("mist.n"),
                lambda_min=config.get("mist.lambda_min"),
                shift=config.get("mist.shift"),
                max_shift=config.get("mist.max_shift"),
            )
        elif isinstance(s, Admix):
            s = Admix(m2=config.get("admix.m2"), eta=config.get("admix.eta"), scale=sim_m if s.scale else None)
        elif isinstance(s, SIM):
            s = SIM(m=sim_m)
        elif isinstance(s, DIM):
            s = DIM(p=config.get("dim.p"), rate=config.get("dim.rate"))
        elif isinstance(s, TIM):
            s = TIM(size=config.get("tim.size"))
        specs.append(s)
    return tuple(specs)


def attack_config(config, specs=None):
    from .attacks import AttackConfig

    return AttackConfig(
        epsilon=config.epsilon,
        n_iter=config.get("attack.n_iter"),
        step_size=config.step_size,
        decay=config.get("attack.decay"),
        clip=(0.0, 1.0),
        estimator=specs if specs is not None else build_specs(config),
        seed=config.get("run.seed"),
    )


def _data_dir(config) -> Path:
    from .data import default_mnist_dir

    text = config.raw("data.dir")
    path = Path(text) if text else default_mnist_dir()
    if path is None or not path.is_dir():
        raise ConfigurationError(f"data.dir: MNIST directory not found ({text or 'default location'})")
    return path


def _load_models(config, run: Optional[_Run] = None) -> Dict[str, object]:
    """Load the roster from ``models.dir`` or train it in memory."""
    from .benchmark import ZOO, train_zoo
    from .data import load_mnist
    from .models import load_weights

    roster = config.get("models.roster")
    unknown = [r for r in roster if r not in ZOO]
    if unknown:
        raise ConfigurationError(f"models.roster: unknown model(s) {unknown}; choose from {sorted(ZOO)}")
    models_dir = config.raw("models.dir")
    if models_dir:
        out = {}
        for name in roster:
            path = Path(models_dir) / f"{name}.mlab"
            if not path.exists():
                raise ConfigurationError(f"models.dir: missing weight file {path}")
            out[name] = load_weights(path, ZOO[name][0])
        return out
    data_dir = _data_dir(config)
    train_set = load_mnist(data_dir, "train", limit=config.get("data.train_size"))
    test_set = load_mnist(data_dir, "test")
    return train_zoo(train_set, test_set, names=roster)


def _eval_batch(config, models):
    from .benchmark import EVAL_POOL
    from .data import load_mnist
    from .evaluation import common_correct

    test_set = load_mnist(_data_dir(config), "test")
    X, y = test_set.images[:EVAL_POOL], test_set.labels[:EVAL_POOL]
    keep = common_correct(list(models.values()), X, y)
    n = config.get("data.n_eval")
    return X[keep][:n], y[keep][:n], test_set.provenance


def _surrogate(config, models):
    name = config.get("models.surrogate")
    if name not in models:
        raise ConfigurationError(f"models.surrogate: {name} is not in models.roster")
    return name


# ---------------------------------------------------------------------------
# commands


def cmd_gen_toy(config, run: _Run):
    from .svg import trajectory_plot
    from .toy2d import ToySpec, generate, run_toy_experiment, toy_epsilon, train_pair

    seed = config.get("run.seed")
    ds = generate(ToySpec(per_class=config.get("toy.per_class"), seed=seed))
    f1, f2 = train_pair(ds, (10 * seed + 1, 10 * seed + 2))
    eps = toy_epsilon(f1, ds.of_class(0), config.get("toy.epsilon_factor"))
    result = run_toy_experiment(
        ds, f1, f2, epsilon=eps, n_iter=config.get("attack.n_iter"),
        n_points=config.get("toy.n_points"), seed=seed,
    )
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["point_id", "x", "y", "label"])
    for i, (p, l) in enumerate(zip(ds.points, ds.labels)):
        w.writerow([i, f"{p[0]:.6f}", f"{p[1]:.6f}", int(l)])
    run.write_text("points.csv", buf.getvalue())
    run.write_text("trajectories.csv", result.trajectory_csv())
    run.write_text("summary.csv", result.summary_csv())
    lo, hi = ds.points.min(axis=0) - 1.0, ds.points.max(axis=0) + 1.0
    paths: Dict[str, list] = {}
    for tr in result.trajectories:
        if tr.point_id < 8:
            paths.setdefault(tr.method, []).append(tr.iterates)
    svg = trajectory_plot(f1.predict, (lo[0], hi[0], lo[1], hi[1]), ds.points, ds.labels, paths, result.triple_point)
    run.write_text("toy.svg", svg)
    run.extra["toy"] = {"epsilon": result.epsilon, "accuracy_f1": f1.heldout_accuracy_, "accuracy_f2": f2.heldout_accuracy_}
    for method, s in sorted(result.summary.items()):
        print(f"{method:8s} whitebox={s['whitebox_rate']:.4f} transfer={s['transfer_rate']:.4f} dist={s['mean_dist']:.4f}")


def cmd_train(config, run: _Run):
    from .benchmark import ZOO, train_zoo
    from .data import load_mnist
    from .models import save_weights

    roster = config.get("models.roster")
    unknown = [r for r in roster if r not in ZOO]
    if unknown:
        raise ConfigurationError(f"models.roster: unknown model(s) {unknown}")
    data_dir = _data_dir(config)
    train_set = load_mnist(data_dir, "train", limit=config.get("data.train_size"))
    test_set = load_mnist(data_dir, "test")
    models = train_zoo(train_set, test_set, names=roster)
    rows = ["model,architecture,test_accuracy\n"]
    for name, model in models.items():
        save_weights(model, run.path(f"{name}.mlab"))
        rows.append(f"{name},{ZOO[name][0]},{model.heldout_accuracy_:.4f}\n")
        print(f"{name:16s} test accuracy {model.heldout_accuracy_:.4f}")
    run.write_text("accuracy.csv", "".join(rows))
    run.extra["provenance"] = {**train_set.provenance, **test_set.provenance}


def cmd_attack(config, run: _Run):
    from .attacks import run_attack
    from .evaluation import success_rate

    models = _load_models(config)
    X, y, provenance = _eval_batch(config, models)
    name = _surrogate(config, models)
    cfg = attack_config(config)
    result = run_attack(models[name], X, y, cfg)
    with run.path("adversarial.npz").open("wb") as fh:
        np.savez(fh, x_adv=result.x_adv, x_clean=result.x_clean, labels=result.labels)
    run.write_text(
        "counters.csv",
        "forwards,backwards,n,linf_max\n"
        f"{result.counter.forwards},{result.counter.backwards},{len(y)},{result.linf.max():.6f}\n",
    )
    rows = ["surrogate,target,n,success_rate\n"]
    for t, m in sorted(models.items()):
        rows.append(f"{name},{t},{len(y)},{success_rate(m, result.x_adv, y):.4f}\n")
    run.write_text("rates.csv", "".join(rows))
    run.extra["provenance"] = provenance
    print("".join(rows), end="")


def cmd_eval(config, run: _Run):
    from .evaluation import parse_defense, transfer_matrix

    models = _load_models(config)
    X, y, provenance = _eval_batch(config, models)
    name = _surrogate(config, models)
    attacks = {}
    for est in config.raw("attack.estimator").split(","):
        sub = config.merged({"attack.estimator": est.strip()})
        attacks[est.strip()] = attack_config(sub)
    defenses = [parse_defense(d) for d in config.get("eval.defenses")]
    report = transfer_matrix(models, attacks, X, y, seed=config.get("run.seed"), defenses=defenses, surrogates=[name], prefilter=False)
    run.write_text("transfer.csv", report.to_csv())
    run.extra.update({"provenance": provenance, "config_digest": report.digest})
    for a in attacks:
        print(f"{a:16s} black-box mean {report.blackbox_mean(name, a):.4f}")


def cmd_ablate(config, run: _Run):
    from .evaluation import LAMBDA_GRID, N_GRID, ablate_components, ablate_lambda, ablate_n, component_variants
    from .transforms import MIST

    models = _load_models(config)
    X, y, provenance = _eval_batch(config, models)
    name = _surrogate(config, models)
    targets = {k: m for k, m in models.items() if k != name}
    if not targets:
        raise ConfigurationError("models.roster: ablations need at least one target besides the surrogate")
    base = attack_config(config, specs=())
    template = MIST(
        n=config.get("mist.n"), lambda_min=config.get("mist.lambda_min"), max_shift=config.get("mist.max_shift")
    )
    sweep = config.get("ablate.sweep")
    grid = config.get("ablate.grid")
    seed = config.get("run.seed")
    if sweep == "lambda":
        table = ablate_lambda(models[name], targets, X, y, base, grid or LAMBDA_GRID, seed, template)
    elif sweep == "n":
        table = ablate_n(models[name], targets, X, y, base, tuple(int(g) for g in grid) or N_GRID, seed, template)
    elif sweep == "components":
        table = ablate_components(models[name], targets, X, y, base, seed, component_variants(template))
    else:
        raise ConfigurationError(f"ablate.sweep: expected lambda, n or components, got {sweep!r}")
    run.write_text(f"ablate_{sweep}.csv", table.to_csv())
    run.extra["provenance"] = provenance
    for v, m in zip(table.values, table.means):
        print(f"{sweep}={v:>14s} mean transfer {m:.4f}")


def _read_csv(path: Path):
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(config, run: _Run):
    from .svg import bar_plot, line_plot

    text = config.raw("report.input")
    if not text:
        raise ConfigurationError("report.input: give one or more CSV files")
    for item in text.split(","):
        path = Path(item.strip())
        if not path.exists():
            raise ConfigurationError(f"report.input: {path} does not exist")
        rows = _read_csv(path)
        header = tuple(rows[0].keys()) if rows else ()
        stem = path.stem
        if header[:2] == ("sweep", "value"):
            means = [r for r in rows if r["target"] == "mean"]
            if means[0]["sweep"] == "components":
                svg = bar_plot([r["value"] for r in means], [float(r["success_rate"]) for r in means], "mean transfer")
            else:
                xs = [float(r["value"]) for r in means]
                svg = line_plot({"mean": (xs, [float(r["success_rate"]) for r in means])}, means[0]["sweep"], "mean transfer")
        elif header[:2] == ("surrogate", "target"):
            keys = sorted({(r["attack"], r["defense"]) for r in rows})
            labels, values = [], []
            for attack, defense in keys:
                sel = [float(r["success_rate"]) for r in rows
                       if r["attack"] == attack and r["defense"] == defense and r["surrogate"] != r["target"]]
                if sel:
                    labels.append(attack if defense == "none" else f"{attack}/{defense}")
                    values.append(float(np.mean(sel)))
            svg = bar_plot(labels, values, "black-box success")
        elif header[:2] == ("method", "whitebox_rate"):
            svg = bar_plot([r["method"] for r in rows], [float(r["transfer_rate"]) for r in rows], "transfer rate")
        else:
            raise ConfigurationError(f"report.input: unrecognized CSV header in {path}")
        run.write_text(f"{stem}.svg", svg)
        print(f"rendered {stem}.svg")


HANDLERS: Dict[str, Callable] = {
    "gen-toy": cmd_gen_toy,
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mistlab", description="MIST transfer-attack laboratory")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value configuration file")
        for flag, key in FLAGS.items():
            p.add_argument(flag, dest=key, default=None, metavar=key.split(".")[-1].upper(), help=f"overrides {key}")
    rerun = sub.add_parser("rerun", help="repeat the run recorded in a manifest")
    rerun.add_argument("manifest")
    rerun.add_argument("--out", dest="run.output_dir", default=None)
    return parser


def resolve_config(args: argparse.Namespace):
    from .config import RunConfig

    base = RunConfig.from_file(args.config, args.command) if getattr(args, "config", None) else RunConfig(command=args.command)
    overrides = {key: getattr(args, key, None) for key in FLAGS.values()}
    env_out = os.environ.get(OUTPUT_ENV)
    if env_out and overrides.get("run.output_dir") is None:
        overrides["run.output_dir"] = env_out
    return base.merged(overrides)


def _from_manifest(args):
    from .config import RunConfig

    try:
        manifest = json.loads(Path(args.manifest).read_text())
        command, values = manifest["command"], dict(manifest["config"])
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigurationError(f"cannot read manifest {args.manifest}: {exc}") from None
    out = getattr(args, "run.output_dir") or os.environ.get(OUTPUT_ENV)
    if out:
        values["run.output_dir"] = out
    return command, RunConfig(values, command)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    run = None
    try:
        if args.command == "rerun":
            command, config = _from_manifest(args)
        else:
            command, config = args.command, resolve_config(args)
        run = _Run(config, command)
        HANDLERS[command](config, run)
        run.commit()
        return EXIT_OK
    except ConfigurationError as exc:
        _fail(run, f"configuration error: {exc}")
        return EXIT_CONFIG
    except (InvariantError, AssertionError) as exc:
        _fail(run, f"invariant violated: {exc}")
        return EXIT_ASSERT
    except Exception as exc:  # noqa: BLE001 - reported and mapped to an exit code
        _fail(run, f"error: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


def _fail(run: Optional[_Run], message: str):
    if run is not None:
        run.abort()
    print(message, file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
