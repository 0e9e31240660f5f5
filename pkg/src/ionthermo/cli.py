"""Command-line front end.

Option values resolve as: command-line flag, else ``--config`` JSON file,
else the selected ``--profile``.  Every command prints its resolved
configuration to stderr and stores it alongside its outputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

from . import __version__, dataset as ds_mod, evaluation, neuralnet
from .exceptions import (
    FitFailureError,
    FormatError,
    InvalidInputError,
    QMismatchError,
    ResourceLimitError,
)

log = logging.getLogger("ionthermo")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_INVALID = 3
EXIT_FORMAT = 4
EXIT_Q_MISMATCH = 5
EXIT_FIT_FAILURE = 6
EXIT_RESOURCE = 7
EXIT_IO = 8

PROFILES = {
    "fast": {
        "count": 200_000,
        "test_count": 10_000,
        "tail_epsilon": 1e-3,
        "test_tail_epsilon": 1e-4,
        "n_sidebands": 10,
        "hidden_width": 256,
        "epochs": 20,
        "batch_size": 256,
        "learning_rate": 1e-3,
        "lr_schedule": "cosine",
        "noise_n": 100,
    },
    "full": {
        "count": 1_000_000,
        "test_count": 50_000,
        "tail_epsilon": 1e-4,
        "test_tail_epsilon": 1e-4,
        "n_sidebands": 15,
        "hidden_width": 1024,
        "epochs": 20,
        "batch_size": 256,
        "learning_rate": 1e-3,
        "lr_schedule": "cosine",
        "noise_n": 100,
    },
}
GLOBAL_DEFAULTS = {"seed": 0, "workers": 1, "profile": "fast"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv_floats(text):
    return [float(v) for v in text.replace(",", " ").split()]


def _csv_ints(text):
    return [int(v) for v in text.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ionthermo", description=__doc__.splitlines()[0])
    parser.add_argument(
        "--version",
        action="version",
        version=(
            f"ionthermo {__version__} (dataset format {ds_mod.FORMAT_VERSION}, "
            f"model format {neuralnet.FORMAT_VERSION})"
        ),
    )
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file of option values")
    common.add_argument("--profile", choices=sorted(PROFILES))
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    for name, help_, prefix in (
        ("gen-data", "generate a training set", ""),
        ("gen-test", "generate a test set", "test_"),
    ):
        p = add(name, help_)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--count", dest=prefix + "count", type=int)
        p.add_argument("--n-sidebands", "-Q", dest="n_sidebands", type=int)
        p.add_argument("--tail-epsilon", dest=prefix + "tail_epsilon", type=float)
        p.add_argument("--csv", type=Path, help="also export records as CSV")

    p = add("noise", "apply binomial projection noise to a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-measurements", "-N", dest="noise_n", type=int)

    p = add("train", "train a network on a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-sidebands", "-Q", dest="n_sidebands", type=int,
                   help="use only the first Q sidebands of the dataset")
    p.add_argument("--hidden-width", dest="hidden_width", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--lr-schedule", dest="lr_schedule", choices=("constant", "cosine"))
    p.add_argument("--activations", help="comma separated hidden activations, e.g. tanh,tanh,relu")
    p.add_argument("--init-model", dest="init_model", type=Path,
                   help="continue from this model (e.g. noisy retraining)")
    p.add_argument("--train-noise", dest="train_noise", type=int,
                   help="redraw projection noise with this N every epoch")

    p = add("eval", "evaluate a model on a test set")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--bins-csv", dest="bins_csv", type=Path)

    p = add("noise-sweep", "error versus number of measurements")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ns", type=_csv_ints, help="measurement counts, e.g. 100,400,1600")
    p.add_argument("--csv", type=Path)

    p = add("infer", "estimate nbar and omega_t from measured populations")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--populations", type=_csv_floats, required=True)
    p.add_argument("--sigmas", type=_csv_floats, help="per-population standard deviations")
    p.add_argument("--draws", type=int)
    p.add_argument("--out", type=Path)

    p = add("peak-fit", "fit a Gaussian to a sideband scan")
    p.add_argument("--scan", type=Path, required=True, help="CSV: frequency_hz,population,n_measurements")
    p.add_argument("--out", type=Path)

    p = add("heat-fit", "fit a heating line")
    p.add_argument("--points", type=Path, required=True, help="CSV: duration_ms,nbar")
    p.add_argument("--out", type=Path)

    p = add("verify-line", "compare predictions with a heating line on synthetic spectra")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--line", type=Path, help="JSON from heat-fit")
    p.add_argument("--rate", type=float)
    p.add_argument("--intercept", type=float)
    p.add_argument("--durations", type=_csv_floats, required=True, help="ms")
    p.add_argument("--eta", type=float)
    p.add_argument("--omega-t", dest="omega_t", type=float)
    p.add_argument("--n-measurements", "-N", dest="line_noise_n", type=int,
                   help="apply projection noise with this N (default: clean spectra)")
    p.add_argument("--out", type=Path, required=True)
    return parser


def resolve(args):
    """Merged configuration and the set of keys set explicitly by flag or file."""
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "verbose")}
    file_cfg = {}
    if args.config is not None:
        try:
            file_cfg = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(str(exc), str(args.config)) from exc
        if not isinstance(file_cfg, dict):
            raise FormatError("config must be a JSON object", str(args.config))
    profile = flags.get("profile") or file_cfg.get("profile") or GLOBAL_DEFAULTS["profile"]
    if profile not in PROFILES:
        raise InvalidInputError(f"unknown profile {profile!r}")
    cfg = {**GLOBAL_DEFAULTS, **PROFILES[profile], **file_cfg, **flags}
    cfg["profile"] = profile
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in cfg.items()}
    return cfg, set(flags) | set(file_cfg)


def _check_distinct(cfg, inputs, output="out"):
    out = cfg.get(output)
    for key in inputs:
        if cfg.get(key) is not None and out is not None and Path(cfg[key]).resolve() == Path(out).resolve():
            raise InvalidInputError(f"--{output} must differ from --{key}")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _emit(cfg, result):
    if cfg.get("out"):
        _write_json(cfg["out"], {"config": cfg, "result": result})
    else:
        print(json.dumps(result, indent=2, default=str))


def _load_model(cfg):
    return neuralnet.load_model(cfg["model"])


def cmd_gen(cfg, mode, explicit=()):
    prefix = "" if mode == "train" else "test_"
    count, eps = cfg[prefix + "count"], cfg[prefix + "tail_epsilon"]
    cfg = {k: v for k, v in cfg.items() if k not in ("test_count", "test_tail_epsilon")}
    cfg.update(count=count, tail_epsilon=eps, mode=mode)
    box = ds_mod.ParamBox(n_sidebands=cfg["n_sidebands"])
    data = ds_mod.generate_dataset(box, count, cfg["seed"], mode, eps, workers=cfg["workers"])
    data.save(cfg["out"], meta={"config": cfg})
    if cfg.get("csv"):
        data.to_csv(cfg["csv"])
    log.info("wrote %d records to %s", len(data), cfg["out"])


def cmd_noise(cfg, explicit=()):
    _check_distinct(cfg, ["data"])
    data = ds_mod.Dataset.load(cfg["data"])
    noisy = ds_mod.apply_projection_noise(data, cfg["noise_n"], cfg["seed"])
    noisy.save(cfg["out"], meta={"config": cfg, "source": data.header()})


def cmd_train(cfg, explicit=()):
    _check_distinct(cfg, ["data", "init_model"])
    data = ds_mod.Dataset.load(cfg["data"])
    if cfg.get("init_model"):
        model = neuralnet.load_model(cfg["init_model"])
        q = model.n_sidebands
    else:
        q = cfg["n_sidebands"] if "n_sidebands" in explicit else data.n_sidebands
        acts = tuple(cfg["activations"].split(",")) if cfg.get("activations") else neuralnet.DEFAULT_ACTIVATIONS
        model = neuralnet.init_model(q, cfg["hidden_width"], seed=cfg["seed"],
                                     n_hidden=len(acts), activations=acts)
    if q != data.n_sidebands:
        data = data.with_sidebands(q)
    cfg = {**cfg, "n_sidebands": q}
    config = neuralnet.TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"],
        lr_schedule=cfg["lr_schedule"],
        seed=cfg["seed"],
        noise_n=cfg.get("train_noise"),
    )
    model, history = neuralnet.train(
        model, data, config, callback=lambda e, l: log.info("epoch %d loss %.6f", e + 1, l)
    )
    model.meta["run_config"] = cfg
    model.meta["dataset"] = data.header()
    neuralnet.save_model(model, cfg["out"])


def cmd_eval(cfg, explicit=()):
    model = _load_model(cfg)
    data = ds_mod.Dataset.load(cfg["data"])
    report = evaluation.evaluate_model(model, data)
    report.save(cfg["out"], extra={"config": cfg})
    if cfg.get("bins_csv"):
        with open(cfg["bins_csv"], "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_lo", "bin_hi", "count", "mean_rel_error"])
            for lo, hi, n, e in zip(report.bin_edges[:-1], report.bin_edges[1:],
                                    report.bin_counts, report.bin_mean_rel_error):
                writer.writerow([lo, hi, n, e])
    print(f"window {report.window}: mean relative error {report.window_mean_rel_error:.5f}")


def cmd_sweep(cfg, explicit=()):
    model = _load_model(cfg)
    data = ds_mod.Dataset.load(cfg["data"])
    ns = cfg.get("ns") or [100, 400, 1600, 6400]
    sweep = evaluation.noise_sweep(model, data, ns, cfg["seed"])
    _write_json(cfg["out"], {"config": cfg, "result": sweep.to_dict()})
    if cfg.get("csv"):
        sweep.to_csv(cfg["csv"])


def cmd_infer(cfg, explicit=()):
    model = _load_model(cfg)
    pops = cfg["populations"]
    pred = neuralnet.predict(model, cfg["eta"], pops)
    result = {"nbar": pred.nbar, "omega_t": pred.omega_t, "clamped": pred.clamped}
    if cfg.get("sigmas") is not None:
        sigmas = cfg["sigmas"]
        if len(sigmas) == 1:
            sigmas = sigmas * len(pops)
        if len(sigmas) != len(pops):
            raise InvalidInputError("need one sigma per population")
        mc = evaluation.monte_carlo_errorbar(
            model, cfg["eta"], pops, sigmas, cfg.get("draws") or 1000, cfg["seed"]
        )
        result["monte_carlo"] = mc.__dict__
    _emit(cfg, result)


def cmd_peak_fit(cfg, explicit=()):
    trace = evaluation.ScanTrace.from_csv(cfg["scan"])
    fit = evaluation.gaussian_peak_fit(trace)
    _emit(cfg, {**fit.__dict__, "population": fit.population, "population_se": fit.population_se})


def cmd_heat_fit(cfg, explicit=()):
    with open(cfg["points"], newline="") as fh:
        reader = csv.DictReader(fh)
        if not {"duration_ms", "nbar"} <= set(reader.fieldnames or ()):
            raise InvalidInputError("points CSV needs columns duration_ms,nbar")
        rows = [(float(r["duration_ms"]), float(r["nbar"])) for r in reader]
    if not rows:
        raise InvalidInputError("points CSV is empty")
    t, n = zip(*rows)
    line = evaluation.fit_heating_rate(t, n)
    _emit(cfg, line.__dict__)


def cmd_verify_line(cfg, explicit=()):
    model = _load_model(cfg)
    if cfg.get("line"):
        payload = json.loads(Path(cfg["line"]).read_text())
        payload = payload.get("result", payload)
        line = evaluation.HeatingLine(**payload)
    elif cfg.get("rate") is not None and cfg.get("intercept") is not None:
        line = evaluation.HeatingLine(cfg["rate"], cfg["intercept"])
    else:
        raise InvalidInputError("give --line or both --rate and --intercept")
    rows = evaluation.verify_against_heating_line(
        model, line, cfg["durations"], seed=cfg["seed"], noise_n=cfg.get("line_noise_n"),
        eta=cfg.get("eta") or 0.122, omega_t=cfg.get("omega_t") or math.pi,
    )
    evaluation.comparison_to_csv(rows, cfg["out"])
    _write_json(str(cfg["out"]) + ".json", {"config": cfg})


COMMANDS = {
    "gen-data": lambda cfg, explicit: cmd_gen(cfg, "train", explicit),
    "gen-test": lambda cfg, explicit: cmd_gen(cfg, "test", explicit),
    "noise": cmd_noise,
    "train": cmd_train,
    "eval": cmd_eval,
    "noise-sweep": cmd_sweep,
    "infer": cmd_infer,
    "peak-fit": cmd_peak_fit,
    "heat-fit": cmd_heat_fit,
    "verify-line": cmd_verify_line,
}


def dispatch(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    stage = args.command
    try:
        cfg, explicit = resolve(args)
        print(json.dumps({"command": stage, "config": cfg}, sort_keys=True, default=str), file=sys.stderr)
        COMMANDS[stage](cfg, explicit)
    except QMismatchError as exc:
        print(f"{stage}: Q mismatch: {exc}", file=sys.stderr)
        return EXIT_Q_MISMATCH
    except InvalidInputError as exc:
        print(f"{stage}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FormatError as exc:
        print(f"{stage}: malformed file: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except FitFailureError as exc:
        print(f"{stage}: fit failed: {exc} (residual {exc.residual})", file=sys.stderr)
        return EXIT_FIT_FAILURE
    except ResourceLimitError as exc:
        print(f"{stage}: resource limit: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except (OSError, ValueError) as exc:
        print(f"{stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc, OSError) else EXIT_INVALID
    return EXIT_OK


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
