"""Command-line front end.

Exit codes: 0 success, 1 selftest failure, 2 configuration error, 3 IO error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Sequence

import jsonschema

from . import __version__, experiments, rmt
from .errors import InvalidInput, InvalidSpec, NotApplicable, NotAvailable, SingularityError
from .linalg import chi1_upper_quantile

log = logging.getLogger("pcrlab")

EXIT_OK, EXIT_SELFTEST, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


class ConfigError(Exception):
    pass


class OutputError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _threads(arg: int | None) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("PCRLAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"PCRLAB_THREADS must be an integer, got {env!r}")
    return 1


def _read_json(path: str) -> Any:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot read {path}: {exc.strerror or exc}")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}")


def _schema_message(exc: jsonschema.ValidationError) -> str:
    where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
    return f"config field {where}: {exc.message}"


def _load_config(path: str, seed: int | None) -> experiments.ExperimentConfig:
    data = _read_json(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    if seed is not None:
        data["master_seed"] = seed
    try:
        return experiments.ExperimentConfig.from_dict(data)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"{path}: {_schema_message(exc)}")
    except (InvalidSpec, InvalidInput) as exc:
        raise ConfigError(f"{path}: {exc}")


def _write_atomic(path: Path, text: str) -> None:
    """Write via a temporary file in the same directory so readers never see partial output."""
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}")


def _emit(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        _write_atomic(Path(out), text)


def _progress(label: str):
    def report(done: int, total: int) -> None:
        log.info("%s: %d/%d tau0 values", label, done, total)

    return report


def _json_text(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, ensure_ascii=False, allow_nan=False) + "\n"


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _load_config(args.config, args.seed)
    result = experiments.run_experiment(config, _threads(args.threads), progress=_progress("simulate"))
    csv_text = result.to_csv()
    out = Path(args.out)
    man = experiments.manifest({out.stem: config}, {out.name: csv_text})
    _write_atomic(out, csv_text)
    _write_atomic(out.with_name(out.stem + ".manifest.json"), _json_text(man))
    return EXIT_OK


def cmd_reproduce(args: argparse.Namespace) -> int:
    seed = experiments.DEFAULT_SEED if args.seed is None else args.seed
    try:
        presets = experiments.figure_presets(args.figure, args.scale, seed, args.reps)
    except InvalidSpec as exc:
        raise ConfigError(str(exc))
    outdir = Path(args.out)
    threads = _threads(args.threads)
    files: dict[str, str] = {}
    for name, config in presets.items():
        log.info("panel %s (n=%d, p=%d, reps=%d)", name, config.n, config.p, config.reps)
        result = experiments.run_experiment(config, threads, progress=_progress(name))
        files[f"{name}.csv"] = result.to_csv()
    for fname, text in files.items():
        _write_atomic(outdir / fname, text)
    configs = {name: cfg for name, cfg in presets.items()}
    _write_atomic(outdir / "manifest.json", _json_text(experiments.manifest(configs, files)))
    return EXIT_OK


def _parse_bulk(items: Sequence[str] | None) -> tuple[tuple[float, float], ...]:
    if not items:
        return ((1.0, 1.0),)
    atoms = []
    for item in items:
        try:
            value, weight = item.split(":")
            atoms.append((float(value), float(weight)))
        except ValueError:
            raise ConfigError(f"bulk atom {item!r} must look like VALUE:WEIGHT")
    return tuple(atoms)


def _limits_query(args: argparse.Namespace) -> dict[str, Any]:
    q: dict[str, Any] = {}
    if args.query:
        data = _read_json(args.query)
        if not isinstance(data, dict):
            raise ConfigError("limits query must be a JSON object")
        q.update(data)
    if args.gamma is not None:
        q["gamma"] = args.gamma
    if args.spike:
        q["spikes"] = list(args.spike)
    if args.strength:
        q["spikes"] = [1.0 + s for s in args.strength]
    if args.bulk:
        q["bulk"] = [list(a) for a in _parse_bulk(args.bulk)]
    if args.theta_proj:
        q["theta_projections"] = list(args.theta_proj)
    return q


LIMITS_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["gamma"],
    "properties": {
        "gamma": {"type": "number", "exclusiveMinimum": 0},
        "spikes": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "bulk": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        },
        "theta_projections": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "theta_norm2": {"type": "number", "exclusiveMinimum": 0},
    },
}


def cmd_limits(args: argparse.Namespace) -> int:
    q = _limits_query(args)
    try:
        jsonschema.validate(q, LIMITS_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(_schema_message(exc))
    try:
        law = rmt.SpectralLaw(tuple(tuple(a) for a in q.get("bulk", [[1.0, 1.0]])), q["gamma"])
        coeffs = rmt.limit_coefficients(q.get("spikes", []), law, q.get("theta_projections"),
                                        q.get("theta_norm2", 1.0))
    except (NotApplicable, SingularityError, InvalidInput) as exc:
        raise ConfigError(str(exc))
    _emit(_json_text(coeffs.to_dict()), args.out)
    return EXIT_OK


def cmd_power(args: argparse.Namespace) -> int:
    law = rmt.SpectralLaw.point_mass(args.gamma)
    m1, m2 = rmt.mp_moments(law)
    c0, c4 = args.c0, args.c4
    if args.scenario == "beta_random_theta_fixed" and (c0 is None or c4 is None):
        if args.strength is None:
            raise ConfigError("beta_random_theta_fixed needs --c0 and --c4, or --strength with --theta-proj")
        try:
            sc = rmt.scenario_constants([1.0 + args.strength], law, [args.theta_proj])
        except (InvalidInput, SingularityError) as exc:
            raise ConfigError(str(exc))
        c0, c4 = sc.c0, sc.c4
    try:
        t = chi1_upper_quantile(args.alpha)
    except InvalidInput as exc:
        raise ConfigError(str(exc))
    rows = ["h,t,upsilon"]
    for h in args.h:
        try:
            limit = rmt.kappa2_limit_law(
                args.scenario, gamma=args.gamma, m1=m1, m2=m2, sigma2_beta=args.sigma2_beta,
                sigma2_theta=args.sigma2_theta, sigma2_g=args.sigma2_g, h=h, c0=c0, c4=c4, c1=args.c1,
            )
        except NotAvailable as exc:
            raise ConfigError(f"{exc} (open question: the constant C1 has no closed form)")
        except InvalidInput as exc:
            raise ConfigError(str(exc))
        rows.append("%.6g,%.6g,%.6g" % (h, t, rmt.asymptotic_power(t, limit)))
    _emit("\n".join(rows) + "\n", args.out)
    return EXIT_OK


def cmd_selftest(args: argparse.Namespace) -> int:
    from .selftest import run_selftest

    ok = run_selftest(stream=sys.stdout)
    return EXIT_OK if ok else EXIT_SELFTEST


# --------------------------------------------------------------------------
# parser


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are configuration errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="log progress to stderr")

    parser = _Parser(prog="pcrlab", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"pcrlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--threads", type=int, default=None, help="worker processes (env PCRLAB_THREADS)")
    run.add_argument("--seed", type=int, default=None, help="override the master seed")

    p = sub.add_parser("simulate", parents=[common, run], help="run one experiment config")
    p.add_argument("config", help="JSON experiment config")
    p.add_argument("--out", required=True, help="results CSV; the manifest goes next to it")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reproduce", parents=[common, run], help="regenerate a figure's panels")
    p.add_argument("figure", choices=["fig1", "fig2"])
    p.add_argument("--scale", choices=sorted(experiments.SCALES), default="desk")
    p.add_argument("--reps", type=int, default=None, help="override the preset replication count")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("limits", parents=[common], help="asymptotic coefficients as JSON")
    p.add_argument("query", nargs="?", help="optional JSON query file")
    p.add_argument("--gamma", type=float)
    p.add_argument("--spike", type=float, action="append", help="population spike eigenvalue (repeatable)")
    p.add_argument("--strength", type=float, action="append",
                   help="additive spike strength lambda, i.e. eigenvalue 1+lambda (repeatable)")
    p.add_argument("--bulk", action="append", help="bulk atom VALUE:WEIGHT (repeatable; default 1:1)")
    p.add_argument("--theta-proj", type=float, action="append",
                   help="squared projection of theta on each spike direction")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_limits)

    p = sub.add_parser("power", parents=[common], help="asymptotic rejection probability over an h grid")
    p.add_argument("--scenario", required=True, choices=list(rmt.SCENARIOS))
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--h", type=_float_list, default=[0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0])
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--sigma2-beta", type=float, default=1.0)
    p.add_argument("--sigma2-theta", type=float, default=1.0)
    p.add_argument("--sigma2-g", type=float, default=1.0)
    p.add_argument("--c0", type=float)
    p.add_argument("--c4", type=float)
    p.add_argument("--c1", type=float, help="empirical variance constant for beta_fixed_theta_random")
    p.add_argument("--strength", type=float, help="additive spike strength for computing c0, c4")
    p.add_argument("--theta-proj", type=float, default=1.0, help="squared projection of theta on the spike")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_power)

    p = sub.add_parser("selftest", parents=[common], help="fast invariant checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, InvalidInput, InvalidSpec) as exc:
        print(f"pcrlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OutputError as exc:
        print(f"pcrlab: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"pcrlab: io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
