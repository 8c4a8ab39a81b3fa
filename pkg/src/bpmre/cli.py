"""Command line front end.

Exit codes: 0 success, 1 verification failed, 2 invalid input or configuration.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import asymptotics, pathfn, simulate, spectral
from .envmodel import (
    CALIBRATION_TARGETS,
    EnvironmentModel,
    GeometricLaw,
    calibrate,
    law_from_dict,
    shift_means,
    validate_model,
)
from .errors import BpreError, FeasibilityError

log = logging.getLogger("bpmre")

MODEL_KEYS = {"states", "transition", "offspring", "shift_c"}
LAW_KEYS = {"kind", "params"}
EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2

BASE_P = [[0.2, 0.5, 0.3], [0.4, 0.2, 0.4], [0.3, 0.3, 0.4]]
BASE_MEANS = (math.e, math.exp(-0.8), 1.5)
FIXTURES = {
    "model_a": ("critical", None),
    "model_b": ("strong", 0.3),
    "model_c": ("intermediate", None),
    "model_d": ("weak", None),
}


class InputError(BpreError, ValueError):
    """Malformed model file or command-line parameter."""


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------


def parse_model(doc: Any) -> EnvironmentModel:
    if not isinstance(doc, dict):
        raise InputError("model file must hold a JSON object")
    unknown = set(doc) - MODEL_KEYS
    if unknown:
        raise InputError(f"unknown model keys: {sorted(unknown)}")
    for key in ("states", "transition", "offspring"):
        if key not in doc:
            raise InputError(f"model is missing {key!r}")
    states = doc["states"]
    if not isinstance(states, list) or not all(isinstance(s, str) for s in states):
        raise InputError("'states' must be a list of strings")
    offspring = doc["offspring"]
    if not isinstance(offspring, list):
        raise InputError("'offspring' must be a list")
    laws = []
    for idx, label in enumerate(states):
        if idx >= len(offspring) or offspring[idx] is None:
            raise InputError(f"missing offspring entry for state {label!r}")
        entry = offspring[idx]
        if not isinstance(entry, dict) or set(entry) - LAW_KEYS or "kind" not in entry:
            raise InputError(f"offspring entry for state {label!r} must be {{kind, params}}")
        try:
            laws.append(law_from_dict(entry))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"offspring entry for state {label!r}: {exc}") from exc
    if len(offspring) > len(states):
        raise InputError(f"{len(offspring)} offspring entries for {len(states)} states")
    try:
        P = np.array(doc["transition"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise InputError(f"'transition' is not a numeric matrix: {exc}") from exc
    model = EnvironmentModel(tuple(states), P, tuple(laws))
    c = doc.get("shift_c", 0.0)
    if not isinstance(c, (int, float)) or not math.isfinite(c):
        raise InputError("'shift_c' must be a finite number")
    return shift_means(model, float(c))


def model_document(base: EnvironmentModel, shift_c: float = 0.0) -> dict:
    doc = base.to_dict()
    if shift_c:
        doc["shift_c"] = shift_c
    return doc


def load_model(path: str | Path) -> tuple[EnvironmentModel, str]:
    """Parse a model file; returns the model and the sha256 of the file bytes."""
    raw = Path(path).read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    return parse_model(doc), hashlib.sha256(raw).hexdigest()


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("bpmre") / "fixtures" / f"{name}.json"))


def load_fixture(name: str) -> EnvironmentModel:
    return load_model(fixture_path(name))[0]


def base_model() -> EnvironmentModel:
    laws = tuple(GeometricLaw.from_mean(m) for m in BASE_MEANS)
    return EnvironmentModel(("s1", "s2", "s3"), np.array(BASE_P), laws)


def spectral_report(model: EnvironmentModel) -> dict:
    report = spectral.classify(model)
    dec0 = spectral.decompose(model, 0.0)
    dec1 = spectral.decompose(model, 1.0)
    out = report.to_dict()
    out.update(
        k0=dec0.k,
        gap0=dec0.gap,
        nu0=dec0.nu.tolist(),
        k1=dec1.k,
        v1=dec1.v.tolist(),
        means=model.means.tolist(),
        rho=model.rho.tolist(),
    )
    return out


def write_fixtures(out_dir: Path) -> dict[str, float]:
    """Calibrate the base chain into the four regime fixtures and freeze them."""
    out_dir.mkdir(parents=True, exist_ok=True)
    base = base_model()
    _dump(out_dir / "base.json", model_document(base))
    shifts = {}
    for name, (target, param) in FIXTURES.items():
        model, c = calibrate(base, target, param)
        report = spectral.classify(model)
        # the derivative that defines each target must vanish at generation time
        check = {
            "critical": report.Kp0,
            "intermediate": report.Kp1,
            "strong": report.Kp1 + param if param else 0.0,
            "weak": report.kp_star,
        }[target]
        if check is None or abs(check) > 1e-10:
            raise RuntimeError(f"{name}: calibration residual {check}")
        _dump(out_dir / f"{name}.json", model_document(base, c))
        _dump(out_dir / f"{name}.report.json", spectral_report(load_model(out_dir / f"{name}.json")[0]))
        shifts[name] = c
    return shifts


def _dump(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------------------
# argument helpers
# ---------------------------------------------------------------------------


def _gens(text: str) -> list[int]:
    try:
        gens = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad generation list {text!r}") from exc
    if not gens or min(gens) < 0:
        raise argparse.ArgumentTypeError("generations must be nonnegative integers")
    return sorted(set(gens))


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def _emit_json(doc: dict, out) -> None:
    out.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _fmt(x: float) -> str:
    return "%.17g" % x


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bpmre", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", help="check stochasticity, primitivity and moments")
    p.add_argument("model")
    p.add_argument("--lattice-tol", type=float, default=1e-9)

    p = sub.add_parser("classify", help="regime report as JSON")
    p.add_argument("model")
    p.add_argument("--tol", type=float, default=1e-9)

    p = sub.add_parser("kcurve", help="lambda, k, K, K', K'', gap as CSV")
    p.add_argument("model")
    p.add_argument("--lambda-min", type=float, default=-1.0)
    p.add_argument("--lambda-max", type=float, default=2.0)
    p.add_argument("--step", type=float, default=0.25)

    p = sub.add_parser("calibrate", help="shift offspring means into a target regime")
    p.add_argument("model")
    p.add_argument("--target", choices=CALIBRATION_TARGETS, required=True)
    p.add_argument("--param", type=float)
    p.add_argument("--out")

    p = sub.add_parser("oracle", help="exact enumeration or DP bounds as CSV")
    p.add_argument("model")
    p.add_argument("--gens", type=_gens, required=True)
    p.add_argument("--method", choices=("enum", "dp"), default="enum")
    p.add_argument("--cap", type=_positive_int, default=200, help="population cap M for dp")

    p = sub.add_parser("estimate", help="Monte Carlo survival estimates as CSV")
    p.add_argument("model")
    p.add_argument("--gens", type=_gens, required=True)
    p.add_argument("--estimator", choices=simulate.ESTIMATORS, default="env")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--samples", type=_positive_int, default=10**5)
    p.add_argument("--seed", type=_seed, default=1)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--cap", type=_positive_int, default=simulate.DEFAULT_CAP)

    p = sub.add_parser("verify", help="check the survival asymptotics for the model's regime")
    p.add_argument("model")
    p.add_argument("--regime", choices=tuple(asymptotics.PLANS), help="expected regime")
    p.add_argument("--samples", type=_positive_int)
    p.add_argument("--gens", type=_gens)
    p.add_argument("--seed", type=_seed, default=1)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("fixtures", help="regenerate the calibrated fixtures")
    p.add_argument("--out", default=str(fixture_path("base").parent))
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _load(args) -> EnvironmentModel:
    model, digest = load_model(args.model)
    params = {k: v for k, v in vars(args).items() if k not in ("model", "verbose")}
    log.info("model=%s sha256=%s params=%s", args.model, digest, json.dumps(params, sort_keys=True))
    return model


def cmd_validate(args, out) -> int:
    model = _load(args)
    report = validate_model(model, lattice_tol=args.lattice_tol)
    lat = report.lattice
    doc = {
        "stochastic_ok": report.stochastic_ok,
        "primitive_ok": report.primitive_ok,
        "k0": report.k0,
        "moments_ok": report.moments_ok,
        "lattice": {
            "is_suspect_lattice": lat.is_suspect_lattice,
            "span_estimate": lat.span_estimate,
            "theta": lat.theta,
            "cycles_examined": lat.cycles_examined,
        },
        "ok": report.ok,
    }
    print(
        f"stochastic: {report.stochastic_ok}  primitive: {report.primitive_ok} (k0={report.k0})  "
        f"moments: {report.moments_ok}  lattice suspect: {lat.is_suspect_lattice}",
        file=sys.stderr,
    )
    _emit_json(doc, out)
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_classify(args, out) -> int:
    model = _load(args)
    _emit_json(spectral.classify(model, tol=args.tol).to_dict(), out)
    return EXIT_OK


def cmd_kcurve(args, out) -> int:
    if args.step <= 0 or args.lambda_max < args.lambda_min:
        raise InputError("need step > 0 and lambda-max >= lambda-min")
    model = _load(args)
    count = int(round((args.lambda_max - args.lambda_min) / args.step)) + 1
    grid = args.lambda_min + args.step * np.arange(count)
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["lambda", "k", "K", "Kp", "Kpp", "gap"])
    for row in spectral.k_curve(model, grid):
        writer.writerow([_fmt(x) for x in row])
    return EXIT_OK


def cmd_calibrate(args, out) -> int:
    model, digest = load_model(args.model)
    log.info("model=%s sha256=%s target=%s param=%s", args.model, digest, args.target, args.param)
    raw = json.loads(Path(args.model).read_text())
    base = parse_model({k: v for k, v in raw.items() if k != "shift_c"})
    # calibrate the file's own model, then express the result relative to its base
    _, c = calibrate(model, args.target, args.param)
    doc = model_document(base, float(raw.get("shift_c", 0.0)) + c)
    if args.out:
        _dump(Path(args.out), doc)
    else:
        _emit_json(doc, out)
    return EXIT_OK


def cmd_oracle(args, out) -> int:
    model = _load(args)
    writer = csv.writer(out, lineterminator="\n")
    d = model.d
    if args.method == "enum":
        writer.writerow(["i", "j", "n", "value", "kind"])
        for n in args.gens:
            t = pathfn.enumerate_survival(model, n)
            for i in range(d):
                for j in range(d):
                    writer.writerow([i, j, n, _fmt(t.values[i, j]), t.kind])
    else:
        writer.writerow(["i", "j", "n", "lower", "upper", "kind"])
        for n in args.gens:
            lo, hi = pathfn.dp_survival_bounds(model, n, args.cap)
            for i in range(d):
                for j in range(d):
                    writer.writerow([i, j, n, _fmt(lo.values[i, j]), _fmt(hi.values[i, j]), "dp"])
    return EXIT_OK


def cmd_estimate(args, out) -> int:
    model = _load(args)
    tables = simulate.estimate_survival(
        model, args.gens, args.samples, args.seed, args.estimator,
        lam=args.lam, workers=args.workers, cap=args.cap,
    )
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["i", "j", "n", "mean", "stderr", "estimator", "seed"])
    for n, t in tables.items():
        for i in range(model.d):
            for j in range(model.d):
                writer.writerow(
                    [i, j, n, _fmt(t.values[i, j]), _fmt(t.stderr[i, j]), t.meta["estimator"], args.seed]
                )
    return EXIT_OK


def cmd_verify(args, out) -> int:
    model = _load(args)
    report = spectral.classify(model)
    if args.regime and args.regime != report.regime:
        raise InputError(f"model is {report.regime!r}, not {args.regime!r}")
    plan = asymptotics.PLANS.get(report.regime)
    if plan is None:
        raise InputError(f"no survival theorem applies to regime {report.regime!r}")
    changes = {}
    if args.samples:
        changes["samples"] = args.samples
    if args.gens:
        changes["gens"] = tuple(args.gens)
    if args.threshold is not None:
        changes["threshold"] = changes["residual_threshold"] = args.threshold
    if changes:
        from dataclasses import replace

        plan = replace(plan, **changes)
    result = asymptotics.verify_theorem(model, report, args.seed, plan, workers=args.workers)
    doc = result.to_dict()
    doc["seed"] = args.seed
    _emit_json(doc, out)
    return EXIT_OK if result.passed else EXIT_FAIL


def cmd_fixtures(args, out) -> int:
    shifts = write_fixtures(Path(args.out))
    _emit_json(shifts, out)
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "classify": cmd_classify,
    "kcurve": cmd_kcurve,
    "calibrate": cmd_calibrate,
    "oracle": cmd_oracle,
    "estimate": cmd_estimate,
    "verify": cmd_verify,
    "fixtures": cmd_fixtures,
}


def main(argv: Sequence[str] | None = None, out=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(name)s: %(message)s",
        stream=sys.stderr,
    )
    out = out or sys.stdout
    try:
        return COMMANDS[args.command](args, out)
    except FeasibilityError as exc:
        print(f"bpmre: infeasible: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (BpreError, ValueError, OSError) as exc:
        print(f"bpmre: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
