"""Command-line front end.

Exit codes: 0 when the computation passes its check, 2 when it was computed
but failed (defect >= epsilon, structural failure, unplaced eigenvalue), 1
when it could not be computed (bad usage or input, a size guard, no feasible
level).
"""

from __future__ import annotations

import argparse
import ast
import csv
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import InputError, SpectraMatchError
from .model import FORMAT_VERSION, Partition, SequenceSpec, dumps, load_json

EXIT_OK, EXIT_ERROR, EXIT_FAILED = 0, 1, 2


@dataclass
class RunConfig:
    command: str
    flags: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)
        fh.write("\n")


def _echo(obj):
    print(dumps(obj))


def parse_targets(text) -> list[float]:
    """Inline '(a,b,...)' / '[a,b]' or a JSON file (list, {"mu": [...]} or {"targets": [...]})."""
    s = str(text).strip()
    if s[:1] in "([":
        try:
            vals = ast.literal_eval(s)
        except (ValueError, SyntaxError) as exc:
            raise InputError(f"cannot parse targets {s!r}: {exc}") from exc
        return [float(v) for v in vals]
    data = load_json(s)
    if isinstance(data, dict):
        data = data.get("mu", data.get("targets"))
    if not isinstance(data, list):
        raise InputError(f"{s}: expected a list of target values or an object with 'mu'")
    return [float(v) for v in data]


def _load_unitary(spec, dim):
    from .flows import corner_unitary, swap_unitary

    if spec == "swap":
        return swap_unitary(dim)
    if spec == "corner":
        return corner_unitary()
    data = load_json(spec)
    try:
        d = int(data["dim"])
        real = np.asarray(data["real"], float)
        imag = np.asarray(data.get("imag", [0.0] * real.size), float)
        return (real + 1j * imag).reshape(d, d)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{spec}: malformed unitary: {exc}") from exc


# ---------------------------------------------------------------------------
# commands

def _cmd_match(f, artifacts):
    from .matcher import build_partition, write_report_csv

    part, rep = build_partition(parse_targets(f["targets"]), f["epsilon"], f["max_n"], f["strategy"])
    _write(f["out"], dumps(part.to_json()))
    artifacts.append(f["out"])
    if f.get("report"):
        write_report_csv(part, rep, f["report"])
        artifacts.append(f["report"])
    _echo({"n": part.n, "blocks": part.num_blocks, "good_count": part.good_count,
           "delta": part.target.delta, "K": part.target.bigK, **rep.to_json()})
    return EXIT_OK if rep.passed else EXIT_FAILED


def _cmd_verify(f, artifacts):
    from .matcher import verify_partition, write_report_csv

    part = Partition.from_json(load_json(f["partition"]))
    rep = verify_partition(part, f["epsilon"])
    if f.get("report"):
        write_report_csv(part, rep, f["report"])
        artifacts.append(f["report"])
    _echo(rep.to_json())
    return EXIT_OK if rep.passed else EXIT_FAILED


def _cmd_oracle(f, artifacts):
    from .matcher import normalize_targets
    from .oracle import brute_force_min_defect

    target = normalize_targets(parse_targets(f["targets"]), f["epsilon"])
    best, witness = brute_force_min_defect(f["n"], target)
    if f.get("out"):
        _write(f["out"], dumps(witness.to_json()))
        artifacts.append(f["out"])
    _echo({"n": f["n"], "delta": target.delta, "units": list(target.units), "best": best})
    return EXIT_OK


def _cmd_simulate(f, artifacts):
    from . import flows

    mode = f["mode"]
    flow = flows.FlowSpec.from_json(load_json(f["flow"]))
    if mode == "spectrum":
        e = flow.energies()
        out = f.get("out")
        if out:
            with open(out, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["subset", "energy"])
                for x, v in enumerate(e):
                    w.writerow([x, repr(float(v))])
            artifacts.append(out)
        _echo({"n": flow.n, "count": int(e.size), "min": float(e.min()), "max": float(e.max())})
        return EXIT_OK
    if mode == "absorb":
        part = Partition.from_json(load_json(f["partition"]))
        d = flows.absorption_defect(flow, part)
        _echo({"absorption_defect": d})
        return EXIT_OK
    if mode == "metric":
        other = flows.FlowSpec.from_json(load_json(f["flow_b"]))
        _echo({"metric": flows.flow_metric(flow, other)})
        return EXIT_OK
    if mode == "decompose":
        dims = flows.spectral_decompose(flow)
        out = f.get("out")
        if out:
            with open(out, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["p", "dim"])
                for p, d in dims.items():
                    w.writerow([repr(p), d])
            artifacts.append(out)
        _echo({"total": sum(dims.values()), "dim_A0": dims.get(0.0, 0), "values": len(dims)})
        return EXIT_OK
    u = _load_unitary(f["unitary"], flow.dim)
    sup, gen = flows.flip_defect(flow, u)
    _echo({"sup_defect": sup, "generator_defect": gen})
    return EXIT_OK


def _cmd_criterion(f, artifacts):
    from .flows import criterion_check

    seq = SequenceSpec.from_json(load_json(f["sequence"]))
    verdict = criterion_check(seq)
    if f.get("out"):
        _write(f["out"], dumps(verdict.to_json()))
        artifacts.append(f["out"])
    if f.get("csv"):
        with open(f["csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epsilon", "prefix", "mass"])
            for e, n, v in verdict.tail_mass:
                w.writerow([repr(e), n, repr(v)])
        artifacts.append(f["csv"])
    _echo({"verdict": verdict.verdict, "witness": verdict.witness, "reason": verdict.reason})
    return EXIT_OK


def _cmd_generator(f, artifacts):
    from .flows import universal_generator

    seq = universal_generator(f["count"], f["bound"])
    _write(f["out"], dumps(seq.to_json()))
    artifacts.append(f["out"])
    _echo({"count": f["count"], "bound": f["bound"], "first": list(seq.values[:8])})
    return EXIT_OK


def _cmd_sculpt(f, artifacts):
    from .sculptor import SpectralSets, sculpt, verify_sculpt

    try:
        dims = [int(v) for v in str(f["dims"]).split(",") if v.strip()]
    except ValueError as exc:
        raise InputError(f"--dims must be comma-separated integers: {exc}") from exc
    sets = SpectralSets.from_json(load_json(f["grids"]))
    h = sculpt(dims, sets, f["depth"], seed=f.get("seed"))
    rep = verify_sculpt(h, sets, f["tol"])
    if f.get("out"):
        _write(f["out"], dumps(h.to_json()))
        artifacts.append(f["out"])
    _echo({"passed": rep.passed, "steps": len(h.history), "max_grid_distance": rep.max_grid_distance,
           "min_global_gap": rep.min_global_gap, "max_drift": rep.max_drift, "errors": rep.errors})
    return EXIT_OK if rep.passed and h.complete else EXIT_FAILED


def _cmd_demo(f, artifacts):
    from .flows import FlowSpec, absorption_defect
    from .matcher import build_partition, write_report_csv

    out_dir = f["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    part, rep = build_partition(parse_targets(f["targets"]), f["epsilon"], f["max_n"], f["strategy"])
    ppath = os.path.join(out_dir, "partition.json")
    rpath = os.path.join(out_dir, "report.csv")
    _write(ppath, dumps(part.to_json()))
    write_report_csv(part, rep, rpath)
    absorb = absorption_defect(FlowSpec.uniform(part.n, part.target.delta), part)
    summary = {"n": part.n, "delta": part.target.delta, "K": part.target.bigK, "blocks": part.num_blocks,
               "good_count": part.good_count, "absorption_defect": absorb, **rep.to_json()}
    spath = os.path.join(out_dir, "summary.json")
    _write(spath, dumps(summary))
    artifacts += [ppath, rpath, spath]
    _echo(summary)
    return EXIT_OK if rep.passed else EXIT_FAILED


COMMANDS = {"match": _cmd_match, "verify": _cmd_verify, "oracle": _cmd_oracle, "simulate": _cmd_simulate,
            "criterion": _cmd_criterion, "generator": _cmd_generator, "sculpt": _cmd_sculpt, "demo": _cmd_demo}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spectramatch", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--manifest", default="manifest.json", help="where to write the run manifest")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("match", help="build a block partition for a target spectrum")
    s.add_argument("--targets", required=True, help="JSON file or inline '(a,b,...)'")
    s.add_argument("--epsilon", type=float, required=True)
    s.add_argument("--max-n", type=int, default=20)
    s.add_argument("--strategy", choices=("transport", "reserve"), default="transport")
    s.add_argument("--out", default="partition.json")
    s.add_argument("--report", help="per-block CSV report")

    s = sub.add_parser("verify", help="check a partition file")
    s.add_argument("--partition", required=True)
    s.add_argument("--epsilon", type=float, required=True)
    s.add_argument("--report")

    s = sub.add_parser("oracle", help="exact minimum defect for a small instance")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--targets", required=True)
    s.add_argument("--epsilon", type=float, default=3.0, help="sets the grid step epsilon/3")
    s.add_argument("--out")

    s = sub.add_parser("simulate", help="finite-level flow computations")
    s.add_argument("mode", choices=("spectrum", "absorb", "metric", "decompose", "flip"))
    s.add_argument("--flow", required=True, help='flow JSON {"n":..., "lambdas":[...]}')
    s.add_argument("--flow-b", help="second flow for metric")
    s.add_argument("--partition", help="partition for absorb")
    s.add_argument("--unitary", default="swap", help="'swap', 'corner' or a JSON file")
    s.add_argument("--out", help="CSV output for spectrum/decompose")

    s = sub.add_parser("criterion", help="classify a coefficient sequence")
    s.add_argument("--sequence", required=True)
    s.add_argument("--out", help="verdict JSON")
    s.add_argument("--csv", help="tail-mass CSV")

    s = sub.add_parser("generator", help="emit the dense recurrent sequence")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--bound", type=float, default=1.0)
    s.add_argument("--out", default="sequence.json")

    s = sub.add_parser("sculpt", help="place eigenvalues of Hermitian blocks on grids")
    s.add_argument("--dims", required=True, help="comma-separated block dimensions")
    s.add_argument("--grids", required=True)
    s.add_argument("--depth", type=int, default=20)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")

    s = sub.add_parser("demo", help="normalize, build, verify and absorb in one go")
    s.add_argument("--targets", required=True)
    s.add_argument("--epsilon", type=float, required=True)
    s.add_argument("--max-n", type=int, default=20)
    s.add_argument("--strategy", choices=("transport", "reserve"), default="transport")
    s.add_argument("--out-dir", default=".")
    return p


def run(config: RunConfig) -> int:
    flags = dict(config.flags)
    manifest_path = flags.pop("manifest", "manifest.json")
    artifacts = []
    error = None
    try:
        if config.format_version != FORMAT_VERSION:
            raise InputError(f"unsupported format version {config.format_version}")
        code = COMMANDS[config.command](flags, artifacts)
    except SpectraMatchError as exc:
        guard = getattr(exc, "guard", None)
        error = {"type": type(exc).__name__, "message": str(exc)}
        if guard:
            error["guard"] = guard
        diag = getattr(exc, "diagnostics", None)
        if diag:
            error["diagnostics"] = diag
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_ERROR
    manifest = {"format_version": config.format_version, "library_version": __version__,
                "command": config.command, "flags": flags, "exit_code": code, "artifacts": artifacts}
    if error:
        manifest["error"] = error
    try:
        _write(manifest_path, json.dumps(manifest, indent=2, sort_keys=True, default=str))
    except OSError as exc:
        print(f"error: cannot write manifest {manifest_path}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return code


def main(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    return run(RunConfig(command, args))


if __name__ == "__main__":
    sys.exit(main())
