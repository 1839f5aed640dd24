"""Command-line front end.

Subcommands::

    gmsflow gen-perm KIND --size 100 --contrast 1e4 --seed 0 --out perm.txt
    gmsflow solve --perm perm.txt --coarse 10x10 --basis 2+1 --out run/
    gmsflow simulate --perm bundled --basis 1+0 --mode fine --out run/
    gmsflow enrich-study --perm perm.txt --out study/
    gmsflow report run1/ run2/ --out summary/

``--perm bundled`` uses the built-in test field.  ``--config`` reads an INI
file whose ``[experiment]`` section holds ExperimentConfig keys; flags given
on the command line win over the file.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .driver import ExperimentConfig, Experiment, STUDY_BASES, enrich_study, run_single_phase, run_two_phase
from .errors import ConfigurationError, PermeabilityParseError
from .permeability import FORMATS, KINDS, PermeabilityRaster, bundled_field, gen_perm, load_perm, save_perm

log = logging.getLogger("gmsflow")

RUN_COMMANDS = ("solve", "simulate", "enrich-study")


def _grid_pair(text: str) -> tuple:
    try:
        a, b = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NXxNY, got {text!r}") from None
    return a, b


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmsflow", description="Multiscale pressure and two-phase flow experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-perm", help="write a synthetic permeability raster")
    g.add_argument("kind", choices=KINDS + ("bundled",))
    g.add_argument("--size", type=_grid_pair, default=(100, 100), help="NXxNY (default 100x100)")
    g.add_argument("--contrast", type=float, default=1e4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--format", choices=FORMATS[1:], default="matrix")
    g.add_argument("--log10", action="store_true", help="write log10 values (for plotting only)")
    g.add_argument("--out", required=True, help="output file")

    for name in RUN_COMMANDS:
        r = sub.add_parser(name)
        r.add_argument("--perm", required=True, help="raster file, or 'bundled'")
        r.add_argument("--perm-format", choices=FORMATS, default="auto")
        r.add_argument("--config", help="INI file with an [experiment] section")
        r.add_argument("--coarse", type=_grid_pair, help="coarse grid NXxNY")
        if name != "enrich-study":
            r.add_argument("--basis", help="a+b: offline functions per node + online sweeps")
        else:
            r.add_argument("--bases", default=",".join(STUDY_BASES), help="comma separated a+b list")
        r.add_argument("--mode", choices=("coarse", "fine"))
        r.add_argument("--out", help="output directory")
        r.add_argument("--seed", type=int)
        r.add_argument("--tol", type=float)
        if name == "simulate":
            r.add_argument("--steps", type=int, help="number of time steps")
            r.add_argument("--pressure-every", type=int)

    m = sub.add_parser("report", help="merge run directories into one summary")
    m.add_argument("runs", nargs="+", help="directories holding report.json")
    m.add_argument("--out", help="directory for summary.txt and summary.json")
    return p


def _read_config(path) -> dict:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if not cp.read(path):
        raise ConfigurationError(f"cannot read config file {path}")
    if "experiment" not in cp:
        raise ConfigurationError(f"{path}: missing [experiment] section")
    return dict(cp["experiment"])


def _load_raster(args) -> PermeabilityRaster:
    if args.perm == "bundled":
        return bundled_field()
    return load_perm(args.perm, args.perm_format)


def make_config(args, raster: PermeabilityRaster) -> ExperimentConfig:
    values = _read_config(args.config) if args.config else {}
    cfg = ExperimentConfig.from_mapping(values)
    over = {"nx": raster.width, "ny": raster.height}
    if args.coarse:
        over["Nx"], over["Ny"] = args.coarse
    for key in ("basis", "mode", "out", "seed", "tol"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    if getattr(args, "steps", None) is not None:
        over["n_steps"] = args.steps
        over["snapshot_steps"] = ()
    if getattr(args, "pressure_every", None) is not None:
        over["pressure_every"] = args.pressure_every
    return cfg.with_(**over)


def _prepare_out(cfg: ExperimentConfig, raster: PermeabilityRaster) -> None:
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        save_perm(raster, out / "perm.txt")
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["experiment"] = {k: _ini_value(v) for k, v in cfg.to_dict().items() if v is not None}
        with open(out / "config.ini", "w") as fh:
            cp.write(fh)


def _ini_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def cmd_gen_perm(args) -> int:
    nx, ny = args.size
    if args.kind == "bundled":
        if nx != ny:
            raise ConfigurationError("the bundled field is square")
        raster = bundled_field(nx, args.contrast)
    else:
        raster = gen_perm(args.kind, nx, ny, args.contrast, args.seed)
    save_perm(raster, args.out, args.format, args.log10)
    print(f"wrote {args.out} ({nx}x{ny}, contrast {raster.contrast:.3g}, sha256 {raster.hash()[:12]})")
    return 0


def cmd_solve(args) -> int:
    raster = _load_raster(args)
    cfg = make_config(args, raster)
    _prepare_out(cfg, raster)
    rep = run_single_phase(cfg, raster.cells)
    print(rep.to_text(), end="")
    return 0


def cmd_simulate(args) -> int:
    raster = _load_raster(args)
    cfg = make_config(args, raster)
    _prepare_out(cfg, raster)
    rep, _ = run_two_phase(cfg, raster.cells)
    print(rep.to_text(), end="")
    return 0 if rep.passed else 1


def cmd_enrich_study(args) -> int:
    raster = _load_raster(args)
    cfg = make_config(args, raster)
    _prepare_out(cfg, raster)
    bases = tuple(b.strip() for b in args.bases.split(",") if b.strip())
    exp = Experiment(cfg, raster.cells)
    rep = enrich_study(cfg, raster.cells, bases, exp)
    print(rep.to_text(), end="")
    return 0


def cmd_report(args) -> int:
    runs = []
    for d in args.runs:
        path = Path(d) / "report.json"
        if not path.is_file():
            raise ConfigurationError(f"{path}: no report found")
        runs.append((str(d), json.loads(path.read_text())))
    lines = ["run\tkind\tpassed\tfield_hash\tgrid\tL_z\tmetric\tvalue"]
    for name, r in runs:
        prov = r["provenance"]
        head = [name, r["kind"], str(r["passed"]), prov.get("field_hash", "")[:12], prov.get("grid", ""), prov.get("L_z", "")]
        for k, v in sorted(r["metrics"].items()):
            lines.append("\t".join(head + [k, json.dumps(v)]))
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.txt").write_text(text)
        merged = {name: r for name, r in runs}
        (out / "summary.json").write_text(json.dumps(merged, indent=1, sort_keys=True) + "\n")
    return 0 if all(r["passed"] for _, r in runs) else 1


COMMANDS = {
    "gen-perm": cmd_gen_perm,
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "enrich-study": cmd_enrich_study,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, PermeabilityParseError, OSError) as exc:
        print(f"gmsflow {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # any module failure ends in a one-line diagnostic
        print(f"gmsflow {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
