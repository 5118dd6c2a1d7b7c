"""Command-line interface.

    bnfp fit --input data.csv --outcome binary --n-total 100000 --output fit.json
    bnfp classical --input data.csv
    bnfp simulate compare --config case1.cfg
    bnfp ppc --draws draws.csv --input data.csv --output ppc.csv
    bnfp replay --manifest fit.json.manifest.json

Every file written is accompanied by ``<file>.manifest.json`` recording the
command line, resolved configuration, seed, version, input digests, output
digests and wall time. ``replay`` re-runs the recorded command and checks the
outputs are byte-identical.

Exit codes: 0 success, 1 replay mismatch, 2 invalid input, 3 sampler failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cells import InvalidInputError, build_cell_table, read_records_csv
from .estimators import classical_estimate, posterior_report
from .model import BNFPModel, ModelConfig
from .ppc import posterior_predictive_pvalues
from .sampler import SamplerConfig, SamplerError, run_chains
from .simulation import CASES, coherence_check, comparison_study

log = logging.getLogger("bnfp")

EXIT_OK, EXIT_MISMATCH, EXIT_INVALID, EXIT_SAMPLER = 0, 1, 2, 3
SCALARS = ("beta", "sigma", "tau", "ell", "delta", "theta")


@dataclass
class RunManifest:
    command: list[str]
    config: dict
    seed: int | None
    version: str = __version__
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    wall_time: float = 0.0

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_dump(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, allow_nan=False)
        fh.write("\n")


# ---------------------------------------------------------------------------
# raw draws


class StoredDraws:
    """Draws read back from the columnar CSV; arrays shaped (chains, iter, ...)."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params

    @property
    def outcome_kind(self) -> str:
        return "continuous" if "sigma" in self.params else "binary"

    def flat(self, name: str) -> np.ndarray:
        arr = self.params[name]
        return arr.reshape((-1,) + arr.shape[2:])


def write_draws_csv(draws, path) -> None:
    """Columns draw, chain, parameter, value; floats written with repr (round-trip exact)."""
    C, S = draws.theta.shape
    series = []
    for name in SCALARS:
        arr = draws.theta if name == "theta" else draws.params.get(name)
        if arr is not None:
            series.append((name, arr))
    for name in ("mu", "q"):
        arr = draws.params[name]
        for j in range(arr.shape[2]):
            series.append((f"{name}[{j}]", arr[:, :, j]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["draw", "chain", "parameter", "value"])
        for c in range(C):
            for s in range(S):
                for name, arr in series:
                    writer.writerow([s, c, name, repr(float(arr[c, s]))])


def read_draws_csv(path) -> StoredDraws:
    values: dict[str, dict[tuple[int, int], float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["draw", "chain", "parameter", "value"]:
            raise InvalidInputError(f"{path}:1: expected header 'draw,chain,parameter,value'")
        for row in reader:
            try:
                s, c, name, v = int(row[0]), int(row[1]), row[2], float(row[3])
            except (ValueError, IndexError):
                raise InvalidInputError(f"{path}:{reader.line_num}: malformed row {row!r}") from None
            values.setdefault(name, {})[(c, s)] = v
    if "mu[0]" not in values:
        raise InvalidInputError(f"{path}: no mu draws")
    keys = sorted(values["mu[0]"])
    C = max(k[0] for k in keys) + 1
    S = max(k[1] for k in keys) + 1

    def grid(name):
        d = values[name]
        if len(d) != C * S:
            raise InvalidInputError(f"{path}: parameter {name} has {len(d)} draws, expected {C * S}")
        arr = np.empty((C, S))
        for (c, s), v in d.items():
            arr[c, s] = v
        return arr

    params = {name: grid(name) for name in SCALARS if name in values}
    for name in ("mu", "q"):
        J = sum(1 for k in values if k.startswith(name + "["))
        params[name] = np.stack([grid(f"{name}[{j}]") for j in range(J)], axis=-1)
    return StoredDraws(params)


# ---------------------------------------------------------------------------
# subcommands


def _sampler_config(args, outcome_kind: str) -> SamplerConfig:
    return SamplerConfig(
        chains=args.chains,
        iter=args.iter,
        warmup=args.warmup,
        seed=args.seed,
        max_leapfrog=args.max_leapfrog,
        target_accept=args.target_accept,
        algorithm=args.algorithm,
        threads=args.threads,
    ).resolved(outcome_kind)


def cmd_fit(args) -> tuple[dict, list[Path]]:
    records = read_records_csv(args.input, args.outcome)
    ct = build_cell_table(records, args.outcome, rel_tol=args.rel_tol)
    model = BNFPModel(ct, ModelConfig(n_total=args.n_total, parameterization=args.parameterization))
    cfg = _sampler_config(args, args.outcome)
    log.info("fitting %d cells, %d units, %s parameterization", ct.J, ct.n_total, model.parameterization)
    draws = run_chains(model, cfg, exact_predictive=args.exact_predictive)
    report = posterior_report(draws, ct)
    out = Path(args.output)
    _json_dump(report, out)
    written = [out]
    if args.save_draws:
        write_draws_csv(draws, args.save_draws)
        written.append(Path(args.save_draws))
    config = {k: v for k, v in asdict(cfg).items() if k != "threads"}
    config.update(outcome=args.outcome, n_total=args.n_total, parameterization=model.parameterization,
                  exact_predictive=args.exact_predictive, rel_tol=args.rel_tol)
    return config, written


def cmd_classical(args) -> tuple[dict, list[Path]]:
    s = classical_estimate(read_records_csv(args.input))
    result = {"estimate": s.point, "se": s.sd if np.isfinite(s.sd) else None}
    text = json.dumps(result)
    print(text)
    if args.output:
        Path(args.output).write_text(text + "\n", encoding="utf-8")
        return {}, [Path(args.output)]
    return {}, []


def cmd_ppc(args) -> tuple[dict, list[Path]]:
    draws = read_draws_csv(args.draws)
    kind = draws.outcome_kind
    ct = build_cell_table(read_records_csv(args.input, kind), kind, rel_tol=args.rel_tol)
    report = posterior_predictive_pvalues(draws, ct, np.random.default_rng(args.seed))
    report.write_csv(args.output)
    log.info("minimum p-value %.3f, %d cells below 0.05", report.min_pvalue, report.count_below(0.05))
    return {"outcome": kind, "seed": args.seed}, [Path(args.output)]


SIM_DEFAULTS = {
    "N_total": "100000",
    "replications": "100",
    "outcome_kind": "continuous",
    "seed": "0",
    "J0": "10",
    "chains": "3",
    "max_leapfrog": "1024",
    "target_accept": "0.8",
    "algorithm": "nuts",
    "exact_predictive": "false",
}


def read_sim_config(path) -> dict:
    """Key-value config file (``key = value`` lines, ``#`` comments)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        text = Path(path).read_text(encoding="utf-8")
        parser.read_string("[simulation]\n" + text)
    except configparser.Error as exc:
        raise InvalidInputError(f"{path}: {exc}") from None
    raw = dict(SIM_DEFAULTS)
    raw.update(parser["simulation"])
    known = set(SIM_DEFAULTS) | {"mode", "n", "scenario", "case", "table", "output", "iter", "warmup", "truncate_prior"}
    unknown = set(raw) - known
    if unknown:
        raise InvalidInputError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        cfg = {
            "mode": raw.get("mode"),
            "N_total": int(raw["N_total"]),
            "n": int(raw["n"]) if "n" in raw else None,
            "replications": int(raw["replications"]),
            "outcome_kind": raw["outcome_kind"],
            "seed": int(raw["seed"]),
            "J0": int(raw["J0"]),
            "scenario": raw.get("scenario", raw.get("case")),
            "table": raw.get("table"),
            "output": raw.get("output"),
            "chains": int(raw["chains"]),
            "iter": int(raw["iter"]) if "iter" in raw else None,
            "warmup": int(raw["warmup"]) if "warmup" in raw else None,
            "max_leapfrog": int(raw["max_leapfrog"]),
            "target_accept": float(raw["target_accept"]),
            "algorithm": raw["algorithm"],
            "exact_predictive": parser.BOOLEAN_STATES[raw["exact_predictive"].lower()],
            "truncate_prior": float(raw["truncate_prior"]) if "truncate_prior" in raw else None,
        }
    except (ValueError, KeyError) as exc:
        raise InvalidInputError(f"{path}: bad value ({exc})") from None
    if cfg["outcome_kind"] not in ("continuous", "binary"):
        raise InvalidInputError(f"{path}: outcome_kind must be continuous or binary")
    if cfg["table"] is not None:
        cfg["table"] = str((Path(path).parent / cfg["table"]).resolve())
    if cfg["output"] is not None:
        cfg["output"] = str((Path(path).parent / cfg["output"]).resolve())
    return cfg


def cmd_simulate(args) -> tuple[dict, list[Path]]:
    cfg = read_sim_config(args.config)
    if cfg["mode"] is not None and cfg["mode"] != args.mode:
        raise InvalidInputError(f"{args.config}: mode {cfg['mode']!r} does not match subcommand {args.mode!r}")
    cfg["mode"] = args.mode
    if cfg["replications"] < 1:
        raise InvalidInputError("replications must be >= 1")
    sampler = SamplerConfig(
        chains=cfg["chains"], iter=cfg["iter"], warmup=cfg["warmup"], max_leapfrog=cfg["max_leapfrog"],
        target_accept=cfg["target_accept"], algorithm=cfg["algorithm"], threads=args.threads,
    )
    output = args.output or cfg["output"] or f"{args.mode}.csv"
    if args.mode == "coherence":
        report = coherence_check(
            cfg["replications"], sampler, outcome_kind=cfg["outcome_kind"], J0=cfg["J0"],
            N_total=cfg["N_total"], n=cfg["n"] or 500, seed=cfg["seed"],
            truncate_prior=cfg["truncate_prior"], exact_predictive=cfg["exact_predictive"],
        )
    else:
        if cfg["table"] is None and cfg["scenario"] not in CASES:
            raise InvalidInputError(f"scenario must be one of {sorted(CASES)} or a table path")
        report = comparison_study(
            cfg["replications"], cfg["scenario"], sampler, outcome_kind=cfg["outcome_kind"], n=cfg["n"],
            N_total=cfg["N_total"], seed=cfg["seed"], table=cfg["table"],
            exact_predictive=cfg["exact_predictive"],
        )
    written = report.write(output)
    if report.failures:
        log.warning("%d replication(s) failed and were excluded", len(report.failures))
    for row in report.aggregates:
        log.info("%s", row)
    return cfg, written


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bnfp", description="Bayesian nonparametric weighting for survey means.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_threads(p):
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker processes")

    p = sub.add_parser("fit", help="fit the model and write the estimate JSON")
    p.add_argument("--input", required=True)
    p.add_argument("--outcome", required=True, choices=["continuous", "binary"])
    p.add_argument("--n-total", required=True, type=float, help="population size N")
    p.add_argument("--output", required=True)
    p.add_argument("--chains", type=int, default=3)
    p.add_argument("--iter", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exact-predictive", action="store_true")
    p.add_argument("--save-draws", default=None, metavar="PATH")
    p.add_argument("--max-leapfrog", type=int, default=1024)
    p.add_argument("--target-accept", type=float, default=0.8)
    p.add_argument("--algorithm", choices=["nuts", "hmc"], default="nuts")
    p.add_argument("--parameterization", choices=["auto", "centered", "noncentered"], default="auto")
    p.add_argument("--rel-tol", type=float, default=None, help="group weights within this relative distance")
    add_threads(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("classical", help="weighted ratio estimate and design SE")
    p.add_argument("--input", required=True)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_classical)

    p = sub.add_parser("simulate", help="coherence check or comparison study")
    p.add_argument("mode", choices=["coherence", "compare"])
    p.add_argument("--config", required=True)
    p.add_argument("--output", default=None)
    add_threads(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ppc", help="posterior predictive p-values per cell")
    p.add_argument("--draws", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", default="ppc.csv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rel-tol", type=float, default=None)
    p.set_defaults(func=cmd_ppc)

    p = sub.add_parser("replay", help="re-run a manifest and verify the outputs")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=None)
    return parser


def _input_paths(args) -> list[str]:
    return [getattr(args, k) for k in ("input", "draws", "config") if getattr(args, k, None)]


def replay(manifest_path) -> int:
    m = RunManifest.read(manifest_path)
    expected = dict(m.outputs)
    for path, digest in m.inputs.items():
        if not Path(path).exists() or sha256(path) != digest:
            log.error("input %s changed or missing", path)
            return EXIT_MISMATCH
    code = run(m.command)
    if code != EXIT_OK:
        return code
    bad = [p for p, d in expected.items() if not Path(p).exists() or sha256(p) != d]
    for p in bad:
        log.error("output %s differs from the manifest", p)
    return EXIT_MISMATCH if bad else EXIT_OK


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    if args.command == "replay":
        try:
            return replay(args.manifest)
        except (OSError, ValueError, TypeError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
    start = time.perf_counter()
    try:
        inputs = {str(Path(p).resolve()): sha256(p) for p in _input_paths(args)}
        config, written = args.func(args)
    except SamplerError as exc:
        print(f"sampler failure: {exc}", file=sys.stderr)
        return EXIT_SAMPLER
    except (InvalidInputError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    wall = time.perf_counter() - start
    manifest = RunManifest(
        command=_absolute_command(argv),
        config=config,
        seed=getattr(args, "seed", None),
        inputs=inputs,
        outputs={str(p.resolve()): sha256(p) for p in written},
        wall_time=wall,
    )
    for p in written:
        manifest.write(str(p) + ".manifest.json")
    return EXIT_OK


PATH_FLAGS = ("--input", "--output", "--draws", "--config", "--save-draws")


def _absolute_command(argv: list[str]) -> list[str]:
    """argv with path arguments made absolute so replay works from any directory."""
    out = []
    i = 0
    while i < len(argv):
        a = argv[i]
        if a in PATH_FLAGS and i + 1 < len(argv):
            out += [a, str(Path(argv[i + 1]).resolve())]
            i += 2
            continue
        if "=" in a and a.split("=", 1)[0] in PATH_FLAGS:
            flag, val = a.split("=", 1)
            a = f"{flag}={Path(val).resolve()}"
        out.append(a)
        i += 1
    return out


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
