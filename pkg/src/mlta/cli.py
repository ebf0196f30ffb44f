"""Command-line interface: ``mlta fit | select | report | simulate | rerun``.

Exit codes: 0 success, 1 input error, 2 non-convergence, 3 every grid cell failed.
Each run writes ``manifest.json`` to its output directory; ``mlta rerun
manifest.json`` repeats the run with the identical resolved configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import posthoc
from .data import DataError, IncidenceMatrix, load_network
from .model import ModelSpec, Parameters
from .quadrature import DEFAULT_POINTS, gh_rule
from .selection import SelectionRecord, grid_specs, run_grid
from .simulate import sample_network, write_sample
from .variational import FitConfig, FitResult

log = logging.getLogger("mlta")

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED, EXIT_GRID_FAILED = 0, 1, 2, 3


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    data: str | None = None
    format: str = "auto"
    output_dir: str = "mlta-out"
    groups: list[int] = field(default_factory=lambda: [2])
    dims: list[int] = field(default_factory=lambda: [1])
    common_slope: str = "never"
    starts: int = 10
    seed: int = 1
    tol: float = 1e-6
    max_iter: int = 1000
    gh_points: int = DEFAULT_POINTS
    jackknife: bool = False
    fit: str | None = None
    params: str | None = None
    n_senders: int = 100

    def fit_config(self) -> FitConfig:
        return FitConfig(max_iter=self.max_iter, tol=self.tol, seed=self.seed)


# values that differ from the dataclass defaults for a given command
COMMAND_DEFAULTS = {
    "select": {"groups": [2, 3, 4], "dims": [0, 1, 2, 3], "common_slope": "both"},
}


def parse_range(text) -> list[int]:
    """``"2-4"`` -> [2, 3, 4]; ``"0,2"`` -> [0, 2]; ``"3"`` -> [3]."""
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    out: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return out


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean(obj), fh, indent=1, allow_nan=False)
        fh.write("\n")


def _out(cfg: RunConfig) -> Path:
    path = Path(cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_data(cfg: RunConfig) -> IncidenceMatrix:
    if not cfg.data:
        raise InputError("--data is required")
    try:
        return load_network(cfg.data, cfg.format)
    except (OSError, DataError) as exc:
        raise InputError(str(exc)) from exc


def write_fit_artifacts(
    out: Path, m: IncidenceMatrix, rec: SelectionRecord, data_path: str | None
) -> FitResult:
    result = rec.best_fit
    doc = {
        "data": {
            "path": data_path,
            "sender_labels": list(m.sender_labels),
            "receiver_labels": list(m.receiver_labels),
        },
        "loglik_gh": rec.loglik_gh,
        "k": rec.k,
        "bic": rec.bic,
        "fit": result.to_dict(),
    }
    write_json(doc, out / "fit.json")
    posthoc.write_memberships(result, m.sender_labels, out / "memberships.csv")
    if result.spec.latent_dim:
        posthoc.write_traits(result, m.sender_labels, out / "traits.csv")
    with open(out / "bound_trace.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "bound"])
        for i, v in enumerate(result.bound_trace):
            w.writerow([i, repr(v)])
    return result


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _single_spec(cfg: RunConfig) -> ModelSpec:
    if len(cfg.groups) != 1 or len(cfg.dims) != 1:
        raise InputError("fit needs a single --groups and --dims value")
    g, d = cfg.groups[0], cfg.dims[0]
    if d > 0 and cfg.common_slope == "both":
        raise InputError("fit needs --common-slope only or never")
    return ModelSpec(g, d, cfg.common_slope == "only")


def cmd_fit(cfg: RunConfig, threads: int | None = None) -> int:
    m = _load_data(cfg)
    spec = _single_spec(cfg)
    if m.n_senders < spec.n_groups:
        raise InputError(f"{m.n_senders} senders cannot fill {spec.n_groups} groups")
    out = _out(cfg)
    table = run_grid(m, [spec], cfg.starts, cfg.seed, cfg.fit_config(), cfg.gh_points, threads)
    rec = table.records[0]
    if rec.failed:
        print(f"every start failed for {spec}", file=sys.stderr)
        return EXIT_NONCONVERGED
    result = write_fit_artifacts(out, m, rec, cfg.data)
    print(f"{spec} loglik_gh={rec.loglik_gh:.4f} BIC={rec.bic:.4f} converged={result.converged}")
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


def cmd_select(cfg: RunConfig, threads: int | None = None) -> int:
    m = _load_data(cfg)
    specs = [s for s in grid_specs(cfg.groups, cfg.dims, cfg.common_slope) if s.n_groups <= m.n_senders]
    if not specs:
        raise InputError("no grid cell fits the number of senders")
    out = _out(cfg)
    table = run_grid(m, specs, cfg.starts, cfg.seed, cfg.fit_config(), cfg.gh_points, threads)
    table.write_csv(out / "selection.csv")
    write_json(table.to_dict(), out / "selection.json")
    best = table.best
    if best is None:
        print("every grid cell failed", file=sys.stderr)
        return EXIT_GRID_FAILED
    write_fit_artifacts(out, m, best, cfg.data)
    s = best.spec
    print(f"G={s.n_groups} D={s.latent_dim} variant={s.variant} BIC={best.bic:.4f}")
    return EXIT_OK


def load_fit(path) -> tuple[dict, FitResult]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return doc, FitResult.from_dict(doc["fit"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"cannot read fit artifact {path}: {exc}") from exc


def cmd_report(cfg: RunConfig, threads: int | None = None) -> int:
    fit_path = cfg.fit or str(Path(cfg.output_dir) / "fit.json")
    doc, result = load_fit(fit_path)
    receivers = doc["data"]["receiver_labels"]
    out = _out(cfg)
    spec = result.spec
    rule = gh_rule(cfg.gh_points, spec.latent_dim)
    G = spec.n_groups
    if spec.latent_dim:
        posthoc.write_pairwise(
            [posthoc.dependence_matrix(result, g) for g in range(G)], receivers, out / "dependence.csv"
        )
    posthoc.write_pairwise([posthoc.log_lift_matrix(result, g, rule) for g in range(G)], receivers, out / "loglift.csv")
    posthoc.write_median_prob(result, receivers, out / "median_prob.csv")
    if cfg.jackknife:
        cfg.data = cfg.data or doc["data"].get("path")
        m = _load_data(cfg)
        if m.shape != (result.state.resp.shape[0], len(receivers)):
            raise InputError("data does not match the fit's dimensions")
        ses = posthoc.jackknife_se(m, spec, result, cfg=cfg.fit_config(), threads=threads)
        posthoc.write_se(ses, out / "se.csv")
    probs = posthoc.median_actor_prob(result)
    g, r = np.unravel_index(np.argmax(probs), probs.shape)
    print(f"max median-actor probability {probs[g, r]:.4f} (group {g + 1}, receiver {receivers[r]})")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, threads: int | None = None) -> int:
    if not cfg.params:
        raise InputError("--params is required")
    try:
        doc = json.loads(Path(cfg.params).read_text(encoding="utf-8"))
        params = Parameters.from_dict(doc.get("params", doc))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"invalid parameter file {cfg.params}: {exc}") from exc
    out = _out(cfg)
    sample = sample_network(params, cfg.n_senders, cfg.seed)
    write_sample(sample, out / "matrix.csv", out / "truth.json")
    print(f"wrote {cfg.n_senders}x{params.n_receivers} network to {out / 'matrix.csv'}")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "select": cmd_select, "report": cmd_report, "simulate": cmd_simulate}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON run configuration; flags override its values")
    common.add_argument("--output-dir", dest="output_dir")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="process cap (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    model.add_argument("--data")
    model.add_argument("--format", choices=["auto", "matrix", "edges"])
    model.add_argument("--groups", type=parse_range, help="e.g. 2 or 2-4")
    model.add_argument("--dims", type=parse_range, help="e.g. 1 or 0-3")
    model.add_argument("--common-slope", dest="common_slope", choices=["only", "never", "both"])
    model.add_argument("--starts", type=int)
    model.add_argument("--tol", type=float)
    model.add_argument("--max-iter", dest="max_iter", type=int)
    model.add_argument("--gh-points", dest="gh_points", type=int)

    sub.add_parser("fit", parents=[common, model], help="fit one model with multiple starts")
    sub.add_parser("select", parents=[common, model], help="fit a model grid and rank by BIC")
    rep = sub.add_parser("report", parents=[common], argument_default=argparse.SUPPRESS, help="derived outputs of a fit")
    rep.add_argument("--fit")
    rep.add_argument("--data")
    rep.add_argument("--format", choices=["auto", "matrix", "edges"])
    rep.add_argument("--jackknife", action="store_true")
    rep.add_argument("--gh-points", dest="gh_points", type=int)
    rep.add_argument("--tol", type=float)
    rep.add_argument("--max-iter", dest="max_iter", type=int)
    sim = sub.add_parser("simulate", parents=[common], argument_default=argparse.SUPPRESS, help="sample a network")
    sim.add_argument("--params")
    sim.add_argument("--n-senders", dest="n_senders", type=int)
    rerun = sub.add_parser("rerun", help="repeat a run from its manifest.json")
    rerun.add_argument("manifest")
    rerun.add_argument("--threads", type=int)
    return parser


def resolve_config(command: str, file_values: dict, flag_values: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    values = {"command": command, **COMMAND_DEFAULTS.get(command, {})}
    for source in (file_values, flag_values):
        values.update({k: v for k, v in source.items() if k in known and k != "command"})
    for key in ("groups", "dims"):
        values[key] = parse_range(values[key]) if key in values else values.get(key)
    values = {k: v for k, v in values.items() if v is not None}
    return RunConfig(**values)


def main(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    logging.basicConfig(
        level=logging.INFO if args.pop("verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    command = args.pop("command")
    threads = args.pop("threads", None)
    try:
        if command == "rerun":
            file_values = json.loads(Path(args["manifest"]).read_text(encoding="utf-8"))
            command = file_values["command"]
            cfg = resolve_config(command, file_values, {})
        else:
            config_path = args.pop("config", None)
            file_values = json.loads(Path(config_path).read_text(encoding="utf-8")) if config_path else {}
            cfg = resolve_config(command, file_values, args)
        if command not in COMMANDS:
            raise InputError(f"unknown command {command!r}")
        _out(cfg)
        write_json(asdict(cfg), Path(cfg.output_dir) / "manifest.json")
        return COMMANDS[command](cfg, threads)
    except (InputError, OSError, ValueError) as exc:
        print(f"mlta: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
