"""Command-line entry point: ``adaptrt {select,test,ci,simulate,snr,becheck}``.

Every command reads an optional JSON config, lets flags override it,
validates everything up front (exit 2 on failure), then computes (exit 3 on
failure). Outputs are JSON with sorted keys or CSV, and each one carries
the resolved config so a run can be repeated exactly.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .design import design_from_config
from .infer import Orientation, confidence_set, exact_conditional_rt, run_pipeline, subgroup_rt
from .model import Dataset, SubgroupHypothesis, load_dataset
from .select import config_from_dict, selector_for
from .simulate import BiomarkerLaw, EffectCurve, MethodParams, PopulationConfig, default_cells, power_study
from .stats import statistic_from_config
from .theory import MAX_ENUMERATION, be_enumeration_check, density_from_config, snr_curve

log = logging.getLogger("adaptrt")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3

TOP_LEVEL_KEYS = {
    "dataset", "design", "selection", "statistic", "M", "alpha", "seed",
    "orientation", "ci", "study", "snr", "becheck",
}  # fmt: skip


class ConfigError(ValueError):
    """Invalid configuration or input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _grid(spec, name: str) -> list[float]:
    if isinstance(spec, list):
        return [float(v) for v in spec]
    if not isinstance(spec, dict) or set(spec) - {"start", "stop", "step"} or len(spec) != 3:
        raise ConfigError(f"{name} grid must be a list or {{start, stop, step}}")
    start, stop, step = (float(spec[k]) for k in ("start", "stop", "step"))
    if step <= 0 or stop < start:
        raise ConfigError(f"{name} grid needs step > 0 and stop >= start")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 12) for i in range(count)]


def _check_keys(spec: dict, allowed: set[str], where: str) -> None:
    if not isinstance(spec, dict):
        raise ConfigError(f"{where} must be an object")
    extra = set(spec) - allowed
    if extra:
        raise ConfigError(f"unknown {where} key(s): {sorted(extra)}")


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    _check_keys(cfg, TOP_LEVEL_KEYS, "config")
    return cfg


@dataclass
class Resolved:
    """Validated inputs plus the effective config that produced them."""

    effective: dict
    dataset: Dataset | None = None
    extras: dict = field(default_factory=dict)


def _resolve_common(cfg: dict, args) -> dict:
    eff = {
        "M": int(cfg.get("M", 200)),
        "alpha": float(cfg.get("alpha", 0.05)),
        "seed": int(args.seed if args.seed is not None else cfg.get("seed", 0)),
        "orientation": str(cfg.get("orientation", "greater")),
    }
    if eff["M"] < 1:
        raise ConfigError("M must be positive")
    if not 0 < eff["alpha"] < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    try:
        Orientation(eff["orientation"])
    except ValueError as exc:
        raise ConfigError(f"orientation must be 'greater' or 'less', got {eff['orientation']!r}") from exc
    return eff


def _resolve_data(cfg: dict, args, eff: dict) -> Resolved:
    path = cfg.get("dataset")
    if path is None:
        raise ConfigError("config needs a 'dataset' path")
    try:
        ds = load_dataset(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset file not found: {path}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    design_spec = cfg.get("design", {"kind": "bernoulli"})
    selection_spec = cfg.get("selection", {"batch_size": 20})
    stat_spec = cfg.get("statistic", {"statistic": "hajek"})
    try:
        design = design_from_config(design_spec, ds)
        selection = config_from_dict(selection_spec)
        stat = statistic_from_config(stat_spec)
        if selection.direction != "multi":
            selection.boundaries(len(ds))
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    eff.update(dataset=str(path), design=design_spec, selection=selection_spec, statistic=stat_spec)
    return Resolved(eff, ds, {"design": design, "selection": selection, "stat": stat})


def _read_subgroup_ids(path: str, ds: Dataset) -> np.ndarray:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read subgroup file {path}") from exc
    rows = [r for r in csv.reader(io.StringIO(text)) if r and r[0].strip()]
    if rows and rows[0][0].strip() == "id":
        rows = rows[1:]
    try:
        ids = [int(r[0]) for r in rows]
    except ValueError as exc:
        raise ConfigError(f"subgroup file {path} must list integer ids") from exc
    pos = {int(v): i for i, v in enumerate(ds.ids)}
    missing = [i for i in ids if i not in pos]
    if missing:
        raise ConfigError(f"subgroup ids not in dataset: {missing[:5]}")
    return np.unique([pos[i] for i in ids])


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _clean(obj: Any) -> Any:
    """Make ``obj`` JSON-safe: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")


def _sibling(out: str | None, suffix: str) -> str | None:
    if out is None:
        return None
    p = Path(out)
    return str(p.with_name(p.stem + suffix))


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _trail_rows(selection) -> list[list]:
    return [[t.batch, t.max_biomarker, t.estimate, int(t.stop), t.note] for t in selection.trail]


TRAIL_HEADER = ["batch", "max_biomarker", "estimate", "stop", "note"]


def _selection_doc(selection, ds: Dataset) -> dict:
    return {
        "cutoff": selection.cutoff,
        "cutoffs": list(selection.cutoffs),
        "subgroup_ids": ds.ids[selection.subgroup].tolist(),
        "subgroup_size": int(selection.subgroup.size),
        "selection_rate": selection.selection_rate(len(ds)),
        "stopped": selection.stopped,
        "flags": list(selection.flags),
        "trail": [asdict(t) for t in selection.trail],
    }


# ---------------------------------------------------------------------------
# Commands. Each returns a thunk so validation finishes before any work.
# ---------------------------------------------------------------------------


def cmd_select(cfg: dict, args) -> Callable[[], None]:
    eff = _resolve_common(cfg, args)
    r = _resolve_data(cfg, args, eff)

    def run() -> None:
        sel = selector_for(r.extras["selection"])(r.dataset)
        if args.emit_trail == "csv":
            text = _csv_text(TRAIL_HEADER, _trail_rows(sel))
            if args.out is None:
                _emit(text, None)
                return
            _emit(text, _sibling(args.out, "_trail.csv"))
        _emit(dumps({**_selection_doc(sel, r.dataset), "config": r.effective}), args.out)

    return run


def cmd_test(cfg: dict, args) -> Callable[[], None]:
    eff = _resolve_common(cfg, args)
    r = _resolve_data(cfg, args, eff)
    ds, design, stat = r.dataset, r.extras["design"], r.extras["stat"]
    fixed_subgroup = _read_subgroup_ids(args.subgroup_file, ds) if args.subgroup_file else None
    eff["exact"] = bool(args.exact)
    if fixed_subgroup is not None:
        eff["subgroup_file"] = args.subgroup_file

    def run() -> None:
        orientation = eff["orientation"]
        doc: dict[str, Any] = {}
        if fixed_subgroup is not None:
            subgroup, cutoff = fixed_subgroup, None
            selection_doc = None
        else:
            sel = selector_for(r.extras["selection"])(ds)
            subgroup, cutoff = sel.subgroup, sel.cutoff
            selection_doc = _selection_doc(sel, ds)
        if args.exact:
            res = exact_conditional_rt(ds, design, SubgroupHypothesis(subgroup), stat, orientation)
        elif fixed_subgroup is not None:
            res = subgroup_rt(ds, design, subgroup, stat, eff["M"], eff["seed"], orientation)
        else:
            res = run_pipeline(
                ds, design, r.extras["selection"], stat, eff["M"], eff["seed"], orientation,
                selector=lambda _d: sel,
            ).test  # fmt: skip
        doc.update(
            p_value=res.p_value,
            observed_stat=res.observed_stat,
            seed=eff["seed"],
            orientation=res.orientation.value,
            conditioning=res.conditioning,
            cutoff=cutoff,
            subgroup_size=int(subgroup.size),
            selection_rate=subgroup.size / len(ds),
            reject=bool(res.p_value <= eff["alpha"]),
            flags=list(res.flags),
            statistic=stat.name,
            exact=res.exact,
            config=r.effective,
        )
        if not args.exact:
            doc["M"] = res.M
        if selection_doc is not None:
            doc["selection"] = selection_doc
        _emit(dumps(doc), args.out)

    return run


def cmd_ci(cfg: dict, args) -> Callable[[], None]:
    eff = _resolve_common(cfg, args)
    r = _resolve_data(cfg, args, eff)
    ci_spec = dict(cfg.get("ci", {}))
    _check_keys(ci_spec, {"grid", "alpha"}, "ci")
    grid = _grid(ci_spec.get("grid", {"start": -3.0, "stop": 3.0, "step": 0.05}), "ci")
    alpha = float(ci_spec.get("alpha", eff["alpha"]))
    eff["ci"] = {"grid": ci_spec.get("grid", {"start": -3.0, "stop": 3.0, "step": 0.05}), "alpha": alpha}
    ds = r.dataset
    fixed_subgroup = _read_subgroup_ids(args.subgroup_file, ds) if args.subgroup_file else None

    def run() -> None:
        if fixed_subgroup is None:
            sel = selector_for(r.extras["selection"])(ds)
            subgroup, cutoff = sel.subgroup, sel.cutoff
        else:
            subgroup, cutoff = fixed_subgroup, None
        cs = confidence_set(
            ds, r.extras["design"], subgroup, r.extras["stat"], grid, alpha, eff["M"], eff["seed"], eff["orientation"]
        )
        rows = [[float(c), float(p), int(p >= alpha)] for c, p in zip(cs.grid, cs.p_curve)]
        curve = _csv_text(["effect", "p_value", "in_set"], rows)
        if args.out is not None:
            _emit(curve, _sibling(args.out, "_pcurve.csv"))
        doc = {
            "intervals": [list(iv) for iv in cs.intervals],
            "alpha": alpha,
            "cutoff": cutoff,
            "subgroup_size": int(subgroup.size),
            "selection_rate": subgroup.size / len(ds),
            "M": eff["M"],
            "seed": eff["seed"],
            "config": r.effective,
        }
        if args.out is None:
            doc["p_curve"] = [{"effect": c, "p_value": p} for c, p, _ in rows]
        _emit(dumps(doc), args.out)

    return run


STUDY_KEYS = {"taus", "ns", "deltas", "reps", "methods", "population", "params"}
POPULATION_KEYS = {"biomarker", "propensity", "mu0", "noise_sd", "shared_noise"}


def cmd_simulate(cfg: dict, args) -> Callable[[], None]:
    eff = _resolve_common(cfg, args)
    spec = dict(cfg.get("study", {}))
    _check_keys(spec, STUDY_KEYS, "study")
    pop = dict(spec.get("population", {}))
    _check_keys(pop, POPULATION_KEYS, "study.population")
    params_spec = dict(spec.get("params", {}))
    _check_keys(params_spec, set(MethodParams.__dataclass_fields__) - {"alpha", "M"}, "study.params")
    try:
        bio = pop.get("biomarker", {"kind": "normal", "params": [0.0, 2.0]})
        _check_keys(bio, {"kind", "params"}, "study.population.biomarker")
        base = PopulationConfig(
            biomarker=BiomarkerLaw(bio.get("kind", "normal"), *map(float, bio.get("params", [0.0, 2.0]))),
            propensity=float(pop.get("propensity", 0.2)),
            mu0=str(pop.get("mu0", "quadratic")),
            noise_sd=float(pop.get("noise_sd", 4.0)),
            shared_noise=bool(pop.get("shared_noise", True)),
            tau=EffectCurve("linear", 6.0),
        )
        taus = [str(t) for t in spec.get("taus", ["linear", "sigmoid"])]
        for t in taus:
            EffectCurve(t, 1.0)
        ns = [int(v) for v in spec.get("ns", [200, 300, 400, 500, 600])]
        deltas = [float(v) for v in spec.get("deltas", [2, 4, 6, 8, 10, 12])]
        reps = int(spec.get("reps", 200))
        methods = [str(m) for m in spec.get("methods", ["oracle", "art", "split", "bonferroni"])]
        params = MethodParams(alpha=eff["alpha"], M=eff["M"], **params_spec)
        cells = default_cells(taus, ns, deltas, base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if reps < 1:
        raise ConfigError("reps must be at least 1")
    if args.out is None:
        raise ConfigError("simulate needs --out <directory>")
    eff["study"] = {
        "taus": taus, "ns": ns, "deltas": deltas, "reps": reps, "methods": methods,
        "population": {"biomarker": bio, "propensity": base.propensity, "mu0": base.mu0,
                       "noise_sd": base.noise_sd, "shared_noise": base.shared_noise},
        "params": asdict(params),
    }  # fmt: skip
    threads = max(1, int(args.threads or 1))

    def run() -> None:
        table = power_study(cells, methods, reps, eff["seed"], params, threads)
        table.settings = eff
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for t in taus:
            table.to_csv(out / f"power_{t}.csv", tau=t)
        table.to_json(out / "power.json")

    return run


def cmd_snr(cfg: dict, args) -> Callable[[], None]:
    eff = _resolve_common(cfg, args)
    spec = dict(cfg.get("snr", {}))
    _check_keys(spec, {"density", "n", "sigma", "theta", "grid"}, "snr")
    try:
        density_spec = spec.get("density", {"kind": "normal", "params": [0.0, 1.0]})
        density = density_from_config(density_spec)
        n, sigma, theta = int(spec.get("n", 100)), float(spec.get("sigma", 0.0)), float(spec.get("theta", 0.5))
        if n < 1 or sigma < 0 or not 0 < theta < 1:
            raise ValueError("snr needs n >= 1, sigma >= 0, theta in (0, 1)")
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    grid_spec = spec.get("grid", {"start": -2.0, "stop": 2.0, "step": 0.01})
    grid = _grid(grid_spec, "snr")
    eff["snr"] = {"density": density_spec, "n": n, "sigma": sigma, "theta": theta, "grid": grid_spec}

    def run() -> None:
        curve = snr_curve(grid, density, n, sigma, theta)
        rows = [[t, v] for t, v in zip(curve.grid.tolist(), curve.snr.tolist())]
        text = _csv_text(["t", "snr"], rows)
        _emit(text, args.out)
        if args.out is not None:
            try:
                best = curve.argmax
            except ValueError:
                best = None
            _emit(dumps({"argmax": best, "config": eff}), _sibling(args.out, ".json"))

    return run


def cmd_becheck(cfg: dict, args) -> Callable[[], None]:
    eff = _resolve_common(cfg, args)
    spec = dict(cfg.get("becheck", {}))
    _check_keys(spec, {"residuals", "n", "theta"}, "becheck")
    theta = float(spec.get("theta", 0.5))
    if not 0 < theta < 1:
        raise ConfigError("theta must lie in (0, 1)")
    if "residuals" in spec:
        residuals = [float(v) for v in spec["residuals"]]
    else:
        n = int(spec.get("n", 12))
        if n < 1:
            raise ConfigError("n must be positive")
        rng = np.random.default_rng(np.random.SeedSequence([eff["seed"]]))
        residuals = rng.standard_normal(n).tolist()
    if len(residuals) > MAX_ENUMERATION:
        raise ConfigError(f"becheck enumerates 2^n assignments; n must be at most {MAX_ENUMERATION}, got {len(residuals)}")
    if not residuals or not any(residuals):
        raise ConfigError("becheck needs at least one nonzero residual")
    eff["becheck"] = {"residuals": residuals, "theta": theta}

    def run() -> None:
        res = be_enumeration_check(residuals, theta)
        _emit(dumps({**res.to_dict(), "n": len(residuals), "config": eff}), args.out)

    return run


COMMANDS = {
    "select": cmd_select,
    "test": cmd_test,
    "ci": cmd_ci,
    "simulate": cmd_simulate,
    "snr": cmd_snr,
    "becheck": cmd_becheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptrt", description="Biomarker cutoff selection with conditional randomization tests.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--out", help="output file (directory for simulate)")
        if name == "select":
            p.add_argument("--emit-trail", choices=["csv"], help="also write the per-batch trail as CSV")
        if name == "test":
            p.add_argument("--exact", action="store_true", help="enumerate the conditional law instead of sampling")
        if name in ("test", "ci"):
            p.add_argument("--subgroup-file", help="ids of a pre-specified subgroup; skips selection")
        if name == "simulate":
            p.add_argument("--threads", type=int, default=1, help="worker processes")
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("ADAPTRT_LOG", "WARNING").upper()
    logging.basicConfig(
        level=level if isinstance(logging.getLevelName(level), int) else "WARNING",
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    for flag in ("emit_trail", "exact", "subgroup_file", "threads"):
        if not hasattr(args, flag):
            setattr(args, flag, None)
    try:
        cfg = load_config(args.config)
        run = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"adaptrt: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        run()
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to one exit code
        log.debug("runtime failure", exc_info=True)
        print(f"adaptrt: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
