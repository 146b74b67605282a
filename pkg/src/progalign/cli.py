"""Command-line front end: simulate, fit, predict, compare, diagnose.

Exit codes: 0 success, 1 diagnostics gate failure (fit completed, outputs
written), 2 usage or I/O error. All commands are deterministic given the
configuration and seed; outputs carry the resolved configuration and its
hash.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import data as data_mod
from . import diagnostics as diag_mod
from . import prediction as pred_mod
from . import simulate as sim_mod
from .config import ConfigError, RunConfig, load_config
from .data import CohortError, load_cohort, dataset_sha256, ColumnSchema
from .model import build_model, gradient_check, make_model_spec
from .sampler import (
    PosteriorDraws,
    SamplerConfig,
    SamplingError,
    initialize_chains,
    run_nuts,
)
from .transform import assume_normalized, fit_transform, normalize_cohort, save_ecdf

logger = logging.getLogger(__name__)


class CommandError(RuntimeError):
    """Mechanical failure; maps to exit code 2."""


# ---------------------------------------------------------------------------
# configuration plumbing


def _schema_from_config(cfg: RunConfig) -> ColumnSchema:
    s = cfg.data["schema"]
    return ColumnSchema(
        subject_id=s["subject_id"],
        marker_id=s["marker_id"],
        t=s["t"],
        value=s["value"],
        is_first_visit=s["is_first_visit"],
        diagnosis_status=s["diagnosis_status"],
        t_event=s["t_event"],
        weight=s["weight"],
        covariates=tuple(s["covariates"]) if s["covariates"] else None,
        center=tuple((k, float(v)) for k, v in sorted(s["center"].items())),
    )


def _load_data(cfg: RunConfig):
    d = cfg.data
    if not d["observations"] or not d["subjects"]:
        raise CommandError("config must set data.observations and data.subjects")
    for p in (d["observations"], d["subjects"]):
        if not os.path.exists(p):
            raise CommandError(f"input file not found: {p}")
    return load_cohort(
        d["observations"],
        d["subjects"],
        schema=_schema_from_config(cfg),
        marker_names=d["markers"],
        marker_flip=d["flip"],
    )


def _model_spec(cfg: RunConfig, data):
    m = cfg.model
    names = data.marker_names
    unknown = (set(m["random_slope"]) | set(m["first_visit_effect"])) - set(names)
    if unknown:
        raise CommandError(f"model config references unknown markers: {sorted(unknown)}")
    return make_model_spec(
        data,
        random_slope=[n in m["random_slope"] for n in names],
        first_visit_effect=[n in m["first_visit_effect"] for n in names],
        eps_lower=float(m["eps_lower"]),
        eps_upper=float(m["eps_upper"]),
        anchored=m["mode"] == "anchored",
        fixed_effect_sd=float(m["fixed_effect_sd"]),
        scale_prior_scale=float(m["scale_prior_scale"]),
        onset_mean_prior_mean=float(m["onset_mean_prior_mean"]),
        onset_mean_prior_sd=float(m["onset_mean_prior_sd"]),
    )


def _sampler_config(cfg: RunConfig) -> SamplerConfig:
    s = cfg.sampler
    return SamplerConfig(
        chains=int(s["chains"]),
        warmup_iters=int(s["warmup"]),
        sampling_iters=int(s["sampling"]),
        thin=int(s["thin"]),
        seed=int(s["seed"]),
        target_acceptance=float(s["target_acceptance"]),
        max_tree_depth=int(s["max_tree_depth"]),
        jobs=int(s["jobs"]) if s["jobs"] is not None else None,
    )


def _sim_config(cfg: RunConfig) -> sim_mod.SimConfig:
    s = cfg.simulate
    if s["scenario"] == "ordering":
        base = sim_mod.ordering_scenario(seed=int(s["seed"]))
    else:
        base = sim_mod.default_scenario(seed=int(s["seed"]))
    overrides = {}
    if s["n_subjects"] is not None:
        overrides["n_subjects"] = int(s["n_subjects"])
    if s["diag_noise"] is not None:
        overrides["diag_noise"] = (float(s["diag_noise"][0]), float(s["diag_noise"][1]))
    if s["eps_lower"] is not None:
        overrides["eps_lower"] = float(s["eps_lower"])
    if s["eps_upper"] is not None:
        overrides["eps_upper"] = float(s["eps_upper"])
    return sim_mod.with_overrides(base, **overrides) if overrides else base


def _outdir(cfg: RunConfig) -> str:
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# draws persistence


def write_draws(draws: PosteriorDraws, outdir: str, thin: int) -> None:
    quoted = ",".join(['"chain"', '"iter"'] + [f'"{n}"' for n in draws.names])
    matrix = np.column_stack(
        [draws.chain_id.astype(float), draws.iteration.astype(float), draws.draws]
    )
    with open(os.path.join(outdir, "draws.csv"), "w", encoding="utf-8") as fh:
        fh.write(quoted + "\n")
        np.savetxt(fh, matrix, fmt="%.17g", delimiter=",")
    np.save(os.path.join(outdir, "draws.npy"), draws.draws)
    meta = {
        "names": draws.names,
        "chains": draws.n_chains,
        "thin": thin,
        "retained_per_chain": draws.n_draws // draws.n_chains,
        "divergences": draws.divergences,
        "warmup_divergences": draws.warmup_divergences,
        "step_sizes": draws.step_sizes,
        "accept_stats": draws.accept_stats,
        "warnings": draws.warnings,
    }
    with open(os.path.join(outdir, "draws_meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_draws(outdir: str) -> PosteriorDraws:
    npy = os.path.join(outdir, "draws.npy")
    meta_path = os.path.join(outdir, "draws_meta.json")
    if not (os.path.exists(npy) and os.path.exists(meta_path)):
        raise CommandError(f"no draws found in {outdir} (run `fit` first)")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    draws = np.load(npy)
    chains = int(meta["chains"])
    per = int(meta["retained_per_chain"])
    thin = int(meta["thin"])
    return PosteriorDraws(
        draws=draws,
        chain_id=np.repeat(np.arange(chains), per),
        iteration=np.tile(thin * (1 + np.arange(per)), chains),
        names=list(meta["names"]),
        divergences=list(meta["divergences"]),
        warmup_divergences=list(meta["warmup_divergences"]),
        step_sizes=list(meta["step_sizes"]),
        accept_stats=list(meta["accept_stats"]),
        warnings=list(meta["warnings"]),
    )


def _write_report(outdir: str, report: dict) -> None:
    with open(os.path.join(outdir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    result = sim_mod.simulate(_sim_config(cfg))
    data_mod.write_cohort(
        result.data,
        os.path.join(out, "observations.csv"),
        os.path.join(out, "subjects.csv"),
    )
    sim_mod.write_truth_csv(result, os.path.join(out, "truth.csv"))
    cfg.dump(os.path.join(out, "resolved_config.json"))
    logger.info(
        "simulated %d subjects, %d observations -> %s",
        result.data.n_subjects, len(result.data.observations), out,
    )
    return 0


def cmd_fit(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    data = _load_data(cfg)
    if cfg.data["scale"] == "raw":
        tspec = fit_transform(data)
        save_ecdf(tspec, os.path.join(out, "ecdf.csv"))
        normalized = normalize_cohort(data, tspec)
    else:
        normalized = assume_normalized(data)
    spec = _model_spec(cfg, data)
    model = build_model(data, normalized, spec)
    scfg = _sampler_config(cfg)

    starts = initialize_chains(model, scfg)
    init_z = np.vstack([model.unconstrain(s) for s in starts])

    rng = np.random.default_rng([scfg.seed, 9])
    coords = rng.choice(model.dim, size=min(50, model.dim), replace=False)
    err = gradient_check(model, init_z[0], coords=coords)
    if err > 1e-4:
        raise CommandError(f"gradient self-check failed (max relative error {err:.2e})")

    draws = run_nuts(model, scfg, init_z)
    report = diag_mod.summarize_draws(draws)
    gate = diag_mod.gate_fit(
        report,
        rhat_max=float(cfg.diagnostics["rhat_max"]),
        ess_ratio_min=float(cfg.diagnostics["ess_ratio_min"]),
    )

    write_draws(draws, out, scfg.thin)
    diag_mod.write_summary_csv(report, os.path.join(out, "summary.csv"))
    pred_mod.write_rmse_csv(
        os.path.join(out, "rmse.csv"), pred_mod.rmse(draws, model), data.marker_names
    )
    cfg.dump(os.path.join(out, "resolved_config.json"))
    _write_report(out, {
        "command": "fit",
        "config_sha256": cfg.sha256(),
        "dataset_sha256": dataset_sha256(data),
        "mode": cfg.model["mode"],
        "eps_lower": cfg.model["eps_lower"],
        "eps_upper": cfg.model["eps_upper"],
        "seed": scfg.seed,
        "chains": scfg.chains,
        "retained_draws": draws.n_draws,
        "divergences": draws.divergences,
        "warmup_divergences": draws.warmup_divergences,
        "step_sizes": draws.step_sizes,
        "accept_stats": draws.accept_stats,
        "warnings": draws.warnings,
        "gate": {
            "passed": gate.passed,
            "rhat_max": gate.rhat_max,
            "ess_ratio_min": gate.ess_ratio_min,
            "failures": list(gate.failures),
        },
    })
    if not gate.passed:
        logger.error(
            "diagnostics gate FAILED (%d parameter problem(s)); outputs in %s",
            len(gate.failures), out,
        )
        return 1
    logger.info("fit passed the diagnostics gate; outputs in %s", out)
    return 0


def cmd_predict(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    draws = read_draws(out)
    data = _load_data(cfg)
    if cfg.data["scale"] == "raw":
        tspec = fit_transform(data)
        normalized = normalize_cohort(data, tspec)
    else:
        normalized = assume_normalized(data)
    spec = _model_spec(cfg, data)
    model = build_model(data, normalized, spec)
    if model.layout.names != draws.names:
        raise CommandError(
            "draws in the output directory do not match this configuration's model"
        )

    p = cfg.predict
    grid = pred_mod.default_grid(
        float(p["grid"]["start"]), float(p["grid"]["stop"]), float(p["grid"]["step"])
    )
    profiles = {}
    for name, values in p["profiles"].items():
        if values is None:
            values = [0.0] * spec.n_covariates
        if len(values) != spec.n_covariates:
            raise CommandError(
                f"profile {name!r} needs {spec.n_covariates} covariate values"
            )
        profiles[name] = [float(v) for v in values]

    for name in sorted(profiles):
        x = profiles[name]
        trajs = [
            pred_mod.trajectory(
                draws, model, x, k, grid,
                m=int(p["mc_draws"]), seed=int(p["seed"]),
                draw_stride=int(p["draw_stride"]),
            )
            for k in range(spec.n_markers)
        ]
        pred_mod.write_trajectory_csv(
            os.path.join(out, f"trajectory_{name}.csv"), trajs, data.marker_names
        )
        crossings = pred_mod.crossing_times(trajs, threshold=float(p["threshold"]))
        pred_mod.write_crossing_csv(
            os.path.join(out, f"crossing_{name}.csv"), crossings, data.marker_names
        )
    pred_mod.write_rmse_csv(
        os.path.join(out, "rmse.csv"), pred_mod.rmse(draws, model), data.marker_names
    )
    cfg.dump(os.path.join(out, "resolved_config.json"))
    logger.info("predictions for %d profile(s) written to %s", len(profiles), out)
    return 0


def _read_rmse_csv(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[row["marker"]] = row["rmse"]
    return out


def cmd_compare(fit_dirs: list[str], out_path: str) -> int:
    if len(fit_dirs) < 2:
        raise CommandError("compare needs at least two fit directories")
    hashes, tables, labels = [], [], []
    for d in fit_dirs:
        report_path = os.path.join(d, "report.json")
        rmse_path = os.path.join(d, "rmse.csv")
        if not (os.path.exists(report_path) and os.path.exists(rmse_path)):
            raise CommandError(f"{d}: missing report.json or rmse.csv")
        with open(report_path, encoding="utf-8") as fh:
            hashes.append(json.load(fh)["dataset_sha256"])
        tables.append(_read_rmse_csv(rmse_path))
        labels.append(os.path.basename(os.path.normpath(d)))
    if len(set(hashes)) != 1:
        raise CommandError("dataset hash mismatch: fits were not run on identical data")
    markers = list(tables[0].keys())
    for t in tables[1:]:
        if list(t.keys()) != markers:
            raise CommandError("marker sets differ between fits")
    seen: dict[str, int] = {}
    uniq = []
    for lab in labels:
        seen[lab] = seen.get(lab, 0) + 1
        uniq.append(lab if seen[lab] == 1 else f"{lab}_{seen[lab]}")
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["marker"] + [f"rmse_{lab}" for lab in uniq])
        for mk in markers:
            writer.writerow([mk] + [t[mk] for t in tables])
    logger.info("rmse comparison (%d models) written to %s", len(fit_dirs), out_path)
    return 0


def cmd_diagnose(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    draws = read_draws(out)
    report = diag_mod.summarize_draws(draws)
    gate = diag_mod.gate_fit(
        report,
        rhat_max=float(cfg.diagnostics["rhat_max"]),
        ess_ratio_min=float(cfg.diagnostics["ess_ratio_min"]),
    )
    diag_mod.write_summary_csv(report, os.path.join(out, "summary.csv"))
    if not gate.passed:
        for f in gate.failures[:20]:
            logger.error("gate: %s", f)
        return 1
    logger.info("diagnostics gate passed (%d parameters)", len(report.params))
    return 0


# ---------------------------------------------------------------------------
# entry point


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="run configuration JSON")
    parser.add_argument("--seed", type=int, default=None, help="override all seeds")
    parser.add_argument(
        "--mode", choices=["anchored", "non-anchored"], default=None,
        help="override the latent-time mode",
    )
    parser.add_argument(
        "--eps", type=float, default=None,
        help="override both anchoring windows (years)",
    )
    parser.add_argument("--out", default=None, help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="progalign",
        description="Latent-time disease progression modeling anchored to diagnosis",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, descr in [
        ("simulate", "generate a synthetic cohort and its ground truth"),
        ("fit", "sample the posterior and run the diagnostics gate"),
        ("predict", "severity trajectories, threshold crossings, and RMSE"),
        ("diagnose", "recompute diagnostics for an existing fit"),
    ]:
        p = sub.add_parser(name, help=descr)
        _add_common(p)
    p = sub.add_parser("compare", help="side-by-side per-marker RMSE of several fits")
    p.add_argument("fit_dirs", nargs="+", help="fit output directories")
    p.add_argument("--out", default="rmse_compare.csv", help="comparison CSV path")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            return cmd_compare(args.fit_dirs, args.out)
        cfg = load_config(args.config)
        cfg.apply_overrides(seed=args.seed, mode=args.mode, eps=args.eps, out=args.out)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "fit":
            return cmd_fit(cfg)
        if args.command == "predict":
            return cmd_predict(cfg)
        if args.command == "diagnose":
            return cmd_diagnose(cfg)
        raise CommandError(f"unknown command {args.command!r}")
    except (CommandError, ConfigError, CohortError, SamplingError, OSError) as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
