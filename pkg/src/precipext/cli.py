"""Command-line pipeline: ingest -> fit-marginals -> standardize -> fit-intensity -> fit-occurrence -> simulate -> evaluate.

Each stage reads its upstream artifacts from ``--out-dir``, checks that they
were produced under the same configuration (per-stage hash of the relevant
config sections) and that binary files match their recorded sha256, then
writes its own artifacts.  Timings live only in ``manifest.json`` so reruns
give byte-identical artifacts.

Exit codes: 0 success, 1 unexpected error, 2 validation (bad config, missing
or stale upstream artifact, bad input), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_ERROR, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3
THREADS_ENV = "PRECIPEXT_THREADS"

log = logging.getLogger("precipext")

STAGE_SECTIONS = {
    "synth": ("geometry", "synth"),
    "ingest": ("paths", "preprocess"),
    "fit-marginals": ("marginals",),
    "standardize": (),
    "diagnose": ("diagnose", "condext"),
    "fit-intensity": ("condext",),
    "fit-occurrence": ("occurrence",),
    "simulate": ("simulate",),
    "evaluate": ("evaluate",),
    "report": ("diagnose",),
}
STAGE_UPSTREAM = {
    "synth": (),
    "ingest": (),
    "fit-marginals": ("ingest",),
    "standardize": ("fit-marginals",),
    "diagnose": ("standardize",),
    "fit-intensity": ("standardize",),
    "fit-occurrence": ("fit-intensity",),
    "simulate": ("fit-occurrence",),
    "evaluate": ("simulate",),
    "report": ("evaluate", "diagnose"),
}


class ValidationError(Exception):
    pass


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _stage_sections(cfg, stage: str) -> set:
    secs = set(STAGE_SECTIONS[stage])
    if stage == "ingest" and not cfg.paths.input:
        secs |= set(STAGE_SECTIONS["synth"])
    for up in STAGE_UPSTREAM[stage]:
        secs |= _stage_sections(cfg, up)
    return secs


def stage_hash(cfg, stage: str) -> str:
    return cfg.section_hash(*_stage_sections(cfg, stage))


class Workspace:
    def __init__(self, out_dir, cfg, stage: str | None = None):
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.stage = stage

    @property
    def config_hash(self) -> str:
        return stage_hash(self.cfg, self.stage)

    def write_json(self, name: str, doc: dict) -> None:
        from .serialize import write_json

        write_json({**doc, "config_hash": self.config_hash}, self.path(name))

    def path(self, name: str) -> Path:
        return self.root / name

    def require(self, stage: str) -> dict:
        """Load a stage record and verify its config hash and file checksums."""
        from .serialize import read_json

        p = self.path(f"{stage}.json")
        if not p.exists():
            raise ValidationError(f"missing upstream artifact {p.name}; run `precipext {stage}` first")
        doc = read_json(p, "precipext.stage")
        expected = stage_hash(self.cfg, stage)
        if doc["config_hash"] != expected:
            raise ValidationError(
                f"{p.name} was produced under a different configuration; rerun `precipext {stage}`"
            )
        for name, digest in doc["artifacts"].items():
            f = self.path(name)
            if not f.exists() or _sha256(f) != digest:
                raise ValidationError(f"artifact {name} is missing or was modified; rerun `precipext {stage}`")
        return doc

    def finish(self, stage: str, artifacts: list[str], upstream: dict, extra: dict, seconds: float) -> None:
        from .serialize import write_json

        digests = {a: _sha256(self.path(a)) for a in sorted(artifacts)}
        doc = {
            "schema": "precipext.stage",
            "version": 1,
            "stage": stage,
            "config_hash": stage_hash(self.cfg, stage),
            "artifacts": digests,
            "upstream": upstream,
            "summary": extra,
        }
        write_json(doc, self.path(f"{stage}.json"))
        man_path = self.path("manifest.json")
        manifest = json.loads(man_path.read_text()) if man_path.exists() else {"stages": {}}
        manifest["stages"][stage] = {
            "config_hash": doc["config_hash"],
            "seed": self.cfg.simulate.seed if stage == "simulate" else self.cfg.synth.seed,
            "seconds": round(seconds, 3),
            "artifacts": digests,
            "record_sha256": _sha256(self.path(f"{stage}.json")),
        }
        man_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# helpers


def _geometry(cfg):
    from .datastore import GridGeometry

    g = cfg.geometry
    return GridGeometry(g.nx, g.ny, g.cell_size)


def _tau(cfg) -> float:
    from .standardize import threshold_on_laplace

    return threshold_on_laplace(cfg.condext.p_tau)


def _synthetic_truth(cfg):
    import numpy as np

    from .condext import CondExtremesModel, StandardizingParams
    from .margins import MarginalModel
    from .occurrence import MuSpline, Nonzero, SpatialProbit, ThresholdModel
    from .randfield import MaternParams
    from .synthetic import SyntheticTruth, flat_probit

    s = cfg.synth
    days = s.first_day + np.arange(s.n_days)
    log_psi = np.log(s.psi_mean) + s.psi_amplitude * np.sin(2 * np.pi * (days - s.first_day) / s.n_days)
    marginal = MarginalModel(days, log_psi, s.kappa, np.full(len(days), np.log(s.phi)), s.xi, cfg.marginals.p_u,
                             cfg.marginals.beta)
    s0 = cfg.sites()[0]
    model = CondExtremesModel(
        StandardizingParams(s.lambda_a0, s.Lambda_lambda, s.kappa_a0, s.Lambda_kappa, s.varkappa, s.beta0,
                            s.lambda_b, s.kappa_b),
        MaternParams(0.5, s.rho, s.sigma), s.sigma_eps, _tau(cfg), s0,
    )
    occ = {
        "nonzero": Nonzero(),
        "threshold": ThresholdModel(s.zero_probability),
        "probit": flat_probit(1 - s.zero_probability),
        "spatial-probit": SpatialProbit(MuSpline(5.0, (-1.0, -0.5, -0.2)), MaternParams(0.5, 15.0, 2.0)),
    }[s.occurrence]
    return SyntheticTruth(marginal, s.dependence, MaternParams(0.5, s.copula_range), model, occ, s.hours_per_day,
                          s0, s.seed)


def _region(cfg, geometry):
    from .datastore import CatchmentPolygon

    if cfg.paths.polygon:
        return CatchmentPolygon.from_text(cfg.paths.polygon).site_mask(geometry)
    import numpy as np

    return np.ones(geometry.n_sites, bool)


def _load_cube(ws, name):
    from .datastore import load_cube

    return load_cube(ws.path(name))


# ---------------------------------------------------------------------------
# stages


def stage_synth(ws, cfg):
    from .datastore import write_cube
    from .serialize import condext_to_dict, marginal_to_dict, occurrence_to_dict
    from .synthetic import generate_synthetic

    truth = _synthetic_truth(cfg)
    cube = generate_synthetic(truth, _geometry(cfg), cfg.synth.n_times, cfg.synth.seed)
    write_cube(cube, ws.path("synthetic_raw.pxc"))
    ws.write_json("truth.json", {
        "schema": "precipext.truth", "version": 1, "dependence": truth.dependence,
        "marginal": marginal_to_dict(truth.marginal), "condext": condext_to_dict(truth.condext),
        "occurrence": occurrence_to_dict(truth.occurrence), "seed": cfg.synth.seed,
    })
    return ["synthetic_raw.pxc", "truth.json"], {}, {"n_times": cube.n_times, "n_sites": cube.n_sites}


def stage_ingest(ws, cfg):
    import numpy as np

    from .datastore import filter_months, load_cube, preprocess, write_cube, zero_proportion_table

    upstream = {}
    if cfg.paths.input:
        src = Path(cfg.paths.input)
        if not src.exists():
            raise ValidationError(f"input cube {src} does not exist")
        cube = load_cube(src, cfg.paths.input_format or None)
        upstream[str(src)] = _sha256(src)
    else:
        ws.require("synth")
        cube = load_cube(ws.path("synthetic_raw.pxc"))
        upstream["synth.json"] = _sha256(ws.path("synth.json"))
    g = cube.geometry
    if (g.nx, g.ny, g.cell_size) != (cfg.geometry.nx, cfg.geometry.ny, cfg.geometry.cell_size):
        raise ValidationError("input cube geometry does not match [geometry] in the config")
    p = cfg.preprocess
    center = (p.exclusion_x, p.exclusion_y) if p.exclusion_x >= 0 and p.exclusion_y >= 0 else None
    cube = preprocess(cube, p.zero_floor, center, p.exclusion_radius if center else 0.0)
    cube = filter_months(cube, p.months)
    if cube.n_times == 0:
        raise ValidationError("no times left after month filtering")
    write_cube(cube, ws.path("cube.pxc"))
    zp = zero_proportion_table(cube, [0.0])
    return ["cube.pxc"], upstream, {
        "n_times": cube.n_times, "n_masked_sites": int((~cube.site_mask).sum()),
        "mean_zero_proportion": float(np.nanmean(zp)),
    }


def stage_fit_marginals(ws, cfg):
    from .datastore import split_intensity_occurrence
    from .margins import PcPriorXi, SmoothingPrior, fit_marginals
    from .serialize import marginal_to_dict

    ws.require("ingest")
    cube = _load_cube(ws, "cube.pxc")
    intensity, _ = split_intensity_occurrence(cube)
    m = cfg.marginals
    smoothing = SmoothingPrior(m.range0_days, m.range_exceed_prob, m.sd0, m.sd_exceed_prob) if m.smoothing else None
    model = fit_marginals(intensity, m.p_u, m.beta, PcPriorXi(m.xi_lambda), smoothing, m.gamma_stride, m.gp_stride)
    ws.write_json("marginal.json", marginal_to_dict(model, {"smoothing": m.smoothing}))
    return ["marginal.json"], {"ingest.json": _sha256(ws.path("ingest.json"))}, {
        "kappa": model.kappa, "xi": model.xi,
    }


def stage_standardize(ws, cfg):
    from .datastore import write_cube
    from .serialize import marginal_from_dict, read_json
    from .standardize import to_laplace

    ws.require("fit-marginals")
    cube = _load_cube(ws, "cube.pxc")
    model = marginal_from_dict(read_json(ws.path("marginal.json")))
    lap, clamped = to_laplace(cube, model)
    write_cube(lap, ws.path("laplace.pxc"))
    return ["laplace.pxc"], {"fit-marginals.json": _sha256(ws.path("fit-marginals.json"))}, {"n_clamped": clamped}


def stage_diagnose(ws, cfg):
    import numpy as np

    from .diagnostics import WindowSpec, chi_hat, default_y0_levels, sliding_moments, threshold_selection
    from .standardize import laplace_quantile

    ws.require("standardize")
    lap = _load_cube(ws, "laplace.pxc")
    g = lap.geometry
    d = cfg.diagnose
    y1 = float(laplace_quantile(d.y1_prob))
    levels = default_y0_levels(d.n_levels, d.level_lo, d.level_hi, extra=(y1,))
    spec = WindowSpec(d.d_half, d.logy_half, d.min_count)
    out = []
    surf = sliding_moments(lap, g, spec, levels)
    surf.to_csv(ws.path("surface_global.csv"), y1=y1)
    out.append("surface_global.csv")
    report = threshold_selection(surf.alpha(), surf.beta(y1), levels, d.tol_alpha, d.tol_beta)
    ws.write_json("stabilization.json", {"schema": "precipext.stabilization", "version": 1, **report.as_dict()})
    out.append("stabilization.json")
    for s in cfg.sites():
        name = f"surface_site{s}.csv"
        sliding_moments(lap, g, spec, levels, s0=s).to_csv(ws.path(name), y1=y1)
        out.append(name)
    with open(ws.path("chi_global.csv"), "w") as fh:
        fh.write("p,d,chi,n_cond,n_joint\n")
        for p in d.chi_p:
            for row in chi_hat(lap, g, p).rows():
                fh.write(f"{p!r}," + ",".join("NA" if isinstance(v, float) and np.isnan(v) else repr(v)
                                              for v in row) + "\n")
    out.append("chi_global.csv")
    return out, {"standardize.json": _sha256(ws.path("standardize.json"))}, {
        "recommended_tau": report.recommended,
    }


def stage_fit_intensity(ws, cfg):
    import numpy as np

    from .condext import CondExtPriors, extract_events, fit_map, least_squares_prefit
    from .randfield import PcPriorMatern
    from .serialize import condext_to_dict

    ws.require("standardize")
    lap = _load_cube(ws, "laplace.pxc")
    c = cfg.condext
    tau = _tau(cfg)
    out, summary = [], {}
    for s in cfg.sites():
        events = extract_events(lap, s, tau)
        prefit = least_squares_prefit(events, window=c.prefit_window)
        from scipy.special import logit

        priors = CondExtPriors(
            a_means=tuple(prefit.theta_a), a_sd=c.prior_sd,
            b_means=(float(logit(c.beta0_mean)), float(np.log(c.lambda_b_mean)), float(np.log(c.kappa_b_mean))),
            b_sd=c.prior_sd,
            residual_pc=PcPriorMatern(c.range0_km, c.range_exceed_prob, c.sd0, c.sd_exceed_prob, dim=2),
            nugget_mean=float(np.log(c.nugget_mean)), nugget_sd=c.nugget_sd,
        )
        fit = fit_map(events, prefit, priors, stride=c.stride, n_starts=c.n_starts)
        name = f"condext_site{s}.json"
        ws.write_json(name, condext_to_dict(fit, {"n_events": events.n_events}))
        out.append(name)
        summary[str(s)] = {"n_events": events.n_events, "converged": fit.converged}
    return out, {"standardize.json": _sha256(ws.path("standardize.json"))}, summary


def _occurrence_events(ws, cfg, s):
    import numpy as np

    cube = _load_cube(ws, "cube.pxc")
    lap = _load_cube(ws, "laplace.pxc")
    with np.errstate(invalid="ignore"):
        hit = lap.values[:, s] > _tau(cfg)
    v = cube.values[hit]
    return np.where(np.isnan(v), np.nan, (v > 0).astype(float)), hit


def stage_fit_occurrence(ws, cfg):
    from .occurrence import (
        COEF_PRIOR_SD,
        Nonzero,
        SpatialProbitPriors,
        fit_probit,
        fit_spatial_probit,
        fit_threshold_model,
    )
    from .randfield import PcPriorMatern
    from .serialize import occurrence_to_dict

    ws.require("fit-intensity")
    g = _geometry(cfg)
    o = cfg.occurrence
    out = []
    for s in cfg.sites():
        events, _ = _occurrence_events(ws, cfg, s)
        if o.model == "nonzero":
            model = Nonzero()
        elif o.model == "threshold":
            model = fit_threshold_model(events, _region(cfg, g))
        elif o.model == "probit":
            model = fit_probit(events, s, g, o.knot_spacing, o.anchor)
        else:
            if o.coef_sd != COEF_PRIOR_SD:
                log.info("using coefficient prior sd %g", o.coef_sd)
            priors = SpatialProbitPriors(PcPriorMatern(o.range0_km, o.range_exceed_prob, o.sd0, o.sd_exceed_prob),
                                         o.coef_sd)
            model = fit_spatial_probit(events, s, g, o.knot_spacing, o.anchor, priors)
        name = f"occurrence_site{s}_{o.model}.json"
        ws.write_json(name, occurrence_to_dict(model))
        out.append(name)
    return out, {"fit-intensity.json": _sha256(ws.path("fit-intensity.json"))}, {"model": o.model}


def stage_simulate(ws, cfg):
    from .datastore import write_cube
    from .serialize import condext_from_dict, marginal_from_dict, occurrence_from_dict, read_json
    from .simulate import run_simulation

    rec = ws.require("fit-occurrence")
    g = _geometry(cfg)
    marginal = marginal_from_dict(read_json(ws.path("marginal.json")))
    cube = _load_cube(ws, "cube.pxc")
    out = []
    kind = cfg.occurrence.model
    for s in cfg.sites():
        fit = condext_from_dict(read_json(ws.path(f"condext_site{s}.json")))
        occ = occurrence_from_dict(read_json(ws.path(f"occurrence_site{s}_{kind}.json")))
        fps = {k: v for k, v in rec["artifacts"].items()}
        fps["config_hash"] = ws.config_hash
        fps["marginal.json"] = _sha256(ws.path("marginal.json"))
        fps[f"condext_site{s}.json"] = _sha256(ws.path(f"condext_site{s}.json"))
        batch = run_simulation(
            marginal, fit, occ, g, cfg.simulate.n, _region(cfg, g), cube.hours, cube.days, cfg.simulate.seed,
            cfg.simulate.fix_theta, fps,
        )
        stem = f"batch_site{s}_{kind}"
        batch.write(ws.path(stem + ".pxc"), ws.path(stem + ".provenance.json"))
        write_cube(batch.laplace_cube(), ws.path(stem + "_laplace.pxc"))
        out += [stem + ".pxc", stem + ".provenance.json", stem + "_laplace.pxc"]
    return out, {"fit-occurrence.json": _sha256(ws.path("fit-occurrence.json"))}, {"n": cfg.simulate.n}


def stage_evaluate(ws, cfg):
    import numpy as np

    from .datastore import load_cube
    from .evaluate import AggregationSpec, aggregated_sums, chi_overlay, qq_table
    from .occurrence import empirical_p_of_distance, empirical_p_of_neighbors

    ws.require("simulate")
    g = _geometry(cfg)
    cube = _load_cube(ws, "cube.pxc")
    lap = _load_cube(ws, "laplace.pxc")
    region = _region(cfg, g)
    kind = cfg.occurrence.model
    e = cfg.evaluate
    out = []
    for s in cfg.sites():
        stem = f"batch_site{s}_{kind}"
        batch = load_cube(ws.path(stem + ".pxc"))
        blap = load_cube(ws.path(stem + "_laplace.pxc"))
        occ_obs, hit = _occurrence_events(ws, cfg, s)
        spec = AggregationSpec(s, tuple(e.radii), region)
        obs_sums = aggregated_sums(cube.values[hit], g, spec)
        sim_sums = aggregated_sums(batch.values, g, spec)
        name = f"qq_site{s}_{kind}.csv"
        with open(ws.path(name), "w") as fh:
            fh.write("radius,p,observed,simulated\n")
            for k, r in enumerate(e.radii):
                for p, a, b in qq_table(obs_sums[:, k], sim_sums[:, k]).rows():
                    fh.write(f"{float(r)!r},{p!r},{a!r},{b!r}\n")
        out.append(name)
        name = f"chi_site{s}_{kind}.csv"
        overlays = chi_overlay(lap, blap, g, s, e.chi_p)
        with open(ws.path(name), "w") as fh:
            fh.write("p,d,chi_observed,n_observed,chi_simulated,n_simulated\n")
            for ov in overlays:
                for (d, co, no, _), (_, cs, ns, _) in zip(ov.observed.rows(), ov.simulated.rows()):
                    fo = "NA" if np.isnan(co) else repr(co)
                    fs = "NA" if np.isnan(cs) else repr(cs)
                    fh.write(f"{ov.p!r},{d!r},{fo},{no},{fs},{ns}\n")
        out.append(name)
        sim_occ = np.where(np.isnan(batch.values), np.nan, (batch.values > 0).astype(float))
        for tag, data in (("observed", occ_obs), ("simulated", sim_occ)):
            name = f"p_of_distance_site{s}_{kind}_{tag}.csv"
            empirical_p_of_distance(data, s, g).to_csv(ws.path(name))
            out.append(name)
        for tag, data in (("observed", cube.values[hit]), ("simulated", batch.values)):
            name = f"p_of_neighbors_site{s}_{kind}_{tag}.csv"
            empirical_p_of_neighbors(data, g).to_csv(ws.path(name))
            out.append(name)
    return out, {"simulate.json": _sha256(ws.path("simulate.json"))}, {}


def _read_csv(path):
    import csv

    with open(path) as fh:
        rows = list(csv.DictReader(fh))

    def num(v):
        return float("nan") if v == "NA" else float(v)

    return [{k: num(v) for k, v in r.items()} for r in rows]


def stage_report(ws, cfg):
    from collections import defaultdict

    from .svgplot import Panel, figure

    ws.require("evaluate")
    ws.require("diagnose")
    out = []
    kind = cfg.occurrence.model
    for s in cfg.sites():
        panels = []
        rows = _read_csv(ws.path(f"chi_site{s}_{kind}.csv"))
        by_p = defaultdict(list)
        for r in rows:
            by_p[r["p"]].append(r)
        for p, rs in sorted(by_p.items()):
            panels.append(Panel(f"chi_p(d), p={p:g}", "distance (km)", "chi")
                          .line([(r["d"], r["chi_observed"]) for r in rs], "observed")
                          .line([(r["d"], r["chi_simulated"]) for r in rs], "simulated", dashed=True))
        rows = _read_csv(ws.path(f"qq_site{s}_{kind}.csv"))
        by_r = defaultdict(list)
        for r in rows:
            by_r[r["radius"]].append(r)
        for rad, rs in sorted(by_r.items()):
            panels.append(Panel(f"QQ of sums, radius {rad:g} km", "observed", "simulated")
                          .diagonal().scatter([(r["observed"], r["simulated"]) for r in rs]))
        for curve, xlab in (("p_of_distance", "distance (km)"), ("p_of_neighbors", "neighbour mean (mm/h)")):
            pn = Panel(f"occurrence: {curve.replace('_', ' ')}", xlab, "P(wet)")
            for tag in ("observed", "simulated"):
                rs = _read_csv(ws.path(f"{curve}_site{s}_{kind}_{tag}.csv"))
                xkey = next(k for k in rs[0] if k not in ("estimate", "count"))
                pn.line([(r[xkey], r["estimate"]) for r in rs], tag, dashed=tag == "simulated")
            panels.append(pn)
        name = f"report_site{s}_{kind}.svg"
        ws.path(name).write_text(figure(panels, 3, f"site {s}, occurrence model {kind}"))
        out.append(name)
        rows = _read_csv(ws.path(f"surface_site{s}.csv"))
        by_y = defaultdict(list)
        for r in rows:
            by_y[r["y0"]].append(r)
        panels = []
        for key, label in (("alpha", "alpha-hat"), ("beta", "beta-hat"), ("sigma", "sigma-hat")):
            pn = Panel(f"{label}(d; y0)", "distance (km)", label)
            for y0, rs in sorted(by_y.items())[::4]:
                pn.line([(r["d"], r[key]) for r in rs], f"y0={y0:.2f}")
            panels.append(pn)
        name = f"surfaces_site{s}.svg"
        ws.path(name).write_text(figure(panels, 3, f"empirical estimators at site {s}"))
        out.append(name)
    upstream = {name: _sha256(ws.path(name)) for name in ("evaluate.json", "diagnose.json")}
    return out, upstream, {}


STAGES = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "fit-marginals": stage_fit_marginals,
    "standardize": stage_standardize,
    "diagnose": stage_diagnose,
    "fit-intensity": stage_fit_intensity,
    "fit-occurrence": stage_fit_occurrence,
    "simulate": stage_simulate,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="master seed for synth and simulate")
    common.add_argument("--threads", type=int, help=f"cap on BLAS threads (also ${THREADS_ENV})")
    common.add_argument("--out-dir", default="precipext-out", help="artifact directory")
    common.add_argument("--site", type=int, action="append", help="conditioning site index (repeatable)")
    common.add_argument("--occurrence", choices=("nonzero", "probit", "spatial-probit", "threshold"))
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="precipext", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="stage", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    sub.add_parser("dump-config", parents=[common], help="print the effective configuration")
    return parser


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg.synth.seed = args.seed
        cfg.simulate.seed = args.seed
    if args.site:
        cfg.condext.sites = tuple(args.site)
    if args.occurrence:
        cfg.occurrence.model = args.occurrence
    n = cfg.geometry.nx * cfg.geometry.ny
    for s in cfg.sites():
        if not 0 <= s < n:
            from .config import ConfigError

            raise ConfigError(f"site {s} outside the {cfg.geometry.nx}x{cfg.geometry.ny} grid")
    return cfg.validate()


def _run(args) -> int:
    from threadpoolctl import threadpool_limits

    from .condext import CondExtError
    from .config import ConfigError, dump_config, load_config
    from .datastore import CubeFormatError
    from .margins import MarginalFitError
    from .occurrence import OccurrenceFitError
    from .randfield import FieldFactorizationError
    from .serialize import SchemaError

    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.stage == "dump-config":
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        threads = args.threads or (int(os.environ[THREADS_ENV]) if os.environ.get(THREADS_ENV) else None)
        ws = Workspace(args.out_dir, cfg, args.stage)
        t0 = time.perf_counter()
        with threadpool_limits(limits=threads):
            artifacts, upstream, summary = STAGES[args.stage](ws, cfg)
        ws.finish(args.stage, artifacts, upstream, summary, time.perf_counter() - t0)
        log.info("%s: wrote %s", args.stage, ", ".join(artifacts))
        return EXIT_OK
    except (ValidationError, ConfigError, CubeFormatError, SchemaError, FileNotFoundError) as exc:
        print(f"precipext {args.stage}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (MarginalFitError, CondExtError, OccurrenceFitError, FieldFactorizationError) as exc:
        print(f"precipext {args.stage}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"precipext {args.stage}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return _run(args)


if __name__ == "__main__":
    sys.exit(main())
