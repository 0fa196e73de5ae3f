"""Closed-loop comparison of the four occurrence models on synthetic extremes.

Events come from a conditional-extremes truth whose dry cells follow the
threshold rule.  Each occurrence model is fitted to those events, a batch is
simulated with the true intensity model, and pooled wet rates plus the
p(distance) and p(neighbour mean) curves are printed side by side.

    python3 scripts/occurrence_closed_loop.py [--grid 15] [--times 6000] [--n 1000]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from precipext.condext import CondExtremesModel, StandardizingParams
from precipext.datastore import GridGeometry
from precipext.occurrence import (
    Nonzero,
    ThresholdModel,
    empirical_p_of_distance,
    empirical_p_of_neighbors,
    fit_probit,
    fit_spatial_probit,
    fit_threshold_model,
)
from precipext.randfield import MaternParams
from precipext.simulate import run_simulation
from precipext.standardize import threshold_on_laplace
from precipext.synthetic import SyntheticTruth, constant_marginal, generate_synthetic


def closed_loop(grid=15, n_times=6000, n_sim=1000, zero_prob=0.35, seed=3, spatial=True):
    g = GridGeometry(grid, grid, 1.0)
    s0 = (grid // 2) * grid + grid // 2
    tau = threshold_on_laplace(0.9)
    cext = CondExtremesModel(
        StandardizingParams(6.0, 4.0, 1.0, 3.0, 1.5, 0.5, 8.5, 0.5), MaternParams(0.5, 8.0, 1.2), 0.1, tau, s0,
    )
    days = np.arange(152, 244)
    marginal = constant_marginal(days)
    truth = SyntheticTruth(marginal, "condext", condext=cext, occurrence=ThresholdModel(zero_prob), s0=s0, seed=seed)
    cube, lap = generate_synthetic(truth, g, n_times, return_laplace=True)
    hit = lap[:, s0] > tau
    wet = (cube.values[hit] > 0).astype(float)
    region = np.ones(g.n_sites, bool)
    out = {"n_events": int(hit.sum()), "truth_rate": float(wet.mean()),
           "truth_p_of_d": empirical_p_of_distance(wet, s0, g),
           "truth_p_of_ybar": empirical_p_of_neighbors(cube.values[hit], g)}
    models = {"nonzero": Nonzero(), "threshold": fit_threshold_model(wet, region), "probit": fit_probit(wet, s0, g)}
    t0 = time.perf_counter()
    if spatial:
        models["spatial-probit"] = fit_spatial_probit(wet, s0, g, maxiter=200)
    out["spatial_fit_seconds"] = time.perf_counter() - t0
    for name, occ in models.items():
        batch = run_simulation(marginal, cext, occ, g, n_sim, region, cube.hours[hit], cube.days[hit], seed + 1)
        sim_wet = (batch.values > 0).astype(float)
        out[name] = {
            "model": occ,
            "batch": batch,
            "rate": float(sim_wet.mean()),
            "p_of_d": empirical_p_of_distance(sim_wet, s0, g),
            "p_of_ybar": empirical_p_of_neighbors(batch.values, g),
        }
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", type=int, default=15)
    ap.add_argument("--times", type=int, default=6000)
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--zero-prob", type=float, default=0.35)
    ap.add_argument("--seed", type=int, default=3)
    a = ap.parse_args()
    res = closed_loop(a.grid, a.times, a.n, a.zero_prob, a.seed)
    print(f"events {res['n_events']}, observed wet rate {res['truth_rate']:.3f}, "
          f"spatial-probit fit {res['spatial_fit_seconds']:.0f} s")
    for name in ("nonzero", "threshold", "probit", "spatial-probit"):
        print(f"{name:15s} simulated wet rate {res[name]['rate']:.3f}   model {res[name]['model']}")
    print("\np(d):   d  truth  " + "  ".join(f"{k[:8]:>8s}" for k in ("threshold", "probit", "spatial-probit")))
    for i, d in enumerate(res["truth_p_of_d"].x[:12]):
        vals = [res[k]["p_of_d"].estimate[i] for k in ("threshold", "probit", "spatial-probit")]
        print(f"      {d:4.0f}  {res['truth_p_of_d'].estimate[i]:.3f}  " + "  ".join(f"{v:8.3f}" for v in vals))
    print("\np(ybar): bin  truth  " + "  ".join(f"{k[:8]:>8s}" for k in ("threshold", "probit", "spatial-probit")))
    for i, x in enumerate(res["truth_p_of_ybar"].x):
        vals = [res[k]["p_of_ybar"].estimate[i] for k in ("threshold", "probit", "spatial-probit")]
        print(f"      {x:6.2f}  {res['truth_p_of_ybar'].estimate[i]:.3f}  " + "  ".join(f"{v:8.3f}" for v in vals))


if __name__ == "__main__":
    main()
