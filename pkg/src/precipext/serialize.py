"""JSON encoding of fitted models.

Every document is an object with ``schema`` (a ``precipext.*`` tag) and
``version``.  Floats are written with full round-trip precision; arrays become
lists.  Keys are sorted so identical models give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .condext import CondExtFit, CondExtremesModel, PrefitResult
from .margins import MarginalModel
from .occurrence import MuSpline, Nonzero, Probit, SpatialProbit, ThresholdModel
from .randfield import MaternParams

VERSION = 1


class SchemaError(ValueError):
    pass


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def dumps(doc: dict) -> str:
    return json.dumps(_plain(doc), indent=1, sort_keys=True, allow_nan=False) + "\n"


def write_json(doc: dict, path) -> str:
    """Write ``doc`` and return the sha256 of the bytes written."""
    text = dumps(doc)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def read_json(path, schema: str | None = None) -> dict:
    doc = json.loads(Path(path).read_text())
    if schema is not None and doc.get("schema") != schema:
        raise SchemaError(f"{path}: expected schema {schema!r}, found {doc.get('schema')!r}")
    if doc.get("version", VERSION) != VERSION:
        raise SchemaError(f"{path}: unsupported version {doc.get('version')}")
    return doc


def _arr(x):
    return np.array([np.nan if v is None else v for v in x], float)


# ---------------------------------------------------------------------------


def marginal_to_dict(model: MarginalModel, meta: dict | None = None) -> dict:
    return {
        "schema": "precipext.marginal",
        "version": VERSION,
        "p_u": model.p_u,
        "beta": model.beta,
        "kappa": model.kappa,
        "kappa_sd": model.kappa_sd,
        "xi": model.xi,
        "xi_sd": model.xi_sd,
        "days": model.days,
        "log_psi": model.log_psi,
        "log_psi_sd": model.log_psi_sd,
        "log_phi": model.log_phi,
        "log_phi_sd": model.log_phi_sd,
        "meta": meta or {},
    }


def marginal_from_dict(doc: dict) -> MarginalModel:
    if doc.get("schema") != "precipext.marginal":
        raise SchemaError("not a marginal model document")
    opt = lambda k: None if doc.get(k) is None else _arr(doc[k])  # noqa: E731
    return MarginalModel(
        np.asarray(doc["days"], np.int64), _arr(doc["log_psi"]), doc["kappa"], _arr(doc["log_phi"]), doc["xi"],
        p_u=doc["p_u"], beta=doc["beta"], log_psi_sd=opt("log_psi_sd"), log_phi_sd=opt("log_phi_sd"),
        kappa_sd=doc.get("kappa_sd"), xi_sd=doc.get("xi_sd"),
    )


def condext_to_dict(fit: CondExtFit | CondExtremesModel, meta: dict | None = None) -> dict:
    model = fit.model if isinstance(fit, CondExtFit) else fit
    p = model.params
    doc = {
        "schema": "precipext.condext",
        "version": VERSION,
        "s0": model.s0,
        "tau": model.tau,
        "params": {k: getattr(p, k) for k in p.__dataclass_fields__},
        "residual": {"nu": model.residual.nu, "rho": model.residual.rho, "sigma": model.residual.sigma},
        "sigma_eps": model.sigma_eps,
        "theta": model.theta,
        "meta": meta or {},
    }
    if isinstance(fit, CondExtFit):
        doc.update({
            "hessian": fit.hessian,
            "covariance": fit.covariance,
            "objective": fit.objective,
            "converged": fit.converged,
            "grad_norm": fit.grad_norm,
            "hessian_regularized": fit.hessian_regularized,
            "modes": [{"theta": t, "objective": f, "converged": c} for t, f, c in fit.modes],
            "prefit": None if fit.prefit is None else {
                "theta_a": fit.prefit.theta_a, "windows": [list(w) for w in fit.prefit.windows],
            },
        })
    return doc


def condext_from_dict(doc: dict) -> CondExtFit | CondExtremesModel:
    if doc.get("schema") != "precipext.condext":
        raise SchemaError("not a conditional extremes document")
    model = CondExtremesModel.from_theta(_arr(doc["theta"]), doc["tau"], doc["s0"])
    if "hessian" not in doc:
        return model
    pf = doc.get("prefit")
    prefit = None if pf is None else PrefitResult(_arr(pf["theta_a"]), [tuple(w) for w in pf["windows"]])
    return CondExtFit(
        model, model.theta, np.array(doc["hessian"], float), np.array(doc["covariance"], float),
        doc["objective"], doc["converged"], doc["grad_norm"], doc["hessian_regularized"],
        [(_arr(m["theta"]), m["objective"], m["converged"]) for m in doc["modes"]], prefit,
    )


def occurrence_to_dict(model, meta: dict | None = None) -> dict:
    doc = {"schema": "precipext.occurrence", "version": VERSION, "kind": model.kind, "meta": meta or {}}
    if isinstance(model, (Probit, SpatialProbit)):
        doc["mu"] = {"knot_spacing": model.mu.knot_spacing, "anchor": model.mu.anchor, "coefs": model.mu.coefs}
    if isinstance(model, SpatialProbit):
        doc["residual"] = {"nu": model.residual.nu, "rho": model.residual.rho, "sigma": model.residual.sigma}
        doc["nugget_sd"] = model.nugget_sd
        doc["hessian"] = model.hessian
    if isinstance(model, ThresholdModel):
        doc["p"] = model.p
    return doc


def occurrence_from_dict(doc: dict):
    if doc.get("schema") != "precipext.occurrence":
        raise SchemaError("not an occurrence model document")
    kind = doc["kind"]
    if kind == "nonzero":
        return Nonzero()
    if kind == "threshold":
        return ThresholdModel(doc["p"])
    mu = MuSpline(doc["mu"]["knot_spacing"], tuple(doc["mu"]["coefs"]), doc["mu"]["anchor"])
    if kind == "probit":
        return Probit(mu)
    if kind == "spatial-probit":
        r = doc["residual"]
        h = doc.get("hessian")
        return SpatialProbit(mu, MaternParams(r["nu"], r["rho"], r["sigma"]), doc["nugget_sd"],
                             None if h is None else np.array(h, float))
    raise SchemaError(f"unknown occurrence kind {kind!r}")
