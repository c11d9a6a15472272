"""Config-driven experiment pipeline.

A config names a chain, a fiber-map family, a master seed and per-stage
parameters. Every stage returns a JSON-ready report dict and optional CSV
tables; defaults are written back into the report so a report is
self-describing. Module-level randomness is keyed off the master seed
through fixed stream numbers, so reports are reproducible byte for byte.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import math
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import lyapunov as ly
from . import orbits as ob
from . import physical as ph
from . import ulam as ul
from .errors import ConfigError, ConvergenceFailure, NotIrreducible
from .maps import MapFamily, compose_orbit
from .markov_chain import MarkovChain, chain_diagnostics, dual_transition, restrict_to_support, sample_path
from .rng import derive_seed

SCHEMA_VERSION = 1

STREAM_SIMULATE = 1
STREAM_LYAPUNOV = 2
STREAM_PHYSICAL = 3
STREAM_BASIN = 4
STREAM_HF = 5
STREAM_SPECTRAL = 6

DEFAULTS = {
    "simulate": {"n": 1000, "x0": 0.3},
    "lyapunov": {"n": 20000, "n_burn": None, "reps": 8, "x0": 0.37, "hf_check_n": 1000, "hf_check_reps": 4},
    "ulam": {"N": 64, "k": 8, "eps": 0.01, "fed_tol": 1e-12, "fed_iter": 1000, "fed_target": 1e-6},
    "physical": {
        "n_x": 64,
        "n_paths": 16,
        "n_burn": 500,
        "n_tail": 2000,
        "bins": 256,
        "tau": None,
        "hull_delta": 1e-3,
        "stratify": True,
        "basin_check_n": 400,
        "basin_check_reps": 4,
    },
    "invariant_orbit": {"tol_accept": 1e-9, "grid": 4096, "starts": 64},
    "certificate": {"sigma": 3.0},
}

_NUM = {"type": "number"}
_MAP = {
    "type": "object",
    "required": ["type"],
    "properties": {
        "type": {"enum": ["affine", "rotation", "pinched_sine", "additive_circle", "identity"]},
        "label": {"type": "string"},
        "alpha": _NUM,
        "beta": _NUM,
        "theta": _NUM,
        "a": _NUM,
        "c": _NUM,
        "base": {"type": "object"},
    },
    "additionalProperties": False,
}


def _params_schema() -> dict:
    props = {}
    for stage, vals in DEFAULTS.items():
        props[stage] = {
            "type": "object",
            "properties": {k: {} for k in vals},
            "additionalProperties": False,
        }
    return {"type": "object", "properties": props, "additionalProperties": False}


CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "name", "seed", "chain", "family"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "description": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "chain": {
            "type": "object",
            "required": ["Q"],
            "properties": {
                "Q": {"type": "array", "minItems": 1, "items": {"type": "array", "items": _NUM}},
                "p": {"type": "array", "items": _NUM},
                "states": {"type": "array", "items": {"type": "string"}},
            },
            "additionalProperties": False,
        },
        "family": {
            "type": "object",
            "required": ["maps"],
            "properties": {
                "space": {
                    "type": "object",
                    "properties": {"kind": {"enum": ["interval", "circle"]}, "a": _NUM, "b": _NUM},
                    "additionalProperties": False,
                },
                "maps": {"type": "array", "minItems": 1, "items": _MAP},
            },
            "additionalProperties": False,
        },
        "params": _params_schema(),
    },
    "additionalProperties": False,
}

CANNED = (
    "ifs-bernoulli",
    "ifs-markov",
    "ifs-2cycle",
    "pinched-sine-two-attractors",
    "rotations",
    "additive-circle",
)


class Experiment:
    """A validated config with materialised defaults and built objects."""

    def __init__(self, config: dict, seed: int | None = None, threads: int = 1):
        try:
            jsonschema.validate(config, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"config does not match schema: {exc.message}") from exc
        cfg = copy.deepcopy(config)
        if seed is not None:
            cfg["seed"] = int(seed)
        params = copy.deepcopy(DEFAULTS)
        for stage, vals in cfg.get("params", {}).items():
            params[stage].update(vals)
        try:
            chain_spec = cfg["chain"]
            self.chain = MarkovChain(
                np.array(chain_spec["Q"], dtype=float),
                p=chain_spec.get("p"),
                states=tuple(chain_spec["states"]) if "states" in chain_spec else None,
            )
            self.family = MapFamily.from_spec(cfg["family"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"invalid chain or family: {exc}") from exc
        if len(self.family) != self.chain.m:
            raise ConfigError(f"{len(self.family)} maps for {self.chain.m} chain states")
        if params["physical"]["tau"] is None:
            params["physical"]["tau"] = 0.02 * self.family.space.diameter
        cfg["params"] = params
        self.config = cfg
        self.params = params
        self.seed = int(cfg["seed"])
        self.threads = int(threads)
        self._cache: dict = {}

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.config, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def stream_seed(self, stream: int) -> int:
        return derive_seed(self.seed, stream)

    def cached(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    def ulam_matrices(self):
        N = self.params["ulam"]["N"]

        def build():
            hat = ul.build_ulam(self.chain, self.family, N, "hat")
            tilde = ul.build_ulam(self.chain, self.family, N, "tilde", cell_maps=hat.cell_maps)
            return hat, tilde

        return self.cached("ulam", build)

    def ensemble(self):
        pp = self.params["physical"]
        return self.cached(
            "ensemble",
            lambda: ph.simulate_ensemble(
                self.chain,
                self.family,
                n_x=pp["n_x"],
                n_paths=pp["n_paths"],
                n_burn=pp["n_burn"],
                n_tail=pp["n_tail"],
                bins=pp["bins"],
                seed=self.stream_seed(STREAM_PHYSICAL),
            ),
        )

    def clusters(self):
        pp = self.params["physical"]
        return self.cached(
            "clusters",
            lambda: ph.cluster_physical_measures(
                self.ensemble(), pp["tau"], pp["hull_delta"], pp["stratify"]
            ),
        )


def load_config(path_or_name: str) -> dict:
    """Read a config file, or a canned config by name."""
    p = Path(path_or_name)
    try:
        if p.is_file():
            text = p.read_text()
        elif path_or_name in CANNED:
            text = resources.files("markovian_rds").joinpath("configs", f"{path_or_name}.json").read_text()
        else:
            raise ConfigError(f"no config file or canned config named {path_or_name!r}")
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


def clean(obj):
    """Recursively convert to plain JSON types; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def dumps(report: dict) -> str:
    return json.dumps(clean(report), sort_keys=True, indent=2) + "\n"


def run_chain_info(exp: Experiment) -> tuple[dict, dict]:
    return {"chain": chain_diagnostics(exp.chain)}, {}


def run_simulate(exp: Experiment) -> tuple[dict, dict]:
    sp_ = exp.params["simulate"]
    n = int(sp_["n"])
    path = sample_path(exp.chain, n, exp.stream_seed(STREAM_SIMULATE))
    traj, logsum = compose_orbit(exp.family, path, sp_["x0"], n)
    rows = [(j, int(path.seq[j]) if j < n else "", float(traj[j])) for j in range(n + 1)]
    report = {
        "simulate": {
            "n": n,
            "x0": sp_["x0"],
            "x_final": float(traj[-1]),
            "log_derivative_sum": logsum,
            "lyapunov_average": logsum / n,
            "state_frequencies": (np.bincount(path.seq, minlength=exp.chain.m) / n).tolist(),
        }
    }
    return report, {"trajectory": (("step", "state", "x"), rows)}


def _ulam_lyapunov_list(exp: Experiment) -> list:
    _, tilde = exp.ulam_matrices()
    return [ly.ulam_lyapunov(v, exp.family, tilde.partition) for v in ul.stationary_vectors(tilde)]


def run_lyapunov(exp: Experiment) -> tuple[dict, dict]:
    lp = exp.params["lyapunov"]
    pooled, reps = ly.lyapunov_replicates(
        exp.chain,
        exp.family,
        lp["x0"],
        int(lp["n"]),
        int(lp["reps"]),
        exp.stream_seed(STREAM_LYAPUNOV),
        lp["n_burn"],
        threads=exp.threads,
    )
    ulam_est = _ulam_lyapunov_list(exp)
    hf = ly.h_vs_f_lyapunov_check(
        exp.chain, exp.family, int(lp["hf_check_n"]), int(lp["hf_check_reps"]), exp.stream_seed(STREAM_HF)
    )
    agreement = []
    for e in ulam_est:
        # floor at rounding level: constant-slope systems have a zero budget
        budget = 3.0 * (pooled.stderr + e.metadata["discretization_bound"]) + 1e-12
        agreement.append({"difference": abs(e.value - pooled.value), "budget": budget, "ok": abs(e.value - pooled.value) <= budget})
    report = {
        "lyapunov": {
            "orbit": pooled.to_dict(),
            "ulam": [e.to_dict() for e in ulam_est],
            "ulam_vs_orbit": agreement,
            "h_vs_f_max_deviation": hf,
        }
    }
    rows = [(i, r.value, r.stderr) for i, r in enumerate(reps)]
    return report, {"lyapunov_replicates": (("replicate", "value", "stderr"), rows)}


def _spectral(exp: Experiment, M) -> dict:
    up = exp.params["ulam"]
    try:
        return ul.spectral_report(M, up["k"], up["eps"], seed=exp.stream_seed(STREAM_SPECTRAL)).to_dict()
    except ConvergenceFailure as exc:
        return {"converged": False, "error": str(exc)}


def run_ulam(exp: Experiment) -> tuple[dict, dict]:
    up = exp.params["ulam"]
    hat, tilde = exp.ulam_matrices()
    spec = _spectral(exp, hat)
    fed = ul.fed_report(hat, up["fed_tol"], up["fed_iter"], up["fed_target"])
    support = restrict_to_support(exp.chain)
    corr = {}
    if support.m == exp.chain.m:
        dual = dual_transition(exp.chain)
        rt, tf = [], []
        for v in fed.densities:
            rt.append(ul.roundtrip_check(v, exp.chain, exp.family, hat.partition, dual, hat.cell_maps))
            mt = ul.phi_map(v, dual)
            tf.append(float(np.abs(tilde.matrix.T @ mt.weights - mt.weights).sum()))
        corr = {"theta_xi_roundtrip": rt, "phi_image_tilde_defect": tf}
    n_tilde = len(ul.stationary_vectors(tilde))
    report = {
        "ulam": {
            "N": hat.N,
            "dimension": hat.shape[0],
            "nnz_hat": int(hat.matrix.nnz),
            "row_sum_defect_hat": hat.row_sum_defect(),
            "row_sum_defect_tilde": tilde.row_sum_defect(),
            "metadata": hat.metadata,
            "spectral": spec,
            "fed": fed.to_dict(),
            "n_stationary_hat": len(fed.densities),
            "n_stationary_tilde": n_tilde,
            "correspondence": corr,
        }
    }
    tables = {}
    if "moduli" in spec:
        tables["spectrum"] = (("rank", "modulus"), list(enumerate(spec["moduli"])))
    buf = io.StringIO()
    ul.export_triplets(hat, buf)
    return report, tables | {"_ulam_hat.triplets": buf.getvalue()}


def run_physical(exp: Experiment) -> tuple[dict, dict]:
    pp = exp.params["physical"]
    rep = exp.clusters()
    out = rep.to_dict()
    out["support_overlap"] = ph.support_disjointness(rep, pp["hull_delta"]).tolist()
    if exp.chain.is_bernoulli:
        out["bernoulli_fiber_discrepancy"] = ph.bernoulli_fiber_check(rep, exp.chain)
    basin = ph.basin_projection_check(
        exp.chain,
        exp.family,
        None,
        int(pp["basin_check_n"]),
        int(pp["basin_check_reps"]),
        exp.stream_seed(STREAM_BASIN),
        pp["tau"],
    )
    out["basin_projection"] = basin
    rows = []
    for c, mu in enumerate(rep.representatives):
        for t in range(mu.m):
            cum = np.cumsum(mu.weights[t])
            rows.extend((c, t, float(x), float(F)) for x, F in zip(mu.positions[t], cum))
    return {"physical": out}, {"cluster_cdfs": (("cluster", "state", "x", "sub_cdf"), rows)}


def run_invariant_orbit(exp: Experiment) -> tuple[dict, dict]:
    if exp.family.space.is_circle:
        return {"invariant_orbit": {"refused": True, "reason": "circle phase space; the orbit criterion is for interval maps"}}, {}
    op = exp.params["invariant_orbit"]
    try:
        res = ob.mostly_contracting_precondition(
            exp.chain, exp.family, tol_accept=op["tol_accept"], grid=op["grid"], starts=op["starts"]
        )
    except NotIrreducible as exc:
        res = {"irreducible": False, "orbit": None, "implication": str(exc)}
    return {"invariant_orbit": res}, {}


def _certificate(exp: Experiment):
    return exp.cached(
        "certificate",
        lambda: ly.mostly_contracting_certificate(
            exp.chain,
            exp.family,
            N=exp.params["ulam"]["N"],
            cluster_report=exp.clusters(),
            sigma=exp.params["certificate"]["sigma"],
        ),
    )


def dichotomy_verdict(cert) -> str:
    if cert.verdict == "MostlyContracting":
        return "contraction"
    lower = min(
        e.value - (cert.sigma * e.stderr if e.method == "orbit" else e.metadata.get("discretization_bound", 0.0))
        for e in cert.per_measure
    )
    if lower <= 0.0 <= cert.lambda_sup_margin:
        return "invariance suspected"
    return "inconclusive"


def run_dichotomy(exp: Experiment) -> tuple[dict, dict]:
    cert = _certificate(exp)
    rep = exp.clusters()
    return {
        "dichotomy": {
            "certificate": cert.to_dict(),
            "verdict": dichotomy_verdict(cert),
            "non_convergent": rep.non_convergent,
            "nonconvergent_fraction": rep.nonconvergent_fraction,
        }
    }, {}


def run_full_report(exp: Experiment) -> tuple[dict, dict]:
    report, tables = {}, {}
    for fn in (run_chain_info, run_lyapunov, run_ulam, run_physical, run_invariant_orbit, run_dichotomy):
        r, t = fn(exp)
        report.update(r)
        tables.update(t)
    spec = report["ulam"]["spectral"]
    r = report["physical"]["r"]
    ulam_vals = [e["value"] for e in report["lyapunov"]["ulam"]]
    report["cross_checks"] = {
        "eigencount_vs_r": {
            "unit_count": spec.get("unit_count"),
            "eigenvalue_one_count": spec.get("eigenvalue_one_count"),
            "n_densities": report["ulam"]["fed"]["n_densities"],
            "r": r,
            "agree": spec.get("unit_count") == r,
            "note": "a mismatch is reported, not reconciled",
        },
        "ulam_vs_orbit_lyapunov": report["lyapunov"]["ulam_vs_orbit"],
        "ulam_lyapunov_max": max(ulam_vals) if ulam_vals else None,
        "dichotomy_verdict": report["dichotomy"]["verdict"],
    }
    return report, tables


SUBCOMMANDS = {
    "chain-info": run_chain_info,
    "simulate": run_simulate,
    "lyapunov": run_lyapunov,
    "ulam": run_ulam,
    "physical": run_physical,
    "invariant-orbit": run_invariant_orbit,
    "dichotomy": run_dichotomy,
    "full-report": run_full_report,
}


def run(subcommand: str, config, seed: int | None = None, threads: int = 1) -> tuple[dict, dict]:
    """Run one stage; ``config`` is a dict, a path or a canned name."""
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    if not isinstance(config, dict):
        config = load_config(str(config))
    exp = Experiment(config, seed, threads)
    body, tables = SUBCOMMANDS[subcommand](exp)
    report = {
        "schema_version": SCHEMA_VERSION,
        "subcommand": subcommand,
        "name": exp.config["name"],
        "config": exp.config,
        "metadata": {"config_hash": exp.config_hash},
        **body,
    }
    return report, tables
