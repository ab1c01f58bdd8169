"""Run configuration, artifact storage and the batch pipeline.

Arrays are stored as raw little-endian float64 row-major blobs and indexed
by JSON documents (per-stage ``meta.json`` files and the run manifest).
Stages are cached under ``<out>/cache/<stage>-<key>`` where the key hashes
the configuration sections the stage depends on.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import platform
import time
import uuid
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path as FsPath
from typing import Iterable, Optional

import numpy as np

from . import _backend
from .errors import ConfigError, NonConvergenceError, SharptailError

log = logging.getLogger(__name__)

__all__ = ["load_config", "resolve_config", "validate_config", "canonical_json", "config_hash",
           "write_arrays", "read_array", "ArtifactManifest", "run_pipeline", "export_plot_data",
           "MissingArrayError", "STAGES", "EXPORTS"]

STAGES = ("instanton", "spectrum", "riccati", "estimate", "tube", "sample", "sweep")
EXPORTS = ("eigen_decay", "det_convergence", "tail_vs_z", "tube_slices")
ENCODING = "little-endian row-major"


class MissingArrayError(SharptailError, KeyError):
    """An export or reload referenced an array that the manifest lacks."""

    def __str__(self):
        return str(self.args[0]) if self.args else "missing array"


# ---------------------------------------------------------------------------
# configuration

_PROBLEM_DEFAULTS = {
    "model2d": {"instanton": {"scheme": "euler_if", "n_t": 2000}, "spectrum": {"m": 200}},
    "ou": {"instanton": {"scheme": "rk2_if", "n_t": 1000}, "spectrum": {"m": 20}},
    "kdv": {"instanton": {"scheme": "rk2_if", "n_t": 500}, "spectrum": {"m": 80}},
}

_DEFAULTS = {
    "eps": [0.5],
    "seed": 0,
    "instanton": {"T": 1.0},
    "spectrum": {"enabled": True, "tol": 1e-8, "max_restarts": 200, "truncation_tol": 1e-6,
                 "plateau_tol": 1e-3, "require_plateau": False},
    "riccati": {"enabled": True, "max_dim": 4096, "blowup": 1e12},
    "tube": {"enabled": True, "times": [0.05, 0.25, 0.5, 0.75, 0.95], "stride": 1},
    "sampling": {
        "enabled": False,
        "direct": {"enabled": True, "sample_count": 100000},
        "importance": {"enabled": False, "sample_count": 10000, "record_times": [0.25, 0.5, 0.75]},
    },
}


def _schema() -> dict:
    text = resources.files("sharptail").joinpath("schema/run_config.schema.json").read_text()
    return json.loads(text)


def validate_config(cfg: dict) -> None:
    """Validate against the bundled JSON schema; raises ConfigError."""
    import jsonschema

    try:
        jsonschema.validate(cfg, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid configuration at {where}: {exc.message}") from None


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(raw: dict) -> dict:
    """Validate ``raw`` and fill in defaults (problem-specific ones included)."""
    validate_config(raw)
    name = raw["problem"]["name"]
    cfg = _merge(_merge(_DEFAULTS, _PROBLEM_DEFAULTS[name]), raw)
    cfg["problem"].setdefault("params", {})
    if "z" not in cfg and "z_values" not in cfg:
        raise ConfigError("configuration needs z or z_values")
    if name == "model2d" and cfg["problem"]["params"]:
        raise ConfigError("model2d takes no parameters")
    allowed = {"ou": {"relaxation"}, "kdv": {"n_x", "nu", "kappa", "dealias"}}.get(name, set())
    extra = set(cfg["problem"]["params"]) - allowed
    if extra:
        raise ConfigError(f"unknown parameters for {name}: {sorted(extra)}")
    return cfg


def load_config(path) -> dict:
    try:
        raw = json.loads(FsPath(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"configuration file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"configuration file {path} is not valid JSON: {exc}") from None
    return resolve_config(raw)


def canonical_json(obj) -> str:
    """Key-sorted compact JSON; floats in shortest round-trip form."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# array blobs


def write_arrays(path, arrays: dict) -> list:
    """Write arrays back to back into ``path``; returns manifest entries."""
    path = FsPath(path)
    entries = []
    offset = 0
    with open(path, "wb") as fh:
        for name, a in arrays.items():
            b = np.array(a, dtype="<f8", order="C")  # keeps 0-d shapes, unlike ascontiguousarray
            fh.write(b.tobytes(order="C"))
            entries.append({"name": name, "dtype": "float64", "shape": list(b.shape), "offset": offset,
                            "encoding": ENCODING, "file": path.name})
            offset += b.nbytes
    return entries


def read_array(entry: dict, base_dir) -> np.ndarray:
    if entry.get("dtype") != "float64" or entry.get("encoding") != ENCODING:
        raise ConfigError(f"unsupported array encoding for {entry.get('name')}")
    shape = tuple(entry["shape"])
    count = int(np.prod(shape)) if shape else 1
    a = np.fromfile(FsPath(base_dir) / entry["file"], dtype="<f8", count=count, offset=int(entry["offset"]))
    if a.size != count:
        raise MissingArrayError(f"array {entry['name']} is truncated on disk")
    return a.astype(np.float64).reshape(shape)


@dataclass
class _Stage:
    name: str
    key: str
    dir: FsPath
    scalars: dict = field(default_factory=dict)
    entries: list = field(default_factory=list)
    cached: bool = False
    seconds: float = 0.0

    def array(self, name):
        for e in self.entries:
            if e["name"] == name:
                return read_array(e, self.dir)
        raise MissingArrayError(f"stage {self.name} has no array {name!r}")

    @classmethod
    def load(cls, name, key, root):
        d = FsPath(root) / "cache" / f"{name}-{key}"
        meta = d / "meta.json"
        if not meta.exists():
            return None
        m = json.loads(meta.read_text())
        return cls(name, key, d, m["scalars"], m["arrays"], cached=True, seconds=m.get("seconds", 0.0))

    @classmethod
    def save(cls, name, key, root, scalars, arrays, seconds):
        d = FsPath(root) / "cache" / f"{name}-{key}"
        d.mkdir(parents=True, exist_ok=True)
        entries = write_arrays(d / "data.bin", arrays)
        (d / "meta.json").write_text(json.dumps({"stage": name, "key": key, "scalars": scalars,
                                                 "arrays": entries, "seconds": seconds}, indent=1))
        return cls(name, key, d, scalars, entries, seconds=seconds)


@dataclass
class ArtifactManifest:
    """Index of a run: scalar results, array entries and stage records."""

    run_id: str
    config_hash: str
    config: dict
    scalars: dict
    arrays: list
    stages: dict
    versions: dict
    errors: list = field(default_factory=list)
    base_dir: Optional[FsPath] = None

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "config_hash": self.config_hash, "config": self.config,
                "scalars": self.scalars, "arrays": self.arrays, "stages": self.stages,
                "versions": self.versions, "errors": self.errors}

    def save(self, path=None) -> FsPath:
        path = FsPath(path) if path else FsPath(self.base_dir) / "manifest.json"
        path.write_text(json.dumps(_jsonable(self.to_dict()), indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "ArtifactManifest":
        path = FsPath(path)
        if path.is_dir():
            path = path / "manifest.json"
        d = json.loads(path.read_text())
        return cls(base_dir=path.parent, **d)

    def has(self, name) -> bool:
        return any(e["name"] == name for e in self.arrays)

    def array(self, name) -> np.ndarray:
        for e in self.arrays:
            if e["name"] == name:
                return read_array(e, FsPath(self.base_dir) / e["dir"])
        raise MissingArrayError(f"manifest has no array {name!r}")

    def check(self) -> None:
        """Every referenced array exists on disk with the recorded size."""
        for e in self.arrays:
            f = FsPath(self.base_dir) / e["dir"] / e["file"]
            need = int(e["offset"]) + 8 * int(np.prod(e["shape"]) if e["shape"] else 1)
            if not f.exists() or f.stat().st_size < need:
                raise MissingArrayError(f"array {e['name']} missing or truncated in {f}")


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, (np.floating, float)):
        v = float(o)
        return v if np.isfinite(v) else repr(v)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    return o


def _versions() -> dict:
    import scipy

    from . import __version__

    return {"sharptail": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version(), "backend": _backend.name()}


# ---------------------------------------------------------------------------
# pipeline


def build_problem(cfg: dict):
    from .problems import make_model2d
    from .problems.kdv import KdvConfig, make_kdv
    from .problems.ou import make_ou

    name = cfg["problem"]["name"]
    p = cfg["problem"]["params"]
    T = float(cfg["instanton"].get("T", 1.0))
    if name == "model2d":
        return make_model2d()
    if name == "ou":
        return make_ou(p.get("relaxation", 1.0), T)
    kc = KdvConfig(n_x=p.get("n_x", 128), n_t=cfg["instanton"]["n_t"], T=T, nu=p.get("nu", 0.04),
                   kappa=p.get("kappa", 0.04), dealias=p.get("dealias", True))
    return make_kdv(kc)


def _instanton_config(cfg: dict, z: float):
    from .instanton import InstantonConfig

    kw = dict(cfg["instanton"])
    for k in ("penalty_schedule", "grad_reduction"):
        if k in kw:
            kw[k] = tuple(kw[k])
    return InstantonConfig(z_target=float(z), seed=int(cfg["seed"]) % 2**32, **kw)


def _instanton_arrays(res):
    return {"grid_nodes": res.grid.nodes, "eta": res.eta.values, "phi": res.phi.values,
            "theta": res.theta.values, "grad_norm_history": np.asarray(res.grad_norm_history, dtype=float),
            "objective_history": np.asarray(res.objective_history, dtype=float)}


def _instanton_scalars(res, spec):
    return {"z": res.z, "lambda": res.lam, "I_F": res.rate, "obs_residual": res.obs_residual,
            "iters": res.iters, "n_evals": res.n_evals, "converged": res.converged,
            "scheme": res.integrator.scheme, "rule": res.grid.rule,
            "stationarity_residual": res.stationarity_residual(spec)}


def _instanton_from_stage(st: _Stage):
    from .core import Path, TimeGrid
    from .instanton import InstantonResult
    from .propagators import IntegratorConfig

    s = st.scalars
    grid = TimeGrid(st.array("grid_nodes"), s["rule"])
    return InstantonResult(
        z=s["z"], eta=Path(grid, st.array("eta")), phi=Path(grid, st.array("phi")),
        theta=Path(grid, st.array("theta")), lam=s["lambda"], rate=s["I_F"], obs_residual=s["obs_residual"],
        iters=s["iters"], grad_norm_history=list(st.array("grad_norm_history")),
        integrator=IntegratorConfig(s["scheme"]), converged=s["converged"],
        objective_history=list(st.array("objective_history")), n_evals=s["n_evals"])


def _spectrum_from_stage(st: _Stage, grid):
    from .spectrum import SpectrumResult

    s = st.scalars
    return SpectrumResult(eigenvalues=st.array("eigenvalues"), eigenvectors=st.array("eigenvectors"),
                          residuals=st.array("residuals"), partial_products=st.array("partial_products"),
                          matvec_count=s["matvec_count"], seed=s["seed"], converged=s["converged"],
                          restarts=s["restarts"], grid=grid)


class _Run:
    def __init__(self, cfg, out, threads):
        self.cfg = cfg
        self.out = FsPath(out)
        self.threads = threads
        self.spec = build_problem(cfg)
        self.stages: dict[str, _Stage] = {}
        self.results: dict = {}

    def key(self, *parts):
        return config_hash([self.cfg["problem"], *parts])

    def cached(self, name, key, compute):
        st = _Stage.load(name, key, self.out)
        if st is None:
            t0 = time.perf_counter()
            scalars, arrays = compute()
            st = _Stage.save(name, key, self.out, _jsonable(scalars), arrays, time.perf_counter() - t0)
        else:
            log.info("stage %s: reusing cache %s", name, key)
        self.stages[name] = st
        return st

    # ---- stages ---------------------------------------------------------
    def instanton(self):
        from .instanton import solve_instanton

        cfg = self.cfg
        key = self.key(cfg["z"], cfg["instanton"], cfg["seed"])

        def compute():
            res = solve_instanton(self.spec, _instanton_config(cfg, cfg["z"]))
            if not res.converged:
                raise NonConvergenceError(f"instanton solve did not converge after {res.iters} iterations "
                                          f"(constraint residual {res.obs_residual:.3e})", res)
            self.results["instanton"] = res
            return _instanton_scalars(res, self.spec), _instanton_arrays(res)

        st = self.cached("instanton", key, compute)
        if "instanton" not in self.results:
            self.results["instanton"] = _instanton_from_stage(st)
        return self.results["instanton"]

    def spectrum(self):
        from .second_variation import SecondVariationOperator
        from .spectrum import dominant_eigenpairs

        inst = self.instanton()
        sc = self.cfg["spectrum"]
        key = self.key(self.stages["instanton"].key, sc["m"], sc["tol"], sc["max_restarts"], self.cfg["seed"])

        def compute():
            op = SecondVariationOperator(self.spec, inst)
            sr = dominant_eigenpairs(op, sc["m"], tol=sc["tol"], max_restarts=sc["max_restarts"],
                                     seed=int(self.cfg["seed"]) % 2**32)
            self.results["spectrum"] = sr
            scal = {"matvec_count": sr.matvec_count, "seed": sr.seed, "converged": sr.converged,
                    "restarts": sr.restarts, "m": sr.m}
            arr = {"eigenvalues": sr.eigenvalues, "eigenvectors": sr.eigenvectors, "residuals": sr.residuals,
                   "partial_products": sr.partial_products}
            return scal, arr

        st = self.cached("spectrum", key, compute)
        if "spectrum" not in self.results:
            self.results["spectrum"] = _spectrum_from_stage(st, inst.grid)
        return self.results["spectrum"]

    def riccati(self):
        from .riccati import RiccatiConfig, final_time_covariance_riccati, solve_riccati

        inst = self.instanton()
        rc = self.cfg["riccati"]
        key = self.key(self.stages["instanton"].key, rc["max_dim"], rc["blowup"])

        def compute():
            rr = solve_riccati(self.spec, inst, RiccatiConfig(max_dim=rc["max_dim"], blowup=rc["blowup"],
                                                               store_path=False))
            C = final_time_covariance_riccati(rr, inst)
            scal = {"C_F_riccati": rr.C_F, "trace_integral": rr.trace_integral,
                    "symmetry_defect": rr.symmetry_defect,
                    "singularity_events": [list(e) for e in rr.singularity_events]}
            return scal, {"Q_T": rr.Q_T, "U": rr.U, "covariance_T_riccati": C}

        return self.cached("riccati", key, compute)

    def estimate(self):
        from .estimates import build_report

        inst = self.instanton()
        sr = self.spectrum()
        sc = self.cfg["spectrum"]
        cr = self.stages["riccati"].scalars["C_F_riccati"] if "riccati" in self.stages else None
        rep = build_report(inst, sr, self.cfg["eps"], C_F_riccati=cr, require_plateau=sc["require_plateau"],
                           truncation_tol=sc["truncation_tol"], plateau_tol=sc["plateau_tol"])
        out = rep.as_dict()
        if self.cfg["problem"]["name"] == "ou":
            meta = self.spec.meta
            out["analytic"] = {f"{e:g}": meta["analytic"](inst.z, e) for e in self.cfg["eps"]}
        self.results["estimate"] = out
        self.stages["estimate"] = _Stage("estimate", config_hash(out), self.out, scalars=_jsonable(out))
        return out

    def tube(self):
        from .covariance import build_tube, covariance_at

        inst = self.instanton()
        sr = self.spectrum()
        tc = self.cfg["tube"]
        key = self.key(self.stages["spectrum"].key, tc)

        def compute():
            tm = build_tube(self.spec, inst, sr, stride=tc["stride"])
            T = inst.grid.T
            times = [t for t in tc["times"] if 0 <= t <= T] + [T]
            covs, means = [], []
            for t in times:
                k = inst.grid.index_of(t)
                means.append(inst.phi.values[k])
                covs.append(covariance_at(tm, float(inst.grid.nodes[k])))
            return ({"times": times},
                    {"tube_times": np.array(times), "tube_mean": np.array(means), "tube_cov": np.array(covs),
                     "gamma_T": tm.modes[:, -1]})

        return self.cached("tube", key, compute)

    def sample(self):
        from .sampling import McConfig, direct_tail_mc, importance_sampled_paths

        sc = self.cfg["sampling"]
        cfg = self.cfg
        key = self.key(cfg["z"], sc, cfg["seed"], cfg["instanton"])

        def mc(section, **kw):
            d = {k: v for k, v in section.items() if k not in ("enabled",)}
            d.setdefault("eps", cfg["eps"][0])
            if "record_times" in d:
                d["record_times"] = tuple(d["record_times"])
            return McConfig(seed=int(cfg["seed"]), threads=self.threads, **kw, **d)

        def compute():
            scal, arr = {}, {}
            if sc["direct"].get("enabled", True):
                r = direct_tail_mc(self.spec, mc(sc["direct"], z=float(cfg["z"]), T=float(cfg["instanton"]["T"])))
                scal["direct"] = {"hits": r.hits, "n": r.n, "interval": list(r.interval),
                                  "frequency": r.frequency, "failures": r.failures}
            if sc["importance"].get("enabled", False):
                inst = self.instanton()
                s = importance_sampled_paths(self.spec, inst, mc(sc["importance"]))
                means, covs, ses = zip(*(s.moments(k) for k in range(len(s.times)))) if len(s.times) else ((), (), ())
                scal["importance"] = {"n_simulated": s.n_simulated, "n_accepted": s.n_accepted,
                                      "n_flagged": s.n_flagged, "ess": s.effective_sample_size()}
                arr.update({"is_times": s.times, "is_mean": np.array(means), "is_cov": np.array(covs),
                            "is_se": np.array(ses)})
            return scal, arr

        return self.cached("sample", key, compute)

    def sweep(self):
        from .estimates import prefactor_fredholm
        from .instanton import rate_function_sweep
        from .second_variation import SecondVariationOperator
        from .spectrum import dominant_eigenpairs, fredholm_determinant

        cfg = self.cfg
        zs = sorted(float(z) for z in cfg["z_values"])
        sc = cfg["spectrum"]
        key = self.key(zs, cfg["instanton"], sc if sc["enabled"] else None, cfg["seed"])

        def compute():
            rows, results = rate_function_sweep(self.spec, zs, _instanton_config(cfg, zs[0]))
            cf = np.full(len(zs), np.nan)
            dets = np.full(len(zs), np.nan)
            if sc["enabled"]:
                for i, r in enumerate(results):
                    if r is None:
                        continue
                    sr = dominant_eigenpairs(SecondVariationOperator(self.spec, r), sc["m"], tol=sc["tol"],
                                             max_restarts=sc["max_restarts"], seed=int(cfg["seed"]) % 2**32)
                    de = fredholm_determinant(sr, sc["truncation_tol"], sc["plateau_tol"])
                    dets[i] = de.det
                    cf[i] = prefactor_fredholm(r, de, require_plateau=False)
            return ({"n": len(zs)}, {"sweep_z": rows[:, 0], "sweep_I_F": rows[:, 1], "sweep_lambda": rows[:, 2],
                                     "sweep_C_F": cf, "sweep_det": dets})

        return self.cached("sweep", key, compute)


def _needed(stages: Iterable[str], cfg: dict) -> list:
    want = set(stages)
    if "estimate" in want:
        want |= {"instanton", "spectrum"}
        if cfg["riccati"]["enabled"]:
            want.add("riccati")
    if want & {"spectrum", "riccati", "tube"}:
        want.add("instanton")
    if "tube" in want:
        want.add("spectrum")
    if "z" not in cfg:
        want -= {"instanton", "spectrum", "riccati", "estimate", "tube", "sample"}
    return [s for s in STAGES if s in want]


def default_stages(cfg: dict) -> list:
    s = ["instanton"]
    if cfg["spectrum"]["enabled"]:
        s += ["spectrum", "estimate"]
    if cfg["riccati"]["enabled"]:
        s.append("riccati")
    if cfg["tube"]["enabled"] and cfg["spectrum"]["enabled"]:
        s.append("tube")
    if cfg["sampling"]["enabled"]:
        s.append("sample")
    if "z_values" in cfg:
        s.append("sweep")
    return s


def run_pipeline(cfg: dict, out_dir=None, stages: Optional[Iterable[str]] = None,
                 threads: Optional[int] = None, seed: Optional[int] = None) -> ArtifactManifest:
    """Run the requested stages (default: all enabled) and write the manifest.

    ``cfg`` may be raw; it is validated before anything touches the disk.
    On a stage failure the manifest records the stage and the error, is
    written, and the exception is re-raised with a ``stage`` attribute.
    """
    cfg = resolve_config(cfg)  # idempotent on resolved configurations
    if seed is not None:
        cfg["seed"] = int(seed)
    if threads is not None:
        cfg["threads"] = int(threads)
    stages = list(stages) if stages is not None else default_stages(cfg)
    bad = set(stages) - set(STAGES)
    if bad:
        raise ConfigError(f"unknown stages {sorted(bad)}")
    out = FsPath(out_dir or cfg.get("output_dir") or "sharptail-run")
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg, out, cfg.get("threads"))
    chash = config_hash(cfg)
    manifest = ArtifactManifest(run_id=uuid.uuid4().hex[:12], config_hash=chash, config=cfg, scalars={},
                                arrays=[], stages={}, versions=_versions(), base_dir=out)
    failure = None
    for name in _needed(stages, cfg):
        t0 = time.perf_counter()
        try:
            getattr(run, name)()
        except Exception as exc:
            failure = exc
            exc.stage = name
            manifest.errors.append({"stage": name, "type": type(exc).__name__, "message": str(exc)})
            manifest.stages[name] = {"status": "failed", "seconds": time.perf_counter() - t0}
            log.error("stage %s failed: %s", name, exc)
            break
        st = run.stages.get(name)
        manifest.stages[name] = {"status": "ok", "key": st.key if st else None,
                                 "cached": bool(st and st.cached), "seconds": time.perf_counter() - t0}
    _collect(manifest, run)
    manifest.save()
    if failure is not None:
        failure.manifest = manifest
        raise failure
    return manifest


def _collect(manifest: ArtifactManifest, run: _Run) -> None:
    sc = manifest.scalars
    for name, st in run.stages.items():
        if name == "estimate":
            sc.update(st.scalars)
            continue
        if name == "instanton":
            sc.update({k: st.scalars[k] for k in ("I_F", "lambda", "obs_residual", "iters", "converged")})
            sc["instanton"] = st.scalars
        elif name == "riccati":
            sc["C_F_riccati"] = st.scalars["C_F_riccati"]
            sc["riccati"] = st.scalars
        else:
            sc[name] = st.scalars
        rel = st.dir.relative_to(manifest.base_dir).as_posix()
        for e in st.entries:
            manifest.arrays.append({**e, "dir": rel, "stage": name})


# ---------------------------------------------------------------------------
# plot data


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def export_plot_data(manifest: ArtifactManifest, which="all", out_dir=None, eps=None) -> list:
    """Write CSV files behind the standard plots; returns the paths written."""
    names = list(EXPORTS) if which == "all" else ([which] if isinstance(which, str) else list(which))
    bad = set(names) - set(EXPORTS)
    if bad:
        raise ConfigError(f"unknown export(s) {sorted(bad)}; choose from {EXPORTS}")
    out = FsPath(out_dir) if out_dir else FsPath(manifest.base_dir) / "plots"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in names:
        p = out / f"{name}.csv"
        if name == "eigen_decay":
            mu = manifest.array("eigenvalues")
            _write_csv(p, ["i", "abs_mu", "sign"],
                       [(i + 1, abs(m), int(np.sign(m))) for i, m in enumerate(mu)])
        elif name == "det_convergence":
            pp = manifest.array("partial_products")
            _write_csv(p, ["m", "partial_product"], [(i + 1, v) for i, v in enumerate(pp)])
        elif name == "tail_vs_z":
            from .estimates import tail_probability

            epss = list(eps) if eps is not None else list(manifest.config.get("eps", [1.0]))
            if manifest.has("sweep_z"):
                zs, I, C = manifest.array("sweep_z"), manifest.array("sweep_I_F"), manifest.array("sweep_C_F")
            elif "C_F_fredholm" in manifest.scalars:
                zs, I, C = [manifest.scalars["z"]], [manifest.scalars["I_F"]], [manifest.scalars["C_F_fredholm"]]
            else:
                raise MissingArrayError("tail_vs_z needs the sweep arrays (sweep_z, sweep_I_F, sweep_C_F) "
                                        "or an estimate stage")
            rows = []
            for z, i_f, c in zip(zs, I, C):
                for e in epss:
                    ok = np.isfinite(c) and c > 0
                    rows.append((z, e, i_f, c, float(tail_probability(i_f, c, e)) if ok else float("nan"),
                                 float(tail_probability(i_f, c, e, log10=True)) if ok else float("nan")))
            _write_csv(p, ["z", "eps", "I_F", "C_F", "tail", "log10_tail"], rows)
        elif name == "tube_slices":
            times = manifest.array("tube_times")
            mean = manifest.array("tube_mean")
            cov = manifest.array("tube_cov")
            n = mean.shape[1]
            pairs = [(i, j) for i in range(n) for j in range(n)] if n <= 8 else [(i, i) for i in range(n)]
            rows = [(t, i, j, mean[k, i], cov[k, i, j]) for k, t in enumerate(times) for i, j in pairs]
            _write_csv(p, ["t", "i", "j", "mean_i", "C_ij"], rows)
        paths.append(p)
    return paths
