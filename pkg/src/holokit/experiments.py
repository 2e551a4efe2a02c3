"""Experiment drivers, configuration and report emission.

A driver turns an ExperimentConfig into a list of flat row dicts.  Reports
are written with a fixed column order and 17 significant digits, so two runs
with the same config and seed produce identical bytes.  Wall-clock times go
to a separate timing file for the same reason.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__
from .domain_core import (Domain, PolyhedronSpec, boundary_distance, domain_from_json,
                          outward_normal, preset_domain, ray_exit)
from .errors import BudgetExhaustedError, HolokitError, NonConvergenceError, PreconditionError
from .polynomial import Polynomial

KINDS = ("metric", "distance", "scale", "sandwich", "herbort", "fridman", "stability", "corner")
APPROACH = ("normal", "tangential-mix")

EXIT_OK, EXIT_ASSERT, EXIT_BUDGET = 0, 2, 3


# ---------------------------------------------------------------------------
# parsing


def parse_domain_spec(text):
    """'preset:name[:param...]', a JSON document, or a path to a JSON file."""
    text = text.strip()
    if text.startswith("preset:"):
        parts = text.split(":")
        if len(parts) < 2 or not parts[1]:
            raise PreconditionError("preset spec needs a name")
        try:
            params = [int(x) for x in parts[2:]]
        except ValueError:
            raise PreconditionError(f"preset parameters must be integers: {text!r}") from None
        try:
            return preset_domain(parts[1], *params)
        except (KeyError, ValueError) as e:
            raise PreconditionError(f"unknown preset {parts[1]!r}") from e
    if text.startswith("{"):
        return domain_from_json(text)
    path = Path(text)
    if not path.exists():
        raise PreconditionError(f"no such domain file: {text}")
    return domain_from_json(path.read_text())


def parse_point(text):
    """'a,b,...' with complex entries such as 0.1+0.2j."""
    try:
        return np.array([complex(s.strip().replace(" ", "")) for s in text.split(",")])
    except ValueError:
        raise PreconditionError(f"cannot parse point {text!r}") from None


def parse_sequence(text):
    """'normal:6' (d_j = 0.1 * 2^-j) or 'normal:1e-1,1e-2' (explicit distances)."""
    mode, _, rest = text.partition(":")
    if mode not in APPROACH:
        raise PreconditionError(f"approach mode must be one of {APPROACH}")
    if not rest:
        raise PreconditionError("sequence needs a step count or a distance list")
    if "," in rest or "e" in rest or "." in rest:
        ds = [float(x) for x in rest.split(",")]
    else:
        k = int(rest)
        if not 1 <= k <= 40:
            raise PreconditionError("step count must lie in [1, 40]")
        ds = [0.1 * 2.0 ** (-j) for j in range(1, k + 1)]
    if any(not 0 < d < 1 for d in ds):
        raise PreconditionError("distances must lie in (0, 1)")
    return mode, ds


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    kind: str
    domain: str
    seed: int
    points: list = field(default_factory=list)
    direction: str | None = None
    sequence: str | None = None
    base: str | None = None
    N: int = 8
    M: int = 256
    eta: float = 1e-6
    radius: float = 1.0
    count: int = 20
    budget: float | None = None
    out: str | None = None
    fmt: str = "csv"

    def validate(self):
        problems = []
        if self.kind not in KINDS:
            problems.append(f"kind must be one of {KINDS}")
        if self.seed is None or int(self.seed) != self.seed or self.seed < 0:
            problems.append("seed is mandatory and must be a nonnegative integer")
        if not 2 <= self.N <= 32:
            problems.append("N must lie in [2, 32]")
        if not 16 <= self.M <= 4096:
            problems.append("M must lie in [16, 4096]")
        if not 0 < self.eta < 1e-2:
            problems.append("eta must lie in (0, 1e-2)")
        if not self.radius > 0:
            problems.append("radius must be positive")
        if self.budget is not None and not self.budget > 0:
            problems.append("budget must be positive")
        if self.fmt not in ("csv", "json"):
            problems.append("format must be csv or json")
        if problems:
            raise PreconditionError("; ".join(problems))
        return self

    def echo(self):
        return asdict(self)


class _Clock:
    def __init__(self, budget):
        self.t0 = time.perf_counter()
        self.budget = budget
        self.rows = []  # drivers append here so an abort can flush what exists

    def check(self):
        if self.budget is not None and time.perf_counter() - self.t0 > self.budget:
            raise BudgetExhaustedError(f"wall-clock budget of {self.budget} s exhausted")


def _threads():
    try:
        return max(1, int(os.environ.get("HOLOKIT_THREADS", "1")))
    except ValueError:
        return 1


def _map_rows(fn, items):
    """Ordered map; process pool when HOLOKIT_THREADS > 1."""
    k = _threads()
    if k <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(k, len(items))) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# sequences


def default_base(D):
    """Boundary point hit by the ray from the base point along +e_n."""
    e = np.zeros(D.n, dtype=complex)
    e[-1] = 1
    t = ray_exit(D, D.base_point, e[None, :])[0]
    return D.base_point + t * e


def approach_points(D, base, mode, distances):
    base = np.asarray(base, dtype=complex)
    nu = outward_normal(D.active_piece(base), base)
    if mode == "normal":
        return [base - d * nu for d in distances]
    from .scaling_engine import _project_to_boundary
    # tangent direction orthogonal to nu, offset by sqrt(d) and re-projected
    t = np.zeros(D.n, dtype=complex)
    t[0] = 1
    t = t - np.vdot(nu, t) * nu
    if np.linalg.norm(t) < 1e-12:
        t = np.zeros(D.n, dtype=complex)
        t[-1] = 1
        t = t - np.vdot(nu, t) * nu
    t /= np.linalg.norm(t)
    out = []
    for d in distances:
        foot = _project_to_boundary(D.rho, (base + 0.3 * math.sqrt(d) * t)[None, :])[0]
        nu_f = outward_normal(D.active_piece(foot), foot)
        out.append(foot - d * nu_f)
    return out


def _sequence(cfg, D):
    if not cfg.sequence:
        raise PreconditionError("this experiment needs --seq")
    mode, ds = parse_sequence(cfg.sequence)
    base = parse_point(cfg.base) if cfg.base else default_base(D)
    if abs(D.values(base)) > 1e-8:
        raise PreconditionError("sequence base must be a boundary point")
    return base, mode, ds, approach_points(D, base, mode, ds)


def _disc_cfg(cfg):
    from .invariant_metrics import DiscConfig
    return DiscConfig(N=cfg.N, M=cfg.M, eta=cfg.eta, seed=cfg.seed)


def _require_inside(D, p):
    if p.shape[0] != D.n:
        raise PreconditionError(f"point has {p.shape[0]} coordinates, domain has {D.n}")
    if not D.values(p) < 0:
        raise PreconditionError("point lies outside the domain (rho >= 0)")


# ---------------------------------------------------------------------------
# drivers


def _closed_kind(D):
    name = D.name.split(":")[0]
    return name if name in ("ball", "polydisc", "halfplane", "siegel") else None


def run_metric(cfg, D, clock):
    from .invariant_metrics import (caratheodory_inf_lower, closed_form_inf_metric,
                                    kobayashi_inf_estimate)
    if not cfg.points or cfg.direction is None:
        raise PreconditionError("metric needs --point and --dir")
    v = parse_point(cfg.direction)
    rows = clock.rows
    for i, ptxt in enumerate(cfg.points):
        p = parse_point(ptxt)
        _require_inside(D, p)
        k = kobayashi_inf_estimate(D, p, v, _disc_cfg(cfg))
        c = caratheodory_inf_lower(D, p, v, _disc_cfg(cfg))
        row = {"id": i, "point": p, "dir": v, "FK": k.value, "FK_bound": k.bound_kind,
               "FC": c.value, "FC_bound": c.bound_kind}
        kind = _closed_kind(D)
        if kind in ("ball", "polydisc", "halfplane"):
            row["exact"] = closed_form_inf_metric(kind, p, v).value
            row["exact_bound"] = "Exact"
        rows.append(row)
        clock.check()
    return rows


def run_distance(cfg, D, clock):
    from .invariant_metrics import PathConfig, closed_form_distance, kobayashi_distance_estimate
    if len(cfg.points) != 2:
        raise PreconditionError("distance needs two --point values")
    a, b = (parse_point(t) for t in cfg.points)
    _require_inside(D, a)
    _require_inside(D, b)
    est = kobayashi_distance_estimate(D, a, b, PathConfig(disc=_disc_cfg(cfg)))
    row = {"id": 0, "a": a, "b": b, "distance": est.value, "bound": est.bound_kind,
           "samples": len(est.samples)}
    kind = _closed_kind(D)
    if kind in ("ball", "polydisc", "halfplane"):
        row["exact"] = closed_form_distance(kind, a, b).value
        row["exact_bound"] = "Exact"
    clock.check()
    return [row]


def run_scale(cfg, D, clock):
    from .scaling_engine import catlin_run, limit_polynomial, spsc_run
    base, mode, ds, pts = _sequence(cfg, D)
    rows = clock.rows
    if D.class_tag == "StronglyPseudoconvex" and (D.declared_type or 2) == 2:
        run = spsc_run(D, pts)
        for e, d in zip(run.entries, ds):
            target = np.zeros(D.n, dtype=complex)
            target[-1] = -1
            rows.append({"j": e.j, "d": d, "delta": e.params["delta"],
                         "image": e.image, "image_error": float(np.max(np.abs(e.image - target))),
                         "limit": "siegel"})
            clock.check()
        return rows
    two_m = D.declared_type
    if not two_m:
        raise PreconditionError("scale on a non-spsc domain needs a declared type")
    run = catlin_run(D, pts, two_m, base)
    limit = run.limit_model.rho.to_terms() if run.limit_model is not None else None
    for e, d in zip(run.entries, ds):
        target = np.array([0, -1.0 / e.params["d0"]])
        rows.append({"j": e.j, "d": d, "eps": e.params["eps"], "tau": e.params["tau"],
                     "d0": e.params["d0"], "image": e.image,
                     "image_error": float(np.max(np.abs(e.image - target))),
                     "limit": json.dumps(limit, sort_keys=True) if limit else ""})
        clock.check()
    return rows


def run_sandwich(cfg, D, clock):
    from .boundary_estimates import sandwich_constants
    from .invariant_metrics import PathConfig
    _, _, ds, pts = _sequence(cfg, D)
    law = "spsc" if D.class_tag == "StronglyPseudoconvex" and (D.declared_type or 2) == 2 else "catlin"
    fit = sandwich_constants(D, pts, cfg.radius, law, PathConfig(quad_tol=None, disc=_disc_cfg(cfg)),
                             seed=cfg.seed)
    clock.check()
    rows = [{"id": r["id"], "d": r["d"], "law": law, "C1": r["C1"], "C2": r["C2"],
             "C1_bound": "Fitted", "C2_bound": "Fitted", "exited": sum(r["exited"])}
            for r in fit.rows]
    rows.append({"id": "summary", "d": "", "law": law, "C1": fit.C1, "C2": fit.C2,
                 "C1_bound": f"ratio={fit.inner_ratio:.6g}", "C2_bound": f"ratio={fit.outer_ratio:.6g}",
                 "exited": ""})
    return rows


def herbort_pairs(D, base, count, seed):
    """Seeded near-boundary pairs around a boundary point."""
    rng = np.random.default_rng(seed)
    nu = outward_normal(D.active_piece(base), base)
    pairs = []
    while len(pairs) < count:
        pts = []
        for _ in range(2):
            d = 10 ** rng.uniform(-3, -1)
            off = (rng.normal(size=D.n) + 1j * rng.normal(size=D.n)) * 0.05
            off -= np.vdot(nu, off) * nu
            z = base + off - d * nu
            if D.values(z) < 0:
                pts.append(z)
        if len(pts) == 2:
            pairs.append(tuple(pts))
    return pairs


def run_herbort(cfg, D, clock):
    from .boundary_estimates import herbort_sandwich_fit
    from .invariant_metrics import PathConfig
    base = parse_point(cfg.base) if cfg.base else default_base(D)
    pairs = herbort_pairs(D, base, cfg.count, cfg.seed)
    fit = herbort_sandwich_fit(D, pairs, cfg=PathConfig(disc=_disc_cfg(cfg)))
    clock.check()
    rows = [{"id": r["id"], "distance": r["distance"], "distance_bound": "UpperBound",
             "rho_sum": r["rho_sum"], "ratio": r["ratio"]} for r in fit.rows]
    rows.append({"id": "C_star", "distance": "", "distance_bound": "", "rho_sum": "",
                 "ratio": fit.c_star})
    return rows


def _fridman_row(args):
    D, p, kw = args
    from .fridman import fridman_boundary_experiment
    r = fridman_boundary_experiment(D, [p], **kw)[0]
    return r


def run_fridman(cfg, D, clock):
    from .fridman import fridman_zero_cert
    name = D.name.split(":")[0]
    if name == "siegel" and not cfg.sequence:
        cert = fridman_zero_cert(D, D.base_point, "ball")
        if not cert.certified:
            return [{"j": 0, "d": "", "bestR": "", "upper": "", "candidate": "", "certificate": cert.reason}]
        return [{"j": 0, "d": "", "bestR": f["bestR"], "upper": f["upper"],
                 "candidate": cert.candidate.label, "certificate": f"zero (s={f['s']})"}
                for f in cert.family]
    base, mode, ds, pts = _sequence(cfg, D)
    kw = {}
    if D.class_tag == "Polyhedron":
        kw["corner"] = PolyhedronSpec(tuple(Polynomial.z(D.n, i) for i in range(D.n)),
                                      np.ones(D.n, dtype=complex))
        pts = [(1 - d) * np.ones(D.n, dtype=complex) for d in ds]
    elif D.class_tag == "FiniteType2D":
        kw.update(two_m=D.declared_type, p0=base)
    rows = clock.rows
    for j, (p, d) in enumerate(zip(pts, ds), start=1):
        r = _fridman_row((D, p, kw))
        rows.append({"j": j, "d": d, "bestR": r.bestR, "upper": r.upper, "upper_bound": "UpperBound",
                     "candidate": r.witness or "", "s": r.s if r.s is not None else "",
                     "reference": r.reference})
        clock.check()
    return rows


def fr_pairs(D, distances=(1e-1, 1e-2, 1e-3), seps=(0.3, 0.03)):
    """Far pairs near (0, 1) and (0, -1) and near pairs around (0, 1)."""
    north = np.array([0, 1.0 + 0j])
    south = np.array([0, -1.0 + 0j])
    e = np.zeros(D.n, dtype=complex)
    out = []
    for d in distances:
        a = approach_points(D, _on_boundary(D, north), "normal", [d])[0]
        b = approach_points(D, _on_boundary(D, south), "normal", [d])[0]
        out.append(("far", a, b))
    for d in distances:
        a = approach_points(D, _on_boundary(D, north), "normal", [d])[0]
        for sep in seps:
            e[:] = 0
            e[0] = sep
            b = a + e
            if D.values(b) < 0:
                out.append(("near", a, b))
    return out


def _on_boundary(D, z):
    """Radial projection of z onto the boundary from the base point."""
    u = z - D.base_point
    u = u / np.linalg.norm(u)
    t = ray_exit(D, D.base_point, u[None, :])[0]
    return D.base_point + t * u


def run_fr_stability(cfg, D, clock):
    """Distance estimates against the log bounds, plus the sqrt(d) metric law."""
    from .boundary_estimates import fr_constant_fit, sqrt_lower_fit
    from .invariant_metrics import PathConfig, kobayashi_distance_estimate
    samples, rows = [], clock.rows
    for i, (kind, a, b) in enumerate(fr_pairs(D)):
        est = kobayashi_distance_estimate(D, a, b, PathConfig(disc=_disc_cfg(cfg)))
        s = {"kind": kind, "d_a": boundary_distance(D, a).distance,
             "d_b": boundary_distance(D, b).distance, "sep": float(np.linalg.norm(a - b)),
             "distance": est.value}
        samples.append(s)
        rows.append({"id": i, "quantity": "distance", "kind": kind, "d_a": s["d_a"], "d_b": s["d_b"],
                     "sep": s["sep"], "value": est.value, "bound": est.bound_kind,
                     "C_lower": "", "C_upper": ""})
        clock.check()
    fit = fr_constant_fit(samples)
    for row, r in zip(rows, fit.rows):
        row["C_lower"] = r["C_lower"] if r["kind"] == "far" else ""
        row["C_upper"] = r["C_upper"]
    base = _on_boundary(D, np.array([0, 1.0 + 0j]))
    pts = approach_points(D, base, "normal", [1e-1, 1e-2, 1e-3])
    nu = outward_normal(D.active_piece(base), base)
    tang = np.array([-np.conj(nu[1]), np.conj(nu[0])])
    C_sqrt, srows = sqrt_lower_fit(D, pts, [tang, nu], _disc_cfg(cfg))
    clock.check()
    for r in srows:
        rows.append({"id": f"sqrt{r['id']}.{r['dir']}", "quantity": "sqrt_law", "kind": "",
                     "d_a": r["d"], "d_b": "", "sep": "", "value": r["FC"], "bound": "LowerBound",
                     "C_lower": r["C"], "C_upper": ""})
    blank = {"kind": "", "d_a": "", "d_b": "", "sep": "", "C_lower": "", "C_upper": ""}
    rows.append(dict(blank, id="C_log", quantity="constant", value=fit.C, bound="Fitted"))
    rows.append(dict(blank, id="C_sqrt", quantity="constant", value=C_sqrt, bound="LowerBound"))
    return rows


def run_stability(cfg, D, clock):
    from .invariant_metrics import kobayashi_inf_estimate
    from .scaling_engine import catlin_run
    if D.name.startswith("perturbed_ball") or D.class_tag == "StronglyPseudoconvex":
        return run_fr_stability(cfg, D, clock)
    base, mode, ds, pts = _sequence(cfg, D)
    if not D.declared_type:
        raise PreconditionError("stability needs a declared type")
    run = catlin_run(D, pts, D.declared_type, base)
    z = np.array([0, -1], dtype=complex)
    rows = clock.rows
    dc = _disc_cfg(cfg)
    for v_name, v in (("e1", np.array([1, 0], dtype=complex)), ("e2", np.array([0, 1], dtype=complex))):
        for e, d in zip(run.entries, ds):
            val = kobayashi_inf_estimate(e.domain, z, v, dc).value
            rows.append({"v": v_name, "j": e.j, "d": d, "FK": val, "bound": "UpperBound"})
            clock.check()
        if run.limit_model is not None:
            val = kobayashi_inf_estimate(run.limit_model, z, v, dc).value
            rows.append({"v": v_name, "j": "limit", "d": 0.0, "FK": val, "bound": "UpperBound"})
    return rows


def run_corner(cfg, D, clock):
    from .scaling_engine import corner_exhaustion, polyhedron_corner_maps
    if D.class_tag != "Polyhedron" or D.name.split(":")[0] != "polydisc":
        raise PreconditionError("corner experiments run on preset:polydisc")
    _, ds = parse_sequence(cfg.sequence or "normal:1e-1,1e-2,1e-3,1e-4")
    P = PolyhedronSpec(tuple(Polynomial.z(D.n, i) for i in range(D.n)), np.ones(D.n, dtype=complex))
    rows = clock.rows
    for k, d in enumerate(ds, start=1):
        zk = (1 - d) * np.ones(D.n, dtype=complex)
        cm = polyhedron_corner_maps(P, zk)
        ok, worst, count = corner_exhaustion(cm)
        rows.append({"k": k, "d": d, "roundtrip": cm.roundtrip_error(), "exhaustion": ok,
                     "max_modulus": worst, "samples": count})
        clock.check()
    return rows


DRIVERS = {"metric": run_metric, "distance": run_distance, "scale": run_scale,
           "sandwich": run_sandwich, "herbort": run_herbort, "fridman": run_fridman,
           "stability": run_stability, "corner": run_corner}


# ---------------------------------------------------------------------------
# reports


def version_string():
    """git-describe-style version, falling back to the package version."""
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always"], capture_output=True,
                             text=True, cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x) + 0.0  # no "-0" in reports
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return format(x, ".17g")
    if isinstance(x, (complex, np.complexfloating)):
        x = complex(x) + 0.0
        return f"{format(x.real, '.17g')}{'+' if x.imag >= 0 or math.isnan(x.imag) else '-'}" \
               f"{format(abs(x.imag), '.17g')}j"
    if isinstance(x, np.ndarray):
        return " ".join(_fmt(v) for v in x.ravel())
    if x is None:
        return ""
    return str(x)


def _jsonable(x):
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, (complex, np.complexfloating)):
        return [_jsonable(x.real), _jsonable(x.imag)]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.ravel()]
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _columns(rows):
    cols = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    return cols


def render_csv(rows):
    if not rows:
        raise PreconditionError("no rows to report")
    cols = _columns(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def render_json(rows, config=None, status=None):
    if not rows:
        raise PreconditionError("no rows to report")
    from .scaling_engine import dumps17
    doc = {"version": version_string(), "config": _jsonable(config or {}),
           "status": status or "ok", "columns": _columns(rows), "rows": _jsonable(rows)}
    return dumps17(doc)


def emit_report(rows, path, fmt="csv", config=None, status=None):
    """Write the report; the JSON summary carries the config echo and version."""
    path = Path(path)
    text = render_csv(rows) if fmt == "csv" else render_json(rows, config, status)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


@dataclass
class RunResult:
    rows: list
    exit_code: int
    message: str
    wall_time: float
    files: list = field(default_factory=list)


def run_experiment(cfg):
    """Run one experiment; exit code 0 ok, 2 invariant/precondition failure, 3 budget."""
    clock = _Clock(cfg.budget)
    rows, code, msg = [], EXIT_OK, "ok"
    try:
        cfg.validate()
        D = parse_domain_spec(cfg.domain)
        rows = DRIVERS[cfg.kind](cfg, D, clock)
    except (BudgetExhaustedError, NonConvergenceError) as e:
        code, msg, rows = EXIT_BUDGET, str(e), list(clock.rows)
    except HolokitError as e:
        code, msg, rows = EXIT_ASSERT, str(e), list(clock.rows)
    wall = time.perf_counter() - clock.t0
    res = RunResult(rows, code, msg, wall)
    if cfg.out and rows:
        stem = Path(cfg.out)
        status = "ok" if code == EXIT_OK else f"aborted ({code}): {msg}"
        res.files.append(emit_report(rows, stem.with_suffix(".csv"), "csv"))
        res.files.append(emit_report(rows, stem.with_suffix(".json"), "json", cfg.echo(), status))
        tpath = stem.with_suffix(".timing.csv")
        tpath.write_text(f"kind,rows,wall_time_s\n{cfg.kind},{len(rows)},{wall:.3f}\n")
        res.files.append(tpath)
    return res
