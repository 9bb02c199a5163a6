"""Scenario runner and acceptance suites for the index workbench.

A scenario is a JSON object naming a verification run:

    {
      "name": "classical_rr_c1",
      "seed": 7,
      "grid_n": 16,
      "algebra": {"blocks": [1]},
      "trace": "normalized",
      "bundle": {"kind": "line", "chern": 1},
      "operator": "dolbeault",
      "tolerances": {"index": 1e-6},
      "expected": {
        "analytic_index": {"value": 1, "provenance": "..."}
      }
    }

Optional blocks extend the run: "cover" ({"group": "Z/3", "axis": "x"})
lifts the operator to a finite cyclic cover and reports covering-trace and
delocalized index sums, "retraction" ({"count": 20, "delta": 0.05}) exercises
the projection retraction at the configured perturbation size.  Every entry
under "expected" carries a "value" and a nonempty "provenance" string saying
where the number comes from; entries are checked against the computed report
and all mismatches are listed, not just the first.

Reports are deterministic: the same config and seed produce byte-identical
JSON (keys sorted, complex numbers as [re, im] pairs, no timestamps).
Parallelism across independent sub-computations never exceeds the
NCINDEX_THREADS environment variable (default 1, which keeps run order and
BLAS behavior boring).

Exit codes: 0 all expectations met, 1 an expectation failed or the spectrum
had no usable gap, 2 the config was malformed (the diagnostic names the
offending field).

The `suite` command runs the acceptance criteria and prints one pass/fail
line per criterion; `all` is the full gate, the named suites are subsets.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources

import numpy as np

from ._errors import (DegenerateSpectrumError, RetractionUndefinedError,
                      StructureError)
from .algebra import (AlgebraElement, AlgebraSpec, TraceFunctional,
                      apply_trace, canonical_group_trace, center_valued_trace,
                      delocalized_trace, group_algebra, group_from_label,
                      matrix_algebra, normalized_trace, scalar_trace,
                      spec_from_config)
from .bundle import (BundleSpec, Monodromy, automorphy_bundle, curvature,
                     flat_bundle, line_bundle, projection_overlap,
                     projection_residual, random_connection,
                     random_endomorphism_field, random_projection_field,
                     resample_bundle, retract_projection)
from .chern import (ch_tau, closedness_residual, connection_independence_gap,
                    integrated)
from .cover import (CoverSpec, cover_from_deck, cover_kernel_data,
                    cyclic_cover, l2_index, lift_operator,
                    twisted_base_bundle)
from .forms import Grid
from .gns import (commutant, extend_map, extended_trace_value, l2_free)
from .hilbert_module import (ModuleMap, ProjectiveModule, class_of, dim_tau,
                             ev_endomorphism, fredholm_index, module_norms,
                             polar_decomposition)
from .spectral import (analytic_index, assemble_dolbeault, index_report,
                       k_theory_index, kernel_data, _json_value)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2

SCALARS = matrix_algebra(1)


class ConfigError(Exception):
    """Malformed scenario config; `field` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


# ---------------------------------------------------------------------------
# scenario parsing
# ---------------------------------------------------------------------------

_TRACE_NAMES = ("normalized", "canonical", "center")
_REPORT_FIELDS = ("analytic_index", "topological_index", "kernel_dim_t",
                  "cokernel_dim_t", "gap_ratio", "discrepancy")
_COVER_FIELDS = ("l2_index", "delocalized_index", "plain_cover_index")


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    grid_n: int
    algebra: AlgebraSpec
    trace_cfg: object
    bundle_cfg: Mapping
    operator: str
    cover_cfg: Mapping | None
    retraction_cfg: Mapping | None
    tolerances: Mapping[str, float]
    expected: Mapping[str, Mapping]
    description: str


def _entry(cfg: Mapping, key: str, kinds, path: str, default=None,
           required: bool = True):
    if key not in cfg:
        if required:
            raise ConfigError(f"{path}{key}", "missing required field")
        return default
    value = cfg[key]
    if kinds is not None and not isinstance(value, kinds):
        names = getattr(kinds, "__name__", None) or "/".join(
            k.__name__ for k in kinds)
        raise ConfigError(f"{path}{key}", f"expected {names}, got "
                          f"{type(value).__name__}")
    return value


def parse_scenario(cfg: Mapping) -> Scenario:
    """Validate a raw config dict, resolving references and tolerances."""
    if not isinstance(cfg, Mapping):
        raise ConfigError("<root>", "scenario config must be a JSON object")
    name = _entry(cfg, "name", str, "")
    seed = _entry(cfg, "seed", int, "")
    grid_n = _entry(cfg, "grid_n", int, "")
    if grid_n < 8 or grid_n % 2:
        raise ConfigError("grid_n", "grid resolution must be even and >= 8")

    alg_cfg = _entry(cfg, "algebra", Mapping, "")
    try:
        spec = spec_from_config(alg_cfg)
    except (StructureError, ValueError, TypeError, KeyError) as err:
        raise ConfigError("algebra", str(err))

    trace_cfg = _entry(cfg, "trace", (str, Mapping), "")
    if isinstance(trace_cfg, str):
        if trace_cfg not in _TRACE_NAMES:
            raise ConfigError("trace", f"unknown trace {trace_cfg!r}; choose "
                              f"one of {_TRACE_NAMES} or a scalar weights "
                              "object")
    else:
        kind = _entry(trace_cfg, "kind", str, "trace.")
        if kind != "scalar":
            raise ConfigError("trace.kind", "only named traces and scalar "
                              "weight vectors are accepted here")
        weights = _entry(trace_cfg, "weights", list, "trace.")
        if len(weights) != len(spec.blocks):
            raise ConfigError("trace.weights", "one weight per algebra block")

    bundle_cfg = _entry(cfg, "bundle", Mapping, "")
    kind = _entry(bundle_cfg, "kind", str, "bundle.")
    if kind not in ("line", "flat"):
        raise ConfigError("bundle.kind", f"unknown bundle kind {kind!r}")
    if kind == "line" and spec.blocks != (1,):
        raise ConfigError("bundle.kind", "line bundles live over the scalar "
                          "algebra; set algebra to {\"blocks\": [1]}")
    _entry(bundle_cfg, "chern", int, "bundle.", default=0, required=False)
    if kind == "flat":
        mono = _entry(bundle_cfg, "monodromy", (str, Mapping), "bundle.")
        if isinstance(mono, str):
            if mono not in ("identity", "random"):
                raise ConfigError("bundle.monodromy", "named monodromies are "
                                  "'identity' and 'random'")
        else:
            g = _entry(mono, "translation", int, "bundle.monodromy.")
            if spec.group is None:
                raise ConfigError("bundle.monodromy.translation",
                                  "translation monodromy needs a group "
                                  "algebra")
            if not 0 <= g < spec.group.order:
                raise ConfigError("bundle.monodromy.translation",
                                  "group element out of range")
    dev = _entry(bundle_cfg, "deviation", Mapping, "bundle.", default=None,
                 required=False)
    if dev is not None:
        scale = _entry(dev, "scale", (int, float), "bundle.deviation.")
        if not scale > 0:
            raise ConfigError("bundle.deviation.scale", "must be positive")
        _entry(dev, "max_mode", int, "bundle.deviation.", default=2,
               required=False)

    operator = _entry(cfg, "operator", str, "", default="dolbeault",
                      required=False)
    if operator != "dolbeault":
        raise ConfigError("operator", f"unknown operator kind {operator!r}")

    cover_cfg = _entry(cfg, "cover", Mapping, "", default=None,
                       required=False)
    if cover_cfg is not None:
        axis = _entry(cover_cfg, "axis", str, "cover.", default="x",
                      required=False)
        if axis != "x":
            raise ConfigError("cover.axis", "only x-direction covers are "
                              "realized on the rectangular lattice")
        _entry(cover_cfg, "group", str, "cover.")

    retr_cfg = _entry(cfg, "retraction", Mapping, "", default=None,
                      required=False)
    if retr_cfg is not None:
        count = _entry(retr_cfg, "count", int, "retraction.")
        if count <= 0:
            raise ConfigError("retraction.count", "must be positive")
        delta = _entry(retr_cfg, "delta", (int, float), "retraction.")
        if not 0 < delta < 0.1:
            raise ConfigError("retraction.delta", "perturbation size must "
                              "sit in (0, 0.1)")

    tol_cfg = _entry(cfg, "tolerances", Mapping, "", default={},
                     required=False)
    tolerances = {"index": 1e-6, "delocalized": 1e-6}
    for key, value in tol_cfg.items():
        if not isinstance(value, (int, float)) or not value > 0:
            raise ConfigError(f"tolerances.{key}", "tolerances must be "
                              "positive numbers")
        tolerances[str(key)] = float(value)

    expected = _entry(cfg, "expected", Mapping, "", default={},
                      required=False)
    for field, entry in expected.items():
        path = f"expected.{field}"
        if field not in _REPORT_FIELDS + _COVER_FIELDS:
            raise ConfigError(path, "not a report quantity; known fields: "
                              + ", ".join(_REPORT_FIELDS + _COVER_FIELDS))
        if field in _COVER_FIELDS and cover_cfg is None:
            raise ConfigError(path, "needs a cover block in the scenario")
        if not isinstance(entry, Mapping):
            raise ConfigError(path, "each expectation is an object with "
                              "'value' and 'provenance'")
        _entry(entry, "value", None, path + ".")
        prov = _entry(entry, "provenance", str, path + ".")
        if not prov.strip():
            raise ConfigError(path + ".provenance", "provenance must be a "
                              "nonempty string saying where the value comes "
                              "from")

    return Scenario(
        name=name, seed=seed, grid_n=grid_n, algebra=spec,
        trace_cfg=trace_cfg, bundle_cfg=bundle_cfg, operator=operator,
        cover_cfg=cover_cfg, retraction_cfg=retr_cfg, tolerances=tolerances,
        expected=expected,
        description=str(cfg.get("description", "")))


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _build_trace(sc: Scenario) -> TraceFunctional:
    try:
        if sc.trace_cfg == "normalized":
            return normalized_trace(sc.algebra)
        if sc.trace_cfg == "canonical":
            return canonical_group_trace(sc.algebra)
        if sc.trace_cfg == "center":
            return center_valued_trace(sc.algebra)
        return scalar_trace(sc.algebra, tuple(sc.trace_cfg["weights"]))
    except StructureError as err:
        raise ConfigError("trace", str(err))


def _translation_monodromy(spec: AlgebraSpec, g: int) -> Monodromy:
    u = ModuleMap.from_entries([[AlgebraElement.delta(spec, g)]])
    return Monodromy(u, ModuleMap.identity(spec, 1))


def _commuting_monodromy(spec: AlgebraSpec,
                         rng: np.random.Generator) -> Monodromy:
    """Random commuting unitary pair, diagonalized in one common frame."""
    bu, bv = [], []
    for n in spec.blocks:
        h = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        w, _ = np.linalg.qr(h)
        bu.append(w @ np.diag(np.exp(2j * np.pi * rng.uniform(size=n)))
                  @ np.conj(w.T))
        bv.append(w @ np.diag(np.exp(2j * np.pi * rng.uniform(size=n)))
                  @ np.conj(w.T))
    return Monodromy(ModuleMap.from_flat_blocks(spec, 1, 1, bu),
                     ModuleMap.from_flat_blocks(spec, 1, 1, bv))


def _build_bundle(sc: Scenario, grid: Grid,
                  rng: np.random.Generator) -> BundleSpec:
    cfg = sc.bundle_cfg
    chern = int(cfg.get("chern", 0))
    if cfg["kind"] == "line":
        bare = line_bundle(grid, chern)
    else:
        mono = cfg["monodromy"]
        if mono == "identity":
            mono = Monodromy.identity(sc.algebra, 1)
        elif mono == "random":
            mono = _commuting_monodromy(sc.algebra, rng)
        else:
            mono = _translation_monodromy(sc.algebra, mono["translation"])
        bare = automorphy_bundle(grid, mono, chern)
    dev = cfg.get("deviation")
    if dev is None:
        return bare
    omega = random_connection(bare, rng, max_mode=int(dev.get("max_mode", 2)),
                              scale=float(dev["scale"]))
    return automorphy_bundle(grid, bare.monodromy, chern, deviation=omega)


def _build_cover(sc: Scenario, grid: Grid) -> CoverSpec:
    try:
        group = group_from_label(sc.cover_cfg["group"])
        return cover_from_deck(grid, group, 1)
    except StructureError as err:
        raise ConfigError("cover.group", str(err))


# ---------------------------------------------------------------------------
# scenario execution
# ---------------------------------------------------------------------------

def _expected_as_array(value, width: int) -> np.ndarray:
    """Expected values: scalars, [re, im] pairs, or lists of either.

    A two-element numeric list is a complex number when the computed quantity
    is a scalar and a component pair when it is a vector.
    """
    def one(v):
        if isinstance(v, (list, tuple)) and len(v) == 2 \
                and all(isinstance(x, (int, float)) for x in v):
            return complex(v[0], v[1])
        return complex(v)
    if isinstance(value, (list, tuple)):
        if width == 1:
            return np.array([one(value)])
        return np.array([one(v) for v in value])
    return np.array([one(value)])


def _check_expectations(sc: Scenario, actuals: Mapping[str, object]) -> list:
    rows = []
    for field in sorted(sc.expected):
        entry = sc.expected[field]
        actual = np.atleast_1d(np.asarray(actuals[field], dtype=complex))
        tol = float(entry.get("tolerance", sc.tolerances["index"]))
        try:
            want = _expected_as_array(entry["value"], actual.size)
            residual = (float(np.max(np.abs(actual - want)))
                        if want.shape == actual.shape else float("inf"))
        except (TypeError, ValueError):
            residual = float("inf")
        rows.append({
            "field": field,
            "expected": _json_value(entry["value"]),
            "actual": _json_value(actuals[field]),
            "residual": residual,
            "tolerance": tol,
            "ok": bool(residual <= tol),
            "provenance": entry["provenance"],
        })
    return rows


def run_scenario(cfg: Mapping, csv_dir: str | None = None):
    """Execute one scenario; returns (report dict, all expectations met)."""
    sc = parse_scenario(cfg)
    rng = np.random.default_rng(sc.seed)
    grid = Grid("T2", sc.grid_n)
    trace = _build_trace(sc)
    bundle = _build_bundle(sc, grid, rng)

    rep = index_report(bundle, trace)
    ch = ch_tau(bundle, trace)
    chern_part = {
        "closedness_residual": closedness_residual(ch),
        "curvature_sup_norm": curvature(bundle).sup_norm(),
        "integrated_degree_2": _json_value(integrated(ch)),
    }
    if csv_dir is not None:
        os.makedirs(csv_dir, exist_ok=True)
        ch.export_csv(os.path.join(csv_dir, f"{sc.name}_chern.csv"))

    actuals = {
        "analytic_index": rep.analytic_index,
        "topological_index": rep.topological_index,
        "kernel_dim_t": rep.kernel_dim_t,
        "cokernel_dim_t": rep.cokernel_dim_t,
        "gap_ratio": rep.gap_ratio,
        "discrepancy": rep.discrepancy,
    }

    cover_part = None
    if sc.cover_cfg is not None:
        cover = _build_cover(sc, grid)
        try:
            lifted = lift_operator(assemble_dolbeault(bundle), cover)
        except StructureError as err:
            raise ConfigError("cover", str(err))
        kd = cover_kernel_data(lifted)
        group_spec = cover.group_spec
        l2 = l2_index(lifted, canonical_group_trace(group_spec), data=kd)
        deloc = {
            str(g): l2_index(lifted, delocalized_trace(group_spec, g),
                             data=kd)
            for g in range(1, cover.fold)
        }
        plain = kd.kernel_dim - kd.cokernel_dim
        cover_part = {
            "group": sc.cover_cfg["group"],
            "fold": cover.fold,
            "l2_index": _json_value(l2),
            "plain_index": plain,
            "plain_over_fold": _json_value(plain / cover.fold),
            "delocalized": {k: _json_value(v) for k, v in deloc.items()},
        }
        actuals["l2_index"] = l2
        actuals["plain_cover_index"] = plain
        actuals["delocalized_index"] = max(
            (abs(v) for v in deloc.values()), default=0.0)

    retr_part = None
    if sc.retraction_cfg is not None:
        count = sc.retraction_cfg["count"]
        delta = float(sc.retraction_cfg["delta"])
        worst_residual, worst_overlap, failed = 0.0, float("inf"), 0
        for _ in range(count):
            module = _random_projection(sc.algebra, 2, rng)
            field = random_projection_field(module, grid, rng)
            pert = random_endomorphism_field(field, rng, hermitian=True)
            pert = (delta / pert.sup_norm()) * pert
            try:
                out = retract_projection(field.eps + pert,
                                         reference=field.eps)
            except RetractionUndefinedError:
                failed += 1
                continue
            worst_residual = max(worst_residual,
                                 projection_residual(out.eps))
            worst_overlap = min(worst_overlap,
                                projection_overlap(out.eps, field.eps))
        retr_part = {
            "count": count,
            "delta": delta,
            "failed": failed,
            "max_idempotency_residual": worst_residual,
            "min_image_overlap": worst_overlap,
        }

    expectations = _check_expectations(sc, actuals)
    ok = all(row["ok"] for row in expectations)
    report = {
        "name": sc.name,
        "description": sc.description,
        "seed": sc.seed,
        "grid_n": sc.grid_n,
        "algebra": dict(cfg["algebra"]),
        "trace": sc.trace_cfg if isinstance(sc.trace_cfg, str)
        else dict(sc.trace_cfg),
        "bundle": dict(sc.bundle_cfg),
        "index": rep.to_dict(),
        "chern": chern_part,
        "expectations": expectations,
        "ok": ok,
    }
    if cover_part is not None:
        report["cover"] = cover_part
    if retr_part is not None:
        report["retraction"] = retr_part
    return report, ok


def report_text(report: Mapping) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# shared randomized constructions
# ---------------------------------------------------------------------------

def _random_projection(spec: AlgebraSpec, n: int, rng,
                       rank_hint: float = 0.5) -> ProjectiveModule:
    # spectral cut of a random hermitian stays inside matrices over A
    h = ModuleMap.random(spec, n, n, rng)
    h = h + h.adjoint()
    blocks = []
    for b in h.blocks:
        w, v = np.linalg.eigh(b)
        keep = v[:, w > np.quantile(w, 1.0 - rank_hint)]
        blocks.append(keep @ keep.conj().T)
    return ProjectiveModule(ModuleMap.from_flat_blocks(spec, n, n, blocks))


def _thread_count() -> int:
    raw = os.environ.get("NCINDEX_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _parallel_map(fn: Callable, items: Sequence) -> list:
    """Order-preserving map, capped at NCINDEX_THREADS workers."""
    items = list(items)
    workers = min(_thread_count(), max(1, len(items)))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# acceptance criteria
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CriterionResult:
    number: int
    label: str
    ok: bool
    detail: str
    failures: tuple
    seconds: float

    @property
    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return (f"criterion {self.number} [{status}] {self.label}: "
                f"{self.detail}")


def _finish(number: int, label: str, failures: list, detail: str,
            t0: float) -> CriterionResult:
    return CriterionResult(number, label, not failures, detail,
                           tuple(failures), time.perf_counter() - t0)


def criterion_classical() -> CriterionResult:
    """Scalar line bundles: analytic index is the Chern number and agrees
    with the curvature integral to near rounding."""
    t0 = time.perf_counter()
    grid = Grid("T2", 24)

    def one(c):
        start = time.perf_counter()
        rep = index_report(line_bundle(grid, c))
        return c, rep, time.perf_counter() - start

    failures, worst_round, worst_gap, slowest = [], 0.0, 0.0, 0.0
    for c, rep, dt in _parallel_map(one, range(-3, 4)):
        a = complex(rep.analytic_index)
        rounded = round(a.real)
        resid = abs(a - rounded)
        worst_round = max(worst_round, resid)
        worst_gap = max(worst_gap, rep.discrepancy)
        slowest = max(slowest, dt)
        if rounded != c:
            failures.append(f"c={c}: analytic index rounds to {rounded}")
        if resid >= 1e-6:
            failures.append(f"c={c}: rounding residual {resid:.3e} >= 1e-6")
        if rep.discrepancy >= 1e-10:
            failures.append(f"c={c}: analytic/topological gap "
                            f"{rep.discrepancy:.3e} >= 1e-10")
        if dt >= 30.0:
            failures.append(f"c={c}: took {dt:.1f}s, budget 30s")
    detail = (f"c in -3..3 at n=24, rounding residual <= {worst_round:.1e}, "
              f"route gap <= {worst_gap:.1e}, slowest {slowest:.1f}s")
    return _finish(1, "classical line bundle indices", failures, detail, t0)


def criterion_flat_twist() -> CriterionResult:
    """Flat twists scale the index by the trace dimension of the fiber for
    three coefficient algebras and three monodromies each."""
    t0 = time.perf_counter()
    grid = Grid("T2", 12)
    z3 = group_algebra("Z/3")
    m2 = matrix_algebra(2)
    m21 = matrix_algebra(2, 1)
    setups = []
    for tag, spec, monos in (
        ("M2", m2, [Monodromy.identity(m2, 1),
                    _commuting_monodromy(m2, np.random.default_rng(5)),
                    _commuting_monodromy(m2, np.random.default_rng(6))]),
        ("C[Z/3]", z3, [Monodromy.identity(z3, 1),
                        _translation_monodromy(z3, 1),
                        _translation_monodromy(z3, 2)]),
        ("M2+C", m21, [Monodromy.identity(m21, 1),
                       _commuting_monodromy(m21, np.random.default_rng(7)),
                       _commuting_monodromy(m21, np.random.default_rng(8))]),
    ):
        t = normalized_trace(spec)
        dim = dim_tau(t, class_of(ProjectiveModule.free(spec, 1)))
        for j, mono in enumerate(monos):
            for c in range(-2, 3):
                setups.append((tag, j, spec, t, dim, mono, c))

    def one(setup):
        tag, j, spec, t, dim, mono, c = setup
        op = assemble_dolbeault(automorphy_bundle(grid, mono, c))
        idx = analytic_index(op, t)
        return tag, j, c, abs(idx - c * complex(dim))

    failures, worst = [], 0.0
    for tag, j, c, resid in _parallel_map(one, setups):
        worst = max(worst, resid)
        if resid >= 1e-6:
            failures.append(f"{tag} monodromy {j} c={c}: "
                            f"|index - c dim_tau| = {resid:.3e} >= 1e-6")
    detail = (f"{len(setups)} twists over M2, C[Z/3], M2+C, "
              f"residual <= {worst:.1e}")
    return _finish(2, "flat twist index scaling", failures, detail, t0)


def criterion_cover() -> CriterionResult:
    """Cyclic covers: the covering-trace index of the lifted operator, the
    base index, and the flat-twist index agree; delocalized sums vanish."""
    t0 = time.perf_counter()
    grid = Grid("T2", 12)
    pairs = [(k, c) for k in (2, 3, 4) for c in range(-2, 3)]

    def one(pair):
        k, c = pair
        start = time.perf_counter()
        base = line_bundle(grid, c)
        base_idx = analytic_index(assemble_dolbeault(base),
                                  normalized_trace(SCALARS))
        cov = cyclic_cover(grid, k)
        lifted = lift_operator(assemble_dolbeault(base), cov)
        kd = cover_kernel_data(lifted)
        gspec = cov.group_spec
        l2 = l2_index(lifted, canonical_group_trace(gspec), data=kd)
        flat = analytic_index(assemble_dolbeault(twisted_base_bundle(cov,
                                                                     base)),
                              canonical_group_trace(gspec))
        deloc = max(abs(l2_index(lifted, delocalized_trace(gspec, g),
                                 data=kd))
                    for g in range(1, k))
        return k, c, base_idx, l2, flat, deloc, time.perf_counter() - start

    failures, worst_resid, worst_deloc, slowest = [], 0.0, 0.0, 0.0
    for k, c, base_idx, l2, flat, deloc, dt in _parallel_map(one, pairs):
        rounded = {round(v.real) for v in (base_idx, l2, flat)}
        resid = max(abs(v - round(v.real)) for v in (base_idx, l2, flat))
        worst_resid = max(worst_resid, resid)
        worst_deloc = max(worst_deloc, deloc)
        slowest = max(slowest, dt)
        if len(rounded) != 1:
            failures.append(f"k={k} c={c}: indices disagree after rounding "
                            f"(base {base_idx:.6f}, l2 {l2:.6f}, "
                            f"flat {flat:.6f})")
        if resid >= 1e-6:
            failures.append(f"k={k} c={c}: index residual {resid:.3e}")
        if deloc >= 1e-6:
            failures.append(f"k={k} c={c}: delocalized sum {deloc:.3e}")
        if dt >= 120.0:
            failures.append(f"k={k} c={c}: took {dt:.1f}s, budget 120s")
    detail = (f"k in 2..4, c in -2..2 at n=12, index residual <= "
              f"{worst_resid:.1e}, delocalized <= {worst_deloc:.1e}, "
              f"slowest {slowest:.1f}s")
    return _finish(3, "finite cover trace indices", failures, detail, t0)


def criterion_center() -> CriterionResult:
    """Center-valued index on M2+C: the analytic tuple matches the traced
    K-theory class, and trace vectors separate rank vectors."""
    t0 = time.perf_counter()
    spec = matrix_algebra(2, 1)
    tc = center_valued_trace(spec)
    grid = Grid("T2", 12)
    failures, worst = [], 0.0
    for c in (-1, 2):
        op = assemble_dolbeault(
            automorphy_bundle(grid, Monodromy.identity(spec, 1), c))
        kd = kernel_data(op)
        direct = np.asarray(analytic_index(op, tc, data=kd), dtype=complex)
        traced = np.asarray(dim_tau(tc, k_theory_index(op, data=kd)),
                            dtype=complex)
        gap = float(np.max(np.abs(direct - traced)))
        worst = max(worst, gap)
        if gap >= 1e-8:
            failures.append(f"c={c}: analytic vs K-theory route gap "
                            f"{gap:.3e} >= 1e-8")

    rng = np.random.default_rng(20)
    mods = [_random_projection(spec, 2 + i % 2, rng,
                               rank_hint=(0.3, 0.5, 0.7)[i % 3])
            for i in range(50)]
    ranks = [tuple(int(np.linalg.matrix_rank(b, tol=1e-8))
                   for b in m.projection.blocks) for m in mods]
    traces = [np.asarray(dim_tau(tc, class_of(m)), dtype=complex)
              for m in mods]
    mismatches = 0
    for i in range(len(mods)):
        for j in range(i + 1, len(mods)):
            same_trace = bool(np.max(np.abs(traces[i] - traces[j])) < 1e-8)
            same_rank = ranks[i] == ranks[j]
            if same_trace != same_rank:
                mismatches += 1
                if len(failures) < 8:
                    failures.append(
                        f"projections {i},{j}: trace vectors "
                        f"{'agree' if same_trace else 'differ'} but rank "
                        f"vectors {ranks[i]} vs {ranks[j]}")
    detail = (f"route gap <= {worst:.1e} on c=-1,2; 50 projections, "
              f"{mismatches} trace/rank separation mismatches")
    return _finish(4, "center valued index", failures, detail, t0)


def criterion_chern_forms() -> CriterionResult:
    """Character forms are closed, connection-independent in cohomology, and
    reduce to the trace dimension for flat bundles."""
    t0 = time.perf_counter()
    grid = Grid("T2", 12)
    z3 = group_algebra("Z/3")
    m2 = matrix_algebra(2)
    families = [
        ("line c=2", SCALARS, Monodromy.identity(SCALARS, 1), 2,
         normalized_trace(SCALARS)),
        ("M2 flat c=1", m2,
         _commuting_monodromy(m2, np.random.default_rng(30)), 1,
         normalized_trace(m2)),
        ("C[Z/3] translation c=-1", z3, _translation_monodromy(z3, 1), -1,
         canonical_group_trace(z3)),
    ]
    failures, worst_closed, worst_gap = [], 0.0, 0.0
    for tag, spec, mono, c, t in families:
        bare = automorphy_bundle(grid, mono, c)
        rng = np.random.default_rng(31)
        for trial in range(20):
            b1 = automorphy_bundle(grid, mono, c,
                                   deviation=random_connection(bare, rng,
                                                               scale=0.4))
            b2 = automorphy_bundle(grid, mono, c,
                                   deviation=random_connection(bare, rng,
                                                               scale=0.4))
            for b in (b1, b2):
                closed = closedness_residual(ch_tau(b, t))
                bound = 1e-8 * curvature(b).sup_norm()
                worst_closed = max(worst_closed, closed / bound * 1e-8)
                if closed >= bound:
                    failures.append(f"{tag} trial {trial}: closedness "
                                    f"{closed:.3e} >= 1e-8 |Omega|")
            gap = connection_independence_gap(b1, b2, t)
            worst_gap = max(worst_gap, gap)
            if gap >= 1e-8:
                failures.append(f"{tag} trial {trial}: connection gap "
                                f"{gap:.3e} >= 1e-8")
        flat = flat_bundle(grid, mono)
        ch = ch_tau(flat, t)
        dim = complex(dim_tau(t, class_of(ProjectiveModule.free(spec, 1))))
        deg0 = float(np.max(np.abs(ch.degree(0) - dim)))
        deg2 = float(np.max(np.abs(ch.degree(2))))
        if deg0 >= 1e-12:
            failures.append(f"{tag} flat: degree-0 part off by {deg0:.3e}")
        if deg2 >= 1e-10:
            failures.append(f"{tag} flat: degree-2 part {deg2:.3e} >= 1e-10")
    detail = (f"3 families x 20 connection pairs, closedness <= "
              f"{worst_closed:.1e} relative, connection gap <= "
              f"{worst_gap:.1e}")
    return _finish(5, "chern form calculus", failures, detail, t0)


def criterion_retraction() -> CriterionResult:
    """Perturbed projection fields retract to exact projections with the
    same image."""
    t0 = time.perf_counter()
    grid = Grid("T2", 8)
    specs = [matrix_algebra(2), matrix_algebra(2, 1), group_algebra("Z/3"),
             group_algebra("Z/4")]
    rng = np.random.default_rng(21)
    failures, worst_resid, worst_overlap = [], 0.0, float("inf")
    for trial in range(100):
        spec = specs[trial % len(specs)]
        module = _random_projection(spec, 2, rng,
                                    rank_hint=(0.4, 0.6)[trial % 2])
        field = random_projection_field(module, grid, rng)
        pert = random_endomorphism_field(field, rng, hermitian=True)
        pert = (0.09 / pert.sup_norm()) * pert
        try:
            out = retract_projection(field.eps + pert, reference=field.eps)
        except RetractionUndefinedError as err:
            failures.append(f"trial {trial}: retraction refused: {err}")
            continue
        resid = projection_residual(out.eps)
        overlap = projection_overlap(out.eps, field.eps)
        worst_resid = max(worst_resid, resid)
        worst_overlap = min(worst_overlap, overlap)
        if resid >= 1e-12:
            failures.append(f"trial {trial}: idempotency residual "
                            f"{resid:.3e} >= 1e-12")
        if overlap <= 0.5:
            failures.append(f"trial {trial}: image overlap {overlap:.3f} "
                            "<= 0.5")
    detail = (f"100 perturbations at delta 0.09, idempotency <= "
              f"{worst_resid:.1e}, overlap >= {worst_overlap:.3f}")
    return _finish(6, "projection retraction", failures, detail, t0)


def criterion_modules() -> CriterionResult:
    """Module, trace, and GNS toolkit invariants at randomized scale."""
    t0 = time.perf_counter()
    failures = []
    specs = [matrix_algebra(2), matrix_algebra(2, 1), group_algebra("Z/3"),
             group_algebra("Z/4")]

    rng = np.random.default_rng(40)
    worst = 0.0
    for trial in range(200):
        spec = specs[trial % len(specs)]
        a = AlgebraElement.random(spec, rng)
        n = a.norm()
        resid = abs((a.adjoint() * a).norm() - n * n) / max(1.0, n * n)
        worst = max(worst, resid)
        if resid >= 1e-12:
            failures.append(f"C* identity trial {trial}: relative residual "
                            f"{resid:.3e}")
    cstar = worst

    worst = 0.0
    for trial in range(50):
        spec = specs[trial % len(specs)]
        n = 2 + trial % 3
        phi = ModuleMap.random(spec, n, n, rng)
        lo, mid = module_norms(phi)
        if not (lo <= mid + 1e-10 and mid <= np.sqrt(n) * lo + 1e-10):
            failures.append(f"norm bounds trial {trial}: "
                            f"{lo:.6f}, {mid:.6f}, n={n}")

    worst = 0.0
    for trial in range(20):
        spec = specs[trial % len(specs)]
        a = ModuleMap.random(spec, 2, 2, rng)
        b = ModuleMap.random(spec, 2, 2, rng)
        resid = float(np.max(np.abs(np.array(ev_endomorphism(a @ b))
                                    - np.array(ev_endomorphism(b @ a)))))
        worst = max(worst, resid)
        if resid >= 1e-10:
            failures.append(f"ev trace trial {trial}: residual {resid:.3e}")
    evres = worst

    worst = 0.0
    for trial in range(40):
        spec = specs[trial % len(specs)]
        phi = ModuleMap.random(spec, 2, 3, rng)
        u, pos = polar_decomposition(phi)
        resid = (phi - u @ pos).norm() / max(1.0, phi.norm())
        worst = max(worst, resid)
        if resid >= 1e-10:
            failures.append(f"polar trial {trial}: residual {resid:.3e}")
    polar = worst

    count, oracle_bad = 0, 0
    rng_f = np.random.default_rng(41)
    while count < 200:
        spec = specs[count % len(specs)]
        n = 2 + count % 2
        p = _random_projection(spec, n, rng_f, rank_hint=0.6)
        q = _random_projection(spec, n, rng_f, rank_hint=0.4)
        phi = q.projection @ ModuleMap.random(spec, n, n, rng_f) \
            @ p.projection
        try:
            idx = fredholm_index(phi, domain=p, codomain=q)
        except DegenerateSpectrumError:
            continue  # random compression happened to be nearly singular
        oracle = tuple(
            int(np.linalg.matrix_rank(pb, tol=1e-8))
            - int(np.linalg.matrix_rank(qb, tol=1e-8))
            for pb, qb in zip(p.projection.blocks, q.projection.blocks))
        if idx.ranks != oracle:
            oracle_bad += 1
            if oracle_bad <= 5:
                failures.append(f"fredholm map {count}: index {idx.ranks} "
                                f"vs rank oracle {oracle}")
        count += 1

    for k in (2, 3, 4, 5):
        spec = group_algebra(f"Z/{k}")
        space = l2_free(spec, 1, canonical_group_trace(spec))
        found = len(commutant(space.right_action_matrices()))
        if found != k:
            failures.append(f"commutant of right regular C[Z/{k}]: "
                            f"dimension {found}, expected {k}")

    rng_b = np.random.default_rng(42)
    spec = matrix_algebra(2, 1)
    tau = normalized_trace(spec)
    space = l2_free(spec, 2, tau)
    f = ModuleMap.random(spec, 2, 2, rng_b)
    amb = np.kron(rng_b.standard_normal((2, 2))
                  + 1j * rng_b.standard_normal((2, 2)),
                  extend_map(f, space))
    base = extended_trace_value(tau, amb, space, hilbert_dim=2)
    worst = 0.0
    for _ in range(5):
        z = rng_b.standard_normal((2, 2)) + 1j * rng_b.standard_normal((2, 2))
        v, _ = np.linalg.qr(z)
        rot = np.kron(v, np.eye(space.dim))
        moved = extended_trace_value(tau, rot @ amb @ np.conj(rot.T), space,
                                     hilbert_dim=2)
        worst = max(worst, abs(base - moved))
    if worst >= 1e-10:
        failures.append(f"extended trace moved {worst:.3e} under a basis "
                        "rotation")
    basis = worst

    worst = 0.0
    for spec in (matrix_algebra(2), group_algebra("Z/3"),
                 matrix_algebra(2, 1)):
        tau = normalized_trace(spec)
        space = l2_free(spec, 1, tau)
        b = rng_b.standard_normal((3, 3)) + 1j * rng_b.standard_normal((3, 3))
        x = AlgebraElement.random(spec, rng_b)
        lift = extend_map(ModuleMap.from_entries([[x]]), space)
        val = extended_trace_value(tau, np.kron(b, lift), space,
                                   hilbert_dim=3)
        resid = abs(val - np.trace(b) * apply_trace(tau, x))
        worst = max(worst, resid)
        if resid >= 1e-10:
            failures.append(f"product formula over {spec.blocks}: residual "
                            f"{resid:.3e}")
    product = worst

    detail = (f"C* <= {cstar:.1e}, ev trace <= {evres:.1e}, polar <= "
              f"{polar:.1e}, 200 fredholm maps vs rank oracle, basis "
              f"independence <= {basis:.1e}, product formula <= "
              f"{product:.1e}")
    return _finish(7, "module and trace toolkit", failures, detail, t0)


def criterion_refinement() -> CriterionResult:
    """Doubling the grid leaves indices unchanged and moves the continuous
    quantities below 1e-8 for band-limited data."""
    t0 = time.perf_counter()
    z3 = group_algebra("Z/3")
    failures, worst = [], 0.0

    def compare(tag, rep_a, rep_b):
        nonlocal worst
        a1 = complex(rep_a.analytic_index)
        a2 = complex(rep_b.analytic_index)
        if round(a1.real) != round(a2.real):
            failures.append(f"{tag}: rounded index changed "
                            f"{round(a1.real)} -> {round(a2.real)}")
        for label, v1, v2 in (
            ("analytic", a1, a2),
            ("topological", complex(rep_a.topological_index),
             complex(rep_b.topological_index)),
        ):
            move = abs(v1 - v2)
            worst = max(worst, move)
            if move >= 1e-8:
                failures.append(f"{tag}: {label} index moved {move:.3e} "
                                ">= 1e-8 under refinement")

    cases = [
        ("line c=2", lambda n: line_bundle(Grid("T2", n), 2),
         normalized_trace(SCALARS)),
        ("flat C[Z/3] c=-1",
         lambda n: automorphy_bundle(Grid("T2", n),
                                     _translation_monodromy(z3, 1), -1),
         canonical_group_trace(z3)),
    ]
    for tag, build, t in cases:
        compare(tag, index_report(build(12), t), index_report(build(24), t))

    rng = np.random.default_rng(50)
    bare = line_bundle(Grid("T2", 12), 1)
    dev = random_connection(bare, rng, max_mode=2, scale=0.15)
    b12 = automorphy_bundle(Grid("T2", 12), bare.monodromy, 1, deviation=dev)
    compare("deviated line c=1", index_report(b12),
            index_report(resample_bundle(b12, 2)))

    l2_values = []
    for n in (12, 24):
        base = line_bundle(Grid("T2", n), 1)
        cov = cyclic_cover(Grid("T2", n), 2)
        lifted = lift_operator(assemble_dolbeault(base), cov)
        l2_values.append(l2_index(lifted,
                                  canonical_group_trace(cov.group_spec)))
    move = abs(l2_values[0] - l2_values[1])
    worst = max(worst, move)
    if round(l2_values[0].real) != round(l2_values[1].real):
        failures.append("cover l2 index changed under refinement")
    if move >= 1e-8:
        failures.append(f"cover l2 index moved {move:.3e} >= 1e-8")

    detail = (f"line, flat twist, band-limited deviation and a 2-fold cover "
              f"at n=12 vs 24, continuous drift <= {worst:.1e}")
    return _finish(8, "grid refinement stability", failures, detail, t0)


CRITERIA = (
    criterion_classical,
    criterion_flat_twist,
    criterion_cover,
    criterion_center,
    criterion_chern_forms,
    criterion_retraction,
    criterion_modules,
    criterion_refinement,
)

SUITES = {
    "all": (1, 2, 3, 4, 5, 6, 7, 8),
    "chern": (5, 6),
    "index": (1, 2, 4, 8),
    "cover": (3,),
    "modules": (7,),
}


def run_suite(name: str) -> list:
    """Run one named suite; returns the CriterionResult list in order."""
    if name not in SUITES:
        raise ConfigError("suite", f"unknown suite {name!r}; choose from "
                          + ", ".join(sorted(SUITES)))
    return [CRITERIA[num - 1]() for num in SUITES[name]]


# ---------------------------------------------------------------------------
# bundled scenarios and entry point
# ---------------------------------------------------------------------------

def bundled_scenarios() -> dict:
    """Name -> parsed config for the scenarios shipped with the package."""
    out = {}
    root = resources.files("ncindex").joinpath("scenarios")
    for item in sorted(root.iterdir(), key=lambda p: p.name):
        if item.name.endswith(".json"):
            out[item.name[:-5]] = json.loads(item.read_text())
    return out


def _cmd_run(args) -> int:
    if os.path.exists(args.scenario):
        try:
            with open(args.scenario) as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as err:
            print(f"config error: {args.scenario} is not valid JSON: {err}",
                  file=sys.stderr)
            return EXIT_CONFIG
    else:
        bundled = bundled_scenarios()
        if args.scenario not in bundled:
            print(f"config error: no file or bundled scenario named "
                  f"{args.scenario!r}; bundled: "
                  + ", ".join(sorted(bundled)), file=sys.stderr)
            return EXIT_CONFIG
        cfg = bundled[args.scenario]
    try:
        report, ok = run_scenario(cfg, csv_dir=args.csv_dir)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateSpectrumError as err:
        print(f"no usable spectral gap: {err}", file=sys.stderr)
        return EXIT_FAILED
    text = report_text(report)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if not ok:
        for row in report["expectations"]:
            if not row["ok"]:
                print(f"expectation failed: {row['field']} expected "
                      f"{row['expected']}, got {row['actual']} "
                      f"(residual {row['residual']:.3e}, tolerance "
                      f"{row['tolerance']:.1e})", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def _cmd_suite(args) -> int:
    results = run_suite(args.name)
    width = max(len(r.label) for r in results)
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        print(f"  {r.number}  {r.label:<{width}}  {status}  "
              f"{r.seconds:6.1f}s  {r.detail}")
        for line in r.failures:
            print(f"       - {line}")
    passed = sum(r.ok for r in results)
    print(f"{passed}/{len(results)} criteria passed ({args.name} suite)")
    return EXIT_OK if passed == len(results) else EXIT_FAILED


def _cmd_list(_args) -> int:
    for name, cfg in bundled_scenarios().items():
        desc = cfg.get("description", "")
        print(f"  {name}: {desc}" if desc else f"  {name}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ncindex",
        description="Index theorem workbench: scenario runs and acceptance "
                    "suites.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario and emit its JSON "
                                       "report")
    p_run.add_argument("scenario", help="path to a scenario JSON file, or "
                                        "the name of a bundled scenario")
    p_run.add_argument("--out", help="write the report to this file instead "
                                     "of stdout")
    p_run.add_argument("--csv-dir", help="export chern coefficient fields "
                                         "as CSV into this directory")
    p_run.set_defaults(func=_cmd_run)

    p_suite = sub.add_parser("suite", help="run an acceptance suite")
    p_suite.add_argument("name", choices=sorted(SUITES))
    p_suite.set_defaults(func=_cmd_suite)

    p_list = sub.add_parser("list", help="list bundled scenarios")
    p_list.set_defaults(func=_cmd_list)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
