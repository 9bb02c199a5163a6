"""Discretized circle and torus geometry for matrix-valued forms.

Fields are sampled on uniform periodic grids and differentiated spectrally,
so band-limited data is handled to machine precision and the integration
rule (plain Riemann sum times h^dim) is exact for it.  Quasi-periodic fields
carry an automorphy twist; they are differentiated by untwisting one
direction at a time, which is a true derivative only when the twist has no
slope.  Sloped twists need the gauge term of a compatible connection and are
therefore differentiated in the bundle layer, not here.

Everything is pure and stateless; evaluation over grid points may run
concurrently.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ncindex._errors import StructureError
from ncindex._linalg import commuting_logs, dagger, spectral_norm

TWIST_COMMUTATION_TOL = 1e-12
MIN_RESOLUTION = 8


def fourier_modes(n: int) -> np.ndarray:
    """Integer frequencies with the unpaired Nyquist mode removed.

    Zeroing the n/2 mode keeps the derivative operator exactly
    anti-hermitian on even grids.
    """
    m = np.fft.fftfreq(n, d=1.0 / n)
    m[n // 2] = 0.0
    return m


def derivative_matrix(n: int) -> np.ndarray:
    """Dense spectral d/dx on n periodic samples of the unit circle."""
    modes = 2j * np.pi * fourier_modes(n)
    return np.fft.ifft(modes[:, None] * np.fft.fft(np.eye(n), axis=0), axis=0)


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on S1 or T2 with unit side length."""

    manifold: str
    n: int

    def __post_init__(self):
        if self.manifold not in ("S1", "T2"):
            raise StructureError(f"unsupported manifold {self.manifold!r}")
        if self.n < MIN_RESOLUTION or self.n % 2:
            raise StructureError("resolution must be even and at least 8")

    @property
    def dim(self) -> int:
        return 1 if self.manifold == "S1" else 2

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def coords(self) -> np.ndarray:
        return np.arange(self.n) / self.n

    def refine(self, factor: int = 2) -> "Grid":
        return Grid(self.manifold, self.n * factor)


@dataclass(frozen=True, eq=False)
class Twist:
    """Factor of automorphy for quasi-periodic fields on T2.

    A field with this twist satisfies F(x+1, y) = u0 . F(x, y) and
    F(x, y+1) = exp(-2 pi i B x) v0 . F(x, y), where B = diag(slope) has
    integer entries and commutes with the commuting unitaries u0, v0.  The
    action "." is left multiplication for section-like fields and
    conjugation for endomorphism-like ones; the form carries that flag.
    """

    u0: np.ndarray
    v0: np.ndarray
    slope: tuple

    def __post_init__(self):
        u = np.asarray(self.u0, dtype=complex)
        v = np.asarray(self.v0, dtype=complex)
        object.__setattr__(self, "u0", u)
        object.__setattr__(self, "v0", v)
        d = u.shape[0]
        if u.shape != (d, d) or v.shape != (d, d) or len(self.slope) != d:
            raise StructureError("automorphy data sizes disagree")
        for m in (u, v):
            if spectral_norm(dagger(m) @ m - np.eye(d)) > 1e-10:
                raise StructureError("automorphy constants must be unitary")
        if spectral_norm(u @ v - v @ u) > TWIST_COMMUTATION_TOL * max(1.0, spectral_norm(u @ v)):
            raise StructureError("automorphy constants must commute")
        if any(abs(s - round(s)) > 1e-9 for s in self.slope):
            raise StructureError("slopes must be integers")
        object.__setattr__(self, "slope", tuple(int(round(s)) for s in self.slope))
        b = np.diag(np.asarray(self.slope, dtype=float))
        for m in (u, v):
            if spectral_norm(b @ m - m @ b) > 1e-10:
                raise StructureError("slope matrix must commute with the constants")
        log_u, log_v = commuting_logs([u, v])
        object.__setattr__(self, "_log_u", log_u)
        object.__setattr__(self, "_log_v", log_v)

    @property
    def dim(self) -> int:
        return self.u0.shape[0]

    @property
    def is_flat_constant(self) -> bool:
        return all(s == 0 for s in self.slope)

    @property
    def slope_matrix(self) -> np.ndarray:
        return np.diag(np.asarray(self.slope, dtype=complex))

    @property
    def log_u(self) -> np.ndarray:
        return self._log_u

    def log_v_at(self, x: float) -> np.ndarray:
        """Logarithm of the y-seam factor exp(-2 pi i B x) v0."""
        return -2j * np.pi * x * self.slope_matrix + self._log_v

    def u_power(self, t: float) -> np.ndarray:
        w, q = np.linalg.eigh(1j * self._log_u)
        return q @ np.diag(np.exp(-1j * t * w)) @ dagger(q)

    def v_power(self, t: float, x: float = 0.0) -> np.ndarray:
        lg = self.log_v_at(x)
        w, q = np.linalg.eigh(1j * lg)
        return q @ np.diag(np.exp(-1j * t * w)) @ dagger(q)


def same_twist(a: Twist | None, b: Twist | None) -> bool:
    if a is None and b is None:
        return True
    if a is None or b is None:
        return False
    return (a.slope == b.slope
            and np.allclose(a.u0, b.u0, atol=1e-12)
            and np.allclose(a.v0, b.v0, atol=1e-12))


_COMPONENTS = {
    ("S1", 0): ("value",),
    ("S1", 1): ("dx",),
    ("T2", 0): ("value",),
    ("T2", 1): ("dx", "dy"),
    ("T2", 2): ("dxdy",),
}


@dataclass(frozen=True, eq=False)
class MatrixForm:
    """Matrix-valued differential form sampled on a grid.

    fields holds one complex array per component, shaped (n, d, e) on S1 and
    (n, n, d, e) on T2 with the x index first.  action is "left" for
    section-like twisted fields, "conjugation" for endomorphism-like ones.
    """

    grid: Grid
    degree: int
    fields: tuple
    twist: Twist | None = None
    action: str = "left"

    def __post_init__(self):
        names = _COMPONENTS.get((self.grid.manifold, self.degree))
        if names is None:
            raise StructureError(f"degree {self.degree} not supported on {self.grid.manifold}")
        if len(self.fields) != len(names):
            raise StructureError("wrong number of components")
        base = None
        for f in self.fields:
            want = (self.grid.n,) * self.grid.dim
            if f.shape[:self.grid.dim] != want or f.ndim != self.grid.dim + 2:
                raise StructureError(f"component shaped {f.shape} does not fit the grid")
            if base is None:
                base = f.shape[self.grid.dim:]
            elif f.shape[self.grid.dim:] != base:
                raise StructureError("components carry different matrix sizes")
        if self.action not in ("left", "conjugation"):
            raise StructureError(f"unknown twist action {self.action!r}")
        if self.twist is not None:
            d = self.fields[0].shape[self.grid.dim]
            if self.twist.dim != d:
                raise StructureError("twist dimension does not match the values")
            if self.action == "conjugation" and self.fields[0].shape[self.grid.dim + 1] != d:
                raise StructureError("conjugation twists need square values")

    # -- construction --------------------------------------------------------

    @classmethod
    def zero(cls, grid: Grid, degree: int, shape=(1, 1), twist=None, action="left") -> "MatrixForm":
        names = _COMPONENTS[(grid.manifold, degree)]
        full = (grid.n,) * grid.dim + tuple(shape)
        return cls(grid, degree, tuple(np.zeros(full, dtype=complex) for _ in names),
                   twist=twist, action=action)

    @classmethod
    def constant(cls, grid: Grid, degree: int, values: Sequence[np.ndarray],
                 twist=None, action="left") -> "MatrixForm":
        fields = []
        for v in values:
            v = np.asarray(v, dtype=complex)
            if v.ndim != 2:
                raise StructureError("constant components must be matrices")
            fields.append(np.broadcast_to(v, (grid.n,) * grid.dim + v.shape).copy())
        return cls(grid, degree, tuple(fields), twist=twist, action=action)

    @classmethod
    def from_function(cls, grid: Grid, degree: int, fns: Sequence[Callable],
                      twist=None, action="left") -> "MatrixForm":
        """Sample callables (x[, y]) -> matrix on the grid points."""
        xs = grid.coords
        fields = []
        for fn in fns:
            if grid.dim == 1:
                vals = np.stack([np.atleast_2d(np.asarray(fn(x), dtype=complex)) for x in xs])
            else:
                vals = np.stack([
                    np.stack([np.atleast_2d(np.asarray(fn(x, y), dtype=complex)) for y in xs])
                    for x in xs])
            fields.append(vals)
        return cls(grid, degree, tuple(fields), twist=twist, action=action)

    # -- bookkeeping ----------------------------------------------------------

    @property
    def component_names(self) -> tuple:
        return _COMPONENTS[(self.grid.manifold, self.degree)]

    def component(self, name: str) -> np.ndarray:
        return self.fields[self.component_names.index(name)]

    @property
    def value_shape(self) -> tuple:
        return self.fields[0].shape[self.grid.dim:]

    def sup_norm(self) -> float:
        out = 0.0
        for f in self.fields:
            flat = f.reshape(-1, *self.value_shape)
            out = max(out, max(spectral_norm(m) for m in flat))
        return out

    def pointwise_trace(self) -> "MatrixForm":
        if self.value_shape[0] != self.value_shape[1]:
            raise StructureError("trace needs square values")
        fields = tuple(np.einsum("...aa->...", f)[..., None, None] for f in self.fields)
        return MatrixForm(self.grid, self.degree, fields)

    def __add__(self, other: "MatrixForm") -> "MatrixForm":
        self._compatible(other)
        return MatrixForm(self.grid, self.degree,
                          tuple(a + b for a, b in zip(self.fields, other.fields)),
                          twist=self.twist, action=self.action)

    def __sub__(self, other: "MatrixForm") -> "MatrixForm":
        return self + (-1.0) * other

    def __rmul__(self, z: complex) -> "MatrixForm":
        return MatrixForm(self.grid, self.degree, tuple(z * f for f in self.fields),
                          twist=self.twist, action=self.action)

    def _compatible(self, other: "MatrixForm") -> None:
        if self.grid != other.grid or self.degree != other.degree:
            raise StructureError("forms live on different grids or degrees")
        if self.value_shape != other.value_shape:
            raise StructureError("value shapes differ")
        if not same_twist(self.twist, other.twist):
            raise StructureError("twists differ")
        if self.twist is not None and self.action != other.action:
            raise StructureError("twists differ")


# -- differentiation ----------------------------------------------------------

def _spectral_partial(f: np.ndarray, axis: int) -> np.ndarray:
    n = f.shape[axis]
    modes = 2j * np.pi * fourier_modes(n)
    shape = [1] * f.ndim
    shape[axis] = n
    return np.fft.ifft(np.fft.fft(f, axis=axis) * modes.reshape(shape), axis=axis)


def _gauge_stack(twist: Twist, n: int, direction: str) -> np.ndarray:
    """Powers u0^(-x) (or v0^(-y)) along one axis, shape (n, d, d)."""
    lg = twist.log_u if direction == "x" else twist.log_v_at(0.0)
    w, q = np.linalg.eigh(1j * lg)
    t = np.arange(n) / n
    phases = np.exp(1j * np.outer(t, w))  # e^(-t log) = e^(+i t w)
    return np.einsum("ab,tb,cb->tac", q, phases, np.conj(q))


def _twisted_partial(f: np.ndarray, axis: int, twist: Twist, action: str) -> np.ndarray:
    """True partial derivative of a constant-twisted field along one axis."""
    n = f.shape[axis]
    inv = _gauge_stack(twist, n, "x" if axis == 0 else "y")  # factor^(-t)
    fwd = np.conj(np.transpose(inv, (0, 2, 1)))
    lg = twist.log_u if axis == 0 else twist.log_v_at(0.0)
    left = "tab,tybc->tyac" if axis == 0 else "tab,ytbc->ytac"
    right = "tyab,tbc->tyac" if axis == 0 else "ytab,tbc->ytac"
    untw = np.einsum(left, inv, f)
    if action == "conjugation":
        untw = np.einsum(right, untw, fwd)
    g = _spectral_partial(untw, axis)
    out = np.einsum(left, fwd, g)
    if action == "conjugation":
        out = np.einsum(right, out, inv)
        return out + np.matmul(lg, f) - np.matmul(f, lg)
    return out + np.matmul(lg, f)


def partial_derivatives(form: MatrixForm, comp: np.ndarray) -> tuple:
    """(d/dx, d/dy) of one component field, honoring the twist."""
    if form.twist is None:
        return _spectral_partial(comp, 0), _spectral_partial(comp, 1)
    if not form.twist.is_flat_constant:
        raise StructureError(
            "sloped twists have no bare exterior derivative; use the bundle connection")
    return (_twisted_partial(comp, 0, form.twist, form.action),
            _twisted_partial(comp, 1, form.twist, form.action))


def exterior_d(form: MatrixForm) -> MatrixForm:
    """Spectral exterior derivative; raises on top-degree input."""
    g = form.grid
    if form.degree >= g.dim:
        raise StructureError("exterior derivative of a top-degree form")
    if g.manifold == "S1":
        if form.twist is not None:
            raise StructureError("twists are torus data")
        return MatrixForm(g, 1, (_spectral_partial(form.fields[0], 0),))
    if form.degree == 0:
        px, py = partial_derivatives(form, form.fields[0])
        return MatrixForm(g, 1, (px, py), twist=form.twist, action=form.action)
    p, q = form.fields
    qx, _ = partial_derivatives(form, q)
    _, py = partial_derivatives(form, p)
    return MatrixForm(g, 2, (qx - py,), twist=form.twist, action=form.action)


# -- wedge and integration ----------------------------------------------------

def _product_twist(a: MatrixForm, b: MatrixForm):
    """Twist metadata of the pointwise product a b.

    The consistent combinations: conjugation times conjugation with equal
    twists stays conjugation; conjugation times left with the same constants
    is left with the left factor's slope (the conjugation slope acts
    trivially); a left-twisted field times a periodic one stays
    left-twisted; periodic times periodic is periodic.  Anything else mixes
    seams that do not cancel.
    """
    ta, tb = a.twist, b.twist
    if ta is None and tb is None:
        return None, "left"
    if ta is not None and tb is not None:
        if ta.u0.shape != tb.u0.shape or not (np.allclose(ta.u0, tb.u0, atol=1e-12)
                                              and np.allclose(ta.v0, tb.v0, atol=1e-12)):
            raise StructureError("twists differ")
        if a.action == "conjugation" and b.action == "conjugation":
            if ta.slope != tb.slope:
                raise StructureError("twists differ")
            return ta, "conjugation"
        if a.action == "conjugation" and b.action == "left":
            return tb, "left"
        raise StructureError("left-twisted factors compose only with periodic right factors")
    if ta is not None and a.action == "left":
        return ta, "left"
    raise StructureError("product of periodic and twisted fields is not quasi-periodic")


def wedge(a: MatrixForm, b: MatrixForm) -> MatrixForm:
    """Pointwise matrix wedge; on two 1-forms (a^b) = a_x b_y - a_y b_x."""
    if a.grid != b.grid:
        raise StructureError("forms live on different grids")
    g = a.grid
    total = a.degree + b.degree
    if total > g.dim:
        raise StructureError("wedge degree exceeds the manifold dimension")
    if a.value_shape[1] != b.value_shape[0]:
        raise StructureError("matrix dimensions are not composable")
    twist, action = _product_twist(a, b)

    def mul(x, y):
        return np.einsum("...ab,...bc->...ac", x, y)

    if a.degree == 0:
        fields = tuple(mul(a.fields[0], f) for f in b.fields)
    elif b.degree == 0:
        fields = tuple(mul(f, b.fields[0]) for f in a.fields)
    else:  # two 1-forms on T2
        fields = (mul(a.fields[0], b.fields[1]) - mul(a.fields[1], b.fields[0]),)
    return MatrixForm(g, total, fields, twist=twist, action=action)


def integrate(form: MatrixForm) -> complex:
    """h^dim times the sum over grid points of a scalar top-degree form."""
    g = form.grid
    if form.degree != g.dim:
        raise StructureError("integration needs a top-degree form")
    if form.value_shape != (1, 1):
        raise StructureError("integration needs scalar (1x1) values")
    if form.twist is not None:
        raise StructureError("integrands must be honest periodic fields")
    return complex(np.sum(form.fields[0]) * g.h ** g.dim)


# -- covers and resampling ------------------------------------------------------

def fourier_resample(form: MatrixForm, factor: int) -> MatrixForm:
    """Trigonometric interpolation onto the factor-times-finer grid.

    Exact for band-limited fields; the canonical refinement everywhere else.
    """
    if factor == 1:
        return form
    if form.twist is not None:
        raise StructureError("resample periodic data only")
    g = form.grid
    n, big = g.n, g.n * factor
    fields = []
    for f in form.fields:
        spec = np.fft.fft(f, axis=0)
        if g.dim == 2:
            spec = np.fft.fft(spec, axis=1)
        pad_shape = (big,) * g.dim + f.shape[g.dim:]
        pad = np.zeros(pad_shape, dtype=complex)
        lo = n // 2  # nonnegative modes 0..n/2-1, negative modes -n/2..-1
        if g.dim == 1:
            pad[:lo] = spec[:lo]
            pad[big - lo:] = spec[lo:]
        else:
            pad[:lo, :lo] = spec[:lo, :lo]
            pad[:lo, big - lo:] = spec[:lo, lo:]
            pad[big - lo:, :lo] = spec[lo:, :lo]
            pad[big - lo:, big - lo:] = spec[lo:, lo:]
        out = np.fft.ifft(pad, axis=0)
        if g.dim == 2:
            out = np.fft.ifft(out, axis=1)
        fields.append(out * factor ** g.dim)
    return MatrixForm(g.refine(factor), form.degree, tuple(fields))


def pullback_form(form: MatrixForm, k: int, cover_grid: Grid | None = None) -> MatrixForm:
    """Pullback along the degree-k cover (x, y) -> (k x mod 1, y) of T2.

    The cover grid resolution must be a multiple m*N of the base resolution;
    the base data is trigonometrically interpolated onto the finer grid, so
    refinement beyond the band limit of the input is exact.
    """
    g = form.grid
    if g.manifold != "T2":
        raise StructureError("covers are realized over the torus")
    if k < 1:
        raise StructureError("cover degree must be positive")
    if form.twist is not None:
        raise StructureError("pull back periodic data; twists transform separately")
    cg = cover_grid if cover_grid is not None else Grid("T2", k * g.n)
    if cg.n % g.n:
        raise StructureError("cover resolution must be a multiple of the base resolution")
    m = cg.n // g.n
    fine = fourier_resample(form, m)
    src = (k * np.arange(cg.n)) % cg.n  # x-index under the cover map, y untouched
    fields = []
    for name, f in zip(form.component_names, fine.fields):
        up = f[src]
        if name in ("dx", "dxdy"):
            up = k * up
        fields.append(up)
    return MatrixForm(cg, form.degree, tuple(fields))


# -- band-limited test fields ---------------------------------------------------

def random_band_limited(grid: Grid, shape=(1, 1), rng: np.random.Generator | None = None,
                        max_mode: int | None = None, scale: float = 1.0) -> np.ndarray:
    """Random field with Fourier support in modes of absolute value <= max_mode."""
    rng = rng if rng is not None else np.random.default_rng()
    cap = max_mode if max_mode is not None else grid.n // 4
    cap = min(cap, grid.n // 2 - 1)
    # raw frequencies here: fourier_modes zeroes the Nyquist slot, which would
    # wrongly admit frequency n/2 content into the mask
    modes = np.fft.fftfreq(grid.n, d=1.0 / grid.n)
    if grid.dim == 1:
        spec = np.zeros((grid.n,) + tuple(shape), dtype=complex)
        mask = np.abs(modes) <= cap
        spec[mask] = scale * (rng.standard_normal((mask.sum(),) + tuple(shape))
                              + 1j * rng.standard_normal((mask.sum(),) + tuple(shape)))
        return np.fft.ifft(spec * grid.n, axis=0)
    spec = np.zeros((grid.n, grid.n) + tuple(shape), dtype=complex)
    mask = (np.abs(modes[:, None]) <= cap) & (np.abs(modes[None, :]) <= cap)
    spec[mask] = scale * (rng.standard_normal((int(mask.sum()),) + tuple(shape))
                          + 1j * rng.standard_normal((int(mask.sum()),) + tuple(shape)))
    return np.fft.ifft2(spec * grid.n ** 2, axes=(0, 1))


# -- export ---------------------------------------------------------------------

def component_csv(form: MatrixForm, name: str) -> str:
    """One row per grid point: coordinates then re/im of each matrix entry."""
    f = form.component(name)
    d, e = form.value_shape
    buf = io.StringIO()
    heads = ["x"] + (["y"] if form.grid.dim == 2 else [])
    for r in range(d):
        for c in range(e):
            heads += [f"re_{r}{c}", f"im_{r}{c}"]
    buf.write(",".join(heads) + "\n")
    xs = form.grid.coords
    if form.grid.dim == 1:
        for i, x in enumerate(xs):
            row = [f"{x:.12g}"]
            for r in range(d):
                for c in range(e):
                    row += [f"{f[i, r, c].real:.12g}", f"{f[i, r, c].imag:.12g}"]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()
    for i, x in enumerate(xs):
        for j, y in enumerate(xs):
            row = [f"{x:.12g}", f"{y:.12g}"]
            for r in range(d):
                for c in range(e):
                    row += [f"{f[i, j, r, c].real:.12g}", f"{f[i, j, r, c].imag:.12g}"]
            buf.write(",".join(row) + "\n")
    return buf.getvalue()


def export_csv(form: MatrixForm, directory, stem: str) -> list:
    """Write one CSV per component; returns the written paths."""
    import pathlib

    out = []
    base = pathlib.Path(directory)
    base.mkdir(parents=True, exist_ok=True)
    for name in form.component_names:
        path = base / f"{stem}_{name}.csv"
        path.write_text(component_csv(form, name))
        out.append(path)
    return out
