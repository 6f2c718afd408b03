"""Control problems: coefficient bundles, derivative checks and the two built-in
benchmarks (mean-field LQ and the two-action chattering instance).

Every coefficient is a numpy-broadcasting callable.  ``b, sigma, h`` and their
partials take ``(t, x, y, a)``, ``g`` and its partials take ``(x, y)``, where
``y`` stands for the mean state E(X_t).  Scalar state, scalar actions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Coef = Callable[..., np.ndarray]

COEF_NAMES = ("b", "sigma", "h")
DERIV_PARENT = {
    "b_x": ("b", "x", 1), "b_y": ("b", "y", 1), "b_xx": ("b", "x", 2),
    "sigma_x": ("sigma", "x", 1), "sigma_y": ("sigma", "y", 1), "sigma_xx": ("sigma", "x", 2),
    "h_x": ("h", "x", 1), "h_y": ("h", "y", 1), "h_xx": ("h", "x", 2),
    "g_x": ("g", "x", 1), "g_y": ("g", "y", 1), "g_xx": ("g", "x", 2),
}


@dataclass(frozen=True)
class ActionGrid:
    """Finite, strictly increasing action set a_1 < ... < a_n."""

    actions: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.actions, dtype=np.float64).ravel()
        if a.size < 1:
            raise ValueError("action grid needs at least one action")
        if not np.all(np.isfinite(a)):
            raise ValueError("action grid values must be finite")
        if np.any(np.diff(a) <= 0):
            raise ValueError("action grid must be strictly increasing")
        a.setflags(write=False)
        object.__setattr__(self, "actions", a)

    @classmethod
    def uniform(cls, lo: float, hi: float, n: int) -> "ActionGrid":
        return cls(np.linspace(lo, hi, n))

    def __len__(self):
        return self.actions.size

    def nearest(self, u):
        """Index of the closest action; ties go to the lower index."""
        u = np.asarray(u, dtype=np.float64)
        right = np.clip(np.searchsorted(self.actions, u, side="left"), 0, len(self) - 1)
        left = np.clip(right - 1, 0, len(self) - 1)
        pick_left = np.abs(u - self.actions[left]) <= np.abs(self.actions[right] - u)
        return np.where(pick_left, left, right).astype(np.int64)


def constant(c: float) -> Coef:
    """Coefficient returning ``c`` everywhere, broadcast to its arguments."""

    def f(*args):
        return np.full(np.broadcast(*args).shape, float(c))

    f.__name__ = f"constant({c!r})"
    return f


ZERO = constant(0.0)


@dataclass(frozen=True)
class ProblemSpec:
    T: float
    x0: float
    action_grid: ActionGrid
    b: Coef
    sigma: Coef
    h: Coef
    g: Coef
    b_x: Coef = ZERO
    b_y: Coef = ZERO
    b_xx: Coef = ZERO
    sigma_x: Coef = ZERO
    sigma_y: Coef = ZERO
    sigma_xx: Coef = ZERO
    h_x: Coef = ZERO
    h_y: Coef = ZERO
    h_xx: Coef = ZERO
    g_x: Coef = ZERO
    g_y: Coef = ZERO
    g_xx: Coef = ZERO
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got {self.T}")

    @property
    def actions(self) -> np.ndarray:
        return self.action_grid.actions

    def on_grid(self, fname: str, t: float, x, y):
        """Evaluate a running coefficient on the (particle, action) grid."""
        x = np.asarray(x, dtype=np.float64)[:, None]
        a = self.actions[None, :]
        out = getattr(self, fname)(t, x, y, a)
        return np.broadcast_to(np.asarray(out, dtype=np.float64), (x.shape[0], a.shape[1]))

    def at_pairs(self, fname: str, t: float, x, y, rows, cols):
        """Evaluate a running coefficient at particle ``rows`` and action ``cols``."""
        x = np.asarray(x, dtype=np.float64)[rows]
        out = getattr(self, fname)(t, x, y, self.actions[cols])
        return np.broadcast_to(np.asarray(out, dtype=np.float64), x.shape)

    def weighted(self, fname: str, t: float, x, y, w):
        """sum_i w_i f(t, x, y, a_i) per particle, touching only positive weights."""
        return WeightedView(self, t, x, y, w)(fname)

    def view(self, t: float, x, y, support) -> "WeightedView":
        """WeightedView from a precomputed (rows, cols, values) support."""
        return WeightedView(self, t, x, y, support=support)

    def terminal(self, fname: str, x, y):
        x = np.asarray(x, dtype=np.float64)
        return np.broadcast_to(np.asarray(getattr(self, fname)(x, y), dtype=np.float64), x.shape)


class WeightedView:
    """Measure-weighted coefficient averages at one time step.  The active
    (particle, action) pairs are located once and reused for every call."""

    def __init__(self, spec: ProblemSpec, t, x, y, w=None, support=None):
        self.spec, self.t, self.x, self.y = spec, t, x, y
        self.n = np.size(x)
        if support is None:
            w = np.asarray(w)
            self.rows, self.cols = np.nonzero(w > 0)
            self.w = w[self.rows, self.cols]
        else:
            self.rows, self.cols, self.w = support

    def values(self, fname):
        return self.spec.at_pairs(fname, self.t, self.x, self.y, self.rows, self.cols)

    def sum(self, vals):
        return np.bincount(self.rows, weights=self.w * vals, minlength=self.n)

    def __call__(self, fname):
        return self.sum(self.values(fname))


# ---------------------------------------------------------------------------
# derivative validation
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    valid: bool
    worst: dict          # derivative name -> worst relative error
    worst_at: dict       # derivative name -> (t, x, y, a) of the worst error
    failures: list       # derivative names above tolerance
    errors: list         # non-finite evaluations: (function, point)
    tol: float

    def summary(self) -> str:
        lines = [f"valid = {self.valid}", f"tol = {self.tol:.17g}"]
        for name, err in self.worst.items():
            flag = "FAIL" if name in self.failures else "ok"
            lines.append(f"{name} worst_rel_err = {err:.17g} {flag}")
        for fname, pt in self.errors:
            lines.append(f"non-finite {fname} at (t, x, y, a) = {pt}")
        return "\n".join(lines)


def _rel_err(fd, d):
    return np.abs(fd - d) / np.maximum(1.0, np.maximum(np.abs(d), np.abs(fd)))


def validate_problem(spec: ProblemSpec, box=None, samples: int = 100, step: float = 1e-4,
                     tol: float = 1e-5, seed: int = 0) -> ValidationReport:
    """Check every supplied partial against central finite differences.

    ``box`` maps ``"t"``, ``"x"``, ``"y"`` to ``(lo, hi)`` sampling ranges;
    actions are drawn from the action grid.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if not step > 0:
        raise ValueError("step must be positive")
    box = {"t": (0.0, spec.T), "x": (-3.0, 3.0), "y": (-3.0, 3.0), **(box or {})}
    rng = np.random.default_rng(seed)
    t = rng.uniform(*box["t"], samples)
    x = rng.uniform(*box["x"], samples)
    y = rng.uniform(*box["y"], samples)
    a = spec.actions[rng.integers(0, len(spec.action_grid), samples)]

    def call(fname, tt, xx, yy, aa):
        f = getattr(spec, fname)
        if fname.startswith("g"):
            out = f(xx, yy)
        else:
            out = f(tt, xx, yy, aa)
        return np.broadcast_to(np.asarray(out, dtype=np.float64), xx.shape)

    errors = []
    for fname in ("b", "sigma", "h", "g", *DERIV_PARENT):
        vals = call(fname, t, x, y, a)
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            j = bad[0]
            errors.append((fname, (float(t[j]), float(x[j]), float(y[j]), float(a[j]))))
    if errors:
        return ValidationReport(False, {}, {}, [], errors, tol)

    worst, worst_at, failures = {}, {}, []
    for dname, (parent, var, order) in DERIV_PARENT.items():
        d = call(dname, t, x, y, a)
        if var == "x":
            up, dn = call(parent, t, x + step, y, a), call(parent, t, x - step, y, a)
        else:
            up, dn = call(parent, t, x, y + step, a), call(parent, t, x, y - step, a)
        if order == 1:
            fd = (up - dn) / (2.0 * step)
        else:
            fd = (up - 2.0 * call(parent, t, x, y, a) + dn) / step**2
        err = _rel_err(fd, d)
        j = int(np.argmax(err))
        worst[dname] = float(err[j])
        worst_at[dname] = (float(t[j]), float(x[j]), float(y[j]), float(a[j]))
        if not err[j] <= tol:
            failures.append(dname)
    return ValidationReport(not failures, worst, worst_at, failures, [], tol)


# ---------------------------------------------------------------------------
# built-in benchmarks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LqParams:
    """dX = (a1 X + a2 E X + b0 u) dt + s0 dW,
    h = (qx x^2 + qy y^2 + r u^2)/2,  g = (gx x^2 + gy y^2)/2."""

    a1: float = 0.2
    a2: float = -0.4
    b0: float = 1.0
    s0: float = 0.4
    qx: float = 1.0
    qy: float = 0.5
    r: float = 1.0
    gx: float = 1.0
    gy: float = 0.5
    u_max: float = 3.0
    x0: float = 1.0
    T: float = 1.0

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("r must be positive")
        if self.qx < 0 or self.gx < 0:
            raise ValueError("qx and gx must be nonnegative")
        if not self.u_max > 0:
            raise ValueError("u_max must be positive")
        if not self.T > 0:
            raise ValueError("T must be positive")


def make_lq_meanfield(params: LqParams, n_actions: int = 41) -> ProblemSpec:
    if n_actions < 2:
        raise ValueError("n_actions must be >= 2")
    p = params
    zero = ZERO

    def b(t, x, y, a):
        return p.a1 * x + p.a2 * y + p.b0 * a

    def h(t, x, y, a):
        return 0.5 * (p.qx * x**2 + p.qy * y**2 + p.r * a**2)

    def g(x, y):
        return 0.5 * (p.gx * x**2 + p.gy * y**2)

    return ProblemSpec(
        T=p.T, x0=p.x0, action_grid=ActionGrid.uniform(-p.u_max, p.u_max, n_actions),
        b=b, sigma=constant(p.s0), h=h, g=g,
        b_x=constant(p.a1), b_y=constant(p.a2), b_xx=zero,
        sigma_x=zero, sigma_y=zero, sigma_xx=zero,
        h_x=lambda t, x, y, a: p.qx * x + 0.0 * a,
        h_y=lambda t, x, y, a: p.qy * y + 0.0 * (x + a),
        h_xx=constant(p.qx),
        g_x=lambda x, y: p.gx * x + 0.0 * y,
        g_y=lambda x, y: p.gy * y + 0.0 * x,
        g_xx=constant(p.gx),
        name="lq",
        params=dict(vars(p), n_actions=n_actions),
    )


def make_chattering_problem(sigma0: float = 0.0, kappa: float = 0.0) -> ProblemSpec:
    """Actions {-1, +1}, dX = u dt + sigma0 dW, h = x^2 + kappa y^2, g = 0,
    x0 = 0, T = 1.  Only the relaxed half-half mixture keeps X at zero."""
    if sigma0 < 0 or kappa < 0:
        raise ValueError("sigma0 and kappa must be nonnegative")
    return ProblemSpec(
        T=1.0, x0=0.0, action_grid=ActionGrid(np.array([-1.0, 1.0])),
        b=lambda t, x, y, a: a + 0.0 * x,
        sigma=constant(sigma0),
        h=lambda t, x, y, a: x**2 + kappa * y**2 + 0.0 * a,
        g=ZERO,
        h_x=lambda t, x, y, a: 2.0 * x + 0.0 * a,
        h_y=lambda t, x, y, a: 2.0 * kappa * y + 0.0 * (x + a),
        h_xx=constant(2.0),
        name="chattering",
        params={"sigma0": sigma0, "kappa": kappa},
    )
