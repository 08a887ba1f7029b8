"""The five drawdown quantities as recursive algorithms over windowed solves.

All quantities share one backward sweep over window tops i = N-1 .. stop:
the window (y_i - a, y_i] is solved with the appropriate killing, the
down-exit payoff comes from states at or below y_i - a, the up-exit
continuation from already-computed values above y_i.  Two running vectors
make every sweep O(N) linear solves plus O(N^2) vector work:

    S[m] = sum_{z > i}   G(m, z) * value[z]      (continuation inflow)
    D[m] = sum_{z <= i-a} G(m, z) * payoff[z]    (payoff inflow)

updated incrementally as i decreases.  Window solves dispatch on the
generator structure: banded (birth-death), LU cached by the window's
relative killing pattern (translation-invariant lattices, where the window
block is the same matrix for every interior top), dense otherwise, or a
Sherman-Morrison-Woodbury sliding inverse when requested.

Quantities:

* ``q_drawdown``                 discounted drawdown-time transform
* ``drawdown_before_drawup``     drawdown happening before a drawup
* ``occupation_until_drawdown``  occupation weight k(x) until drawdown
* ``drawdown_occupation``        occupation weight k(x, max) until drawdown
* ``nth_drawdown_no_recovery``   n-th drawdown, reference max restarting
* ``insurance_no_recovery``      sum over all such events (fixed point)
* ``nth_drawdown_with_recovery`` n-th drawdown, max must first recover
* ``insurance_with_recovery``    sum over all such events

with translation-invariant closed forms (`*_levy_closed_form`) and
birth-death fast paths selected automatically from the structure tag.

Each evaluation is a sequential backward recursion (data-dependent
order), but distinct evaluations share only the immutable generator, so
distinct Laplace nodes or table rows may run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.signal import fftconvolve

from .ctmc import BIRTH_DEATH, GENERAL, TOEPLITZ_LEVY, Generator
from .linsolve import (
    AmbientInverse,
    DegenerateWindow,
    KillingField,
    Singular,
    psi_pair,
)

__all__ = [
    "QuantityRequest",
    "UnsupportedRegime",
    "FixedPointSingular",
    "NotLevy",
    "TooLarge",
    "occupation_below_killing",
    "drawdown_occupation_killing",
    "insurance_partial_sums",
    "q_drawdown",
    "drawdown_before_drawup",
    "occupation_until_drawdown",
    "drawdown_occupation",
    "c_levy_closed_form",
    "nth_drawdown_no_recovery",
    "insurance_no_recovery",
    "h_levy_closed_form",
    "nth_drawdown_with_recovery",
    "insurance_with_recovery",
    "j_levy_closed_form",
    "evaluate",
]


class UnsupportedRegime(ValueError):
    """Requested parameter regime is out of scope (drawup level below the
    drawdown level)."""


class FixedPointSingular(np.linalg.LinAlgError):
    """The insurance fixed-point matrix I - P is numerically singular."""


class NotLevy(TypeError):
    """Closed form requires a translation-invariant lattice generator."""


class TooLarge(ValueError):
    """State space exceeds the cap of a dense reference path."""


# ---------------------------------------------------------------------------
# request plumbing
# ---------------------------------------------------------------------------

_KIND_ALIASES = {
    "Q": "Q", "DRAWDOWNLAPLACE_Q": "Q",
    "A": "A", "DRAWDOWNBEFOREDRAWUP_A": "A",
    "B": "B", "OCCUPATIONUNTILDRAWDOWN_B": "B",
    "C": "C", "DRAWDOWNOCCUPATION_C": "C",
    "HN": "Hn", "NTHDRAWDOWNNORECOVERY_H": "Hn",
    "HSUM": "Hsum", "H": "Hsum", "INSURANCENORECOVERY_HSUM": "Hsum",
    "JN": "Jn", "NTHDRAWDOWNWITHRECOVERY_J": "Jn",
    "JSUM": "Jsum", "J": "Jsum", "INSURANCEWITHRECOVERY_JSUM": "Jsum",
}


def canonical_kind(kind: str) -> str:
    key = kind.replace("-", "_").upper()
    if key not in _KIND_ALIASES:
        raise ValueError(f"unknown quantity kind {kind!r}")
    return _KIND_ALIASES[key]


@dataclass
class QuantityRequest:
    """One quantity evaluation: which transform, at which levels/arguments."""

    kind: str
    a: float
    q: complex = 1.0 + 0.0j
    b: Optional[float] = None
    xi: Optional[float] = None
    n: int = 1
    x: Optional[float] = None
    y: Optional[float] = None
    k: object = None          # univariate killing (B); defaults to q 1_{x<xi} + shift
    k2: object = None         # bivariate killing (C); defaults to q 1_{max-x>xi} + shift
    shift: complex = 0.0      # constant killing added on top of the indicator
    f: object = None          # terminal payoff over states (None = 1)
    f2: object = None         # bivariate terminal payoff (Jn)

    def __post_init__(self):
        self.kind = canonical_kind(self.kind)
        if self.kind == "A":
            if self.b is None:
                raise ValueError("quantity A needs the drawup level b")
            if self.b < self.a:
                raise UnsupportedRegime("drawup level b must be >= drawdown level a")
        if self.kind in ("Hn", "Jn") and self.n < 1:
            raise ValueError("event count n must be >= 1")


# ---------------------------------------------------------------------------
# shared sweep machinery
# ---------------------------------------------------------------------------

_IND_TOL = 1e-9
# Threshold indicators compare lattice differences against levels that are
# typically exact multiples of h; a relative tolerance keeps the comparison
# outcome uniform across windows (strict inequality in exact arithmetic).


def occupation_below_killing(q: complex, xi: float, shift: complex = 0.0) -> KillingField:
    """k(x) = q 1_{x < xi} + shift, with a roundoff-safe strict inequality."""
    qq, sh = complex(q), complex(shift)
    tol = _IND_TOL * max(1.0, abs(xi))

    def fn(states):
        return np.where(states < xi - tol, qq, 0.0) + sh

    return KillingField.from_function(fn)


def drawdown_occupation_killing(q: complex, xi: float, shift: complex = 0.0) -> KillingField:
    """k(x, max) = q 1_{max - x > xi} + shift, roundoff-safe."""
    qq, sh = complex(q), complex(shift)
    tol = _IND_TOL * max(1.0, abs(xi))

    def fn2(states, y):
        return np.where(y - states > xi + tol, qq, 0.0) + sh

    return KillingField.bivariate(fn2)


def _payoff(gen: Generator, f) -> np.ndarray:
    if f is None:
        return np.ones(gen.n, dtype=complex)
    if callable(f):
        return np.asarray(f(gen.states), dtype=complex)
    arr = np.asarray(f, dtype=complex)
    if arr.shape != (gen.n,):
        raise ValueError("payoff must provide one value per state")
    return arr


def _anchor_index(gen: Generator, x) -> int:
    if x is None:
        return gen.grid.eta_x
    if isinstance(x, (int, np.integer)):
        return int(x)
    return gen.grid.index_of(float(x))


def _toeplitz_D_init(gen, f_arr: np.ndarray, cut: int) -> np.ndarray:
    """Off-diagonal payoff inflow sum_{z <= cut, z != m} G(m, z) f[z] on a
    translation-invariant lattice, via one FFT correlation plus local and
    boundary-column corrections."""
    n = gen.n
    D = np.zeros(n, dtype=complex)
    if cut < 0:
        return D
    hi = min(cut, n - 2)
    if hi >= 1:
        f_seg = np.zeros(n, dtype=complex)
        f_seg[1:hi + 1] = f_arr[1:hi + 1]
        rev = gen.stencil[::-1]
        D += fftconvolve(f_seg, rev)[n - 1:2 * n - 1]
        D[0:hi] += gen.local_up * f_arr[1:hi + 1]
        D[2:hi + 2] += gen.local_down * f_arr[1:hi + 1]
    # column 0 carries the extended tail bin
    D[1:n - 1] += gen.tail_bot[1:n - 1] * f_arr[0]
    D[1] += gen.local_down * f_arr[0]
    D[0] = D[n - 1] = 0.0
    return D


def _D_init(gen: Generator, f_arr: np.ndarray, cut: int) -> np.ndarray:
    """Initial payoff-inflow vector, excluding diagonal column terms (rows
    inside a window never have their own column in the below-window set)."""
    n = gen.n
    if cut < 0:
        return np.zeros(n, dtype=complex)
    if gen.structure == TOEPLITZ_LEVY:
        return _toeplitz_D_init(gen, f_arr, cut)
    if gen.structure == GENERAL:
        D = gen.rates[:, :cut + 1].astype(complex) @ f_arr[:cut + 1]
        z = np.arange(cut + 1)
        D[z] -= np.diag(gen.rates)[z] * f_arr[z]
        D[0] = D[n - 1] = 0.0
        return D
    D = np.zeros(n, dtype=complex)
    for z in range(0, cut + 1):
        c0, c1 = gen.col_support(z)
        col = gen.column(z)
        col[z] = 0.0
        D[c0:c1] += col[c0:c1] * f_arr[z]
    D[0] = D[n - 1] = 0.0
    return D


class _WindowSolver:
    """Last-row window solves with structure dispatch and LU caching."""

    def __init__(self, gen: Generator, use_smw: bool = False):
        self.gen = gen
        self.use_smw = use_smw and gen.structure == GENERAL
        self.cache = {}
        self.ambient: Optional[AmbientInverse] = None
        self._bd_diag = gen.diagonal() if gen.structure == BIRTH_DEATH else None

    def last_row_solve(self, lo: int, i: int, kv: np.ndarray, rhs: np.ndarray) -> complex:
        gen = self.gen
        if gen.structure == BIRTH_DEATH:
            m = i - lo + 1
            ab = np.zeros((3, m), dtype=complex)
            ab[1] = kv - self._bd_diag[lo:i + 1]
            if m > 1:
                ab[0, 1:] = -gen.up[lo:i]
                ab[2, :-1] = -gen.down[lo + 1:i + 1]
            try:
                sol = sla.solve_banded((1, 1), ab, rhs)
            except (np.linalg.LinAlgError, ValueError) as exc:
                raise Singular(str(exc)) from exc
            return complex(sol[-1])
        if gen.structure == TOEPLITZ_LEVY:
            key = (i - lo, lo == 0, tuple(kv.tolist()))
            hit = self.cache.get(key)
            if hit is None:
                mat = np.diag(kv) - gen.window_block(lo, i).astype(complex)
                lu = sla.lu_factor(mat)
                e = np.zeros(i - lo + 1, dtype=complex)
                e[-1] = 1.0
                w = sla.lu_solve(lu, e, trans=1)
                hit = w
                self.cache[key] = hit
            return complex(hit @ rhs)
        mat = np.diag(kv) - gen.window_block(lo, i).astype(complex)
        try:
            sol = np.linalg.solve(mat, rhs)
        except np.linalg.LinAlgError as exc:
            raise Singular(str(exc)) from exc
        return complex(sol[-1])


def backward_window_sweep(gen: Generator, a_steps: int, killing_fn: Callable,
                          f_arr: np.ndarray, stop: int, *,
                          use_smw: bool = False,
                          solver: "_WindowSolver" = None) -> np.ndarray:
    """Backward recursion over window tops; returns the value vector.

    killing_fn(i, lo) must return the complex killing rates on the window
    rows [lo..i].  f_arr is the payoff collected at down-exit (full-state
    array).  values[j] is filled for stop <= j <= N-1; the two absorbing
    ends stay 0.  A shared ``solver`` carries window factorizations across
    repeated sweeps with the same killing (event-count recursions).
    """
    if use_smw and gen.structure == GENERAL:
        return _sweep_smw(gen, a_steps, killing_fn, f_arr, stop)

    n = gen.n
    V = np.zeros(n, dtype=complex)
    S = np.zeros(n, dtype=complex)
    cut = (n - 2) - a_steps
    D = _D_init(gen, f_arr, cut)

    if solver is None:
        solver = _WindowSolver(gen)
    for i in range(n - 2, stop - 1, -1):
        lo = max(0, i - a_steps + 1)
        kv = np.asarray(killing_fn(i, lo), dtype=complex)
        rhs = D[lo:i + 1] + S[lo:i + 1]
        V[i] = solver.last_row_solve(lo, i, kv, rhs)
        if V[i] != 0.0:
            c0, c1 = gen.col_support(i)
            c1 = min(c1, i)
            if c1 > c0:
                col = gen.column(i)
                S[c0:c1] += col[c0:c1] * V[i]
        if cut >= 0 and f_arr[cut] != 0.0:
            c0, c1 = gen.col_support(cut)
            col = gen.column(cut)
            col[cut] = 0.0   # diagonal column terms are kept out of D
            D[c0:c1] -= col[c0:c1] * f_arr[cut]
        cut -= 1
    return V


def _sweep_smw(gen: Generator, a_steps: int, killing_fn: Callable,
               f_arr: np.ndarray, stop: int) -> np.ndarray:
    """Same sweep through the ambient-matrix inverse updated by SMW swaps."""
    n = gen.n
    if n > 2500:
        raise TooLarge("SMW ambient path caps at 2500 states")
    V = np.zeros(n, dtype=complex)
    kill_full = np.zeros(n, dtype=complex)
    ambient = None
    for i in range(n - 2, stop - 1, -1):
        lo = max(0, i - a_steps + 1)
        kv = np.asarray(killing_fn(i, lo), dtype=complex)
        kill_full[lo:i + 1] = kv
        if ambient is None:
            ambient = AmbientInverse(gen, kill_full, lo, i)
        else:
            ambient.killing = kill_full
            ambient.shift(lo, i)
        cut = i - a_steps
        b_full = np.zeros(n, dtype=complex)
        if cut >= 0:
            b_full[:cut + 1] = f_arr[:cut + 1]
        b_full[i + 1:] = V[i + 1:]
        V[i] = ambient.apply_row(i, b_full)
    return V


# ---------------------------------------------------------------------------
# Q: drawdown-time transform
# ---------------------------------------------------------------------------

def _psi_sweep_coeffs(gen: Generator, q: complex, a_steps: int, stop: int):
    """Per-top exit weights of the drawdown windows from one pair of
    fundamental solutions (reusable across repeated sweeps)."""
    psi = psi_pair(gen, q)
    idx = np.arange(stop, gen.n - 1)
    lo = np.maximum(0, idx - a_steps + 1)
    bottom = np.where(lo > 0, lo - 1, 0)
    den = psi.bridge_many(idx + 1, bottom)
    up = psi.ratio_many(psi.bridge_many(idx, bottom), den)
    down = psi.ratio_many(psi.bridge_many(idx + 1, idx), den)
    return idx, up, down


def _q_psi_sweep(gen: Generator, q: complex, a_steps: int, f_arr: np.ndarray,
                 stop: int, coeffs=None) -> np.ndarray:
    """Birth-death fast path: every window exit weight is a bridge ratio of
    one fundamental-solution pair."""
    idx, up, down = coeffs if coeffs is not None else _psi_sweep_coeffs(gen, q, a_steps, stop)
    V = np.zeros(gen.n, dtype=complex)
    for pos in range(idx.size - 1, -1, -1):
        i = idx[pos]
        fl = i - a_steps
        pay = f_arr[fl] if fl >= 0 else 0.0
        V[i] = down[pos] * pay + up[pos] * V[i + 1]
    return V


def q_drawdown(gen: Generator, q: complex, a: float, f=None, x=None, *,
               force_generic: bool = False, use_smw: bool = False) -> complex:
    """E[e^{-q tau_a} f(Y_{tau_a})] started from a fresh running maximum."""
    grid = gen.grid
    a_steps = grid.steps_of(a)
    eta = _anchor_index(gen, x)
    f_arr = _payoff(gen, f)
    if gen.structure == BIRTH_DEATH and not force_generic and not use_smw:
        V = _q_psi_sweep(gen, complex(q), a_steps, f_arr, eta)
    else:
        kfn = lambda i, lo: np.full(i - lo + 1, complex(q))
        V = backward_window_sweep(gen, a_steps, kfn, f_arr, eta, use_smw=use_smw)
    return complex(V[eta])


# ---------------------------------------------------------------------------
# B: generalized occupation until the drawdown time
# ---------------------------------------------------------------------------

def occupation_until_drawdown(gen: Generator, k, a: float, f=None, x=None, *,
                              use_smw: bool = False) -> complex:
    """E[e^{-int_0^{tau_a} k(Y_s) ds} f(Y_{tau_a})]."""
    grid = gen.grid
    a_steps = grid.steps_of(a)
    eta = _anchor_index(gen, x)
    f_arr = _payoff(gen, f)
    kf = KillingField.coerce(k)
    kill = kf.values(gen.states)
    kfn = lambda i, lo: kill[lo:i + 1]
    V = backward_window_sweep(gen, a_steps, kfn, f_arr, eta, use_smw=use_smw)
    return complex(V[eta])


# ---------------------------------------------------------------------------
# C: occupation of the drawdown process until the drawdown time
# ---------------------------------------------------------------------------

def _k2_field(k2, q: complex = None, xi: float = None, shift: complex = 0.0) -> KillingField:
    if k2 is not None:
        return k2 if isinstance(k2, KillingField) else KillingField.bivariate(k2)
    if q is None or xi is None:
        raise ValueError("need either k2 or (q, xi)")
    return drawdown_occupation_killing(q, xi, shift)


def drawdown_occupation(gen: Generator, k2, a: float, f=None, x=None) -> complex:
    """E[e^{-int_0^{tau_a} k(Y_s, max_s) ds} f(Y_{tau_a})].

    Inside the window topped at y_i the running maximum is frozen at y_i,
    so each step is a univariate windowed solve with killing k2(., y_i).
    """
    grid = gen.grid
    a_steps = grid.steps_of(a)
    eta = _anchor_index(gen, x)
    f_arr = _payoff(gen, f)
    kf = k2 if isinstance(k2, KillingField) else KillingField.bivariate(k2)
    states = gen.states

    def kfn(i, lo):
        return kf.values2(states[lo:i + 1], states[i])

    V = backward_window_sweep(gen, a_steps, kfn, f_arr, eta)
    return complex(V[eta])


def c_levy_closed_form(gen: Generator, q: complex, a: float, xi: float, *,
                       shift: complex = 0.0) -> complex:
    """Translation-invariant solution of the drawdown-occupation transform
    with k(x, max) = q 1_{max - x > xi} + shift: one window solve."""
    if gen.structure != TOEPLITZ_LEVY:
        raise NotLevy("closed form needs a translation-invariant lattice generator")
    grid = gen.grid
    a_steps = grid.steps_of(a)
    eta = grid.eta_x
    lo = eta - a_steps + 1
    if lo < 1:
        raise DegenerateWindow("lattice too narrow below the anchor")
    states = gen.states
    kf = drawdown_occupation_killing(q, xi, shift)
    kv = kf.values2(states[lo:eta + 1], states[eta])
    mat = np.diag(kv) - gen.window_block(lo, eta).astype(complex)
    lu = sla.lu_factor(mat)
    e = np.zeros(eta - lo + 1, dtype=complex)
    e[-1] = 1.0
    w = sla.lu_solve(lu, e, trans=1)
    below = np.zeros(gen.n, dtype=complex)
    below[:lo] = 1.0
    above = np.zeros(gen.n, dtype=complex)
    above[eta + 1:] = 1.0
    rows = np.arange(lo, eta + 1)
    rhs_dn = np.zeros(rows.size, dtype=complex)
    rhs_up = np.zeros(rows.size, dtype=complex)
    for m in rows:
        row = gen.row(m)
        rhs_dn[m - lo] = row[:lo] @ below[:lo]
        rhs_up[m - lo] = row[eta + 1:] @ above[eta + 1:]
    p_dn = complex(w @ rhs_dn)
    p_up = complex(w @ rhs_up)
    den = 1.0 - p_up
    if abs(den) < 1e-14:
        raise FixedPointSingular("unit up-exit weight in the closed form")
    return p_dn / den


# ---------------------------------------------------------------------------
# A: drawdown before drawup
# ---------------------------------------------------------------------------

def drawdown_before_drawup(gen: Generator, q: complex, a: float, b: float,
                           f=None, x=None, y=None, *,
                           force_generic: bool = False) -> complex:
    """E[e^{-q tau_a} 1_{tau_a < tauhat_b} f(Y_{tau_a})] from position x
    (= running max) and running min y.  Requires b >= a.

    An off-lattice starting minimum y is handled by linear interpolation
    between the bracketing grid states (the value is piecewise linear in
    the discrete minimum).
    """
    if b < a:
        raise UnsupportedRegime("the b < a regime is out of scope")
    grid = gen.grid
    a_steps = grid.steps_of(a)
    b_steps = grid.steps_at_least(b)
    eta = _anchor_index(gen, x)
    q = complex(q)
    f_arr = _payoff(gen, f)
    if y is None:
        y_pos = float(eta)
    else:
        y_pos = (float(y) - grid.x0) / grid.h + grid.eta_x
    if y_pos > eta + 1e-9:
        raise ValueError("running minimum cannot exceed the position")
    l0 = min(int(np.floor(y_pos + 1e-9)), eta)
    wgt = y_pos - l0
    if gen.structure == BIRTH_DEATH and not force_generic:
        row = _a_diffusion(gen, q, a_steps, b_steps, f_arr, eta)
    else:
        row = _a_generic(gen, q, a_steps, b_steps, f_arr, eta)
    lob = max(0, eta - b_steps + 1)

    def at(l):
        if l < lob:
            return 0.0 + 0.0j   # drawup already at or past b
        return complex(row[l])

    if wgt < 1e-9:
        return at(l0)
    return (1.0 - wgt) * at(l0) + wgt * at(l0 + 1)


def _a_diffusion(gen: Generator, q: complex, a_steps: int, b_steps: int,
                 f_arr: np.ndarray, eta: int) -> np.ndarray:
    """Birth-death path: all sub-window exits are single-target, every
    coefficient a bridge ratio; only the row above is ever referenced.
    Returns the value row over the starting-minimum index at position eta."""
    n = gen.n
    psi = psi_pair(gen, q)
    row_next = np.zeros(n, dtype=complex)   # A(q, y_{i+1}, .) by min index
    row_cur = np.zeros(n, dtype=complex)
    for i in range(n - 2, eta - 1, -1):
        lo = max(0, i - a_steps + 1)
        lob = max(0, i - b_steps + 1)
        row_cur[:] = 0.0
        bottom = lo - 1 if lo > 0 else 0
        den = psi.bridge(i + 1, bottom)
        up_full = psi.ratio_many(psi.bridge(i, bottom), den)
        dn_full = psi.ratio_many(psi.bridge(i + 1, i), den) if lo > 0 else 0.0
        pay = dn_full * f_arr[lo - 1] if lo > 0 else 0.0
        # frozen-minimum block: minima in (y_i - b, y_i - a] plus the window
        # bottom state, where the minimum cannot move before exit
        row_cur[lob:lo + 1] = pay + up_full * row_next[lob:lo + 1]
        if i > lo:
            # sub-window exits [t..i]: from the top (inner assignments) and
            # from the bottom (minimum-update continuations)
            t = np.arange(lo + 1, i + 1)
            den_t = psi.bridge_many(np.full(t.size, i + 1), t - 1)
            up_top = psi.ratio_many(psi.bridge_many(np.full(t.size, i), t - 1), den_t)
            dn_top = psi.ratio_many(psi.bridge_many(np.full(t.size, i + 1), np.full(t.size, i)), den_t)
            m = np.arange(lo, i)
            m_bot = np.maximum(m - 1, 0)   # m = 0 only at the absorbing state, where the value is forced to 0
            den_m = psi.bridge_many(np.full(m.size, i + 1), m_bot)
            up_bot = psi.ratio_many(psi.bridge_many(np.maximum(m, 1), m_bot), den_m)
            dn_bot = psi.ratio_many(psi.bridge_many(np.full(m.size, i + 1), m), den_m)
            r_prev = 0.0 + 0.0j
            r_diag = np.zeros(m.size, dtype=complex)
            for pos in range(m.size):
                mm = m[pos]
                if mm == 0:
                    r_diag[pos] = 0.0  # absorbed at the bottom state
                else:
                    cont_dn = r_prev if mm > lo else 0.0
                    r_diag[pos] = dn_bot[pos] * cont_dn + up_bot[pos] * row_next[mm]
                r_prev = r_diag[pos]
            row_cur[lo + 1:i + 1] = pay + dn_top * r_diag + up_top * row_next[lo + 1:i + 1]
        row_next, row_cur = row_cur, row_next
    return row_next


def _a_generic(gen: Generator, q: complex, a_steps: int, b_steps: int,
               f_arr: np.ndarray, eta: int) -> np.ndarray:
    """Dense double recursion over (window top, running minimum)."""
    n = gen.n
    if n > 2000:
        raise TooLarge("generic drawdown-before-drawup path caps at 2000 states")
    A = np.zeros((n, n), dtype=complex)   # A[i, l]: top/position i, min l
    dense = gen.to_dense(max_states=n).astype(complex)
    eye = np.eye
    for i in range(n - 2, eta - 1, -1):
        lo = max(0, i - a_steps + 1)
        lob = max(0, i - b_steps + 1)
        rows = np.arange(lo, i + 1)
        sub = dense[np.ix_(rows, rows)]
        mat = q * eye(rows.size, dtype=complex) - sub
        rhs_f = dense[np.ix_(rows, np.arange(0, lo))] @ f_arr[:lo] if lo > 0 else np.zeros(rows.size, dtype=complex)
        above = np.arange(i + 1, n)
        up_block = dense[np.ix_(rows, above)]
        # frozen-minimum columns l in [lob .. lo]
        cols = np.arange(lob, lo + 1)
        rhs_frozen = up_block @ A[np.ix_(above, cols)]
        try:
            sol = np.linalg.solve(mat, np.column_stack([rhs_f, rhs_frozen]))
        except np.linalg.LinAlgError as exc:
            raise Singular(str(exc)) from exc
        pay = complex(sol[-1, 0])
        A[i, lob:lo + 1] = pay + sol[-1, 1:]
        r_diag = np.zeros(i, dtype=complex)       # R(q, y_t, y_t) indexed by t
        if lo < i:
            # single-state windows (a one step wide) have no interior minima
            r_diag[lo] = complex(sol[0, 1 + (lo - lob)])
        for t in range(lo + 1, i + 1):
            rows_t = np.arange(t, i + 1)
            mat_t = q * eye(rows_t.size, dtype=complex) - dense[np.ix_(rows_t, rows_t)]
            rhs_t = dense[np.ix_(rows_t, np.arange(lo, t))] @ r_diag[lo:t]
            rhs_t += dense[np.ix_(rows_t, above)] @ A[above, t]
            try:
                sol_t = np.linalg.solve(mat_t, rhs_t)
            except np.linalg.LinAlgError as exc:
                raise Singular(str(exc)) from exc
            if t <= i - 1:
                r_diag[t] = complex(sol_t[0])
            A[i, t] = pay + complex(sol_t[-1])
    return A[eta]


# ---------------------------------------------------------------------------
# H: n-th drawdown without recovery, and the event-sum fixed point
# ---------------------------------------------------------------------------

def nth_drawdown_no_recovery(gen: Generator, q: complex, a: float, f=None,
                             x=None, n: int = 1) -> complex:
    """E[e^{-q tautilde_{a,n}} f(Y_{tautilde_{a,n}})]; the reference maximum
    restarts at every event.  The window factorizations do not depend on
    the event count, so they are built once and reused across the n sweeps.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    grid = gen.grid
    a_steps = grid.steps_of(a)
    eta = _anchor_index(gen, x)
    q = complex(q)
    prev = _payoff(gen, f)
    if gen.structure == BIRTH_DEATH:
        coeffs = _psi_sweep_coeffs(gen, q, a_steps, 0)
        for _ in range(n):
            prev = _q_psi_sweep(gen, q, a_steps, prev, 0, coeffs)
    else:
        kfn = lambda i, lo: np.full(i - lo + 1, q)
        solver = _WindowSolver(gen)
        for _ in range(n):
            prev = backward_window_sweep(gen, a_steps, kfn, prev, 0, solver=solver)
    return complex(prev[eta])


def _h_coeff_rows_bd(gen: Generator, q: complex, a_steps: int):
    """Per-state up/down exit weights of the drawdown window (birth-death)."""
    n = gen.n
    psi = psi_pair(gen, q)
    idx = np.arange(1, n - 1)
    lo = np.maximum(0, idx - a_steps + 1)
    bottom = np.where(lo > 0, lo - 1, 0)
    den = psi.bridge_many(idx + 1, bottom)
    up = psi.ratio_many(psi.bridge_many(idx, bottom), den)
    down = psi.ratio_many(psi.bridge_many(idx + 1, idx), den)
    down = np.where(lo > 0, down, 0.0)
    return idx, lo, up, down


def insurance_partial_sums(gen: Generator, q: complex, a: float, x=None, y=None, *,
                           recovery: bool = False, n_max: int = 50,
                           tol: float = 1e-10) -> np.ndarray:
    """Running partial sums of the per-event transforms, the convergence
    diagnostic for the event-sum fixed points.  Stops early once an
    increment drops below tol (default 50 events, 1e-10)."""
    grid = gen.grid
    a_steps = grid.steps_of(a)
    eta = _anchor_index(gen, x)
    q = complex(q)
    sums = []
    total = 0.0 + 0.0j
    if not recovery:
        prev = _payoff(gen, None)
        coeffs = _psi_sweep_coeffs(gen, q, a_steps, 0) if gen.structure == BIRTH_DEATH else None
        solver = None if coeffs is not None else _WindowSolver(gen)
        kfn = lambda i, lo: np.full(i - lo + 1, q)
        for _ in range(n_max):
            if coeffs is not None:
                prev = _q_psi_sweep(gen, q, a_steps, prev, 0, coeffs)
            else:
                prev = backward_window_sweep(gen, a_steps, kfn, prev, 0, solver=solver)
            term = complex(prev[eta])
            total += term
            sums.append(total)
            if abs(term) < tol:
                break
        return np.array(sums)
    for k in range(1, n_max + 1):
        term = nth_drawdown_with_recovery(gen, q, a, x=x, y=y, n=k)
        total += term
        sums.append(total)
        if abs(term) < tol:
            break
    return np.array(sums)


def insurance_no_recovery(gen: Generator, q: complex, a: float, x=None, *,
                          force_generic: bool = False) -> complex:
    """Sum over all no-recovery drawdown events of e^{-q tautilde_{a,k}}:
    fixed point H = P (1 + H_below) + P H_above."""
    grid = gen.grid
    a_steps = grid.steps_of(a)
    eta = _anchor_index(gen, x)
    q = complex(q)
    n = gen.n
    if gen.structure == TOEPLITZ_LEVY and not force_generic:
        return h_levy_closed_form(gen, q, a)
    if gen.structure == BIRTH_DEATH and not force_generic:
        idx, lo, up, down = _h_coeff_rows_bd(gen, q, a_steps)
        floor = idx - a_steps
        rows_list = [np.arange(n)]
        cols_list = [np.arange(n)]
        data_list = [np.ones(n, dtype=complex)]
        rows_list.append(idx)
        cols_list.append(idx + 1)
        data_list.append(-up)
        has_floor = floor >= 0
        rows_list.append(idx[has_floor])
        cols_list.append(floor[has_floor])
        data_list.append(-down[has_floor])
        mat = sp.csc_matrix(
            (np.concatenate(data_list),
             (np.concatenate(rows_list), np.concatenate(cols_list))),
            shape=(n, n))
        rhs = np.zeros(n, dtype=complex)
        rhs[idx] = down
        try:
            sol = spla.spsolve(mat, rhs)
        except Exception as exc:  # scipy raises several types here
            raise FixedPointSingular(str(exc)) from exc
        return complex(sol[eta])
    # generic: assemble the full exit-weight matrix row by row
    if n > 1500:
        raise TooLarge("generic insurance fixed point caps at 1500 states")
    dense = gen.to_dense(max_states=n).astype(complex)
    P = np.zeros((n, n), dtype=complex)
    for i in range(1, n - 1):
        lo = max(0, i - a_steps + 1)
        rows = np.arange(lo, i + 1)
        mat = q * np.eye(rows.size, dtype=complex) - dense[np.ix_(rows, rows)]
        e = np.zeros(rows.size, dtype=complex)
        e[-1] = 1.0
        try:
            w = np.linalg.solve(mat.T, e)
        except np.linalg.LinAlgError as exc:
            raise Singular(str(exc)) from exc
        outside = np.concatenate([np.arange(0, lo), np.arange(i + 1, n)])
        P[i, outside] = w @ dense[np.ix_(rows, outside)]
    below_mask = np.zeros((n, n), dtype=bool)
    for i in range(n):
        below_mask[i, :max(0, i - a_steps + 1)] = True
    P_below_sum = (P * below_mask).sum(axis=1)
    try:
        sol = np.linalg.solve(np.eye(n, dtype=complex) - P, P_below_sum)
    except np.linalg.LinAlgError as exc:
        raise FixedPointSingular(str(exc)) from exc
    return complex(sol[eta])


def _levy_window_masses(gen: Generator, q: complex, a_steps: int, payoff_below=None):
    """Exit masses of the anchored window (-a, 0] on a lattice: returns
    (down_mass, up_mass, down_weighted) where down_weighted applies an
    optional payoff vector over the below-window states."""
    grid = gen.grid
    eta = grid.eta_x
    lo = eta - a_steps + 1
    if lo < 1:
        raise DegenerateWindow("lattice too narrow below the anchor")
    kv = np.full(eta - lo + 1, complex(q))
    mat = np.diag(kv) - gen.window_block(lo, eta).astype(complex)
    lu = sla.lu_factor(mat)
    e = np.zeros(eta - lo + 1, dtype=complex)
    e[-1] = 1.0
    w = sla.lu_solve(lu, e, trans=1)
    rows = np.arange(lo, eta + 1)
    rhs_dn = np.zeros(rows.size, dtype=complex)
    rhs_up = np.zeros(rows.size, dtype=complex)
    rhs_wt = np.zeros(rows.size, dtype=complex)
    for m in rows:
        row = gen.row(m).astype(complex)
        rhs_dn[m - lo] = row[:lo].sum()
        rhs_up[m - lo] = row[eta + 1:].sum()
        if payoff_below is not None:
            rhs_wt[m - lo] = row[:lo] @ payoff_below[:lo]
    return complex(w @ rhs_dn), complex(w @ rhs_up), complex(w @ rhs_wt)


def h_levy_closed_form(gen: Generator, q: complex, a: float) -> complex:
    """Translation-invariant insurance sum without recovery."""
    if gen.structure != TOEPLITZ_LEVY:
        raise NotLevy("closed form needs a translation-invariant lattice generator")
    a_steps = gen.grid.steps_of(a)
    p_dn, p_up, _ = _levy_window_masses(gen, complex(q), a_steps)
    den = 1.0 - p_dn - p_up
    if abs(den) < 1e-14:
        raise FixedPointSingular("degenerate fixed point in the closed form")
    return p_dn / den


# ---------------------------------------------------------------------------
# J: n-th drawdown with recovery, and the event-sum fixed point
# ---------------------------------------------------------------------------

def _bipayoff(gen: Generator, f2) -> Callable:
    states = gen.states
    if f2 is None:
        return lambda z_idx, y_idx: np.ones(np.size(z_idx), dtype=complex)
    if callable(f2):
        return lambda z_idx, y_idx: np.asarray(
            f2(states[np.asarray(z_idx)], states[y_idx]), dtype=complex)
    arr = np.asarray(f2, dtype=complex)
    return lambda z_idx, y_idx: arr[np.asarray(z_idx), y_idx]


def nth_drawdown_with_recovery(gen: Generator, q: complex, a: float, f2=None,
                               x=None, y=None, n: int = 1, *,
                               force_generic: bool = False) -> complex:
    """E[e^{-q tau_{a,n}} f2(Y, max)] where each new event requires the
    running maximum to recover to its level at the previous event."""
    if n < 1:
        raise ValueError("n must be >= 1")
    grid = gen.grid
    a_steps = grid.steps_of(a)
    eta_x = _anchor_index(gen, x)
    eta_y = eta_x if y is None else _anchor_index(gen, y)
    if eta_x > eta_y:
        raise ValueError("position x must not exceed the running max y")
    q = complex(q)
    f2_fn = _bipayoff(gen, f2)
    if gen.structure == BIRTH_DEATH and not force_generic:
        return _jn_diffusion(gen, q, a_steps, f2_fn, eta_x, eta_y, n)
    return _jn_generic(gen, q, a_steps, f2_fn, eta_x, eta_y, n)


def _jn_diffusion(gen, q, a_steps, f2_fn, eta_x, eta_y, n) -> complex:
    nn = gen.n
    psi = psi_pair(gen, q)
    idx = np.arange(1, nn - 1)
    lo = np.maximum(0, idx - a_steps + 1)
    bottom = np.where(lo > 0, lo - 1, 0)
    den = psi.bridge_many(idx + 1, bottom)
    up = psi.ratio_many(psi.bridge_many(idx, bottom), den)
    down = np.where(lo > 0,
                    psi.ratio_many(psi.bridge_many(idx + 1, idx), den), 0.0)
    diag_prev = None
    for k in range(1, n + 1):
        diag_cur = np.zeros(nn, dtype=complex)
        for pos in range(idx.size - 1, -1, -1):
            i = idx[pos]
            fl = i - a_steps
            if fl >= 0:
                if k == 1:
                    pay = complex(f2_fn(np.array([fl]), i)[0])
                else:
                    # previous-count value at (floor, max=i): must recover to i
                    pay = psi.ratio_plus(fl, i) * diag_prev[i]
                val = down[pos] * pay
            else:
                val = 0.0
            diag_cur[i] = val + up[pos] * diag_cur[i + 1]
        diag_prev = diag_cur
    if eta_x == eta_y:
        return complex(diag_prev[eta_y])
    return psi.ratio_plus(eta_x, eta_y) * complex(diag_prev[eta_y])


def _jn_generic(gen, q, a_steps, f2_fn, eta_x, eta_y, n) -> complex:
    nn = gen.n
    if nn > 600:
        raise TooLarge("generic recovery recursion caps at 600 states")
    dense = gen.to_dense(max_states=nn).astype(complex)
    # initial condition: the zeroth "event value" is the terminal payoff
    J_prev = np.zeros((nn, nn), dtype=complex)   # J_{k-1}[x, y]
    for yy in range(nn):
        J_prev[:yy + 1, yy] = f2_fn(np.arange(yy + 1), yy)
    for k in range(1, n + 1):
        J_cur = np.zeros((nn, nn), dtype=complex)
        for i in range(nn - 2, -1, -1):
            lo = max(0, i - a_steps + 1)
            rows = np.arange(lo, i + 1)
            mat = q * np.eye(rows.size, dtype=complex) - dense[np.ix_(rows, rows)]
            rhs = np.zeros(rows.size, dtype=complex)
            if lo > 0:
                rhs += dense[np.ix_(rows, np.arange(lo))] @ J_prev[:lo, i]
            above = np.arange(i + 1, nn)
            diag_above = J_cur[above, above]
            rhs += dense[np.ix_(rows, above)] @ diag_above
            try:
                sol = np.linalg.solve(mat, rhs)
            except np.linalg.LinAlgError as exc:
                raise Singular(str(exc)) from exc
            J_cur[i, i] = sol[-1]
            # recovery fill below the diagonal: first passage to >= y_i
            if i >= 1:
                rows_b = np.arange(0, i)
                mat_b = q * np.eye(i, dtype=complex) - dense[np.ix_(rows_b, rows_b)]
                targets = np.arange(i, nn)
                rhs_b = dense[np.ix_(rows_b, targets)] @ J_cur[targets, targets]
                try:
                    sol_b = np.linalg.solve(mat_b, rhs_b)
                except np.linalg.LinAlgError as exc:
                    raise Singular(str(exc)) from exc
                J_cur[:i, i] = sol_b
        J_prev = J_cur
    return complex(J_prev[eta_x, eta_y])


def insurance_with_recovery(gen: Generator, q: complex, a: float, x=None,
                            y=None, *, force_generic: bool = False) -> complex:
    """Sum over all with-recovery drawdown events of e^{-q tau_{a,k}}."""
    grid = gen.grid
    a_steps = grid.steps_of(a)
    eta_x = _anchor_index(gen, x)
    eta_y = eta_x if y is None else _anchor_index(gen, y)
    if eta_x > eta_y:
        raise ValueError("position x must not exceed the running max y")
    q = complex(q)
    if gen.structure == TOEPLITZ_LEVY and not force_generic:
        return j_levy_closed_form(gen, q, a, x=eta_x, y=eta_y)
    if gen.structure == BIRTH_DEATH and not force_generic:
        return _jsum_diffusion(gen, q, a_steps, eta_x, eta_y)
    return _jsum_generic(gen, q, a_steps, eta_x, eta_y)


def _jsum_diffusion(gen, q, a_steps, eta_x, eta_y) -> complex:
    """O(N) backward recursion: each diagonal value couples to the one above
    and to itself through the down-exit/recovery cycle."""
    nn = gen.n
    psi = psi_pair(gen, q)
    diag = np.zeros(nn, dtype=complex)
    for i in range(nn - 2, -1, -1):
        lo = max(0, i - a_steps + 1)
        if i == 0:
            diag[0] = 0.0
            continue
        bottom = lo - 1 if lo > 0 else 0
        den = psi.bridge(i + 1, bottom)
        up = psi.ratio_many(psi.bridge(i, bottom), den)
        fl = i - a_steps
        if fl >= 0:
            dn = psi.ratio_many(psi.bridge(i + 1, i), den)
            rec = psi.ratio_plus(fl, i)
            denom = 1.0 - dn * rec
            if abs(denom) < 1e-15:
                raise FixedPointSingular("recovery cycle weight reached 1")
            diag[i] = (up * diag[i + 1] + dn) / denom
        else:
            diag[i] = up * diag[i + 1]
    if eta_x == eta_y:
        return complex(diag[eta_y])
    return psi.ratio_plus(eta_x, eta_y) * complex(diag[eta_y])


def _jsum_generic(gen, q, a_steps, eta_x, eta_y) -> complex:
    """Fixed point over the diagonal values, with dense recovery solves."""
    nn = gen.n
    if nn > 500:
        raise TooLarge("generic recovery fixed point caps at 500 states")
    dense = gen.to_dense(max_states=nn).astype(complex)
    M = np.zeros((nn, nn), dtype=complex)
    c = np.zeros(nn, dtype=complex)
    for i in range(1, nn - 1):
        lo = max(0, i - a_steps + 1)
        rows = np.arange(lo, i + 1)
        mat = q * np.eye(rows.size, dtype=complex) - dense[np.ix_(rows, rows)]
        e = np.zeros(rows.size, dtype=complex)
        e[-1] = 1.0
        try:
            w = np.linalg.solve(mat.T, e)
        except np.linalg.LinAlgError as exc:
            raise Singular(str(exc)) from exc
        p = np.zeros(nn, dtype=complex)
        outside = np.concatenate([np.arange(0, lo), np.arange(i + 1, nn)])
        p[outside] = w @ dense[np.ix_(rows, outside)]
        above = np.arange(i + 1, nn)
        M[i, above] += p[above]
        if lo > 0:
            below = np.arange(0, lo)
            c[i] = p[below].sum()
            rec_rows = np.arange(0, i)
            mat_b = q * np.eye(i, dtype=complex) - dense[np.ix_(rec_rows, rec_rows)]
            targets = np.arange(i, nn)
            rhs_b = dense[np.ix_(rec_rows, targets)]
            try:
                REC = np.linalg.solve(mat_b, rhs_b)   # (i, targets)
            except np.linalg.LinAlgError as exc:
                raise Singular(str(exc)) from exc
            M[i, targets] += p[below] @ REC[below, :]
    try:
        diag = np.linalg.solve(np.eye(nn, dtype=complex) - M, c)
    except np.linalg.LinAlgError as exc:
        raise FixedPointSingular(str(exc)) from exc
    if eta_x == eta_y:
        return complex(diag[eta_y])
    if eta_y == 0:
        return complex(diag[0])
    rec_rows = np.arange(0, eta_y)
    mat_b = q * np.eye(eta_y, dtype=complex) - dense[np.ix_(rec_rows, rec_rows)]
    targets = np.arange(eta_y, nn)
    rhs_b = dense[np.ix_(rec_rows, targets)] @ diag[targets]
    sol_b = np.linalg.solve(mat_b, rhs_b)
    return complex(sol_b[eta_x])


def j_levy_closed_form(gen: Generator, q: complex, a: float, x=None, y=None) -> complex:
    """Translation-invariant insurance sum with recovery.

    Needs one window solve on (-a, 0], one recovery solve on the window
    between the lattice bottom and the anchor, and (for x < y) one more
    recovery factor.
    """
    if gen.structure != TOEPLITZ_LEVY:
        raise NotLevy("closed form needs a translation-invariant lattice generator")
    grid = gen.grid
    a_steps = grid.steps_of(a)
    eta = grid.eta_x
    q = complex(q)
    eta_x = eta if x is None else (int(x) if isinstance(x, (int, np.integer)) else grid.index_of(float(x)))
    eta_y = eta_x if y is None else (int(y) if isinstance(y, (int, np.integer)) else grid.index_of(float(y)))
    nn = gen.n
    if eta - 1 > 3000:
        raise TooLarge("recovery window too large for the dense closed form")
    # recovery weights u(z) = E_z[e^{-qT} ; reach >= anchor before the bottom]
    rows = np.arange(1, eta)
    mat = q * np.eye(rows.size, dtype=complex) - gen.window_block(1, eta - 1).astype(complex)
    rhs = np.zeros(rows.size, dtype=complex)
    for m in rows:
        row = gen.row(m)
        rhs[m - 1] = row[eta:].sum()
    try:
        u_int = np.linalg.solve(mat, rhs)
    except np.linalg.LinAlgError as exc:
        raise Singular(str(exc)) from exc
    u = np.zeros(nn, dtype=complex)
    u[1:eta] = u_int
    p_dn, p_up, p_mix = _levy_window_masses(gen, q, a_steps, payoff_below=u)
    den = 1.0 - p_up - p_mix
    if abs(den) < 1e-14:
        raise FixedPointSingular("degenerate recovery fixed point")
    j00 = p_dn / den
    if eta_x == eta_y:
        return complex(j00)
    # starting below the max: one recovery passage over the gap, which by
    # translation invariance is u evaluated at the matching relative state
    start = eta - (eta_y - eta_x)
    if start <= 0:
        return 0.0 + 0.0j
    return complex(u[start] * j00)


# ---------------------------------------------------------------------------
# request dispatch
# ---------------------------------------------------------------------------

def evaluate(gen: Generator, req: QuantityRequest, *, force_generic: bool = False) -> complex:
    """Evaluate one QuantityRequest on a generator (Laplace-domain value)."""
    kind = req.kind
    if kind == "Q":
        return q_drawdown(gen, req.q, req.a, f=req.f, x=req.x, force_generic=force_generic)
    if kind == "A":
        return drawdown_before_drawup(gen, req.q, req.a, req.b, f=req.f,
                                      x=req.x, y=req.y, force_generic=force_generic)
    if kind == "B":
        k = req.k
        if k is None:
            if req.xi is not None:
                k = occupation_below_killing(req.q, req.xi, req.shift)
            else:
                k = KillingField.constant(complex(req.q) + complex(req.shift))
        return occupation_until_drawdown(gen, k, req.a, f=req.f, x=req.x)
    if kind == "C":
        if gen.structure == TOEPLITZ_LEVY and not force_generic and req.k2 is None:
            return c_levy_closed_form(gen, req.q, req.a, req.xi, shift=req.shift)
        k2 = req.k2 if req.k2 is not None else _k2_field(None, req.q, req.xi, req.shift)
        return drawdown_occupation(gen, k2, req.a, f=req.f, x=req.x)
    if kind == "Hn":
        return nth_drawdown_no_recovery(gen, req.q, req.a, f=req.f, x=req.x, n=req.n)
    if kind == "Hsum":
        return insurance_no_recovery(gen, req.q, req.a, x=req.x, force_generic=force_generic)
    if kind == "Jn":
        return nth_drawdown_with_recovery(gen, req.q, req.a, f2=req.f2,
                                          x=req.x, y=req.y, n=req.n,
                                          force_generic=force_generic)
    if kind == "Jsum":
        return insurance_with_recovery(gen, req.q, req.a, x=req.x, y=req.y,
                                       force_generic=force_generic)
    raise ValueError(f"unhandled kind {kind}")
