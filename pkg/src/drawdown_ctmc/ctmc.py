"""State grid and transition-rate-matrix construction.

The chain approximates the log-price process on a finite sorted state
vector whose first and last states are absorbing (zero rows).  Interior
rates come from central differences for the local part plus jump-measure
bin masses; small jumps inside (-h/2, h/2) are folded into the local drift
and variance.  The end-state bins are extended to +/-infinity so the total
jump mass is conserved (jumps beyond the lattice are absorbed at the ends).

Three storage regimes, matching how the rates are consumed:

* ``birth_death``   -- tridiagonal (diffusions): three diagonals.
* ``toeplitz_levy`` -- spatially homogeneous models on an h-lattice:
                       one stencil row plus boundary-tail vectors.
* ``general``       -- dense matrix (state-dependent jump models, small
                       hand-built test chains).

Grids and generators are immutable after assembly; all reads are safe
from any number of threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .models import (
    ModelSpec,
    diffusion_var,
    levy_bin_mass,
    levy_bin_mass_array,
    small_jump_compensators,
    truncated_drift,
)

__all__ = [
    "Grid",
    "Generator",
    "BirthDeathGenerator",
    "ToeplitzLevyGenerator",
    "DenseGenerator",
    "BadBounds",
    "NegativeRate",
    "build_grid",
    "build_generator",
    "build_levy_generator",
    "default_levy_truncation",
]

_TOL = 1e-9  # relative tolerance for lattice commensurability checks

BIRTH_DEATH = "birth_death"
TOEPLITZ_LEVY = "toeplitz_levy"
GENERAL = "general"


class BadBounds(ValueError):
    """Grid bounds do not enclose the core interval (x - a, x]."""


class NegativeRate(ValueError):
    """A central-difference neighbor rate came out negative (step too large
    for the local drift); refine h instead of clamping."""

    def __init__(self, state: float, neighbor: float, rate: float):
        self.state, self.neighbor, self.rate = state, neighbor, rate
        super().__init__(
            f"negative transition rate {rate:.6g} from state {state:.6g} to "
            f"{neighbor:.6g}; refine the grid step"
        )


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

@dataclass
class Grid:
    """Sorted state vector with uniform step h, anchored so that the start
    point x0 (and hence x0 - a) are exact lattice points."""

    states: np.ndarray
    h: float
    eta_x: int          # index of the anchor x0
    x0: float

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if not np.all(np.diff(self.states) > 0.0):
            raise ValueError("grid states must be strictly increasing")

    @property
    def n(self) -> int:
        """Number of states (N + 1)."""
        return self.states.size

    @property
    def top(self) -> int:
        """Index N of the upper absorbing state."""
        return self.states.size - 1

    def steps_of(self, level: float) -> int:
        """Number of lattice steps in a level that is a multiple of h."""
        ratio = level / self.h
        k = int(round(ratio))
        if abs(ratio - k) > 1e-6 * max(1.0, abs(ratio)):
            raise ValueError(f"level {level} is not a multiple of the grid step {self.h}")
        return k

    def steps_at_least(self, level: float) -> int:
        """Smallest integer k with k*h >= level (tolerant of roundoff)."""
        return int(math.ceil(level / self.h - _TOL))

    def index_of(self, value: float) -> int:
        """Exact lattice lookup; raises if value is off-lattice."""
        k = (value - self.x0) / self.h
        i = self.eta_x + int(round(k))
        if not (0 <= i < self.n) or abs(self.states[i] - value) > 1e-7 * max(1.0, abs(value)):
            raise KeyError(f"{value} is not a grid state")
        return i

    def nearest_index(self, value: float) -> int:
        return int(np.argmin(np.abs(self.states - value)))

    def window_bottom(self, i: int, level_steps: int) -> int:
        """Index i_a = min{j : y_j > y_i - level}, clipped at 0."""
        return max(0, i - level_steps + 1)

    def floor_index(self, i: int, level_steps: int):
        """Index of (y_i - level)^- = sup{y <= y_i - level}, or None if the
        grid bottom lies above it."""
        j = i - level_steps
        return j if j >= 0 else None


def build_grid(x0: float, a: float, n_x: int, y_min: float, y_max: float) -> Grid:
    """Uniform lattice through x0 with step h = a/n_x, restricted to
    [y_min, y_max].  x0 and x0 - a are exact grid points."""
    if a <= 0.0:
        raise ValueError("drawdown level a must be positive")
    if n_x < 2:
        raise ValueError("need at least 2 core states")
    if y_min >= x0 - a or y_max <= x0:
        raise BadBounds(f"need y_min < x0 - a and y_max > x0, got [{y_min}, {y_max}] around x0={x0}, a={a}")
    h = a / n_x
    k_lo = int(math.ceil((y_min - x0) / h - _TOL))
    k_hi = int(math.floor((y_max - x0) / h + _TOL))
    states = x0 + h * np.arange(k_lo, k_hi + 1, dtype=float)
    return Grid(states=states, h=h, eta_x=-k_lo, x0=x0)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

class Generator:
    """Common interface over the three storage regimes.

    Rows are indexed by state; row 0 and row N are identically zero
    (absorbing).  ``column(j)`` returns the dense column of rates into
    state j (including the diagonal entry at position j).
    """

    structure: str = GENERAL
    grid: Grid

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def states(self) -> np.ndarray:
        return self.grid.states

    # -- required structure-specific methods --------------------------------

    def row(self, i: int) -> np.ndarray:
        raise NotImplementedError

    def column(self, j: int) -> np.ndarray:
        raise NotImplementedError

    def diagonal(self) -> np.ndarray:
        raise NotImplementedError

    def window_block(self, lo: int, hi: int) -> np.ndarray:
        """Dense G[lo..hi, lo..hi] (inclusive bounds)."""
        raise NotImplementedError

    # -- shared helpers ------------------------------------------------------

    def col_support(self, j: int):
        """Half-open row range outside which column j vanishes."""
        return 0, self.n

    def out_rate(self, i: int) -> float:
        return -float(self.diagonal()[i])

    def to_dense(self, max_states: int = 4000) -> np.ndarray:
        if self.n > max_states:
            raise ValueError(f"refusing to densify a {self.n}-state generator")
        return np.column_stack([self.column(j) for j in range(self.n)])

    def row_sums(self) -> np.ndarray:
        return self.to_dense().sum(axis=1)

    def dump_csv(self, path: str) -> None:
        """Write nonzero entries as (i, j, rate), row-major ascending."""
        dense = self.to_dense(max_states=20000)
        with open(path, "w") as fh:
            fh.write("i,j,rate\n")
            for i in range(self.n):
                row = dense[i]
                for j in np.nonzero(row)[0]:
                    fh.write(f"{i},{j},{row[j]:.17g}\n")


class BirthDeathGenerator(Generator):
    """Tridiagonal generator: only nearest-neighbor moves."""

    structure = BIRTH_DEATH

    def __init__(self, grid: Grid, up: np.ndarray, down: np.ndarray):
        """up[i] = G(i, i+1), down[i] = G(i, i-1); boundary rows forced to 0."""
        self.grid = grid
        n = grid.n
        self.up = np.asarray(up, dtype=float).copy()
        self.down = np.asarray(down, dtype=float).copy()
        self.up[0] = self.up[n - 1] = 0.0
        self.down[0] = self.down[n - 1] = 0.0
        if np.any(self.up < 0.0) or np.any(self.down < 0.0):
            i = int(np.argmin(np.minimum(self.up, self.down)))
            bad_up = self.up[i] < self.down[i]
            raise NegativeRate(grid.states[i], grid.states[i + 1 if bad_up else i - 1],
                               float(min(self.up[i], self.down[i])))
        self._diag = -(self.up + self.down)

    def row(self, i: int) -> np.ndarray:
        out = np.zeros(self.n)
        if 0 < i < self.n - 1:
            out[i - 1] = self.down[i]
            out[i] = self._diag[i]
            out[i + 1] = self.up[i]
        return out

    def column(self, j: int) -> np.ndarray:
        out = np.zeros(self.n)
        if j - 1 >= 1:
            out[j - 1] = self.up[j - 1]
        if j + 1 <= self.n - 2:
            out[j + 1] = self.down[j + 1]
        out[j] = self._diag[j] if 0 < j < self.n - 1 else 0.0
        return out

    def col_support(self, j: int):
        return max(0, j - 1), min(self.n, j + 2)

    def diagonal(self) -> np.ndarray:
        d = self._diag.copy()
        d[0] = d[-1] = 0.0
        return d

    def window_block(self, lo: int, hi: int) -> np.ndarray:
        m = hi - lo + 1
        blk = np.zeros((m, m))
        idx = np.arange(lo, hi + 1)
        interior = (idx > 0) & (idx < self.n - 1)
        rows = np.arange(m)[interior]
        blk[rows, rows] = self._diag[idx[interior]]
        for r in rows:
            i = lo + r
            if r > 0:
                blk[r, r - 1] = self.down[i]
            if r < m - 1:
                blk[r, r + 1] = self.up[i]
        return blk

    def banded_window(self, lo: int, hi: int) -> np.ndarray:
        """Window block in scipy solve_banded layout (3, m)."""
        m = hi - lo + 1
        ab = np.zeros((3, m))
        idx = np.arange(lo, hi + 1)
        interior = (idx > 0) & (idx < self.n - 1)
        ab[1, interior] = self._diag[idx[interior]]
        for r in np.nonzero(interior)[0]:
            i = lo + r
            if r < m - 1:
                ab[0, r + 1] = self.up[i]
            if r > 0:
                ab[2, r - 1] = self.down[i]
        return ab


class ToeplitzLevyGenerator(Generator):
    """Translation-invariant generator on an h-lattice.

    Interior rates depend only on the column offset; the two end columns
    additionally absorb the jump tails beyond the lattice.
    """

    structure = TOEPLITZ_LEVY

    def __init__(self, grid: Grid, local_up: float, local_down: float,
                 stencil: np.ndarray, tail_bot: np.ndarray, tail_top: np.ndarray,
                 model: ModelSpec | None = None):
        self.grid = grid
        n = grid.n
        self.local_up = float(local_up)
        self.local_down = float(local_down)
        self.stencil = np.asarray(stencil, dtype=float)   # offset d -> stencil[d + n - 1]
        self.center = n - 1
        self.tail_bot = np.asarray(tail_bot, dtype=float)  # row m -> mass of (-inf, (0-m)h + h/2]
        self.tail_top = np.asarray(tail_top, dtype=float)  # row m -> mass of [(n-1-m)h - h/2, inf)
        self.model = model
        up_rate = self.local_up + self.stencil[self.center + 1]
        dn_rate = self.local_down + self.stencil[self.center - 1]
        if up_rate < 0.0:
            raise NegativeRate(grid.states[1], grid.states[2], up_rate)
        if dn_rate < 0.0:
            raise NegativeRate(grid.states[1], grid.states[0], dn_rate)
        # prefix sums for O(1) row sums: csum[k] = sum(stencil[:k])
        self._csum = np.concatenate([[0.0], np.cumsum(self.stencil)])
        self._diag = self._build_diagonal()

    def _stencil_sum(self, d0: int, d1: int) -> float:
        """Sum of stencil over offsets d0..d1 inclusive."""
        a = max(d0 + self.center, 0)
        b = min(d1 + self.center + 1, self.stencil.size)
        if b <= a:
            return 0.0
        return float(self._csum[b] - self._csum[a])

    def _build_diagonal(self) -> np.ndarray:
        n = self.n
        d = np.zeros(n)
        for m in range(1, n - 1):
            s = self.local_up + self.local_down
            s += self._stencil_sum(1 - m, n - 2 - m) - self._stencil_sum(0, 0)
            s += self.tail_bot[m] + self.tail_top[m]
            d[m] = -s
        return d

    def row(self, i: int) -> np.ndarray:
        n = self.n
        out = np.zeros(n)
        if not 0 < i < n - 1:
            return out
        offs = np.arange(1 - i, n - 1 - i)          # columns 1..n-2
        out[1:n - 1] = self.stencil[offs + self.center]
        out[0] = self.tail_bot[i]
        out[n - 1] = self.tail_top[i]
        out[i + 1] += self.local_up
        out[i - 1] += self.local_down
        out[i] = self._diag[i]
        return out

    def column(self, j: int) -> np.ndarray:
        n = self.n
        out = np.zeros(n)
        if j == 0:
            out[1:n - 1] = self.tail_bot[1:n - 1]
            out[1] += self.local_down
        elif j == n - 1:
            out[1:n - 1] = self.tail_top[1:n - 1]
            out[n - 2] += self.local_up
        else:
            rows = np.arange(1, n - 1)
            out[1:n - 1] = self.stencil[j - rows + self.center]
            if j - 1 >= 1:
                out[j - 1] += self.local_up
            if j + 1 <= n - 2:
                out[j + 1] += self.local_down
            out[j] = self._diag[j]
        out[0] = out[n - 1] = 0.0   # absorbing rows
        return out

    def diagonal(self) -> np.ndarray:
        return self._diag.copy()

    def window_block(self, lo: int, hi: int) -> np.ndarray:
        m = hi - lo + 1
        idx = np.arange(lo, hi + 1)
        offs = idx[None, :] - idx[:, None]
        blk = self.stencil[offs + self.center].copy()
        r = np.arange(m)
        blk[r[:-1], r[:-1] + 1] += self.local_up
        blk[r[1:], r[1:] - 1] += self.local_down
        # boundary columns inside the window carry the extended-tail bins
        if lo == 0:
            blk[1:, 0] = self.tail_bot[idx[1:]]
            if m > 1:
                blk[1, 0] += self.local_down
        if hi == self.n - 1:
            blk[:-1, -1] = self.tail_top[idx[:-1]]
            if m > 1:
                blk[-2, -1] += self.local_up
        interior = (idx > 0) & (idx < self.n - 1)
        blk[r, r] = np.where(interior, self._diag[idx], 0.0)
        blk[~interior, :] = 0.0
        return blk


class DenseGenerator(Generator):
    """Dense storage; used for state-dependent jump models and test chains."""

    structure = GENERAL

    def __init__(self, grid: Grid, rates: np.ndarray):
        self.grid = grid
        self.rates = np.asarray(rates, dtype=float)
        if self.rates.shape != (grid.n, grid.n):
            raise ValueError("rate matrix shape does not match the grid")

    @classmethod
    def from_dense(cls, states: np.ndarray, rates: np.ndarray, *, x0_index: int = 0) -> "DenseGenerator":
        states = np.asarray(states, dtype=float)
        diffs = np.diff(states)
        h = float(diffs.min())
        grid = Grid(states=states, h=h, eta_x=x0_index, x0=float(states[x0_index]))
        return cls(grid, rates)

    def row(self, i: int) -> np.ndarray:
        return self.rates[i].copy()

    def column(self, j: int) -> np.ndarray:
        return self.rates[:, j].copy()

    def diagonal(self) -> np.ndarray:
        return np.diag(self.rates).copy()

    def window_block(self, lo: int, hi: int) -> np.ndarray:
        return self.rates[lo:hi + 1, lo:hi + 1].copy()

    def to_dense(self, max_states: int = 4000) -> np.ndarray:
        return self.rates.copy()


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

DRIFT_SCHEMES = ("auto", "central", "upwind")


def _local_rates(model: ModelSpec, x: float, d_minus: float, d_plus: float,
                 nu_up: float = 0.0, nu_dn: float = 0.0, scheme: str = "auto"):
    """Neighbor rates from the local drift and variance at x, with small
    jumps folded in (the second-order coefficient is sigma^2 plus the full
    integral of y^2 nu over the small-jump window, i.e. twice the reported
    sigma2_bar).

    ``scheme``: "central" uses central differences for the drift and lets
    the caller abort on a negative rate; "upwind" always one-sides the
    drift; "auto" keeps central differences wherever the assembled neighbor
    rates (including the adjacent jump-bin masses nu_up/nu_dn) stay
    nonnegative, and falls back to the one-sided form otherwise.  Both
    forms reproduce the drift exactly; the one-sided form adds O(h)
    numerical diffusion, which pure-jump models with a large compensated
    drift need for positivity once the step is small.
    """
    if scheme not in DRIFT_SCHEMES:
        raise ValueError(f"unknown drift scheme {scheme!r}")
    b_bar, s2_bar = small_jump_compensators(model, x, -0.5 * d_minus, 0.5 * d_plus)
    b_eff = truncated_drift(model, x) - b_bar
    s2_eff = diffusion_var(model, x) + 2.0 * s2_bar
    d_avg = 0.5 * (d_plus + d_minus)
    up_c = b_eff * d_minus / (2.0 * d_plus * d_avg) + s2_eff / (2.0 * d_plus * d_avg)
    dn_c = -b_eff * d_plus / (2.0 * d_minus * d_avg) + s2_eff / (2.0 * d_minus * d_avg)
    if scheme == "central" or (scheme == "auto" and up_c + nu_up >= 0.0 and dn_c + nu_dn >= 0.0):
        return up_c, dn_c
    if b_eff >= 0.0:
        up = b_eff / d_plus + s2_eff / (2.0 * d_plus * d_avg)
        dn = s2_eff / (2.0 * d_minus * d_avg)
    else:
        up = s2_eff / (2.0 * d_plus * d_avg)
        dn = -b_eff / d_minus + s2_eff / (2.0 * d_minus * d_avg)
    return up, dn


def build_generator(model: ModelSpec, grid: Grid, *, drift_scheme: str = "auto") -> Generator:
    """Assemble the rate matrix on an arbitrary grid.

    Diffusions produce a tridiagonal generator; jump models produce a dense
    one (every interior row carries a full set of jump bins).
    """
    n = grid.n
    states = grid.states
    if not model.has_jumps:
        up = np.zeros(n)
        down = np.zeros(n)
        for i in range(1, n - 1):
            d_minus = states[i] - states[i - 1]
            d_plus = states[i + 1] - states[i]
            u, dn = _local_rates(model, states[i], d_minus, d_plus, scheme=drift_scheme)
            if u < 0.0:
                raise NegativeRate(states[i], states[i + 1], u)
            if dn < 0.0:
                raise NegativeRate(states[i], states[i - 1], dn)
            up[i], down[i] = u, dn
        return BirthDeathGenerator(grid, up, down)

    rates = np.zeros((n, n))
    d_minus_all = np.empty(n)
    d_plus_all = np.empty(n)
    d_minus_all[1:] = np.diff(states)
    d_plus_all[:-1] = np.diff(states)
    d_minus_all[0] = d_plus_all[0]
    d_plus_all[-1] = d_minus_all[-1]
    for i in range(1, n - 1):
        x = states[i]
        for j in range(n):
            if j == i:
                continue
            lo = -math.inf if j == 0 else states[j] - 0.5 * d_minus_all[j] - x
            hi = math.inf if j == n - 1 else states[j] + 0.5 * d_plus_all[j] - x
            rates[i, j] = levy_bin_mass(model, x, lo, hi)
        # the scheme decision uses the plain neighbor bins (no end-bin
        # extension) so that it cannot differ between boundary-adjacent
        # rows here and the translation-invariant builder
        nu_up = levy_bin_mass(model, x, states[i + 1] - 0.5 * d_minus_all[i + 1] - x,
                              states[i + 1] + 0.5 * d_plus_all[i + 1] - x)
        nu_dn = levy_bin_mass(model, x, states[i - 1] - 0.5 * d_minus_all[i - 1] - x,
                              states[i - 1] + 0.5 * d_plus_all[i - 1] - x)
        u, dn = _local_rates(model, x, d_minus_all[i], d_plus_all[i],
                             nu_up=nu_up, nu_dn=nu_dn, scheme=drift_scheme)
        rates[i, i + 1] += u
        rates[i, i - 1] += dn
        if rates[i, i + 1] < 0.0:
            raise NegativeRate(x, states[i + 1], rates[i, i + 1])
        if rates[i, i - 1] < 0.0:
            raise NegativeRate(x, states[i - 1], rates[i, i - 1])
        rates[i, i] = -rates[i].sum() + rates[i, i]
    return DenseGenerator(grid, rates)


def default_levy_truncation(a: float) -> float:
    """Default half-width of the truncated lattice for Levy models."""
    return max(4.0, 10.0 * a)


def choose_drift_scheme(model: ModelSpec, h: float, states) -> str:
    """Resolve the "auto" drift scheme to one uniform choice for a whole
    refinement study: "central" if the central-difference neighbor rates
    (including adjacent jump-bin masses) are nonnegative at every sampled
    state for step h, else "upwind".  Extrapolated tables need one scheme
    across all their resolutions, probed at the finest step."""
    states = np.asarray(states, dtype=float)
    for x in states:
        nu_up = nu_dn = 0.0
        if model.has_jumps:
            nu_up = levy_bin_mass(model, x, 0.5 * h, 1.5 * h)
            nu_dn = levy_bin_mass(model, x, -1.5 * h, -0.5 * h)
        up_c, dn_c = _local_rates(model, x, h, h, scheme="central")
        if up_c + nu_up < 0.0 or dn_c + nu_dn < 0.0:
            return "upwind"
    return "central"


def build_levy_generator(model: ModelSpec, h: float, trunc_lo: float, trunc_hi: float,
                         *, x0: float = 0.0, drift_scheme: str = "auto") -> Generator:
    """Translation-invariant generator on the lattice (x0 + h*Z) clipped to
    [trunc_lo, trunc_hi], with absorbing ends.

    Requires a spatially homogeneous model (BS, DEJD, VG); BS is carried as
    the degenerate case with an all-zero jump stencil.
    """
    if not model.is_levy:
        raise ValueError(f"{model.kind} is not translation invariant")
    if h <= 0.0:
        raise ValueError("h must be positive")
    if not trunc_lo < x0 < trunc_hi:
        raise BadBounds("truncation interval must contain the anchor x0")
    k_lo = int(math.ceil((trunc_lo - x0) / h - _TOL))
    k_hi = int(math.floor((trunc_hi - x0) / h + _TOL))
    states = x0 + h * np.arange(k_lo, k_hi + 1, dtype=float)
    grid = Grid(states=states, h=h, eta_x=-k_lo, x0=x0)
    n = grid.n

    if not model.has_jumps:
        lu, ld = _local_rates(model, x0, h, h, scheme=drift_scheme)
        stencil = np.zeros(2 * n - 1)
        return ToeplitzLevyGenerator(grid, lu, ld, stencil, np.zeros(n), np.zeros(n),
                                     model=model)

    stencil = np.zeros(2 * n - 1)
    d_pos = np.arange(1, n, dtype=float)
    stencil[n:] = levy_bin_mass_array(model, x0, d_pos * h - 0.5 * h, d_pos * h + 0.5 * h)
    d_neg = np.arange(-(n - 1), 0, dtype=float)
    stencil[:n - 1] = levy_bin_mass_array(model, x0, d_neg * h - 0.5 * h, d_neg * h + 0.5 * h)
    lu, ld = _local_rates(model, x0, h, h, nu_up=stencil[n], nu_dn=stencil[n - 2],
                          scheme=drift_scheme)
    m_arr = np.arange(1, n - 1, dtype=float)
    tail_bot = np.zeros(n)
    tail_top = np.zeros(n)
    tail_bot[1:n - 1] = levy_bin_mass_array(model, x0, np.full(n - 2, -np.inf), (0.5 - m_arr) * h)
    tail_top[1:n - 1] = levy_bin_mass_array(model, x0, (n - 1.5 - m_arr) * h, np.full(n - 2, np.inf))
    return ToeplitzLevyGenerator(grid, lu, ld, stencil, tail_bot, tail_top, model=model)
