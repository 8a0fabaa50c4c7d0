"""Finite truncations of product flows on the 2^N-dimensional matrix algebra.

A flow at level N is conjugation by exp(itH), H diagonal with eigenvalue E(x)
on the basis vector of subset x.  Everything below is either closed form in
the energy differences or, for an arbitrary unitary, a sampled time grid.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import GuardError, InputError
from .model import Partition, SequenceSpec, SubsetIndex, TargetSpectrum

SPECTRUM_MAX_N = 24
DECOMPOSE_MAX_N = 12
METRIC_MAX_N = 7
FLIP_MAX_N = 6
GROUP_TOL = 1e-9
FLIP_GRID = 1001
TAIL_EPSILONS = (1.0, 0.1, 0.01, 0.001)
TAIL_PREFIXES = (10, 100, 1000, 10000)


def worker_count() -> int:
    cap = os.environ.get("SPECTRAMATCH_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = max(1, min(n, int(cap)))
        except ValueError:
            raise InputError(f"SPECTRAMATCH_THREADS must be an integer, got {cap!r}")
    return n


@dataclass(frozen=True)
class FlowSpec:
    """Truncation level n with coefficients lambda_1..lambda_n.

    ``grid`` declares that every coefficient is an integer multiple of it,
    which makes energy grouping exact.
    """

    n: int
    lambdas: tuple[float, ...]
    grid: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        if self.n < 0 or len(self.lambdas) != self.n:
            raise InputError(f"flow needs exactly n={self.n} coefficients, got {len(self.lambdas)}")
        if not all(math.isfinite(v) for v in self.lambdas):
            raise InputError("flow coefficients must be finite")
        if self.grid is not None:
            if not self.grid > 0:
                raise InputError("grid must be positive")
            for v in self.lambdas:
                if abs(v / self.grid - round(v / self.grid)) > 1e-9:
                    raise InputError(f"coefficient {v} is not on the declared grid {self.grid}")

    @classmethod
    def uniform(cls, n: int, delta: float) -> "FlowSpec":
        return cls(n, (delta,) * n, grid=delta)

    @property
    def dim(self) -> int:
        return 1 << self.n

    def grid_units(self):
        """Integer energies E(x)/grid, or None without a grid."""
        if self.grid is None:
            return None
        units = np.array([round(v / self.grid) for v in self.lambdas], dtype=np.int64)
        e = np.zeros(1, dtype=np.int64)
        for u in units:
            e = np.concatenate([e, e + u])
        return e

    def energies(self) -> np.ndarray:
        """E(x) for x = 0..2^n - 1 (bit i-1 set means lambda_i is included)."""
        if self.n > SPECTRUM_MAX_N:
            raise GuardError("spectrum_max_n", f"n={self.n} exceeds {SPECTRUM_MAX_N}")
        units = self.grid_units()
        if units is not None:
            return units * self.grid
        e = np.zeros(1)
        for lam in self.lambdas:
            e = np.concatenate([e, e + lam])
        return e

    def is_uniform(self, delta: float, tol: float = 1e-12) -> bool:
        return all(abs(v - delta) <= tol * max(1.0, abs(delta)) for v in self.lambdas)

    def to_json(self) -> dict:
        out = {"n": self.n, "lambdas": list(self.lambdas)}
        if self.grid is not None:
            out["grid"] = self.grid
        return out

    @classmethod
    def from_json(cls, data: dict) -> "FlowSpec":
        try:
            lam = [float(v) for v in data["lambdas"]]
            return cls(int(data.get("n", len(lam))), tuple(lam), data.get("grid"))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed flow spec: {exc}") from exc


def energy_spectrum(f: FlowSpec) -> list:
    """All (x, E(x)) pairs in bit-pattern order."""
    e = f.energies()
    return [(SubsetIndex(x, f.n), float(v)) for x, v in enumerate(e)]


def _chord(d):
    """max over |t| <= 1 of |exp(i t d) - 1|."""
    return 2.0 * np.sin(np.minimum(np.abs(d), np.pi) / 2.0)


# ---------------------------------------------------------------------------
# absorption

def absorption_permutation(p: Partition) -> np.ndarray:
    """perm[x] = basis slot b * 2^k + i of subset x, where x is member i of block b."""
    perm = np.empty(1 << p.n, dtype=np.int64)
    perm[p.members.ravel()] = np.arange(p.members.size)
    return perm


def absorption_phases(f: FlowSpec, p: Partition, target: TargetSpectrum | None = None) -> np.ndarray:
    """d_x = E(x) - mu_F(x) - C_block(x), indexed by bit pattern."""
    target = target or p.target
    if f.n != p.n:
        raise InputError(f"flow has n={f.n}, partition has n={p.n}")
    if target != p.target:
        raise InputError("partition was built for a different target")
    if not f.is_uniform(target.delta):
        raise InputError("absorption needs uniform coefficients equal to the target grid step")
    e = f.energies()
    mu = np.asarray(target.mu)
    flat = p.members.ravel()
    d = np.empty(1 << p.n)
    d[flat] = e[flat] - mu[p.slots.ravel()] - np.repeat(p.offsets, target.size)
    return d


def absorption_defect(f: FlowSpec, p: Partition, target: TargetSpectrum | None = None) -> float:
    """sup_{|t|<=1} max_x |exp(i t d_x) - 1| for the block-slot comparison generator.

    Conjugating by ``absorption_permutation``, H becomes diagonal with entry
    E(x) at slot (b, i); the comparison generator has C_b + mu_i there.
    """
    d = absorption_phases(f, p, target)
    return float(_chord(d).max()) if d.size else 0.0


# ---------------------------------------------------------------------------
# universality criterion

@dataclass(frozen=True)
class CriterionVerdict:
    verdict: str
    witness: str
    reason: str
    tail_mass: tuple = field(default_factory=tuple)   # rows (eps, prefix, mass)

    def to_json(self) -> dict:
        return {"verdict": self.verdict, "witness": self.witness, "reason": self.reason,
                "tail_mass": [{"epsilon": e, "prefix": n, "mass": v} for e, n, v in self.tail_mass]}


def tail_mass_table(s: SequenceSpec, epsilons=TAIL_EPSILONS, prefixes=TAIL_PREFIXES):
    """sum of lambda_n^2 over n <= prefix with |lambda_n| < eps."""
    longest = max(prefixes)
    vals = np.asarray(s.prefix(longest), dtype=float)
    rows = []
    for eps in epsilons:
        small = np.where(np.abs(vals) < eps, np.square(np.where(np.abs(vals) < eps, vals, 0.0)), 0.0)
        csum = np.cumsum(small)
        for n in prefixes:
            upto = min(n, len(vals))
            rows.append((eps, n, float(csum[upto - 1]) if upto else 0.0))
    return tuple(rows)


def criterion_check(s: SequenceSpec) -> CriterionVerdict:
    """Is there a null subsequence of (lambda_n) with divergent square sum?

    Symbolic families are decided from their parameters; a finite list can
    never settle a statement about tails, so it is reported inconclusive.
    """
    table = tail_mass_table(s)
    p = s.params
    zero = s.scale == 0
    if s.kind == "explicit":
        return CriterionVerdict("inconclusive", "", "finite lists do not determine tail behaviour", table)
    if zero:
        return CriterionVerdict("not-universal", "", "identically zero: every square sum vanishes", table)
    if s.kind == "constant":
        c = float(p["c"])
        if c == 0:
            return CriterionVerdict("not-universal", "", "identically zero: every square sum vanishes", table)
        return CriterionVerdict("not-universal", "", "constant nonzero: no subsequence tends to 0", table)
    if s.kind == "geometric":
        r = abs(float(p["r"]))
        if r < 1:
            return CriterionVerdict("not-universal", "", "geometric decay: total square sum is finite", table)
        return CriterionVerdict("not-universal", "", "|r| >= 1: no subsequence tends to 0", table)
    if s.kind == "power":
        q = float(p["p"])
        if q <= 0:
            return CriterionVerdict("not-universal", "", "non-decaying power: no subsequence tends to 0", table)
        if q <= 0.5:
            return CriterionVerdict("universal", "the whole sequence n^-p",
                                    "n^-p -> 0 and sum n^-2p diverges for 2p <= 1", table)
        return CriterionVerdict("not-universal", "", "sum n^-2p converges for 2p > 1", table)
    bound = float(p["bound"])
    return CriterionVerdict("universal", f"stage m repeats bound/(m+1) m^2 times (bound={bound})",
                            "each stage contributes m^2/(m+1)^2 * bound^2, so the sum diverges", table)


# ---------------------------------------------------------------------------
# dense recurrent generator

GENERATOR_SCHEDULE = "stage m>=1: m^2 copies of bound/(m+1), then j*bound/2^m for j=-(2^m-1)..2^m-1"


def _stages(bound):
    m = 1
    while True:
        block = [bound / (m + 1)] * (m * m)
        top = 2 ** m - 1
        block += [j * bound / 2 ** m for j in range(-top, top + 1)]
        yield block
        m += 1


def dense_recurrent_prefix(length: int, bound: float) -> list[float]:
    out = []
    for block in _stages(bound):
        if len(out) >= length:
            break
        out.extend(block[:length - len(out)])
    return out


def dense_recurrent_term(n: int, bound: float) -> float:
    return dense_recurrent_prefix(n, bound)[n - 1]


def universal_generator(count: int, bound: float) -> SequenceSpec:
    """A dense sequence in (-bound, bound) whose bound/(m+1) blocks certify universality."""
    if count < 1:
        raise InputError("count must be >= 1")
    if not bound > 0:
        raise InputError("bound must be positive")
    vals = dense_recurrent_prefix(count, float(bound))
    return SequenceSpec("dense-recurrent", tuple(vals),
                        {"bound": float(bound), "count": int(count), "schedule": GENERATOR_SCHEDULE})


# ---------------------------------------------------------------------------
# metric and spectral subspaces

def flow_metric(a: FlowSpec, b: FlowSpec) -> float:
    """sum_n 2^-n max_{|t|<=1} ||alpha_t(x_n) - beta_t(x_n)|| over matrix units e_xy.

    The units are enumerated lexicographically, x_n = e_xy with
    n = x * 2^N + y + 1.  For diagonal flows the norm is |exp(itD) - exp(itD')|.
    """
    if a.n != b.n:
        raise InputError(f"flows live on different levels ({a.n} vs {b.n})")
    if a.n > METRIC_MAX_N:
        raise GuardError("metric_max_n", f"n={a.n} exceeds {METRIC_MAX_N}")
    ea, eb = a.energies(), b.energies()
    da = ea[:, None] - ea[None, :]
    db = eb[:, None] - eb[None, :]
    terms = _chord(da - db).ravel()
    idx = np.arange(1, terms.size + 1, dtype=np.int64)
    return float(np.sum(np.ldexp(terms, -idx)))


def _cluster(values, weights, tol):
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = weights[order]
    if v.size == 0:
        return [], []
    cut = np.flatnonzero(np.diff(v) > tol) + 1
    starts = np.concatenate([[0], cut])
    reps = [float(v[s]) for s in starts]
    sums = np.add.reduceat(w, starts)
    return reps, [int(x) for x in sums]


def spectral_decompose(f: FlowSpec, tol: float = GROUP_TOL) -> dict:
    """dim A_p for every spectral value p: count of units e_xy with E(x) - E(y) = p."""
    if f.n > DECOMPOSE_MAX_N:
        raise GuardError("decompose_max_n", f"n={f.n} exceeds {DECOMPOSE_MAX_N}")
    units = f.grid_units()
    if units is not None:
        vals, mult = np.unique(units, return_counts=True)
        diff = (vals[:, None] - vals[None, :]).ravel()
        w = (mult[:, None] * mult[None, :]).ravel()
        ps, dims = np.unique(diff, return_inverse=True)
        tot = np.bincount(dims, weights=w).astype(np.int64)
        return {float(p * f.grid): int(d) for p, d in zip(ps, tot)}
    e = f.energies()
    reps, mult = _cluster(e, np.ones(e.size, dtype=np.int64), tol)
    reps = np.asarray(reps)
    mult = np.asarray(mult, dtype=np.int64)
    diff = (reps[:, None] - reps[None, :]).ravel()
    w = (mult[:, None] * mult[None, :]).ravel()
    # snap values within tol of 0 so that A_0 is keyed exactly
    diff = np.where(np.abs(diff) <= tol, 0.0, diff)
    ps, dims = _cluster(diff, w, tol)
    return dict(zip(ps, dims))


# ---------------------------------------------------------------------------
# flip defects

def swap_unitary(dim: int) -> np.ndarray:
    """The flip x (x) y -> y (x) x on C^dim (x) C^dim."""
    u = np.zeros((dim * dim, dim * dim))
    for x in range(dim):
        for y in range(dim):
            u[y * dim + x, x * dim + y] = 1.0
    return u


def corner_unitary() -> np.ndarray:
    """e12 (x) e12 + e21 (x) e21 plus the identity on |12>, |21>, for N = 1."""
    e12 = np.array([[0.0, 1.0], [0.0, 0.0]])
    e21 = e12.T
    u = np.kron(e12, e12) + np.kron(e21, e21)
    u[1, 1] = u[2, 2] = 1.0
    return u


def flip_defect(f: FlowSpec, u: np.ndarray, grid: int = FLIP_GRID):
    """(max_{t on grid, |t|<=1} ||(alpha_t (x) alpha_t)(u) - u||, ||[H(x)1 + 1(x)H, u]||)."""
    if f.n > FLIP_MAX_N:
        raise GuardError("flip_max_n", f"n={f.n} exceeds {FLIP_MAX_N}")
    u = np.asarray(u, dtype=complex)
    dim = f.dim * f.dim
    if u.shape != (dim, dim):
        raise InputError(f"unitary must be {dim}x{dim}, got {u.shape}")
    if np.linalg.norm(u.conj().T @ u - np.eye(dim), 2) > 1e-8:
        raise InputError("u is not unitary within 1e-8")
    e = f.energies()
    s = (e[:, None] + e[None, :]).ravel()
    d = s[:, None] - s[None, :]
    gen = float(np.linalg.norm(u * d, 2))
    support = np.abs(u) > 0
    if not np.any(np.abs(d[support]) > 0):
        return 0.0, gen
    ts = np.linspace(-1.0, 1.0, grid)

    def one(t):
        return float(np.linalg.norm(u * (np.exp(1j * t * d) - 1.0), 2))

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        sup = max(pool.map(one, ts))
    return sup, gen
