"""Domain types, exact subset-energy arithmetic and JSON round-tripping.

Subsets of {1, ..., N} are bit patterns: element ``i`` lives in bit ``i - 1``.
Whenever the coefficients are a uniform grid step ``delta`` the energies are
kept as integers (counts, or half-step counts for partial sums) and only
multiplied by ``delta`` when a float is requested.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError

MAX_N = 30
FORMAT_VERSION = 1

SEQUENCE_KINDS = ("explicit", "constant", "power", "geometric", "dense-recurrent")

_BYTE_POP = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


def popcount(a):
    """Vectorized population count for non-negative integer arrays below 2**32."""
    a = np.asarray(a, dtype=np.int64)
    return (_BYTE_POP[a & 0xFF] + _BYTE_POP[(a >> 8) & 0xFF]
            + _BYTE_POP[(a >> 16) & 0xFF] + _BYTE_POP[(a >> 24) & 0xFF])


def interval_mask(lo, hi):
    """Bit mask of elements lo+1..hi (empty when hi <= lo)."""
    if hi <= lo:
        return 0
    return ((1 << hi) - 1) ^ ((1 << lo) - 1)


@dataclass(frozen=True, order=True)
class SubsetIndex:
    bits: int
    n: int

    def __post_init__(self):
        if not 0 <= self.n <= MAX_N:
            raise InputError(f"ambient size {self.n} outside 0..{MAX_N}")
        if not 0 <= self.bits < (1 << self.n):
            raise InputError(f"bit pattern {self.bits} does not fit in {self.n} positions")

    @classmethod
    def from_elements(cls, elements: Iterable[int], n: int) -> "SubsetIndex":
        bits = 0
        for i in elements:
            if not 1 <= i <= n:
                raise InputError(f"element {i} outside 1..{n}")
            bits |= 1 << (i - 1)
        return cls(bits, n)

    def elements(self) -> tuple[int, ...]:
        return tuple(i + 1 for i in range(self.n) if self.bits >> i & 1)

    def __contains__(self, i: int) -> bool:
        return 1 <= i <= self.n and bool(self.bits >> (i - 1) & 1)

    def __len__(self) -> int:
        return bin(self.bits).count("1")

    def count_upto(self, m: int) -> int:
        """Number of elements of x that are <= m."""
        return bin(self.bits & ((1 << m) - 1)).count("1")

    def symmetric_difference(self, lo: int, hi: int) -> "SubsetIndex":
        """x with membership of lo+1..hi flipped."""
        return SubsetIndex(self.bits ^ interval_mask(lo, hi), self.n)

    def __repr__(self):
        return f"SubsetIndex({set(self.elements()) or '{}'}, n={self.n})"


@dataclass(frozen=True)
class SequenceSpec:
    """A coefficient sequence (lambda_n), n >= 1.

    Symbolic kinds are evaluated on demand.  ``params["scale"]`` multiplies
    every term of every kind.
    """

    kind: str
    values: tuple[float, ...] = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SEQUENCE_KINDS:
            raise InputError(f"unknown sequence kind {self.kind!r}")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not all(math.isfinite(v) for v in self.values):
            raise InputError("sequence values must be finite reals")
        need = {"constant": "c", "power": "p", "geometric": "r", "dense-recurrent": "bound"}
        key = need.get(self.kind)
        if key is not None and key not in self.params:
            raise InputError(f"{self.kind} sequence needs parameter {key!r}")
        if self.kind == "dense-recurrent" and not self.params["bound"] > 0:
            raise InputError("dense-recurrent bound must be positive")

    @property
    def scale(self) -> float:
        return float(self.params.get("scale", 1.0))

    @property
    def is_finite(self) -> bool:
        return self.kind == "explicit"

    def __len__(self):
        if self.kind != "explicit":
            raise TypeError("symbolic sequences are infinite")
        return len(self.values)

    def term(self, n: int) -> float:
        """lambda_n (1-based)."""
        if n < 1:
            raise InputError("sequence index starts at 1")
        kind, p = self.kind, self.params
        if kind == "explicit":
            if n > len(self.values):
                raise InputError(f"explicit sequence has only {len(self.values)} terms")
            base = self.values[n - 1]
        elif kind == "constant":
            base = float(p["c"])
        elif kind == "power":
            base = float(n) ** (-float(p["p"]))
        elif kind == "geometric":
            r = float(p["r"])
            try:
                base = r ** n
            except OverflowError:
                # |r| > 1 eventually leaves the float range
                base = math.copysign(math.inf, r if n % 2 else 1.0)
        else:
            from .flows import dense_recurrent_term
            base = dense_recurrent_term(n, float(p["bound"]))
        return self.scale * base

    def prefix(self, length: int) -> list[float]:
        if self.kind == "explicit":
            length = min(length, len(self.values))
        if self.kind == "dense-recurrent":
            from .flows import dense_recurrent_prefix
            return [self.scale * v for v in dense_recurrent_prefix(length, float(self.params["bound"]))]
        return [self.term(n) for n in range(1, length + 1)]

    def scaled(self, c: float) -> "SequenceSpec":
        if self.kind == "explicit":
            return SequenceSpec("explicit", tuple(c * v for v in self.values), dict(self.params))
        params = dict(self.params)
        params["scale"] = self.scale * c
        return SequenceSpec(self.kind, self.values, params)

    def to_json(self) -> dict:
        return {"kind": self.kind, "values": list(self.values), "params": dict(self.params)}

    @classmethod
    def from_json(cls, data: dict) -> "SequenceSpec":
        try:
            return cls(data["kind"], tuple(data.get("values", ())), dict(data.get("params", {})))
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed sequence spec: {exc}") from exc


@dataclass(frozen=True)
class TargetSpectrum:
    """Centered target values mu_i = units[i] * delta, sorted ascending."""

    k: int
    units: tuple[int, ...]
    delta: float

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(int(u) for u in self.units))
        if self.k < 0 or len(self.units) != 2 ** self.k:
            raise InputError(f"target must have 2^k entries, got {len(self.units)} for k={self.k}")
        if not self.delta > 0:
            raise InputError("grid step must be positive")
        if list(self.units) != sorted(self.units):
            raise InputError("target values must be sorted")
        if self.units[-1] != -self.units[0]:
            raise InputError("target must be centered (mu_max = -mu_min)")

    @property
    def mu(self) -> tuple[float, ...]:
        return tuple(u * self.delta for u in self.units)

    @property
    def bigK(self) -> int:
        return self.units[-1]

    @property
    def size(self) -> int:
        return len(self.units)

    def to_json(self) -> dict:
        return {"k": self.k, "mu": list(self.mu), "delta": self.delta}

    @classmethod
    def from_json(cls, data: dict) -> "TargetSpectrum":
        try:
            delta = float(data["delta"])
            mu = [float(v) for v in data["mu"]]
            k = int(data.get("k", round(math.log2(len(mu))) if mu else -1))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed target spectrum: {exc}") from exc
        if not delta > 0:
            raise InputError("grid step must be positive")
        units = [round(v / delta) for v in mu]
        for v, u in zip(mu, units):
            if abs(v - u * delta) > 1e-9 * max(1.0, abs(v)):
                raise InputError(f"target value {v} is not a multiple of delta={delta}")
        return cls(k, tuple(units), delta)


@dataclass(frozen=True)
class MidpointTree:
    """Node values mu_{j,i} stored as integer multiples of ``delta``.

    ``units[j][i - 1]`` is mu_{j,i}; level 0 holds the leaves, level k the root.
    """

    units: tuple[tuple[int, ...], ...]
    delta: float

    @property
    def k(self) -> int:
        return len(self.units) - 1

    def value(self, j: int, i: int) -> float:
        return self.units[j][i - 1] * self.delta

    def unit(self, j: int, i: int) -> int:
        return self.units[j][i - 1]

    @property
    def levels(self) -> tuple[tuple[float, ...], ...]:
        return tuple(tuple(u * self.delta for u in row) for row in self.units)


@dataclass(frozen=True)
class GoodPath:
    """Hitting times n_0 = 0 < n_1 < ... < n_k and node indices i_0 = 1, ..., i_k."""

    n: tuple[int, ...]
    i: tuple[int, ...]
    units: tuple[int, ...] = ()  # node values mu_{k-j, i_j} / delta along the path

    def is_monotone_from(self, m: int) -> bool:
        v = self.units[m:]
        steps = [b - a for a, b in zip(v, v[1:])]
        return all(s >= 0 for s in steps) or all(s <= 0 for s in steps)

    @property
    def k(self) -> int:
        return len(self.n) - 1

    @property
    def leaf(self) -> int:
        return self.i[-1]

    @property
    def end(self) -> int:
        return self.n[-1]


@dataclass(frozen=True)
class Block:
    members: tuple[int, ...]
    assign: tuple[int, ...]  # 1-based target positions, assign[j] = F(members[j])
    offset: float
    pristine: bool

    def energy_residuals(self, target: TargetSpectrum) -> list[float]:
        mu = target.mu
        return [bin(x).count("1") * target.delta - mu[a - 1] - self.offset
                for x, a in zip(self.members, self.assign)]


class Partition:
    """A partition of P_N into blocks of 2^k subsets with per-block assignment onto T.

    Stored column-wise in numpy arrays; ``blocks`` materializes ``Block``
    views for small instances and for serialization.
    """

    def __init__(self, n, target, members, slots, offsets, pristine, good_count=None):
        self.n = int(n)
        self.target = target
        self.members = _frozen(np.asarray(members, dtype=np.int64).reshape(-1, target.size))
        self.slots = _frozen(np.asarray(slots, dtype=np.int64).reshape(self.members.shape))
        self.offsets = _frozen(np.asarray(offsets, dtype=np.float64).reshape(-1))
        self.pristine = _frozen(np.asarray(pristine, dtype=bool).reshape(-1))
        if not (len(self.offsets) == len(self.pristine) == len(self.members)):
            raise InputError("partition arrays disagree on the number of blocks")
        if not 0 <= self.n <= MAX_N:
            raise InputError(f"ambient size {self.n} outside 0..{MAX_N}")
        self.good_count = int(good_count) if good_count is not None else None

    @classmethod
    def from_blocks(cls, n, target, blocks: Sequence[Block], good_count=None):
        m = target.size
        if any(len(b.members) != m or len(b.assign) != m for b in blocks):
            raise InputError(f"every block must have exactly {m} members")
        members = np.array([b.members for b in blocks], dtype=np.int64).reshape(-1, m)
        slots = np.array([b.assign for b in blocks], dtype=np.int64).reshape(-1, m) - 1
        return cls(n, target, members, slots,
                   [b.offset for b in blocks], [b.pristine for b in blocks], good_count)

    @property
    def num_blocks(self) -> int:
        return len(self.members)

    def block(self, b: int) -> Block:
        return Block(tuple(int(x) for x in self.members[b]),
                     tuple(int(s) + 1 for s in self.slots[b]),
                     float(self.offsets[b]), bool(self.pristine[b]))

    @property
    def blocks(self) -> list[Block]:
        return [self.block(b) for b in range(self.num_blocks)]

    def __eq__(self, other):
        if not isinstance(other, Partition):
            return NotImplemented
        return (self.n == other.n and self.target == other.target
                and np.array_equal(self.members, other.members)
                and np.array_equal(self.slots, other.slots)
                and np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.pristine, other.pristine)
                and self.good_count == other.good_count)

    def to_json(self) -> dict:
        blocks = [{"members": [int(x) for x in mem],
                   "assign": [int(s) + 1 for s in sl],
                   "offset": float(off),
                   "pristine": bool(pr)}
                  for mem, sl, off, pr in zip(self.members, self.slots, self.offsets, self.pristine)]
        out = {"format_version": FORMAT_VERSION, "n": self.n, "target": self.target.to_json(),
               "blocks": blocks}
        if self.good_count is not None:
            out["good_count"] = self.good_count
        return out

    @classmethod
    def from_json(cls, data: dict) -> "Partition":
        try:
            target = TargetSpectrum.from_json(data["target"])
            blocks = [Block(tuple(int(x) for x in b["members"]), tuple(int(a) for a in b["assign"]),
                            float(b["offset"]), bool(b.get("pristine", False)))
                      for b in data["blocks"]]
            n = int(data["n"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed partition: {exc}") from exc
        return cls.from_blocks(n, target, blocks, data.get("good_count"))


@dataclass(frozen=True, eq=False)
class DefectReport:
    per_block: np.ndarray
    global_max: float
    epsilon: float
    passed: bool
    structural_errors: tuple[str, ...] = ()

    @property
    def structural_ok(self) -> bool:
        return not self.structural_errors

    def to_json(self) -> dict:
        gmax = self.global_max if math.isfinite(self.global_max) else None
        return {"global_max": gmax, "epsilon": self.epsilon, "pass": self.passed,
                "structural_errors": list(self.structural_errors), "blocks": len(self.per_block)}


def _frozen(a):
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# energies

def energy(x: SubsetIndex, lambdas: Sequence[float]) -> float:
    """E(x) = sum of lambda_i over i in x, compensated summation."""
    if x.n > len(lambdas):
        raise InputError(f"subset over {x.n} positions but only {len(lambdas)} coefficients")
    return math.fsum(lambdas[i - 1] for i in x.elements())


def centered_energy(x: SubsetIndex, n: int, delta: float) -> float:
    """E_n(x) = (#{i in x : i <= n} - n/2) * delta for uniform coefficients delta."""
    if not 0 <= n <= x.n:
        raise InputError(f"partial length {n} outside 0..{x.n}")
    return (2 * x.count_upto(n) - n) * delta / 2


def centered_half_units(x: SubsetIndex, n: int) -> int:
    """2 * E_n(x) / delta, an exact integer."""
    if not 0 <= n <= x.n:
        raise InputError(f"partial length {n} outside 0..{x.n}")
    return 2 * x.count_upto(n) - n


def dumps(obj) -> str:
    """Deterministic JSON text: key order as built, shortest round-trip floats."""
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
