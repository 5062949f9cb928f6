"""Sparse multivariate polynomials with floating-point coefficients.

The canonical internal representation is the monomial basis: a polynomial is
a sparse map from monomials to coefficients, a monomial a sparse map from
variable ids to positive integer powers.  Everything downstream (SOS
compilation, vector fields, Lyapunov certificates) is built from these.

Conventions:
  * coefficients with magnitude <= PRUNE_EPS are dropped after every
    arithmetic operation, so rounding dust never accumulates into
    spurious monomials;
  * every ordered iteration (printing, serialization, basis construction)
    uses graded lexicographic order, which makes all outputs deterministic;
  * Chebyshev support is per-variable tensor products
    T_{e1}(x1)...T_{en}(xn).

All types are immutable values after construction and safe to share.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

PRUNE_EPS = 1e-14


@dataclass(frozen=True)
class Variable:
    id: int
    name: str


class VarRegistry:
    """Ordered collection of variables; ids are assigned by insertion order."""

    def __init__(self):
        self._vars: list[Variable] = []
        self._by_name: dict[str, Variable] = {}

    def var(self, name: str) -> Variable:
        """Return the variable called `name`, creating it if needed."""
        if not name:
            raise ValueError("variable name must be nonempty")
        v = self._by_name.get(name)
        if v is None:
            v = Variable(len(self._vars), name)
            self._vars.append(v)
            self._by_name[name] = v
        return v

    def vars(self, *names: str) -> list[Variable]:
        return [self.var(n) for n in names]

    @property
    def all_vars(self) -> list[Variable]:
        return list(self._vars)

    def name_of(self, vid: int) -> str:
        return self._vars[vid].name

    def __len__(self) -> int:
        return len(self._vars)

    def __contains__(self, v: Variable) -> bool:
        return 0 <= v.id < len(self._vars) and self._vars[v.id] is v


class Monomial:
    """Product of variable powers, stored as sorted (var_id, exp) pairs."""

    __slots__ = ("pairs", "degree", "_hash")

    def __init__(self, pairs=()):
        # constructor trusts nothing: sort, merge, drop zero exponents
        acc: dict[int, int] = {}
        for vid, e in pairs:
            if e < 0:
                raise ValueError("negative exponent")
            if e:
                acc[vid] = acc.get(vid, 0) + e
        self.pairs = tuple(sorted(acc.items()))
        self.degree = sum(e for _, e in self.pairs)
        self._hash = hash(self.pairs)

    def __hash__(self):
        return self._hash

    def __eq__(self, other):
        return isinstance(other, Monomial) and self.pairs == other.pairs

    def __mul__(self, other: "Monomial") -> "Monomial":
        if not self.pairs:
            return other
        if not other.pairs:
            return self
        acc = dict(self.pairs)
        for vid, e in other.pairs:
            acc[vid] = acc.get(vid, 0) + e
        m = Monomial.__new__(Monomial)
        m.pairs = tuple(sorted(acc.items()))
        m.degree = self.degree + other.degree
        m._hash = hash(m.pairs)
        return m

    def exp_of(self, vid: int) -> int:
        for v, e in self.pairs:
            if v == vid:
                return e
        return 0

    def var_ids(self):
        return [v for v, _ in self.pairs]

    def exponent_tuple(self, var_ids: list[int]) -> tuple[int, ...]:
        d = dict(self.pairs)
        return tuple(d.get(v, 0) for v in var_ids)

    def __repr__(self):
        if not self.pairs:
            return "1"
        return "*".join(f"v{v}^{e}" if e > 1 else f"v{v}" for v, e in self.pairs)


ONE = Monomial()


def grlex_key(mono: Monomial, var_ids: list[int]):
    """Sort key for graded lexicographic order (earlier variables rank higher)."""
    return (mono.degree, tuple(-e for e in mono.exponent_tuple(var_ids)))


class Polynomial:
    """Sparse polynomial over a shared variable registry."""

    __slots__ = ("reg", "terms")

    def __init__(self, reg: VarRegistry, terms: dict[Monomial, float] | None = None):
        self.reg = reg
        self.terms = {} if terms is None else terms

    # -- constructors -------------------------------------------------------

    @staticmethod
    def const(reg: VarRegistry, c: float) -> "Polynomial":
        if abs(c) <= PRUNE_EPS:
            return Polynomial(reg)
        return Polynomial(reg, {ONE: float(c)})

    @staticmethod
    def var(reg: VarRegistry, v: Variable) -> "Polynomial":
        return Polynomial(reg, {Monomial(((v.id, 1),)): 1.0})

    @staticmethod
    def zero(reg: VarRegistry) -> "Polynomial":
        return Polynomial(reg)

    # -- predicates and views ----------------------------------------------

    def is_zero(self) -> bool:
        return not self.terms

    def degree(self) -> int:
        return max((m.degree for m in self.terms), default=0)

    def degree_in(self, v: Variable) -> int:
        return max((m.exp_of(v.id) for m in self.terms), default=0)

    def var_ids(self) -> list[int]:
        seen = set()
        for m in self.terms:
            seen.update(m.var_ids())
        return sorted(seen)

    def variables(self) -> list[Variable]:
        return [self.reg._vars[i] for i in self.var_ids()]

    def coeff(self, mono: Monomial) -> float:
        return self.terms.get(mono, 0.0)

    def constant(self) -> float:
        return self.terms.get(ONE, 0.0)

    def sorted_terms(self) -> list[tuple[Monomial, float]]:
        vids = self.var_ids()
        return sorted(self.terms.items(), key=lambda kv: grlex_key(kv[0], vids))

    # -- arithmetic ---------------------------------------------------------

    def _check(self, other: "Polynomial"):
        if self.reg is not other.reg:
            raise ValueError("operands use different variable registries")

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.const(self.reg, other)
        self._check(other)
        acc = dict(self.terms)
        for m, c in other.terms.items():
            acc[m] = acc.get(m, 0.0) + c
        return Polynomial(self.reg, _pruned(acc))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.const(self.reg, other)
        self._check(other)
        acc = dict(self.terms)
        for m, c in other.terms.items():
            acc[m] = acc.get(m, 0.0) - c
        return Polynomial(self.reg, _pruned(acc))

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __neg__(self):
        return Polynomial(self.reg, {m: -c for m, c in self.terms.items()})

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            if abs(other) <= PRUNE_EPS and other == 0.0:
                return Polynomial(self.reg)
            acc = {m: c * other for m, c in self.terms.items()}
            return Polynomial(self.reg, _pruned(acc))
        self._check(other)
        acc: dict[Monomial, float] = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                m = m1 * m2
                acc[m] = acc.get(m, 0.0) + c1 * c2
        return Polynomial(self.reg, _pruned(acc))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __pow__(self, n: int):
        if n < 0 or int(n) != n:
            raise ValueError("exponent must be a nonnegative integer")
        out = Polynomial.const(self.reg, 1.0)
        base = self
        n = int(n)
        while n:
            if n & 1:
                out = out * base
            base = base * base if n > 1 else base
            n >>= 1
        return out

    # -- calculus and composition ------------------------------------------

    def differentiate(self, v: Variable) -> "Polynomial":
        acc: dict[Monomial, float] = {}
        for m, c in self.terms.items():
            e = m.exp_of(v.id)
            if e == 0:
                continue
            pairs = tuple((vid, ex - 1 if vid == v.id else ex) for vid, ex in m.pairs)
            dm = Monomial(pairs)
            acc[dm] = acc.get(dm, 0.0) + c * e
        return Polynomial(self.reg, _pruned(acc))

    def evaluate(self, point: dict[Variable, float]) -> float:
        """Term-by-term evaluation, summed in graded-lex order (deterministic)."""
        vals = {v.id: float(x) for v, x in point.items()}
        total = 0.0
        for m, c in self.sorted_terms():
            term = c
            for vid, e in m.pairs:
                if vid not in vals:
                    raise KeyError(f"no value assigned to {self.reg.name_of(vid)}")
                term *= vals[vid] ** e
            total += term
        return total

    def substitute(self, bindings: dict[Variable, "Polynomial"]) -> "Polynomial":
        """Simultaneous substitution; unbound variables pass through."""
        sub = {v.id: p for v, p in bindings.items()}
        out = Polynomial(self.reg)
        pow_cache: dict[tuple[int, int], Polynomial] = {}
        for m, c in self.terms.items():
            factor = Polynomial.const(self.reg, c)
            for vid, e in m.pairs:
                if vid in sub:
                    key = (vid, e)
                    if key not in pow_cache:
                        pow_cache[key] = sub[vid] ** e
                    factor = factor * pow_cache[key]
                else:
                    factor = factor * Polynomial(self.reg, {Monomial(((vid, e),)): 1.0})
            out = out + factor
        return out

    # -- misc ---------------------------------------------------------------

    def max_abs_coeff(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    def __repr__(self):
        if not self.terms:
            return "0"
        bits = []
        for m, c in self.sorted_terms():
            mono = "*".join(
                f"{self.reg.name_of(v)}^{e}" if e > 1 else self.reg.name_of(v)
                for v, e in m.pairs
            )
            bits.append(f"{c:+g}" + (f"*{mono}" if mono else ""))
        return " ".join(bits)


def _pruned(acc: dict[Monomial, float]) -> dict[Monomial, float]:
    return {m: c for m, c in acc.items() if abs(c) > PRUNE_EPS}


# -- quotient by circle identities -------------------------------------------


def trig_reduce_mono(mono: Monomial, pairs) -> list[tuple[Monomial, float]]:
    """Rewrite sin powers of 2 and up through sin^2 = 1 - cos^2.

    pairs lists (sin_id, cos_id) couples.  The result spans monomials whose
    sin exponents are all 0 or 1, the canonical representatives of the
    quotient by the circle ideals, with binomial coefficients from
    expanding (1 - cos^2)^k.
    """
    out = [(mono, 1.0)]
    for s_vid, c_vid in pairs:
        nxt = []
        for m, coef in out:
            es = m.exp_of(s_vid)
            if es < 2:
                nxt.append((m, coef))
                continue
            k, r = divmod(es, 2)
            base = {vid: e for vid, e in m.pairs if vid != s_vid}
            if r:
                base[s_vid] = 1
            ec = base.get(c_vid, 0)
            for t in range(k + 1):
                d = dict(base)
                if ec + 2 * t:
                    d[c_vid] = ec + 2 * t
                nxt.append((Monomial(tuple(d.items())),
                            coef * math.comb(k, t) * (-1.0) ** t))
        out = nxt
    merged: dict[Monomial, float] = {}
    for m, c in out:
        merged[m] = merged.get(m, 0.0) + c
    return [(m, c) for m, c in merged.items() if c != 0.0]


def trig_reduce(p: Polynomial, pairs) -> "Polynomial":
    """The canonical quotient representative of p (sin exponents <= 1)."""
    if not pairs:
        return p
    acc: dict[Monomial, float] = {}
    for m, c in p.terms.items():
        for rm, rc in trig_reduce_mono(m, pairs):
            acc[rm] = acc.get(rm, 0.0) + c * rc
    return Polynomial(p.reg, _pruned(acc))


# -- bases -------------------------------------------------------------------


def monomial_exponents(nvars: int, degree: int) -> list[tuple[int, ...]]:
    """All exponent tuples with total degree <= degree, graded-lex order."""
    out: list[tuple[int, ...]] = []
    for d in range(degree + 1):
        out.extend(_exps_of_degree(nvars, d))
    return out


def _exps_of_degree(nvars: int, d: int) -> list[tuple[int, ...]]:
    if nvars == 0:
        return [()] if d == 0 else []
    if nvars == 1:
        return [(d,)]
    out = []
    for lead in range(d, -1, -1):
        for rest in _exps_of_degree(nvars - 1, d - lead):
            out.append((lead,) + rest)
    return out


@dataclass
class BasisVector:
    """Ordered polynomial basis over a fixed variable list.

    kind "monomial" holds plain monomials; kind "chebyshev" holds products
    T_{e1}(x1)...T_{en}(xn).  Entry order follows `exps`, which is graded
    lexicographic, so the layout is deterministic.
    """

    variables: list[Variable]
    degree: int
    kind: str
    exps: list[tuple[int, ...]] = field(default_factory=list)
    entries: list[Polynomial] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)


def basis_vector(reg: VarRegistry, variables: list[Variable], degree: int,
                 kind: str = "monomial") -> BasisVector:
    if degree < 0:
        raise ValueError("degree must be >= 0")
    if kind not in ("monomial", "chebyshev"):
        raise ValueError(f"unknown basis kind {kind!r}")
    exps = monomial_exponents(len(variables), degree)
    vids = [v.id for v in variables]
    entries = []
    for e in exps:
        if kind == "monomial":
            entries.append(Polynomial(reg, {Monomial(tuple(zip(vids, e))): 1.0}))
        else:
            p = Polynomial.const(reg, 1.0)
            for v, ei in zip(variables, e):
                if ei:
                    p = p * chebyshev_t(reg, v, ei)
            entries.append(p)
    n, d = len(variables), degree
    assert len(entries) == math.comb(n + d, d)
    return BasisVector(list(variables), degree, kind, exps, entries)


# -- Chebyshev basis ---------------------------------------------------------

_CHEB_ROWS: list[list[float]] = [[1.0], [0.0, 1.0]]


def _cheb_coeff_rows(n: int) -> list[list[float]]:
    """Monomial coefficient rows of T_0..T_n (row k lists coeffs of x^0..x^k)."""
    full = _CHEB_ROWS
    while len(full) <= n:
        k = len(full) - 1
        prev, cur = full[k - 1], full[k]
        nxt = [0.0] * (k + 2)
        for i, c in enumerate(cur):
            nxt[i + 1] += 2.0 * c
        for i, c in enumerate(prev):
            nxt[i] -= c
        full.append(nxt)
    return full


def chebyshev_t(reg: VarRegistry, v: Variable, n: int) -> Polynomial:
    """The Chebyshev polynomial T_n in variable v, in the monomial basis."""
    row = _cheb_coeff_rows(n)[n]
    terms = {}
    for e, c in enumerate(row):
        if abs(c) > PRUNE_EPS:
            terms[Monomial(((v.id, e),)) if e else ONE] = c
    return Polynomial(reg, terms)


def _power_to_cheb(n: int) -> dict[int, float]:
    """Chebyshev coefficients of x^n: x^n = sum_j coef[j] T_j(x)."""
    # x^n = 2^(1-n) * sum'_{k=0..floor(n/2)} C(n,k) T_{n-2k}, prime halves k=n/2
    if n == 0:
        return {0: 1.0}
    out: dict[int, float] = {}
    scale = 2.0 ** (1 - n)
    for k in range(n // 2 + 1):
        j = n - 2 * k
        c = math.comb(n, k) * scale
        if j == 0:
            c *= 0.5
        out[j] = out.get(j, 0.0) + c
    return out


def to_chebyshev(p: Polynomial, variables: list[Variable],
                 degree: int | None = None) -> dict[tuple[int, ...], float]:
    """Coefficients of p over the tensor Chebyshev basis of the given variables.

    Every variable of p must be listed.  Returns a sparse map from Chebyshev
    index tuples (aligned with `variables`) to coefficients.
    """
    vids = [v.id for v in variables]
    listed = set(vids)
    if degree is not None and p.degree() > degree:
        raise ValueError("target basis degree below polynomial degree")
    out: dict[tuple[int, ...], float] = {}
    for m, c in p.terms.items():
        for vid in m.var_ids():
            if vid not in listed:
                raise ValueError(
                    f"variable {p.reg.name_of(vid)} not in the basis variable list")
        exp = m.exponent_tuple(vids)
        # tensor product of per-variable expansions
        partial: dict[tuple[int, ...], float] = {(): 1.0}
        for e in exp:
            conv = _power_to_cheb(e)
            nxt: dict[tuple[int, ...], float] = {}
            for idx, w in partial.items():
                for j, wj in conv.items():
                    nxt[idx + (j,)] = nxt.get(idx + (j,), 0.0) + w * wj
            partial = nxt
        for idx, w in partial.items():
            out[idx] = out.get(idx, 0.0) + c * w
    return {k: v for k, v in out.items() if abs(v) > PRUNE_EPS}


def from_chebyshev(reg: VarRegistry, coeffs: dict[tuple[int, ...], float],
                   variables: list[Variable]) -> Polynomial:
    out = Polynomial(reg)
    for idx, w in coeffs.items():
        p = Polynomial.const(reg, w)
        for v, j in zip(variables, idx):
            if j:
                p = p * chebyshev_t(reg, v, j)
        out = out + p
    return out


def change_basis(p: Polynomial, variables: list[Variable], kind: str,
                 degree: int | None = None):
    """Coefficient sequence of p over the requested basis of `variables`.

    Returns (BasisVector, dense coefficient list).  Round trip through
    `from_chebyshev` / plain reconstruction is the identity up to rounding.
    """
    d = p.degree() if degree is None else degree
    if d < p.degree():
        raise ValueError("target basis degree below polynomial degree")
    bv = basis_vector(p.reg, variables, d, kind)
    vids = [v.id for v in variables]
    if kind == "monomial":
        dense = [0.0] * len(bv)
        pos = {e: i for i, e in enumerate(bv.exps)}
        for m, c in p.terms.items():
            dense[pos[m.exponent_tuple(vids)]] = c
        return bv, dense
    cheb = to_chebyshev(p, variables, d)
    dense = [0.0] * len(bv)
    pos = {e: i for i, e in enumerate(bv.exps)}
    for idx, w in cheb.items():
        dense[pos[idx]] = w
    return bv, dense


# -- serialization -----------------------------------------------------------

POLY_SCHEMA_VERSION = 1


def poly_to_obj(p: Polynomial) -> dict:
    """JSON-ready form: variable names plus (exponents, coefficient) terms.

    Terms are written in graded-lex order over the polynomial's own
    variables, so equal polynomials always serialize identically.
    """
    vids = p.var_ids()
    names = [p.reg.name_of(i) for i in vids]
    terms = []
    for m, c in p.sorted_terms():
        terms.append({"e": list(m.exponent_tuple(vids)), "c": c})
    return {"version": POLY_SCHEMA_VERSION, "vars": names, "terms": terms}


def poly_from_obj(obj: dict, reg: VarRegistry) -> Polynomial:
    if obj.get("version") != POLY_SCHEMA_VERSION:
        raise ValueError(f"unsupported polynomial schema version {obj.get('version')!r}")
    vs = [reg.var(n) for n in obj["vars"]]
    terms: dict[Monomial, float] = {}
    for t in obj["terms"]:
        pairs = tuple((v.id, e) for v, e in zip(vs, t["e"]) if e)
        terms[Monomial(pairs)] = float(t["c"])
    return Polynomial(reg, _pruned(terms))


def poly_to_json(p: Polynomial) -> str:
    return json.dumps(poly_to_obj(p), separators=(",", ":"))


def poly_from_json(s: str, reg: VarRegistry) -> Polynomial:
    return poly_from_obj(json.loads(s), reg)
