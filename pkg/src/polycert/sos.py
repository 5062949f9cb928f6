"""Declarative SOS programs compiled to block-diagonal SDPs.

A program owns scalar decision variables (coefficients of free polynomials,
entries of Gram matrices and PSD matrix variables, standalone scalars).
Constraint expressions are polynomials whose coefficients are affine in
those scalars (`PolyLin`); requiring such an expression to be a sum of
squares introduces a witness Gram block Q over the half-degree basis of the
expression's variables and equality rows matching coefficients of
    expr(x) - m(x)' Q m(x) = 0
in either the monomial or the Chebyshev coefficient space.  Products of two
decision-bearing expressions are rejected at build time (the programs here
are alternations precisely because the joint problem is bilinear).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sdp as sdp_mod
from .polynomial import (
    Monomial,
    Polynomial,
    VarRegistry,
    Variable,
    basis_vector,
    grlex_key,
    to_chebyshev,
    trig_reduce,
    trig_reduce_mono,
)
from .sdpa_io import write_sdpa


class SosError(Exception):
    pass


class BilinearityError(SosError):
    pass


class LinExpr:
    """Affine expression over scalar decision variables: sum coef*var + const."""

    __slots__ = ("lin", "const")

    def __init__(self, lin=None, const=0.0):
        self.lin = {} if lin is None else lin
        self.const = float(const)

    @staticmethod
    def of_var(vid: int) -> "LinExpr":
        return LinExpr({vid: 1.0})

    def copy(self):
        return LinExpr(dict(self.lin), self.const)

    def scaled(self, s: float) -> "LinExpr":
        return LinExpr({k: v * s for k, v in self.lin.items()}, self.const * s)

    def iadd(self, other: "LinExpr", s: float = 1.0):
        for k, v in other.lin.items():
            self.lin[k] = self.lin.get(k, 0.0) + v * s
        self.const += other.const * s
        return self

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return LinExpr(dict(self.lin), self.const + other)
        return self.copy().iadd(other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return LinExpr(dict(self.lin), self.const - other)
        return self.copy().iadd(other, -1.0)

    def __rsub__(self, other):
        return self.scaled(-1.0).__add__(other)

    def __neg__(self):
        return self.scaled(-1.0)

    def __mul__(self, s):
        if not isinstance(s, (int, float)):
            raise BilinearityError("product of two decision expressions")
        return self.scaled(float(s))

    def __rmul__(self, s):
        return self.__mul__(s)

    def is_const(self) -> bool:
        return not self.lin

    def value(self, lookup) -> float:
        return self.const + sum(c * lookup(k) for k, c in sorted(self.lin.items()))


def _accum(acc: dict, m: Monomial, vid: int, coef: float):
    cur = acc.get(m)
    if cur is None:
        acc[m] = LinExpr({vid: coef})
    else:
        cur.lin[vid] = cur.lin.get(vid, 0.0) + coef


class PolyLin:
    """Polynomial with LinExpr coefficients, tied to one SosProgram."""

    __slots__ = ("prog", "terms")

    def __init__(self, prog, terms=None):
        self.prog = prog
        self.terms: dict[Monomial, LinExpr] = {} if terms is None else terms

    @staticmethod
    def from_poly(prog, p: Polynomial) -> "PolyLin":
        return PolyLin(prog, {m: LinExpr(const=c) for m, c in p.terms.items()})

    def has_decisions(self) -> bool:
        return any(not e.is_const() for e in self.terms.values())

    def decision_ids(self):
        out = set()
        for e in self.terms.values():
            out.update(e.lin)
        return out

    def degree(self) -> int:
        return max((m.degree for m in self.terms), default=0)

    def var_ids(self):
        seen = set()
        for m in self.terms:
            seen.update(m.var_ids())
        return sorted(seen)

    def _coerce(self, other):
        if isinstance(other, PolyLin):
            return other
        if isinstance(other, Polynomial):
            return PolyLin.from_poly(self.prog, other)
        if isinstance(other, (int, float)):
            return PolyLin(self.prog, {Monomial(): LinExpr(const=float(other))}
                           if other else {})
        if isinstance(other, LinExpr):
            return PolyLin(self.prog, {Monomial(): other.copy()})
        return NotImplemented

    def __add__(self, other):
        o = self._coerce(other)
        if o is NotImplemented:
            return NotImplemented
        acc = {m: e.copy() for m, e in self.terms.items()}
        for m, e in o.terms.items():
            if m in acc:
                acc[m].iadd(e)
            else:
                acc[m] = e.copy()
        return PolyLin(self.prog, acc)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        o = self._coerce(other)
        if o is NotImplemented:
            return NotImplemented
        return self.__add__(o.__neg__())

    def __rsub__(self, other):
        return self.__neg__().__add__(other)

    def __neg__(self):
        return PolyLin(self.prog, {m: e.scaled(-1.0) for m, e in self.terms.items()})

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return PolyLin(self.prog,
                           {m: e.scaled(float(other)) for m, e in self.terms.items()})
        o = self._coerce(other)
        if o is NotImplemented:
            return NotImplemented
        if self.has_decisions() and o.has_decisions():
            a = sorted(self.decision_ids())[0]
            b = sorted(o.decision_ids())[0]
            prog = self.prog
            raise BilinearityError(
                "product of decision variables "
                f"{prog.describe_var(a)} and {prog.describe_var(b)}; "
                "fix one side before multiplying")
        # exactly one side carries decisions; multiply term by term
        acc: dict[Monomial, LinExpr] = {}
        for m1, e1 in self.terms.items():
            for m2, e2 in o.terms.items():
                m = m1 * m2
                if e1.is_const():
                    contrib = e2.scaled(e1.const)
                else:
                    contrib = e1.scaled(e2.const)
                if m in acc:
                    acc[m].iadd(contrib)
                else:
                    acc[m] = contrib
        return PolyLin(self.prog, acc)

    def __rmul__(self, other):
        return self.__mul__(other)

    def differentiate(self, v: Variable) -> "PolyLin":
        acc: dict[Monomial, LinExpr] = {}
        for m, e in self.terms.items():
            ex = m.exp_of(v.id)
            if ex == 0:
                continue
            pairs = tuple((vid, p - 1 if vid == v.id else p) for vid, p in m.pairs)
            dm = Monomial(pairs)
            contrib = e.scaled(float(ex))
            if dm in acc:
                acc[dm].iadd(contrib)
            else:
                acc[dm] = contrib
        return PolyLin(self.prog, acc)

    def value(self, lookup) -> Polynomial:
        """Numeric polynomial after substituting decision values."""
        terms = {}
        for m, e in self.terms.items():
            c = e.value(lookup)
            if abs(c) > 1e-14:
                terms[m] = c
        return Polynomial(self.prog.reg, terms)


@dataclass
class DecisionPoly:
    name: str
    kind: str                      # "free" | "sos"
    entries: list                  # basis polynomials
    var_ids: list = None           # free kind: one id per entry
    gram_ids: dict = None          # sos kind: (i, j) i<=j -> id
    _expr: PolyLin = None
    _products: dict = None         # sos kind: (i, j) -> Polynomial

    def expr(self) -> PolyLin:
        return self._expr


@dataclass
class MatrixVar:
    name: str
    n: int
    ids: dict                      # (i, j) i<=j -> id

    def entry(self, i, j) -> LinExpr:
        if i > j:
            i, j = j, i
        return LinExpr.of_var(self.ids[(i, j)])


def quotient_entries(entries: list[Polynomial], pairs) -> list[Polynomial]:
    """Reduce basis entries to quotient representatives and drop the ones
    that become linearly dependent.

    Pruning is what makes the quotient sound: a combination of entries
    equal to a circle identity reduces to zero, and a Gram direction built
    on such a combination would be a positive semidefinite ray the
    coefficient matching cannot see.  Over independent representatives no
    nonzero polynomial of sin degree at most one lies in the ideal, so no
    such ray exists.
    """
    reduced = [trig_reduce(e, pairs) for e in entries]
    monos = sorted({m for e in reduced for m in e.terms},
                   key=lambda m: (m.degree, m.pairs))
    idx = {m: i for i, m in enumerate(monos)}
    kept: list[Polynomial] = []
    basis_rows: list[np.ndarray] = []
    for e in reduced:
        if not e.terms:
            continue
        row = np.zeros(len(monos))
        for m, c in e.terms.items():
            row[idx[m]] = c
        scale = np.linalg.norm(row)
        for b in basis_rows:
            row -= (b @ row) * b
        # second pass guards against cancellation in the first
        for b in basis_rows:
            row -= (b @ row) * b
        nrm = np.linalg.norm(row)
        if nrm > 1e-9 * scale:
            basis_rows.append(row / nrm)
            kept.append(e)
    return kept


class SosProgram:
    """Single-owner mutable builder for one SOS feasibility/optimization.

    quotient lists (sin_id, cos_id) pairs of variables tied by a circle
    identity sin^2 + cos^2 = 1.  All polynomial matching then happens on
    canonical representatives with sin exponents at most one, which makes
    the identities implicit instead of requiring free multipliers (whose
    interaction with the Gram blocks creates unbounded optimal faces).
    """

    def __init__(self, reg: VarRegistry, quotient=()):
        self.reg = reg
        self.quotient = tuple(sorted(tuple(p) for p in quotient))
        self._descr = []           # scalar id -> descriptor tuple
        self.polys: list[DecisionPoly] = []
        self.matrices: list[MatrixVar] = []
        self.sos_constraints = []  # (name, PolyLin, witness entries or None)
        self.eq_constraints = []   # (LinExpr, rhs)
        self.objective: LinExpr | None = None

    # -- decision variables -------------------------------------------------

    def _new_id(self, descr) -> int:
        self._descr.append(descr)
        return len(self._descr) - 1

    def describe_var(self, vid: int) -> str:
        d = self._descr[vid]
        if d[0] == "free":
            return d[1]
        if d[0] == "gram":
            return f"{d[1]}.Q[{d[2]},{d[3]}]"
        return f"{d[1]}[{d[2]},{d[3]}]"

    def new_scalar(self, label: str) -> LinExpr:
        return LinExpr.of_var(self._new_id(("free", label)))

    def new_psd_matrix(self, name: str, n: int) -> MatrixVar:
        ids = {}
        for i in range(n):
            for j in range(i, n):
                ids[(i, j)] = self._new_id(("mat", name, i, j))
        mv = MatrixVar(name, n, ids)
        self.matrices.append(mv)
        return mv

    def new_poly(self, name: str, variables: list[Variable], degree: int,
                 kind: str, drop_constant: bool = False) -> DecisionPoly:
        """Decision polynomial over a monomial basis of the given variables.

        kind "sos" allocates a Gram block over the half-degree basis; the
        degree must then be even.  drop_constant removes the constant basis
        entry (for quantities pinned to zero at a reference point).
        """
        if kind not in ("free", "sos"):
            raise ValueError(f"unknown kind {kind!r}")
        if kind == "sos":
            if degree % 2:
                raise SosError(f"{name}: an odd-degree polynomial cannot be SOS")
            bv = basis_vector(self.reg, variables, degree // 2)
        else:
            bv = basis_vector(self.reg, variables, degree)
        entries = list(bv.entries)
        if drop_constant:
            entries = entries[1:]
        return self.new_poly_from_entries(name, entries, kind)

    def new_poly_from_entries(self, name: str, entries: list[Polynomial],
                              kind: str) -> DecisionPoly:
        """Decision polynomial over explicit basis entries.

        For kind "sos" the value is entries' Q entries with Q constrained
        PSD, so structural facts about the entries (e.g. all vanishing at a
        point) transfer to the value and its gradient.
        """
        if self.quotient:
            entries = quotient_entries(list(entries), self.quotient)
        dp = DecisionPoly(name, kind, list(entries))
        acc: dict[Monomial, LinExpr] = {}
        if kind == "free":
            dp.var_ids = [self._new_id(("free", f"{name}[{i}]"))
                          for i in range(len(entries))]
            for vid, ent in zip(dp.var_ids, dp.entries):
                for m, c in ent.terms.items():
                    _accum(acc, m, vid, c)
        elif kind == "sos":
            dp.gram_ids = {}
            dp._products = {}
            n = len(entries)
            for i in range(n):
                for j in range(i, n):
                    vid = self._new_id(("gram", name, i, j))
                    dp.gram_ids[(i, j)] = vid
                    prod = trig_reduce(dp.entries[i] * dp.entries[j],
                                       self.quotient)
                    dp._products[(i, j)] = prod
                    mult = 1.0 if i == j else 2.0
                    for m, c in prod.terms.items():
                        _accum(acc, m, vid, mult * c)
        else:
            raise ValueError(kind)
        dp._expr = PolyLin(self, acc)
        self.polys.append(dp)
        return dp

    # -- constraints and objective ------------------------------------------

    def poly(self, p: Polynomial) -> PolyLin:
        return PolyLin.from_poly(self, p)

    def scaled(self, p: Polynomial, e: LinExpr) -> PolyLin:
        """p * e for a fixed polynomial and an affine scalar expression."""
        return PolyLin(self, {m: e.scaled(c) for m, c in p.terms.items()})

    def add_sos(self, expr, name: str | None = None,
                basis_entries: list[Polynomial] | None = None):
        """Constrain expr to be a sum of squares.

        basis_entries overrides the automatic witness basis with explicit
        polynomials; the certificate then lives in their span's squares.
        Supplying entries that all vanish at a point is the standard
        reduction for constraints pinned to zero there: it is lossless
        (any Gram with the forced null direction rotates into this form)
        and removes the zero rows that degrade interior-point solves.
        """
        if isinstance(expr, Polynomial):
            expr = self.poly(expr)
        if not isinstance(expr, PolyLin):
            raise TypeError("add_sos expects a PolyLin or Polynomial")
        if basis_entries is not None:
            basis_entries = list(basis_entries)
        self.sos_constraints.append(
            (name or f"sos{len(self.sos_constraints)}", expr, basis_entries))

    def add_eq(self, lin: LinExpr, rhs: float = 0.0):
        self.eq_constraints.append((lin.copy(), float(rhs)))

    def minimize(self, obj: LinExpr):
        self.objective = obj.copy()

    def maximize(self, obj: LinExpr):
        self.objective = obj.scaled(-1.0)

    def quad_form(self, mv: MatrixVar, vec: list[Polynomial]) -> PolyLin:
        """v(x)' M v(x) as a PolyLin affine in the matrix entries."""
        if len(vec) != mv.n:
            raise ValueError("vector length does not match matrix size")
        acc: dict[Monomial, LinExpr] = {}
        for i in range(mv.n):
            for j in range(i, mv.n):
                prod = trig_reduce(vec[i] * vec[j], self.quotient)
                mult = 1.0 if i == j else 2.0
                vid = mv.ids[(i, j)]
                for m, c in prod.terms.items():
                    _accum(acc, m, vid, mult * c)
        return PolyLin(self, acc)

    def trace_against(self, mv: MatrixVar, W: np.ndarray) -> LinExpr:
        """tr(W M) as a LinExpr (W symmetric); used for tr(Ehat^-1 E)."""
        e = LinExpr()
        for i in range(mv.n):
            for j in range(i, mv.n):
                w = W[i, j] if i == j else W[i, j] + W[j, i]
                e.iadd(LinExpr.of_var(mv.ids[(i, j)]), float(w))
        return e

    # -- compilation --------------------------------------------------------

    def compile(self, basis_kind: str = "monomial") -> "CompiledSos":
        if basis_kind not in ("monomial", "chebyshev"):
            raise ValueError(f"unknown basis kind {basis_kind!r}")
        return CompiledSos(self, basis_kind)


@dataclass
class _WitnessMeta:
    name: str
    expr: PolyLin
    basis_entries: list
    block: int


class CompiledSos:
    """Frozen SDP form of a program plus the maps needed for extraction."""

    def __init__(self, prog: SosProgram, basis_kind: str):
        self.prog = prog
        self.basis_kind = basis_kind
        self.pre_status: str | None = None
        self._reduce_cache: dict[Monomial, list[tuple[Monomial, float]]] = {}
        bld = sdp_mod.SdpProblemBuilder()

        # decision-variable placement
        used_free = self._used_free_ids()
        self.place = {}
        self.free_cols = {}
        psd_sizes = []
        for dp in prog.polys:
            if dp.kind == "sos":
                blk = bld.add_psd_block(len(dp.entries))
                psd_sizes.append((blk, len(dp.entries)))
                for (i, j), vid in dp.gram_ids.items():
                    self.place[vid] = ("psd", blk, i, j)
        for mv in prog.matrices:
            blk = bld.add_psd_block(mv.n)
            psd_sizes.append((blk, mv.n))
            for (i, j), vid in mv.ids.items():
                self.place[vid] = ("psd", blk, i, j)
        if used_free:
            bld.add_free_block(len(used_free))
            for col, vid in enumerate(used_free):
                self.place[vid] = ("free", col)
                self.free_cols[vid] = col

        # witness blocks
        self.witnesses: list[_WitnessMeta] = []
        for name, expr, entries in prog.sos_constraints:
            if entries is None:
                vids = expr.var_ids()
                variables = [prog.reg._vars[i] for i in vids]
                half = (expr.degree() + 1) // 2
                bv = basis_vector(prog.reg, variables, half, basis_kind)
                entries = list(bv.entries)
            if prog.quotient:
                entries = quotient_entries(entries, prog.quotient)
            blk = bld.add_psd_block(len(entries))
            psd_sizes.append((blk, len(entries)))
            self.witnesses.append(_WitnessMeta(name, expr, entries, blk))

        # coefficient-matching rows
        seen_rows = {}
        self.rows = 0
        for meta in self.witnesses:
            acc = self._match_map(meta)
            for key in sorted(acc.keys()):
                self._emit_row(bld, acc[key], seen_rows)
        for lin, rhs in prog.eq_constraints:
            le = lin - rhs
            self._emit_row(bld, le, seen_rows)

        # objective
        if prog.objective is not None:
            for vid, c in sorted(prog.objective.lin.items()):
                p = self.place.get(vid)
                if p is None:
                    # free scalar absent from every constraint: the model is
                    # unbounded in that direction
                    self.pre_status = sdp_mod.UNBOUNDED
                    continue
                self._emit_obj(bld, p, c)
            self.obj_const = prog.objective.const
            # a faint trace term prices gram directions the modeled
            # objective cannot see, keeping the optimal face bounded when
            # some gram freedom is orthogonal to the cost
            for blk, n in psd_sizes:
                for i in range(n):
                    self._emit_obj(bld, ("psd", blk, i, i), 1e-8)
        else:
            # pure feasibility: minimize the total trace instead of solving
            # with a zero cost.  The feasible set is unchanged, the problem
            # becomes bounded, and y = 0 is strictly dual feasible, which
            # the interior-point method needs to converge reliably.
            for blk, n in psd_sizes:
                for i in range(n):
                    self._emit_obj(bld, ("psd", blk, i, i), 1.0)
            self.obj_const = 0.0

        self.prob = bld.build()

    def _used_free_ids(self):
        used = set()
        for _, expr, _ in self.prog.sos_constraints:
            for e in expr.terms.values():
                used.update(k for k in e.lin
                            if self.prog._descr[k][0] == "free")
        for lin, _ in self.prog.eq_constraints:
            used.update(k for k in lin.lin if self.prog._descr[k][0] == "free")
        return sorted(used)

    def _reduced(self, m: Monomial) -> list[tuple[Monomial, float]]:
        hit = self._reduce_cache.get(m)
        if hit is None:
            hit = trig_reduce_mono(m, self.prog.quotient)
            self._reduce_cache[m] = hit
        return hit

    def _match_map(self, meta: _WitnessMeta):
        """target basis index -> LinExpr that must equal zero."""
        prog = self.prog
        quot = prog.quotient
        acc: dict = {}

        def bucket(m: Monomial, e: LinExpr, s: float):
            cur = acc.get(m)
            if cur is None:
                acc[m] = e.scaled(s)
            else:
                cur.iadd(e, s)

        def add_mono(m: Monomial, e: LinExpr, s: float):
            if not quot:
                bucket(m, e, s)
                return
            for rm, rc in self._reduced(m):
                bucket(rm, e, s * rc)

        for m, e in meta.expr.terms.items():
            add_mono(m, e, 1.0)
        n = len(meta.basis_entries)
        for i in range(n):
            for j in range(i, n):
                mult = 1.0 if i == j else 2.0
                prod = meta.basis_entries[i] * meta.basis_entries[j]
                wkey = (meta.block, i, j)
                for mono, c in prod.terms.items():
                    add_mono(mono, LinExpr({wkey: -mult * c}), 1.0)
        vids = sorted({v for m in acc for v in m.var_ids()})
        if self.basis_kind == "monomial":
            return {grlex_key(m, vids): e for m, e in acc.items()}
        # Chebyshev matching: transform the per-monomial map into the
        # Chebyshev coefficient space (an invertible linear change, so the
        # matched identities are equivalent)
        variables = [prog.reg._vars[i] for i in vids]
        out: dict = {}
        for m, e in acc.items():
            mono_poly = Polynomial(prog.reg, {m: 1.0})
            for idx, w in to_chebyshev(mono_poly, variables).items():
                key = (sum(idx), tuple(-k for k in idx))
                cur = out.get(key)
                if cur is None:
                    out[key] = e.scaled(w)
                else:
                    cur.iadd(e, w)
        return out

    def _emit_row(self, bld, le: LinExpr, seen_rows):
        """One equality row sum coef*var = -const, scaled to unit inf-norm."""
        items = []
        for k, v in le.lin.items():
            if abs(v) > 1e-14:
                items.append((k, v))
        rhs = -le.const
        if not items:
            if abs(rhs) > 1e-12:
                # structurally unsatisfiable row; register the empty row as
                # an explicit contradiction for the solver to flag
                bld.add_constraint(rhs)
                self.rows += 1
            return
        scale = max(abs(v) for _, v in items)
        items = [(self._sort_key(k), k, v / scale) for k, v in items]
        items.sort(key=lambda t: t[0])
        rhs /= scale
        row_key = (tuple((t[0], t[2]) for t in items), rhs)
        if row_key in seen_rows:
            return
        seen_rows[row_key] = True
        con = bld.add_constraint(rhs)
        self.rows += 1
        for _, k, v in items:
            self._emit_entry(bld, con, k, v)

    def _sort_key(self, k):
        if isinstance(k, tuple):
            return (1, k[0], k[1], k[2])
        p = self.place[k]
        if p[0] == "psd":
            return (0, p[1], p[2], p[3])
        return (2, p[1], 0, 0)

    def _emit_entry(self, bld, con, k, v):
        if isinstance(k, tuple):       # witness Gram entry (block, i, j)
            blk, i, j = k
            bld.add_psd_entry(con, blk, i, j, v if i == j else v / 2.0)
            return
        p = self.place[k]
        if p[0] == "psd":
            _, blk, i, j = p
            bld.add_psd_entry(con, blk, i, j, v if i == j else v / 2.0)
        else:
            bld.add_free_entry(con, p[1], v)

    def _emit_obj(self, bld, p, c):
        if p[0] == "psd":
            _, blk, i, j = p
            bld.add_psd_obj(blk, i, j, c if i == j else c / 2.0)
        else:
            bld.add_free_obj(p[1], c)

    # -- public surface ------------------------------------------------------

    def describe(self) -> dict:
        return {
            "psd_blocks": [d.size for d in self.prob.psd_data],
            "free_vars": self.prob.nfree,
            "rows": self.prob.m,
            "basis": self.basis_kind,
        }

    def to_sdpa(self) -> str:
        return write_sdpa(self.prob)

    def solve(self, settings: sdp_mod.SolverSettings | None = None) -> "SosSolution":
        if self.pre_status is not None:
            sol = sdp_mod.SdpSolution(status=self.pre_status)
            return SosSolution(self, sol)
        return SosSolution(self, sdp_mod.solve(self.prob, settings))


class SosSolution:
    """Typed view over an SDP solution in terms of the source program."""

    def __init__(self, compiled: CompiledSos, raw: sdp_mod.SdpSolution):
        self.compiled = compiled
        self.raw = raw
        self.status = raw.status

    @property
    def objective(self) -> float:
        return self.raw.obj_primal + self.compiled.obj_const

    def _lookup(self, vid: int) -> float:
        p = self.compiled.place.get(vid)
        if p is None:
            return 0.0
        if p[0] == "psd":
            return float(self.raw.X[p[1]][p[2], p[3]])
        return float(self.raw.u[p[1]])

    def _require_solved(self):
        if self.status != sdp_mod.OPTIMAL:
            raise SosError(f"no solution to extract: solver status {self.status!r}")

    def scalar_value(self, e: LinExpr) -> float:
        self._require_solved()
        return e.value(self._lookup)

    def poly_value(self, dp: DecisionPoly) -> Polynomial:
        self._require_solved()
        return dp.expr().value(self._lookup)

    def expr_value(self, expr: PolyLin) -> Polynomial:
        self._require_solved()
        return expr.value(self._lookup)

    def matrix_value(self, mv: MatrixVar) -> np.ndarray:
        self._require_solved()
        M = np.zeros((mv.n, mv.n))
        for (i, j), vid in mv.ids.items():
            M[i, j] = M[j, i] = self._lookup(vid)
        return M

    def witness_gram(self, idx: int):
        self._require_solved()
        meta = self.compiled.witnesses[idx]
        return meta.basis_entries, self.raw.X[meta.block]

    def gram_residual(self, idx: int) -> float:
        """inf-norm coefficient mismatch of expr - m'Qm for one constraint."""
        self._require_solved()
        meta = self.compiled.witnesses[idx]
        expr = meta.expr.value(self._lookup)
        Q = self.raw.X[meta.block]
        diff = dict(expr.terms)
        n = len(meta.basis_entries)
        for i in range(n):
            row = meta.basis_entries[i]
            for j in range(i, n):
                w = (1.0 if i == j else 2.0) * Q[i, j]
                for m, c in (row * meta.basis_entries[j]).terms.items():
                    diff[m] = diff.get(m, 0.0) - w * c
        return max((abs(c) for c in diff.values()), default=0.0)

    def min_gram_eig(self, idx: int) -> float:
        self._require_solved()
        meta = self.compiled.witnesses[idx]
        return float(np.linalg.eigvalsh(self.raw.X[meta.block])[0])

    def certificate_ok(self, tol_eig: float = 1e-7, tol_res: float = 1e-7) -> bool:
        """Numerical-certificate policy: eigenvalue and residual gates."""
        self._require_solved()
        for i in range(len(self.compiled.witnesses)):
            if self.min_gram_eig(i) < -tol_eig:
                return False
            if self.gram_residual(i) > tol_res:
                return False
        return True

    def soundness_bound(self, idx: int, radius: float) -> float:
        """delta such that expr(x) >= -delta on the inf-norm ball |x| <= radius.

        Crude but rigorous: lambda_min(Q) scaled by a bound on |m(x)|^2 plus
        the coefficient residual scaled by a bound on monomial magnitudes.
        """
        self._require_solved()
        meta = self.compiled.witnesses[idx]
        Q = self.raw.X[meta.block]
        lam = float(np.linalg.eigvalsh(Q)[0])
        r = max(1.0, radius)
        half = max((e.degree() for e in meta.basis_entries), default=0)
        b1 = sum((abs(c) for e in meta.basis_entries for c in e.terms.values()))
        msq = (b1 * r ** half) ** 2 if b1 else float(len(meta.basis_entries))
        res = self.gram_residual(idx)
        expr_deg = meta.expr.degree()
        nterms = max(len(meta.expr.terms), 1)
        return max(0.0, -lam) * msq + res * nterms * r ** expr_deg
