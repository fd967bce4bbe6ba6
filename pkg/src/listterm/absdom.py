"""Abstract states: local variables, allocations, points-to entries, list
summaries, and the knowledge base, plus the derived first-order state formula.

States are immutable values.  The state formula is the least fixed point of
a set of clause families over the state's memory components; the conditional
families (points-to functionality/injectivity, list-length consequences)
consult the partial formula through the entailment engine, so generation is
a saturation loop.  Results are memoized per state.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Tuple, Union

from .ir import AggType, IrType, ProgramPosition
from .logic import (
    Atom,
    Entailment,
    Formula,
    SymVar,
    Term,
    Verdict,
)

Value = Union[SymVar, int]


def value_term(v: Value) -> Term:
    return Term.of(v)


def value_key(v: Value):
    """Stable sort key across mixed SymVar/int values."""
    if isinstance(v, SymVar):
        return (1, v.id, v.hint)
    return (0, v, "")


def _ty_key(ty: IrType) -> str:
    return str(ty)


@dataclass(frozen=True)
class Allocation:
    """Byte range [lo, hi], both ends allocated."""

    lo: SymVar
    hi: SymVar

    def sort_key(self):
        return (value_key(self.lo), value_key(self.hi))

    def __str__(self) -> str:
        return f"[{self.lo}, {self.hi}]"


@dataclass(frozen=True)
class PointsTo:
    """The memory at ``addr``, read with type ``ty``, holds ``value``."""

    addr: SymVar
    ty: IrType
    value: Value

    def sort_key(self):
        return (value_key(self.addr), _ty_key(self.ty), value_key(self.value))

    def __str__(self) -> str:
        return f"{self.addr} -{self.ty}-> {self.value}"


@dataclass(frozen=True)
class LIField:
    off: int
    fty: IrType
    first: Value  # field value in the first list element
    last: Value   # field value in the last list element

    def __str__(self) -> str:
        return f"({self.off}: {self.fty}: {self.first}..{self.last})"


@dataclass(frozen=True)
class ListInvariant:
    """Summary of a non-empty acyclic chain of ``length`` nodes of aggregate
    type ``ty`` starting at address ``ad``; ``rec_index`` is the 1-based
    index of the unique pointer-to-self field."""

    ad: SymVar
    length: SymVar
    ty: AggType
    fields: Tuple[LIField, ...]
    rec_index: int

    def sort_key(self):
        return (value_key(self.ad), value_key(self.length), self.ty.name)

    @property
    def rec_field(self) -> LIField:
        return self.fields[self.rec_index - 1]

    def __str__(self) -> str:
        fs = ", ".join(str(f) for f in self.fields)
        return f"{self.ad} ={self.ty}/{self.length}=> [{fs}]"


@dataclass(frozen=True)
class ErrState:
    """The distinguished error state: undefined behavior not excluded."""

    def __str__(self) -> str:
        return "ERR"


ERR = ErrState()


@dataclass(frozen=True)
class AbstractState:
    pos: ProgramPosition
    lv: Tuple[Tuple[str, Value], ...]
    al: Tuple[Allocation, ...]
    pt: Tuple[PointsTo, ...]
    li: Tuple[ListInvariant, ...]
    kb: Formula

    # -- construction --------------------------------------------------------

    @staticmethod
    def make(pos: ProgramPosition,
             lv: Union[Dict[str, Value], Iterable[Tuple[str, Value]]] = (),
             al: Iterable[Allocation] = (),
             pt: Iterable[PointsTo] = (),
             li: Iterable[ListInvariant] = (),
             kb: Formula = Formula()) -> "AbstractState":
        lv_items = sorted(dict(lv).items()) if not isinstance(lv, dict) \
            else sorted(lv.items())
        return AbstractState(
            pos=pos,
            lv=tuple(lv_items),
            al=tuple(sorted(al, key=Allocation.sort_key)),
            pt=tuple(sorted(pt, key=PointsTo.sort_key)),
            li=tuple(sorted(li, key=ListInvariant.sort_key)),
            kb=kb,
        )

    def replace_components(self, *, pos=None, lv=None, al=None, pt=None,
                           li=None, kb=None) -> "AbstractState":
        return AbstractState.make(
            pos=self.pos if pos is None else pos,
            lv=dict(self.lv) if lv is None else lv,
            al=self.al if al is None else al,
            pt=self.pt if pt is None else pt,
            li=self.li if li is None else li,
            kb=self.kb if kb is None else kb,
        )

    # -- accessors ------------------------------------------------------------

    def lv_map(self) -> Dict[str, Value]:
        return dict(self.lv)

    def lv_of(self, operand: Union[str, int]) -> Optional[Value]:
        """Value of a program variable, or the literal itself for integers."""
        if isinstance(operand, int):
            return operand
        return self.lv_map().get(operand)

    def bind(self, var: str, value: Value) -> Dict[str, Value]:
        m = self.lv_map()
        m[var] = value
        return m

    def sym_vars(self) -> Tuple[SymVar, ...]:
        seen: Dict[SymVar, None] = {}

        def add(v):
            if isinstance(v, SymVar):
                seen[v] = None

        for _, v in self.lv:
            add(v)
        for a in self.al:
            add(a.lo)
            add(a.hi)
        for p in self.pt:
            add(p.addr)
            add(p.value)
        for l in self.li:
            add(l.ad)
            add(l.length)
            for f in l.fields:
                add(f.first)
                add(f.last)
        for v in self.kb.vars():
            seen[v] = None
        return tuple(sorted(seen))

    def __str__(self) -> str:
        lv = ", ".join(f"{k}={v}" for k, v in self.lv)
        al = ", ".join(str(a) for a in self.al)
        pt = ", ".join(str(p) for p in self.pt)
        li = ", ".join(str(l) for l in self.li)
        return (f"({self.pos}; LV: {{{lv}}}; AL: {{{al}}}; PT: {{{pt}}}; "
                f"LI: {{{li}}}; KB: {self.kb})")


StateOrErr = Union[AbstractState, ErrState]


# --------------------------------------------------------------------------
# State formula
# --------------------------------------------------------------------------

def state_formula(s: AbstractState, engine: Entailment) -> Formula:
    """First-order consequence formula of the state's memory components.

    Unconditional clause families: allocation bounds and positivity,
    pairwise allocation disjointness, points-to address positivity, list
    length/address positivity.  Conditional families (saturated against the
    growing formula): points-to functionality and injectivity, field
    equalities for provably length-1 lists, positivity of the first next
    pointer for provably length-2+ lists, and length >= 2 when some field's
    first and last values provably differ.
    """
    cache: Dict[AbstractState, Formula]
    cache = getattr(engine, "_state_formula_cache", None)
    if cache is None:
        cache = {}
        engine._state_formula_cache = cache  # type: ignore[attr-defined]
    cached = cache.get(s)
    if cached is not None:
        return cached

    clauses: List[Tuple[Atom, ...]] = list(s.kb.clauses)

    def add(part):
        c = (part,) if isinstance(part, Atom) else tuple(part)
        if c not in clauses:
            clauses.append(c)

    for a in s.al:
        add(Atom.ge(a.lo, 1))
        add(Atom.le(a.lo, a.hi))
    for i, a in enumerate(s.al):
        for b in s.al[i + 1:]:
            add((Atom.lt(a.hi, b.lo), Atom.lt(b.hi, a.lo)))
    for p in s.pt:
        add(Atom.ge(p.addr, 1))
    for l in s.li:
        add(Atom.ge(l.length, 1))
        add(Atom.ge(l.ad, 1))

    # Saturate the conditional families.
    changed = True
    rounds = 0
    while changed and rounds < 4 * (len(s.li) + len(s.pt) + 1):
        changed = False
        rounds += 1
        current = Formula(tuple(clauses))

        def holds(atom: Atom) -> bool:
            return engine.entails(current, Formula.of(atom)) is Verdict.VALID

        for i, p in enumerate(s.pt):
            for q in s.pt[i + 1:]:
                if p.ty != q.ty:
                    continue
                func = Atom.eq(value_term(p.value), value_term(q.value))
                if (func,) not in clauses and holds(Atom.eq(p.addr, q.addr)):
                    clauses.append((func,))
                    changed = True
                inj = Atom.ne(Term.of(p.addr), Term.of(q.addr))
                if (inj,) not in clauses and holds(
                        Atom.ne(value_term(p.value), value_term(q.value))):
                    clauses.append((inj,))
                    changed = True

        for l in s.li:
            if holds(Atom.eq(l.length, 1)):
                for f in l.fields:
                    eq = Atom.eq(value_term(f.first), value_term(f.last))
                    if (eq,) not in clauses:
                        clauses.append((eq,))
                        changed = True
            if holds(Atom.ge(l.length, 2)):
                pos = Atom.ge(value_term(l.rec_field.first), 1)
                if (pos,) not in clauses:
                    clauses.append((pos,))
                    changed = True
            long = Atom.ge(l.length, 2)
            if (long,) not in clauses:
                for f in l.fields:
                    if holds(Atom.ne(value_term(f.first), value_term(f.last))):
                        clauses.append((long,))
                        changed = True
                        break

    result = Formula(tuple(clauses))
    cache[s] = result
    return result


def is_satisfiable(s: AbstractState, engine: Entailment) -> bool:
    return engine.entails(state_formula(s, engine),
                          Formula.of(Atom.false())) is not Verdict.VALID


# --------------------------------------------------------------------------
# Constant extraction and concreteness
# --------------------------------------------------------------------------

def constant_values(f: Formula) -> Dict[SymVar, int]:
    """Constants implied by the conjunctive equalities of ``f`` via simple
    propagation (each equality solved once all but one variable is known)."""
    known: Dict[SymVar, int] = {}
    eqs = [a for a in f.atoms() if a.rel == "="]
    changed = True
    while changed:
        changed = False
        for a in eqs:
            unknown = [(v, c) for v, c in a.term.coeffs if v not in known]
            if len(unknown) != 1:
                continue
            v, c = unknown[0]
            rest = a.term.const + sum(cc * known[w] for w, cc in a.term.coeffs
                                      if w in known)
            if rest % c == 0:
                known[v] = -rest // c
                changed = True
    return known


def is_concrete(s: StateOrErr, engine: Entailment) -> bool:
    """A state is concrete when every symbolic variable has a forced
    numeric value, memory is fully byte-mapped, and no summaries remain.
    ERR counts as concrete."""
    if isinstance(s, ErrState):
        return True
    if s.li:
        return False
    f = state_formula(s, engine)
    consts = constant_values(f)
    for v in s.sym_vars():
        if v not in consts:
            return False
    from .logic import eval_formula
    if not eval_formula(consts, f):
        return False

    def val(x: Value) -> int:
        return x if isinstance(x, int) else consts[x]

    covered: Dict[int, int] = {}
    for p in s.pt:
        if str(p.ty) != "i8":
            return False
        if not 0 <= val(p.value) <= 255:
            return False
        covered[val(p.addr)] = val(p.value)
    for a in s.al:
        lo, hi = val(a.lo), val(a.hi)
        for addr in range(lo, hi + 1):
            if addr not in covered:
                return False
    allocated = set()
    for a in s.al:
        allocated.update(range(val(a.lo), val(a.hi) + 1))
    for p in s.pt:
        if val(p.addr) not in allocated:
            return False
    return True


# --------------------------------------------------------------------------
# Renaming
# --------------------------------------------------------------------------

def alpha_rename(s: AbstractState, ren: Dict[SymVar, SymVar]) -> AbstractState:
    """Homomorphic renaming; the map must be injective on the state's
    variables (unmentioned variables stay fixed)."""
    relevant = [v for v in s.sym_vars() if v in ren]
    images = [ren[v] for v in relevant]
    if len(set(images)) != len(images):
        raise ValueError("renaming is not injective on the state's variables")

    def r(v: Value) -> Value:
        return ren.get(v, v) if isinstance(v, SymVar) else v

    from .logic import rename_formula
    return AbstractState.make(
        pos=s.pos,
        lv={k: r(v) for k, v in s.lv},
        al=[Allocation(r(a.lo), r(a.hi)) for a in s.al],
        pt=[PointsTo(r(p.addr), p.ty, r(p.value)) for p in s.pt],
        li=[replace(l, ad=r(l.ad), length=r(l.length),
                    fields=tuple(replace(f, first=r(f.first), last=r(f.last))
                                 for f in l.fields))
            for l in s.li],
        kb=rename_formula(s.kb, ren),
    )
