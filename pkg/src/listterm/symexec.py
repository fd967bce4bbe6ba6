"""One step of symbolic execution: the dispatcher and every inference rule.

Rules are pure functions from an abstract state to successor states (plus
fresh-variable allocation).  A step result is either a single evaluation
successor or a two-way refinement whose knowledge-base additions are
complementary.  When no rule's memory-safety side conditions can be proven,
the successor is the absorbing error state.

Rule priority where several could match: stores try list extension before
the plain store rule; getelementptr tries the list traversal family before
plain pointer arithmetic (and within the family, the list-splitting
variants before the plain ones whenever a second summary ends at the
traversed list's root); loads try allocated memory before list summaries.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

from . import ir
from .absdom import (
    ERR,
    AbstractState,
    Allocation,
    LIField,
    ListInvariant,
    PointsTo,
    StateOrErr,
    Value,
    state_formula,
    value_term,
)
from .ir import Instruction, Program, ProgramPosition, type_size
from .logic import Atom, Entailment, Formula, Term, Verdict, fresh_var

EVALUATION = "evaluation"
REFINEMENT = "refinement"


@dataclass(frozen=True)
class StepResult:
    edge_kind: str
    successors: Tuple[StateOrErr, ...]

    @staticmethod
    def eval_to(s: StateOrErr) -> "StepResult":
        return StepResult(EVALUATION, (s,))

    @staticmethod
    def refine(a: AbstractState, b: AbstractState) -> "StepResult":
        return StepResult(REFINEMENT, (a, b))


def _holds(engine: Entailment, premise: Formula, *parts) -> bool:
    return engine.entails(premise, Formula.of(*parts)) is Verdict.VALID


def _kb_add(s: AbstractState, *atoms: Atom) -> Formula:
    return s.kb.and_(Formula.conj(atoms))


# --------------------------------------------------------------------------
# load
# --------------------------------------------------------------------------

def rule_load_allocated(s: AbstractState, ins: ir.Load, prog: Program,
                        engine: Entailment) -> Optional[AbstractState]:
    ad = s.lv_of(ins.addr)
    if ad is None:
        return None
    f = state_formula(s, engine)
    ad_t = value_term(ad)
    size = type_size(ins.ty, prog.layout)
    covered = any(
        _holds(engine, f, Atom.le(a.lo, ad_t), Atom.le(ad_t + size - 1, a.hi))
        for a in s.al)
    if not covered:
        return None
    for p in s.pt:
        if p.ty == ins.ty and _holds(engine, f, Atom.eq(ad_t, p.addr)):
            w = fresh_var(ins.dst)
            return s.replace_components(
                pos=prog.successor(s.pos),
                lv=s.bind(ins.dst, w),
                kb=_kb_add(s, Atom.eq(w, value_term(p.value))))
    return None


def rule_load_list_invariant(s: AbstractState, ins: ir.Load, prog: Program,
                             engine: Entailment) -> Optional[AbstractState]:
    ad = s.lv_of(ins.addr)
    if ad is None:
        return None
    f = state_formula(s, engine)
    ad_t = value_term(ad)
    for l in s.li:
        for fld in l.fields:
            if fld.fty != ins.ty:
                continue
            if _holds(engine, f, Atom.eq(ad_t, Term.of(l.ad) + fld.off)):
                w = fresh_var(ins.dst)
                return s.replace_components(
                    pos=prog.successor(s.pos),
                    lv=s.bind(ins.dst, w),
                    kb=_kb_add(s, Atom.eq(w, value_term(fld.first))))
    return None


# --------------------------------------------------------------------------
# store
# --------------------------------------------------------------------------

def _disjoint_goal(lo1: Term, hi1: Term, lo2: Term, hi2: Term):
    return (Atom.lt(hi1, lo2), Atom.lt(hi2, lo1))


def rule_store_plain(s: AbstractState, ins: ir.Store, prog: Program,
                     engine: Entailment) -> Optional[AbstractState]:
    ad = s.lv_of(ins.addr)
    val = s.lv_of(ins.value)
    if ad is None or val is None:
        return None
    f = state_formula(s, engine)
    ad_t = value_term(ad)
    size = type_size(ins.ty, prog.layout)
    covered = any(
        _holds(engine, f, Atom.le(a.lo, ad_t), Atom.le(ad_t + size - 1, a.hi))
        for a in s.al)
    if not covered:
        return None

    new_pt: List[PointsTo] = []
    target_addr: Optional[Value] = None
    for p in s.pt:
        p_size = type_size(p.ty, prog.layout)
        if p.ty == ins.ty and _holds(engine, f, Atom.eq(ad_t, p.addr)):
            target_addr = p.addr  # replaced below
            continue
        if _holds(engine, f,
                  _disjoint_goal(Term.of(p.addr), Term.of(p.addr) + p_size - 1,
                                 ad_t, ad_t + size - 1)):
            new_pt.append(p)
        # Possibly-overlapping entries are dropped: their content is unknown.
    kb = s.kb
    if target_addr is None:
        if isinstance(ad, int):
            target_addr = fresh_var("addr")
            kb = _kb_add(s, Atom.eq(target_addr, ad))
        else:
            target_addr = ad
    new_pt.append(PointsTo(target_addr, ins.ty, val))
    return s.replace_components(pos=prog.successor(s.pos), pt=new_pt, kb=kb)


def rule_list_extension(s: AbstractState, ins: ir.Store, prog: Program,
                        engine: Entailment) -> Optional[AbstractState]:
    ad = s.lv_of(ins.addr)
    val = s.lv_of(ins.value)
    if ad is None or val is None:
        return None
    f = state_formula(s, engine)
    ad_t = value_term(ad)
    for l in s.li:
        size = type_size(l.ty, prog.layout)
        j = l.rec_index
        for alloc in s.al:
            if not _holds(engine, f,
                          Atom.eq(Term.of(alloc.hi), Term.of(alloc.lo) + size - 1)):
                continue
            for m, fld_m in enumerate(l.fields, start=1):
                if fld_m.fty != ins.ty:
                    continue
                if not _holds(engine, f,
                              Atom.eq(ad_t, Term.of(alloc.lo) + fld_m.off)):
                    continue
                # The new head must already (or now) point at the summary.
                if m == j:
                    if not _holds(engine, f, Atom.eq(value_term(val), l.ad)):
                        continue
                # Every other field of the new head must be initialized.
                head_vals: dict = {}
                ok = True
                for i, fld in enumerate(l.fields, start=1):
                    if i == m:
                        continue
                    entry = next(
                        (p for p in s.pt if p.ty == fld.fty and _holds(
                            engine, f,
                            Atom.eq(Term.of(p.addr), Term.of(alloc.lo) + fld.off))),
                        None)
                    if entry is None:
                        ok = False
                        break
                    head_vals[i] = entry.value
                if not ok:
                    continue
                if m != j:
                    if not _holds(engine, f,
                                  Atom.eq(value_term(head_vals[j]), l.ad)):
                        continue
                # All side conditions hold: extend the summary.
                new_len = fresh_var("len")
                stored = fresh_var(f"v{m}")
                head_vals[m] = stored
                new_fields = tuple(
                    replace(fld, first=head_vals[i])
                    for i, fld in enumerate(l.fields, start=1))
                new_inv = ListInvariant(ad=alloc.lo, length=new_len,
                                        ty=l.ty, fields=new_fields,
                                        rec_index=j)
                lo_t, hi_t = Term.of(alloc.lo), Term.of(alloc.hi)
                kept_pt = [
                    p for p in s.pt
                    if _holds(engine, f, _disjoint_goal(
                        Term.of(p.addr),
                        Term.of(p.addr) + type_size(p.ty, prog.layout) - 1,
                        lo_t, hi_t))]
                new_li = [x for x in s.li if x != l] + [new_inv]
                return s.replace_components(
                    pos=prog.successor(s.pos),
                    al=[a for a in s.al if a != alloc],
                    pt=kept_pt,
                    li=new_li,
                    kb=_kb_add(s, Atom.eq(stored, value_term(val)),
                               Atom.eq(new_len, Term.of(l.length) + 1)))
    return None


# --------------------------------------------------------------------------
# getelementptr: traversal family and the plain rule
# --------------------------------------------------------------------------

def _traversal_candidate(s: AbstractState, ins, prog: Program,
                         engine: Entailment
                         ) -> Optional[Tuple[ListInvariant, int]]:
    """The summary being traversed plus the 1-based field the address
    computation lands in, if the base/offset side conditions of the
    traversal rules are provable for this instruction.  The base must hold
    the summary's first chain value, i.e. point at the second node."""
    f = state_formula(s, engine)
    pa = s.lv_of(ins.base)
    if pa is None:
        return None
    for l in s.li:
        rec = l.rec_field
        acc = None
        if isinstance(ins, ir.GepByte):
            t = s.lv_of(ins.offset)
            if t is None:
                continue
            for i, fld in enumerate(l.fields, start=1):
                if _holds(engine, f, Atom.eq(value_term(t), fld.off)):
                    acc = i
                    break
        else:  # GepField
            if ins.agg != l.ty:
                continue
            t = s.lv_of(ins.index)
            if t is None:
                continue
            # The 0-based field operand selects 1-based field t+1.
            for i in range(1, len(l.fields) + 1):
                if _holds(engine, f, Atom.eq(value_term(t) + 1, i)):
                    acc = i
                    break
        if acc is None:
            continue
        if _holds(engine, f, Atom.eq(value_term(pa), value_term(rec.first))):
            return l, acc
    return None


def _split_partner(s: AbstractState, l: ListInvariant,
                   engine: Entailment) -> Optional[ListInvariant]:
    """A second summary of the same type whose last chain value is the
    traversed summary's root: traversing then grows the prefix."""
    f = state_formula(s, engine)
    for l1 in s.li:
        if l1 == l or l1.ty != l.ty:
            continue
        if _holds(engine, f,
                  Atom.eq(value_term(l1.rec_field.last), l.ad)):
            return l1
    return None


def _traverse_long(s: AbstractState, ins, l: ListInvariant, acc: int,
                   prog: Program, engine: Entailment) -> AbstractState:
    """Main traversal (length provably >= 2): the head node becomes plain
    allocated memory; the summary advances to the second node."""
    j = l.rec_index
    size = type_size(l.ty, prog.layout)
    v_start = fresh_var("start")
    v_end = fresh_var("end")
    starts = [fresh_var(f"f{i}") for i in range(1, len(l.fields) + 1)]
    w_start = fresh_var("head")
    w_len = fresh_var("len")
    w_start_j = fresh_var(ins.dst)
    new_firsts = [fresh_var(f"w{i}") for i in range(1, len(l.fields) + 1)]
    atoms = [
        Atom.eq(v_start, l.ad),
        Atom.eq(v_end, Term.of(v_start) + size - 1),
        Atom.eq(w_start, value_term(l.rec_field.first)),
        Atom.eq(w_len, Term.of(l.length) - 1),
        Atom.eq(w_start_j, Term.of(w_start) + l.fields[acc - 1].off),
    ]
    new_pt = list(s.pt)
    for st, fld in zip(starts, l.fields):
        atoms.append(Atom.eq(st, Term.of(l.ad) + fld.off))
        new_pt.append(PointsTo(st, fld.fty, fld.first))
    new_inv = ListInvariant(
        ad=w_start, length=w_len, ty=l.ty,
        fields=tuple(replace(fld, first=w)
                     for w, fld in zip(new_firsts, l.fields)),
        rec_index=j)
    return s.replace_components(
        pos=prog.successor(s.pos),
        lv=s.bind(ins.dst, w_start_j),
        al=list(s.al) + [Allocation(v_start, v_end)],
        pt=new_pt,
        li=[x for x in s.li if x != l] + [new_inv],
        kb=s.kb.and_(Formula.conj(atoms)))


def _traverse_last(s: AbstractState, ins, l: ListInvariant, acc: int,
                   prog: Program, engine: Entailment) -> AbstractState:
    """Traversal of a length-1 summary: it dissolves into plain memory."""
    size = type_size(l.ty, prog.layout)
    v_start = fresh_var("start")
    v_end = fresh_var("end")
    starts = [fresh_var(f"f{i}") for i in range(1, len(l.fields) + 1)]
    w_start_j = fresh_var(ins.dst)
    atoms = [
        Atom.eq(v_start, l.ad),
        Atom.eq(v_end, Term.of(v_start) + size - 1),
        Atom.eq(w_start_j,
                value_term(l.rec_field.first) + l.fields[acc - 1].off),
    ]
    new_pt = list(s.pt)
    for st, fld in zip(starts, l.fields):
        atoms.append(Atom.eq(st, Term.of(l.ad) + fld.off))
        atoms.append(Atom.eq(value_term(fld.first), value_term(fld.last)))
        new_pt.append(PointsTo(st, fld.fty, fld.first))
    return s.replace_components(
        pos=prog.successor(s.pos),
        lv=s.bind(ins.dst, w_start_j),
        al=list(s.al) + [Allocation(v_start, v_end)],
        pt=new_pt,
        li=[x for x in s.li if x != l],
        kb=s.kb.and_(Formula.conj(atoms)))


def _traverse_split(s: AbstractState, ins, l: ListInvariant,
                    l1: ListInvariant, acc: int, prog: Program,
                    engine: Entailment) -> AbstractState:
    """Split traversal (length >= 2): the head moves from the traversed
    summary into the prefix summary instead of becoming plain memory."""
    j = l.rec_index
    u_len = fresh_var("len")
    w_start = fresh_var("head")
    w_len = fresh_var("len")
    w_start_j = fresh_var(ins.dst)
    new_firsts = [fresh_var(f"w{i}") for i in range(1, len(l.fields) + 1)]
    new_l1 = ListInvariant(
        ad=l1.ad, length=u_len, ty=l1.ty,
        fields=tuple(replace(f1, last=fl.first)
                     for f1, fl in zip(l1.fields, l.fields)),
        rec_index=j)
    new_l2 = ListInvariant(
        ad=w_start, length=w_len, ty=l.ty,
        fields=tuple(replace(fld, first=w)
                     for w, fld in zip(new_firsts, l.fields)),
        rec_index=j)
    atoms = [
        Atom.eq(u_len, Term.of(l1.length) + 1),
        Atom.eq(w_start, value_term(l.rec_field.first)),
        Atom.eq(w_len, Term.of(l.length) - 1),
        Atom.eq(w_start_j, Term.of(w_start) + l.fields[acc - 1].off),
    ]
    return s.replace_components(
        pos=prog.successor(s.pos),
        lv=s.bind(ins.dst, w_start_j),
        li=[x for x in s.li if x not in (l, l1)] + [new_l1, new_l2],
        kb=s.kb.and_(Formula.conj(atoms)))


def _traverse_split_last(s: AbstractState, ins, l: ListInvariant,
                         l1: ListInvariant, acc: int, prog: Program,
                         engine: Entailment) -> AbstractState:
    """Split traversal of a length-1 summary: it is absorbed entirely into
    the prefix summary."""
    u_len = fresh_var("len")
    w_start_j = fresh_var(ins.dst)
    new_l1 = ListInvariant(
        ad=l1.ad, length=u_len, ty=l1.ty,
        fields=tuple(replace(f1, last=fl.first)
                     for f1, fl in zip(l1.fields, l.fields)),
        rec_index=l.rec_index)
    atoms = [
        Atom.eq(u_len, Term.of(l1.length) + 1),
        Atom.eq(w_start_j,
                value_term(l.rec_field.first) + l.fields[acc - 1].off),
    ]
    for fld in l.fields:
        atoms.append(Atom.eq(value_term(fld.first), value_term(fld.last)))
    return s.replace_components(
        pos=prog.successor(s.pos),
        lv=s.bind(ins.dst, w_start_j),
        li=[x for x in s.li if x not in (l, l1)] + [new_l1],
        kb=s.kb.and_(Formula.conj(atoms)))


def rule_getelementptr_plain(s: AbstractState, ins, prog: Program,
                             engine: Entailment) -> Optional[AbstractState]:
    pa = s.lv_of(ins.base)
    if pa is None:
        return None
    if isinstance(ins, ir.GepByte):
        t = s.lv_of(ins.offset)
        if t is None:
            return None
        target = value_term(pa) + value_term(t)
    else:
        t = s.lv_of(ins.index)
        if not isinstance(t, int):
            # A symbolic field index needs a provable constant.
            f = state_formula(s, engine)
            t = next((i for i in range(len(prog.agg_fields(ins.agg.name)))
                      if _holds(engine, f, Atom.eq(value_term(s.lv_of(ins.index)), i))),
                     None)
            if t is None:
                return None
        try:
            off = ir.field_offset(ins.agg, t + 1, prog.layout)
        except IndexError:
            return None
        target = value_term(pa) + off
    w = fresh_var(ins.dst)
    return s.replace_components(
        pos=prog.successor(s.pos),
        lv=s.bind(ins.dst, w),
        kb=_kb_add(s, Atom.eq(w, target)))


def _step_gep(s: AbstractState, ins, prog: Program,
              engine: Entailment) -> StepResult:
    cand = _traversal_candidate(s, ins, prog, engine)
    if cand is not None:
        l, acc = cand
        f = state_formula(s, engine)
        long = _holds(engine, f, Atom.ge(l.length, 2))
        single = _holds(engine, f, Atom.eq(l.length, 1))
        if not long and not single:
            return StepResult.refine(
                s.replace_components(kb=_kb_add(s, Atom.ge(l.length, 2))),
                s.replace_components(kb=_kb_add(s, Atom.eq(l.length, 1))))
        partner = _split_partner(s, l, engine)
        if long:
            nxt = (_traverse_split(s, ins, l, partner, acc, prog, engine)
                   if partner is not None
                   else _traverse_long(s, ins, l, acc, prog, engine))
        else:
            nxt = (_traverse_split_last(s, ins, l, partner, acc, prog,
                                        engine)
                   if partner is not None
                   else _traverse_last(s, ins, l, acc, prog, engine))
        return StepResult.eval_to(nxt)
    plain = rule_getelementptr_plain(s, ins, prog, engine)
    return StepResult.eval_to(plain if plain is not None else ERR)


# --------------------------------------------------------------------------
# icmp and branches
# --------------------------------------------------------------------------

def _icmp_atoms(pred: str, a: Term, b: Term) -> Tuple[Atom, Atom]:
    """(atom, complement) for the predicate; unsigned domain, so a
    disequality against zero splits into >= 1 versus = 0."""
    if pred == "eq":
        return Atom.eq(a, b), Atom.ne(a, b)
    if pred == "ne":
        if b == Term(0):
            return Atom.ge(a, 1), Atom.eq(a, 0)
        if a == Term(0):
            return Atom.ge(b, 1), Atom.eq(b, 0)
        return Atom.ne(a, b), Atom.eq(a, b)
    if pred in ("ult", "slt"):
        return Atom.lt(a, b), Atom.ge(a, b)
    if pred in ("ule", "sle"):
        return Atom.le(a, b), Atom.gt(a, b)
    if pred in ("ugt", "sgt"):
        return Atom.gt(a, b), Atom.le(a, b)
    if pred in ("uge", "sge"):
        return Atom.ge(a, b), Atom.lt(a, b)
    raise ValueError(f"unknown predicate {pred!r}")


def rule_icmp(s: AbstractState, ins: ir.Icmp, prog: Program,
              engine: Entailment) -> StepResult:
    lhs = s.lv_of(ins.lhs)
    rhs = s.lv_of(ins.rhs)
    if lhs is None or rhs is None:
        return StepResult.eval_to(ERR)
    atom, comp = _icmp_atoms(ins.pred, value_term(lhs), value_term(rhs))
    f = state_formula(s, engine)
    if _holds(engine, f, atom):
        return StepResult.eval_to(s.replace_components(
            pos=prog.successor(s.pos), lv=s.bind(ins.dst, 1)))
    if _holds(engine, f, comp):
        return StepResult.eval_to(s.replace_components(
            pos=prog.successor(s.pos), lv=s.bind(ins.dst, 0)))
    return StepResult.refine(
        s.replace_components(kb=_kb_add(s, atom)),
        s.replace_components(kb=_kb_add(s, comp)))


def rule_brcond(s: AbstractState, ins: ir.BrCond, prog: Program,
                engine: Entailment) -> StepResult:
    cond = s.lv_of(ins.cond)
    if cond is None:
        return StepResult.eval_to(ERR)

    def goto(block: str) -> AbstractState:
        return s.replace_components(pos=ProgramPosition(block, 0))

    if isinstance(cond, int):
        if cond not in (0, 1):
            return StepResult.eval_to(ERR)
        return StepResult.eval_to(goto(ins.then_block if cond else
                                       ins.else_block))
    f = state_formula(s, engine)
    if _holds(engine, f, Atom.eq(cond, 1)):
        return StepResult.eval_to(goto(ins.then_block))
    if _holds(engine, f, Atom.eq(cond, 0)):
        return StepResult.eval_to(goto(ins.else_block))
    return StepResult.refine(
        s.replace_components(kb=_kb_add(s, Atom.eq(cond, 1))),
        s.replace_components(kb=_kb_add(s, Atom.eq(cond, 0))))


# --------------------------------------------------------------------------
# remaining simple rules
# --------------------------------------------------------------------------

def rule_malloc(s: AbstractState, ins: ir.Malloc, prog: Program,
                engine: Entailment) -> StateOrErr:
    size = s.lv_of(ins.size)
    if not isinstance(size, int) or size < 1:
        return ERR
    v = fresh_var(ins.dst)
    v_end = fresh_var(f"{ins.dst}_end")
    return s.replace_components(
        pos=prog.successor(s.pos),
        lv=s.bind(ins.dst, v),
        al=list(s.al) + [Allocation(v, v_end)],
        kb=_kb_add(s, Atom.eq(v_end, Term.of(v) + size - 1)))


def rule_free(s: AbstractState, ins: ir.Free, prog: Program,
              engine: Entailment) -> StateOrErr:
    ptr = s.lv_of(ins.ptr)
    if ptr is None or s.li:
        # With summaries present we cannot cheaply rule out aliasing into
        # summarized nodes; freeing them is unsupported.
        return ERR
    f = state_formula(s, engine)
    for alloc in s.al:
        if not _holds(engine, f, Atom.eq(value_term(ptr), alloc.lo)):
            continue
        lo_t, hi_t = Term.of(alloc.lo), Term.of(alloc.hi)
        kept = [p for p in s.pt if _holds(
            engine, f,
            _disjoint_goal(Term.of(p.addr),
                           Term.of(p.addr) + type_size(p.ty, prog.layout) - 1,
                           lo_t, hi_t))]
        return s.replace_components(pos=prog.successor(s.pos),
                                    al=[a for a in s.al if a != alloc],
                                    pt=kept)
    return ERR


def is_return(s: AbstractState, prog: Program) -> bool:
    return isinstance(prog.instruction_at(s.pos), ir.Ret)


def step(s: AbstractState, prog: Program, engine: Entailment) -> StepResult:
    """Dispatch one symbolic step; never raises on bad memory access, the
    error state is the signal."""
    ins = prog.instruction_at(s.pos)

    if isinstance(ins, ir.Load):
        nxt = rule_load_allocated(s, ins, prog, engine)
        if nxt is None:
            nxt = rule_load_list_invariant(s, ins, prog, engine)
        return StepResult.eval_to(nxt if nxt is not None else ERR)

    if isinstance(ins, ir.Store):
        nxt = rule_list_extension(s, ins, prog, engine)
        if nxt is None:
            nxt = rule_store_plain(s, ins, prog, engine)
        return StepResult.eval_to(nxt if nxt is not None else ERR)

    if isinstance(ins, (ir.GepByte, ir.GepField)):
        return _step_gep(s, ins, prog, engine)

    if isinstance(ins, ir.Icmp):
        return rule_icmp(s, ins, prog, engine)

    if isinstance(ins, ir.BrCond):
        return rule_brcond(s, ins, prog, engine)

    if isinstance(ins, ir.Br):
        return StepResult.eval_to(
            s.replace_components(pos=ProgramPosition(ins.block, 0)))

    if isinstance(ins, ir.Add):
        a = s.lv_of(ins.lhs)
        b = s.lv_of(ins.rhs)
        if a is None or b is None:
            return StepResult.eval_to(ERR)
        w = fresh_var(ins.dst)
        return StepResult.eval_to(s.replace_components(
            pos=prog.successor(s.pos),
            lv=s.bind(ins.dst, w),
            kb=_kb_add(s, Atom.eq(w, value_term(a) + value_term(b)))))

    if isinstance(ins, ir.Bitcast):
        v = s.lv_of(ins.src)
        if v is None:
            return StepResult.eval_to(ERR)
        return StepResult.eval_to(s.replace_components(
            pos=prog.successor(s.pos), lv=s.bind(ins.dst, v)))

    if isinstance(ins, ir.Malloc):
        return StepResult.eval_to(rule_malloc(s, ins, prog, engine))

    if isinstance(ins, ir.NondetInt):
        w = fresh_var(ins.dst)
        return StepResult.eval_to(s.replace_components(
            pos=prog.successor(s.pos),
            lv=s.bind(ins.dst, w),
            kb=_kb_add(s, Atom.ge(w, 0))))

    if isinstance(ins, ir.Free):
        return StepResult.eval_to(rule_free(s, ins, prog, engine))

    if isinstance(ins, ir.Ret):
        raise ValueError("step called on a return state")

    raise TypeError(f"unknown instruction {ins!r}")
