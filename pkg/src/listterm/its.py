"""Integer transition systems extracted from graph cycles.

Every cycle of a complete symbolic execution graph is turned into integer
transitions: chains of non-branching evaluation/refinement edges compose
into one transition whose guard collects the accumulated arithmetic
knowledge, and each generalization edge becomes a transition whose update
renames variables through the recorded instantiation.  Termination of the
whole program follows when every strongly connected component admits a
verified affine ranking function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .absdom import AbstractState, ErrState, Value, state_formula, value_term
from .ir import Program
from .logic import Atom, Entailment, Formula, SymVar, Term, Verdict
from .seg import COMPLETE, GENERALIZATION, OffsetClosure, Seg


@dataclass(frozen=True)
class Location:
    node: int
    vars: Tuple[SymVar, ...]


@dataclass(frozen=True)
class Transition:
    src: int
    dst: int
    guard: Formula
    # dst-location variable -> term over src-scope variables; identity
    # entries are included explicitly.
    update: Tuple[Tuple[SymVar, Term], ...]
    closing: bool  # realizes a generalization (back) edge

    def update_map(self) -> Dict[SymVar, Term]:
        return dict(self.update)


@dataclass
class ITS:
    locations: Dict[int, Location] = field(default_factory=dict)
    transitions: List[Transition] = field(default_factory=list)


@dataclass(frozen=True)
class RankCertificate:
    scc: Tuple[int, ...]
    rank: Term
    decrease: Tuple[Atom, ...]  # proved per closing transition
    bound: Tuple[Atom, ...]


@dataclass(frozen=True)
class TerminationResult:
    terminating: bool
    certificates: Tuple[RankCertificate, ...]
    reason: str = ""


def _location_vars(s: AbstractState) -> Tuple[SymVar, ...]:
    """Variables carried into the transition system: program-variable
    images plus list-summary parameters."""
    out: Dict[SymVar, None] = {}
    for _, v in s.lv:
        if isinstance(v, SymVar):
            out[v] = None
    for l in s.li:
        for v in [l.ad, l.length] + [x for fl in l.fields
                                     for x in (fl.first, fl.last)]:
            if isinstance(v, SymVar):
                out[v] = None
    return tuple(sorted(out))


def _sccs(nodes: Sequence[int], succ: Dict[int, List[int]]) -> List[List[int]]:
    """Tarjan's algorithm, iterative, deterministic order."""
    index: Dict[int, int] = {}
    low: Dict[int, int] = {}
    on_stack: Set[int] = set()
    stack: List[int] = []
    out: List[List[int]] = []
    counter = [0]

    for root in nodes:
        if root in index:
            continue
        work = [(root, iter(succ.get(root, ())))]
        index[root] = low[root] = counter[0]
        counter[0] += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = counter[0]
                    counter[0] += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(succ.get(w, ()))))
                    advanced = True
                    break
                elif w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                pv = work[-1][0]
                low[pv] = min(low[pv], low[v])
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                out.append(sorted(comp))
    return out


def _cycle_nodes(seg: Seg) -> Tuple[Set[int], Dict[int, List[int]]]:
    succ: Dict[int, List[int]] = {}
    for e in seg.edges:
        succ.setdefault(e.src, []).append(e.dst)
    for v in succ:
        succ[v].sort()
    nodes = sorted(range(len(seg.states)))
    cyc: Set[int] = set()
    self_loops = {e.src for e in seg.edges if e.src == e.dst}
    for comp in _sccs(nodes, succ):
        if len(comp) > 1 or comp[0] in self_loops:
            cyc.update(comp)
    return cyc, succ


def _guard_of(s: AbstractState, engine: Entailment) -> Formula:
    """The conjunctive (single-atom clause) part of the state's formula."""
    atoms = [cl[0] for cl in state_formula(s, engine).clauses if len(cl) == 1]
    return Formula.conj(atoms)


def extract_its(seg: Seg, prog: Program, engine: Entailment) -> ITS:
    """Translate the cycles of a complete graph into integer transitions."""
    if seg.outcome != COMPLETE:
        raise ValueError("transition extraction needs a complete graph")
    cyc, succ_all = _cycle_nodes(seg)
    its = ITS()
    if not cyc:
        return its

    cyc_edges = [e for e in seg.edges if e.src in cyc and e.dst in cyc]
    out_deg: Dict[int, int] = {}
    in_deg: Dict[int, int] = {}
    for e in cyc_edges:
        out_deg[e.src] = out_deg.get(e.src, 0) + 1
        in_deg[e.dst] = in_deg.get(e.dst, 0) + 1

    locations: Set[int] = set()
    for e in cyc_edges:
        if e.kind == GENERALIZATION:
            locations.add(e.src)
            locations.add(e.dst)
    for n in cyc:
        if out_deg.get(n, 0) > 1 or in_deg.get(n, 0) > 1:
            locations.add(n)
    if not locations:
        locations.add(min(cyc))

    for n in sorted(locations):
        its.locations[n] = Location(n, _location_vars(seg.states[n]))

    edges_from: Dict[int, List] = {}
    for e in cyc_edges:
        edges_from.setdefault(e.src, []).append(e)

    for start in sorted(locations):
        for first in edges_from.get(start, []):
            if first.kind == GENERALIZATION:
                dst_state = seg.states[first.dst]
                mu = first.inst_map()
                guard = _guard_of(seg.states[start], engine)
                update = tuple(
                    (x, Term.of(mu[x]))
                    for x in its.locations[first.dst].vars if x in mu)
                its.transitions.append(Transition(
                    start, first.dst, guard, update, closing=True))
                continue
            # Compose the maximal non-branching evaluation/refinement chain.
            cur = first.dst
            while cur not in locations:
                nexts = edges_from.get(cur, [])
                if len(nexts) != 1 or nexts[0].kind == GENERALIZATION:
                    break
                cur = nexts[0].dst
            if cur not in locations:
                continue  # dead-ends cannot happen on a cycle
            end_state = seg.states[cur]
            guard = _guard_of(end_state, engine)
            # Symbolic variables persist along evaluation chains, so the
            # update is the identity; the guard relates old and new values.
            update = tuple((x, Term.of(x)) for x in its.locations[cur].vars)
            its.transitions.append(Transition(
                start, cur, guard, update, closing=False))
    return its


# --------------------------------------------------------------------------
# Termination proving
# --------------------------------------------------------------------------

def _candidate_ranks(vars_: Sequence[SymVar]) -> List[Term]:
    cands: List[Term] = [Term.of(v) for v in vars_]
    for i, x in enumerate(vars_):
        for y in vars_[i + 1:]:
            cands.append(Term.of(x) - Term.of(y))
            cands.append(Term.of(y) - Term.of(x))
    return cands


def _known_drop(cand: Term, upd: Dict[SymVar, Term],
                closure: "OffsetClosure") -> Optional[int]:
    """Exact provable value of rank - rank' when every variable's change is
    a known constant offset in the guard; None when undetermined."""
    total = 0
    for v, c in cand.coeffs:
        img = upd[v]
        if not img.coeffs:
            w: Value = img.const
        elif len(img.coeffs) == 1 and img.coeffs[0][1] == 1 \
                and img.const == 0:
            w = img.coeffs[0][0]
        else:
            return None
        d = closure.diff(v, w)
        if d is None:
            return None
        total += c * d
    return total


def prove_termination(its: ITS, engine: Entailment) -> TerminationResult:
    """Affine ranking per strongly connected component: the rank must be
    bounded below and decrease by at least one across every closing
    transition of the component.  Non-closing transitions keep variables
    fixed by construction, so the closing checks carry the proof."""
    if not its.transitions:
        return TerminationResult(True, ())

    succ: Dict[int, List[int]] = {}
    for t in its.transitions:
        succ.setdefault(t.src, []).append(t.dst)
    nodes = sorted(its.locations)
    certs: List[RankCertificate] = []
    for comp in _sccs(nodes, succ):
        comp_set = set(comp)
        closing = [t for t in its.transitions
                   if t.closing and t.src in comp_set and t.dst in comp_set]
        internal = [t for t in its.transitions
                    if t.src in comp_set and t.dst in comp_set]
        if not internal:
            continue
        if not closing:
            # A cycle made only of non-branching identity chains never
            # changes its variables: no rank can decrease.
            return TerminationResult(False, tuple(certs),
                                     "cycle without a decreasing update")
        header_vars: List[SymVar] = []
        for t in closing:
            for v in its.locations[t.dst].vars:
                if v not in header_vars:
                    header_vars.append(v)
        closures = {id(t): OffsetClosure(t.guard) for t in closing}
        found = None
        for cand in _candidate_ranks(header_vars):
            decrease: List[Atom] = []
            bound: List[Atom] = []
            ok = True
            for t in closing:
                upd = t.update_map()
                if any(v not in upd for v in cand.vars()):
                    ok = False
                    break
                post = cand.substitute(upd)
                dec = Atom.ge(cand - post, 1)
                bnd = Atom.ge(cand, 0)
                known = _known_drop(cand, upd, closures[id(t)])
                if known is not None and known < 1:
                    ok = False  # exact change is provable and too small
                    break
                if known is None and engine.entails(
                        t.guard, Formula.of(dec)) is not Verdict.VALID:
                    ok = False
                    break
                if engine.entails(t.guard, Formula.of(bnd)) is not \
                        Verdict.VALID:
                    ok = False
                    break
                decrease.append(dec)
                bound.append(bnd)
            if ok:
                found = RankCertificate(tuple(comp), cand,
                                        tuple(decrease), tuple(bound))
                break
        if found is None:
            return TerminationResult(False, tuple(certs),
                                     "no affine rank found")
        certs.append(found)
    return TerminationResult(True, tuple(certs))


# --------------------------------------------------------------------------
# Export / import
# --------------------------------------------------------------------------

def _canonical_names(its: ITS) -> Dict[SymVar, str]:
    names: Dict[SymVar, str] = {}

    def add(v: SymVar):
        if v not in names:
            names[v] = f"{v.hint}_{len(names) + 1}"

    for n in sorted(its.locations):
        for v in its.locations[n].vars:
            add(v)
    for t in its.transitions:
        for v in t.guard.vars():
            add(v)
        for x, term in t.update:
            add(x)
            for v in term.vars():
                add(v)
    return names


def _term_sexpr(t: Term, names: Dict[SymVar, str]) -> str:
    parts = []
    if t.const or not t.coeffs:
        parts.append(str(t.const))
    for v, c in t.coeffs:
        parts.append(names[v] if c == 1 else f"(* {c} {names[v]})")
    if len(parts) == 1:
        return parts[0]
    return "(+ " + " ".join(parts) + ")"


def _atom_sexpr(a: Atom, names: Dict[SymVar, str]) -> str:
    s = _term_sexpr(a.term, names)
    if a.rel == "=":
        return f"(= {s} 0)"
    if a.rel == "!=":
        return f"(not (= {s} 0))"
    return f"(<= {s} 0)"


def export_its(its: ITS) -> str:
    """Deterministic Horn-clause text; one rule per transition."""
    names = _canonical_names(its)
    lines = ["(set-logic HORN)"]
    for n in sorted(its.locations):
        loc = its.locations[n]
        args = " ".join("Int" for _ in loc.vars) or ""
        lines.append(f"(declare-rel L{n} ({args}))")
    for v in sorted(names, key=lambda v: names[v]):
        lines.append(f"(declare-var {names[v]} Int)")
    primed: Dict[SymVar, str] = {}
    for t in its.transitions:
        for x, _ in t.update:
            if x not in primed:
                primed[x] = f"{names[x]}p"
    for v, nm in sorted(primed.items(), key=lambda kv: kv[1]):
        lines.append(f"(declare-var {nm} Int)")
    for t in its.transitions:
        src_loc = its.locations[t.src]
        dst_loc = its.locations[t.dst]
        body = []
        for clause in t.guard.clauses:
            if len(clause) == 1:
                body.append(_atom_sexpr(clause[0], names))
            else:
                body.append("(or " + " ".join(
                    _atom_sexpr(a, names) for a in clause) + ")")
        upd = t.update_map()
        for x in dst_loc.vars:
            if x in upd:
                body.append(f"(= {primed.get(x, names[x] + 'p')} "
                            f"{_term_sexpr(upd[x], names)})")
        body.append(f"(L{t.src} " + " ".join(
            names[v] for v in src_loc.vars) + ")")
        head_args = " ".join(
            primed[x] if x in primed and x in upd else names[x]
            for x in dst_loc.vars)
        lines.append("(rule (=> (and " + " ".join(body) + ") "
                     f"(L{t.dst} {head_args})))")
    return "\n".join(lines) + "\n"


def _tokenize(text: str) -> List[str]:
    return text.replace("(", " ( ").replace(")", " ) ").split()


def _parse_sexprs(tokens: List[str]):
    out = []
    stack = [out]
    for tok in tokens:
        if tok == "(":
            new: list = []
            stack[-1].append(new)
            stack.append(new)
        elif tok == ")":
            stack.pop()
        else:
            stack[-1].append(tok)
    return out


def parse_its_text(text: str) -> dict:
    """Read the exported Horn text back into a comparable structure:
    relation arities plus one entry per rule with source/target relation,
    guard atom count, and update equation count."""
    forms = _parse_sexprs(_tokenize(text))
    rels: Dict[str, int] = {}
    rules = []
    for form in forms:
        if not isinstance(form, list) or not form:
            continue
        if form[0] == "declare-rel":
            rels[form[1]] = len(form[2])
        elif form[0] == "rule":
            impl = form[1]
            assert impl[0] == "=>"
            body, head = impl[1], impl[2]
            assert body[0] == "and"
            parts = body[1:]
            src = next(p[0] for p in parts
                       if isinstance(p, list) and p[0].startswith("L"))
            updates = sum(1 for p in parts
                          if isinstance(p, list) and p[0] == "="
                          and isinstance(p[1], str) and p[1].endswith("p"))
            guards = sum(1 for p in parts
                         if isinstance(p, list) and not p[0].startswith("L")
                         ) - updates
            rules.append({"src": src, "dst": head[0],
                          "guards": guards, "updates": updates,
                          "head_arity": len(head) - 1})
    return {"relations": rels, "rules": rules}
