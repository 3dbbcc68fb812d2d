"""A small stratified fixpoint engine for relational rules.

Rules are built in Python through a construction API::

    prog = Program()
    edge = prog.relation("edge", (ADDR, ADDR), input=True)
    path = prog.relation("path", (ADDR, ADDR))
    X, Y, Z = variables("X Y Z")
    prog.rule(path(X, Y), edge(X, Y))
    prog.rule(path(X, Z), edge(X, Y), path(Y, Z))
    db = prog.evaluate({"edge": [(1, 2), (2, 3)]})

Body literals are positive atoms, negated atoms (``~atom``), comparisons
(:func:`lt`, :func:`eq`, ...), bindings (:class:`Let`), host-function filters
and bindings (:class:`Test`, :class:`Call`) and aggregates (:class:`Agg`).
Evaluation is semi-naive inside every stratum.
"""

from __future__ import annotations

import itertools
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

log = logging.getLogger(__name__)

ADDR = "addr"
INT = "int"
TEXT = "text"
KINDS = (ADDR, INT, TEXT)

INT_MIN = -(1 << 63)
INT_MAX = (1 << 63) - 1
ADDR_MAX = (1 << 64) - 1


class RelfixError(Exception):
    pass


class NegationCycle(RelfixError):
    def __init__(self, relations):
        self.relations = frozenset(relations)
        super().__init__("no stratification: negation/aggregate cycle through %s"
                         % ", ".join(sorted(self.relations)))


class UnboundVariable(RelfixError):
    def __init__(self, label, names):
        self.label = label
        self.names = tuple(sorted(names))
        super().__init__("rule %r: ungrounded variable(s) %s" % (label, ", ".join(self.names)))


class AggregateStratumViolation(RelfixError):
    def __init__(self, label, relation):
        self.label = label
        self.relation = relation
        super().__init__("rule %r aggregates over %r inside its own recursive component"
                         % (label, relation))


class ArithmeticOverflow(RelfixError):
    def __init__(self, label, row):
        self.label = label
        self.row = row
        super().__init__("rule %r: 64-bit overflow while evaluating %r" % (label, row))


class SchemaError(RelfixError):
    pass


# ---------------------------------------------------------------------------
# terms and expressions


class Term:
    def __add__(self, other):
        return Expr("+", (self, _term(other)))

    def __radd__(self, other):
        return Expr("+", (_term(other), self))

    def __sub__(self, other):
        return Expr("-", (self, _term(other)))

    def __rsub__(self, other):
        return Expr("-", (_term(other), self))

    def __mul__(self, other):
        return Expr("*", (self, _term(other)))

    def __rmul__(self, other):
        return Expr("*", (_term(other), self))

    def __neg__(self):
        return Expr("-", (Const(0), self))


class Var(Term):
    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name

    def __repr__(self):
        return self.name

    def vars(self):
        return {self.name}


class Wildcard(Term):
    """Anonymous variable; every occurrence is distinct."""

    _counter = itertools.count()

    def __init__(self):
        self.name = "_%d" % next(Wildcard._counter)

    def __repr__(self):
        return "_"

    def vars(self):
        return set()


class Const(Term):
    __slots__ = ("value",)

    def __init__(self, value):
        self.value = value

    def __repr__(self):
        return repr(self.value)

    def vars(self):
        return set()


class Expr(Term):
    __slots__ = ("op", "args")

    def __init__(self, op, args):
        self.op = op
        self.args = args

    def __repr__(self):
        return "(%r %s %r)" % (self.args[0], self.op, self.args[1])

    def vars(self):
        out = set()
        for a in self.args:
            out |= a.vars()
        return out


def _term(x) -> Term:
    if isinstance(x, Term):
        return x
    return Const(x)


def variables(names: str):
    return tuple(Var(n) for n in names.split())


def _():
    return Wildcard()


# ---------------------------------------------------------------------------
# literals


class Atom:
    __slots__ = ("rel", "terms")

    def __init__(self, rel: "Relation", terms: Sequence[Term]):
        if len(terms) != len(rel.schema):
            raise SchemaError("%s expects %d terms, got %d" % (rel.name, len(rel.schema), len(terms)))
        for t in terms:
            if isinstance(t, Expr):
                raise SchemaError("expressions are not allowed inside atoms; bind them with Let")
        self.rel = rel
        self.terms = tuple(terms)

    def __invert__(self):
        return Neg(self)

    def __repr__(self):
        return "%s(%s)" % (self.rel.name, ",".join(map(repr, self.terms)))

    def vars(self):
        out = set()
        for t in self.terms:
            out |= t.vars()
        return out


class Neg:
    __slots__ = ("atom",)

    def __init__(self, atom: Atom):
        self.atom = atom

    def __repr__(self):
        return "!%r" % (self.atom,)


_CMP = {
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
    "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
}


class Cmp:
    __slots__ = ("op", "lhs", "rhs")

    def __init__(self, op, lhs, rhs):
        self.op = op
        self.lhs = _term(lhs)
        self.rhs = _term(rhs)

    def vars(self):
        return self.lhs.vars() | self.rhs.vars()

    def __repr__(self):
        return "%r %s %r" % (self.lhs, self.op, self.rhs)


def lt(a, b):
    return Cmp("<", a, b)


def le(a, b):
    return Cmp("<=", a, b)


def gt(a, b):
    return Cmp(">", a, b)


def ge(a, b):
    return Cmp(">=", a, b)


def eq(a, b):
    return Cmp("==", a, b)


def ne(a, b):
    return Cmp("!=", a, b)


class Let:
    """Bind ``var`` to the checked 64-bit value of ``expr``."""

    __slots__ = ("var", "expr")

    def __init__(self, var: Var, expr):
        self.var = var
        self.expr = _term(expr)

    def __repr__(self):
        return "%r = %r" % (self.var, self.expr)


class Test:
    """Host predicate over bound terms."""

    __slots__ = ("fn", "args", "name")

    def __init__(self, fn: Callable[..., bool], *args, name=None):
        self.fn = fn
        self.args = tuple(_term(a) for a in args)
        self.name = name or getattr(fn, "__name__", "test")

    def vars(self):
        out = set()
        for a in self.args:
            out |= a.vars()
        return out

    def __repr__(self):
        return "%s(%s)" % (self.name, ",".join(map(repr, self.args)))


class Call:
    """Bind ``out`` to each value yielded by a host function over bound terms."""

    __slots__ = ("out", "fn", "args", "name")

    def __init__(self, out: Var, fn: Callable[..., Iterable], *args, name=None):
        self.out = out
        self.fn = fn
        self.args = tuple(_term(a) for a in args)
        self.name = name or getattr(fn, "__name__", "call")

    def vars(self):
        out = set()
        for a in self.args:
            out |= a.vars()
        return out

    def __repr__(self):
        return "%r in %s(%s)" % (self.out, self.name, ",".join(map(repr, self.args)))


AGG_KINDS = ("sum", "max", "min", "count")


class Agg:
    """``out = kind value : atom``; atom variables bound elsewhere group the result."""

    __slots__ = ("out", "kind", "atom", "value")

    def __init__(self, out: Var, kind: str, atom: Atom, value: Term | None = None):
        if kind not in AGG_KINDS:
            raise ValueError("unknown aggregate %r" % kind)
        if kind != "count" and value is None:
            raise ValueError("%s aggregate needs a value term" % kind)
        self.out = out
        self.kind = kind
        self.atom = atom
        self.value = value

    def __repr__(self):
        return "%r = %s %r : %r" % (self.out, self.kind, self.value, self.atom)


@dataclass
class Rule:
    head: Atom
    body: tuple
    label: str

    def __repr__(self):
        return "%r :- %s." % (self.head, ", ".join(map(repr, self.body)))

    def positive_atoms(self):
        return [lit for lit in self.body if isinstance(lit, Atom)]


class Relation:
    def __init__(self, name: str, schema: Sequence[str], input: bool = False):
        for k in schema:
            if k not in KINDS:
                raise SchemaError("bad column kind %r in %s" % (k, name))
        self.name = name
        self.schema = tuple(schema)
        self.input = input

    def __call__(self, *terms):
        return Atom(self, [_term(t) for t in terms])

    def __repr__(self):
        return "Relation(%s/%d)" % (self.name, len(self.schema))


def check_row(rel: Relation, row: tuple) -> None:
    if len(row) != len(rel.schema):
        raise SchemaError("%s: arity %d row %r" % (rel.name, len(rel.schema), row))
    for kind, v in zip(rel.schema, row):
        if kind == TEXT:
            if not isinstance(v, str):
                raise SchemaError("%s: %r is not text" % (rel.name, v))
        elif not isinstance(v, int) or isinstance(v, bool):
            raise SchemaError("%s: %r is not an integer" % (rel.name, v))
        elif kind == ADDR and not 0 <= v <= ADDR_MAX:
            raise SchemaError("%s: address %r out of range" % (rel.name, v))
        elif kind == INT and not INT_MIN <= v <= INT_MAX:
            raise SchemaError("%s: %r outside signed 64-bit" % (rel.name, v))


# ---------------------------------------------------------------------------
# rule compilation


def _rule_vars_bound(body) -> set:
    """Variables grounded by the body (fixpoint over binders)."""
    bound = set()
    for lit in body:
        if isinstance(lit, Atom):
            for t in lit.terms:
                if isinstance(t, Var):
                    bound.add(t.name)
    changed = True
    while changed:
        changed = False
        for lit in body:
            if isinstance(lit, Let) and lit.var.name not in bound and lit.expr.vars() <= bound:
                bound.add(lit.var.name)
                changed = True
            elif isinstance(lit, Call) and lit.out.name not in bound and lit.vars() <= bound:
                bound.add(lit.out.name)
                changed = True
            elif isinstance(lit, Agg) and lit.out.name not in bound:
                bound.add(lit.out.name)
                changed = True
    return bound


def check_grounded(rule: Rule) -> None:
    bound = _rule_vars_bound(rule.body)
    missing = set()
    missing |= rule.head.vars() - bound
    for lit in rule.body:
        if isinstance(lit, Neg):
            missing |= lit.atom.vars() - bound
        elif isinstance(lit, (Cmp, Test)):
            missing |= lit.vars() - bound
        elif isinstance(lit, Let):
            missing |= lit.expr.vars() - bound
        elif isinstance(lit, Call):
            missing |= lit.vars() - bound
        elif isinstance(lit, Agg):
            if lit.value is not None:
                inner = lit.atom.vars()
                missing |= lit.value.vars() - inner - bound
    for t in rule.head.terms:
        if isinstance(t, Wildcard):
            missing.add("_")
    if missing:
        raise UnboundVariable(rule.label, missing)


def _eval_term(term, env, slots, label):
    if isinstance(term, Var):
        return env[slots[term.name]]
    if isinstance(term, Const):
        return term.value
    a = _eval_term(term.args[0], env, slots, label)
    b = _eval_term(term.args[1], env, slots, label)
    if term.op == "+":
        r = a + b
    elif term.op == "-":
        r = a - b
    else:
        r = a * b
    if not INT_MIN <= r <= INT_MAX:
        raise ArithmeticOverflow(label, tuple(env))
    return r


class _Step:
    """One compiled body step operating on a list of environments."""

    __slots__ = ("kind", "lit", "rel", "key_slots", "key_consts", "key_pos",
                 "binds", "checks", "out_slot", "source", "width", "group_pos",
                 "group_slots", "group_consts")


class _Plan:
    def __init__(self, rule: Rule, delta_index: int | None):
        self.rule = rule
        self.delta_index = delta_index
        self.slots: dict[str, int] = {}
        self.steps: list[_Step] = []
        self._compile()

    def _bind(self, name):
        self.slots[name] = len(self.slots)
        return self.slots[name]

    def _atom_step(self, atom: Atom, source: str) -> _Step:
        st = _Step()
        st.kind = "atom"
        st.lit = atom
        st.rel = atom.rel.name
        st.source = source
        key_pos, key_slots, key_consts = [], [], []
        binds, checks = [], []
        seen_here = {}
        for pos, t in enumerate(atom.terms):
            if isinstance(t, Const):
                key_pos.append(pos)
                key_slots.append(None)
                key_consts.append(t.value)
            elif isinstance(t, Wildcard):
                continue
            elif t.name in self.slots:
                key_pos.append(pos)
                key_slots.append(self.slots[t.name])
                key_consts.append(None)
            elif t.name in seen_here:
                checks.append((seen_here[t.name], pos))
            else:
                seen_here[t.name] = pos
                binds.append(pos)
        for pos in binds:
            self._bind(atom.terms[pos].name)
        st.key_pos = tuple(key_pos)
        st.key_slots = tuple(key_slots)
        st.key_consts = tuple(key_consts)
        st.binds = tuple(binds)
        st.checks = tuple(checks)
        return st

    def _neg_step(self, neg: Neg) -> _Step:
        st = _Step()
        st.kind = "neg"
        st.lit = neg
        st.rel = neg.atom.rel.name
        st.source = "full"
        key_pos, key_slots, key_consts = [], [], []
        for pos, t in enumerate(neg.atom.terms):
            if isinstance(t, Const):
                key_pos.append(pos)
                key_slots.append(None)
                key_consts.append(t.value)
            elif isinstance(t, Var):
                key_pos.append(pos)
                key_slots.append(self.slots[t.name])
                key_consts.append(None)
        st.key_pos = tuple(key_pos)
        st.key_slots = tuple(key_slots)
        st.key_consts = tuple(key_consts)
        return st

    def _agg_step(self, agg: Agg) -> _Step:
        st = _Step()
        st.kind = "agg"
        st.lit = agg
        st.rel = agg.atom.rel.name
        st.source = "full"
        key_pos, key_slots, key_consts = [], [], []
        for pos, t in enumerate(agg.atom.terms):
            if isinstance(t, Const):
                key_pos.append(pos)
                key_slots.append(None)
                key_consts.append(t.value)
            elif isinstance(t, Var) and t.name in self.slots:
                key_pos.append(pos)
                key_slots.append(self.slots[t.name])
                key_consts.append(None)
        st.key_pos = tuple(key_pos)
        st.key_slots = tuple(key_slots)
        st.key_consts = tuple(key_consts)
        st.out_slot = self._bind(agg.out.name)
        return st

    def _ready(self, lit) -> bool:
        b = self.slots
        if isinstance(lit, Neg):
            return lit.atom.vars() <= b.keys()
        if isinstance(lit, (Cmp, Test)):
            return lit.vars() <= b.keys()
        if isinstance(lit, Let):
            return lit.expr.vars() <= b.keys()
        if isinstance(lit, Call):
            return lit.vars() <= b.keys()
        if isinstance(lit, Agg):
            # aggregates wait until every outer variable they share is bound
            outer = set()
            for other in self.rule.body:
                if other is lit:
                    continue
                if isinstance(other, Atom):
                    outer |= other.vars()
                elif isinstance(other, (Let,)):
                    outer.add(other.var.name)
                elif isinstance(other, Call):
                    outer.add(other.out.name)
                elif isinstance(other, Agg):
                    outer.add(other.out.name)
            outer |= self.rule.head.vars()
            shared = lit.atom.vars() & outer
            return shared <= b.keys()
        return False

    def _compile(self):
        body = list(self.rule.body)
        pending_atoms = [(i, lit) for i, lit in enumerate(body) if isinstance(lit, Atom)]
        others = [lit for lit in body if not isinstance(lit, Atom)]
        if self.delta_index is not None:
            first = [p for p in pending_atoms if p[0] == self.delta_index]
            pending_atoms = [p for p in pending_atoms if p[0] != self.delta_index]
            self.steps.append(self._atom_step(first[0][1], "delta"))
        while True:
            progressed = True
            while progressed:
                progressed = False
                for lit in list(others):
                    if self._ready(lit):
                        others.remove(lit)
                        self.steps.append(self._simple_step(lit))
                        progressed = True
            if not pending_atoms:
                break
            best = None
            for idx, (i, atom) in enumerate(pending_atoms):
                score = sum(1 for t in atom.terms
                            if isinstance(t, Const) or (isinstance(t, Var) and t.name in self.slots))
                if best is None or score > best[0]:
                    best = (score, idx)
            _, idx = best
            i, atom = pending_atoms.pop(idx)
            self.steps.append(self._atom_step(atom, "full"))
        if others:
            raise UnboundVariable(self.rule.label, set().union(*[
                getattr(o, "vars", lambda: {repr(o)})() if not isinstance(o, Let) else o.expr.vars()
                for o in others]) - self.slots.keys() or {"?"})
        self.head_slots = []
        for t in self.rule.head.terms:
            if isinstance(t, Const):
                self.head_slots.append((None, t.value))
            else:
                self.head_slots.append((self.slots[t.name], None))

    def _simple_step(self, lit) -> _Step:
        if isinstance(lit, Neg):
            return self._neg_step(lit)
        if isinstance(lit, Agg):
            return self._agg_step(lit)
        st = _Step()
        st.lit = lit
        if isinstance(lit, Cmp):
            st.kind = "cmp"
        elif isinstance(lit, Test):
            st.kind = "test"
        elif isinstance(lit, Let):
            st.kind = "let"
            if lit.var.name in self.slots:
                st.kind = "cmp"
                st.lit = Cmp("==", lit.var, lit.expr)
            else:
                st.out_slot = self._bind(lit.var.name)
        elif isinstance(lit, Call):
            st.kind = "call"
            if lit.out.name in self.slots:
                st.kind = "callcheck"
                st.out_slot = self.slots[lit.out.name]
            else:
                st.out_slot = self._bind(lit.out.name)
        return st


# ---------------------------------------------------------------------------
# storage


class _Table:
    """Tuple set with lazily built hash indexes on column subsets."""

    __slots__ = ("rows", "indexes")

    def __init__(self, rows=()):
        self.rows = set(rows)
        self.indexes: dict[tuple, dict] = {}

    def index(self, positions: tuple) -> dict:
        idx = self.indexes.get(positions)
        if idx is None:
            idx = {}
            for row in self.rows:
                idx.setdefault(tuple(row[p] for p in positions), []).append(row)
            self.indexes[positions] = idx
        return idx

    def add_all(self, rows):
        new = [r for r in rows if r not in self.rows]
        self.rows.update(new)
        for positions, idx in self.indexes.items():
            for row in new:
                idx.setdefault(tuple(row[p] for p in positions), []).append(row)
        return new


class Database(Mapping):
    """Immutable evaluation result: relation name -> frozenset of rows."""

    def __init__(self, relations: Mapping[str, Relation], rows: Mapping[str, Iterable[tuple]]):
        self.relations = dict(relations)
        self._rows = {name: frozenset(rows.get(name, ())) for name in self.relations}

    def __getitem__(self, name):
        return self._rows[name]

    def __iter__(self):
        return iter(self._rows)

    def __len__(self):
        return len(self._rows)

    def sorted(self, name):
        return sorted(self._rows[name])

    def dump(self, directory, names=None) -> None:
        from .facts import write_relation_file

        os.makedirs(directory, exist_ok=True)
        for name in names or sorted(self._rows):
            write_relation_file(os.path.join(directory, name + ".facts"),
                                self.relations[name].schema, self._rows[name])


@dataclass
class Stratum:
    relations: tuple
    rules: list = field(default_factory=list)
    recursive: bool = False


# ---------------------------------------------------------------------------
# program


class Program:
    def __init__(self):
        self.relations: dict[str, Relation] = {}
        self.rules: list[Rule] = []

    def relation(self, name: str, schema: Sequence[str], input: bool = False) -> Relation:
        if name in self.relations:
            raise SchemaError("relation %r declared twice" % name)
        rel = Relation(name, schema, input)
        self.relations[name] = rel
        return rel

    def rule(self, head: Atom, *body, label: str | None = None) -> Rule:
        if head.rel.name not in self.relations or self.relations[head.rel.name] is not head.rel:
            raise SchemaError("head relation %r is not declared in this program" % head.rel.name)
        if head.rel.input:
            raise SchemaError("input relation %r cannot be a rule head" % head.rel.name)
        flat = []
        for lit in body:
            if isinstance(lit, (list, tuple)):
                flat.extend(lit)
            else:
                flat.append(lit)
        r = Rule(head, tuple(flat), label or "%s#%d" % (head.rel.name, len(self.rules)))
        check_grounded(r)
        self.rules.append(r)
        return r

    # -- stratification -----------------------------------------------------

    def dependencies(self):
        """(head, body relation, strict) edges; strict for negation and aggregates."""
        deps = []
        for r in self.rules:
            h = r.head.rel.name
            for lit in r.body:
                if isinstance(lit, Atom):
                    deps.append((h, lit.rel.name, False, r))
                elif isinstance(lit, Neg):
                    deps.append((h, lit.atom.rel.name, True, r))
                elif isinstance(lit, Agg):
                    deps.append((h, lit.atom.rel.name, True, r))
        return deps

    def stratify(self) -> list[Stratum]:
        names = list(self.relations)
        order = {n: i for i, n in enumerate(names)}
        graph = {n: set() for n in names}
        deps = self.dependencies()
        for h, b, _, _ in deps:
            graph[h].add(b)
        comps = _tarjan(names, graph)
        comp_of = {}
        for ci, comp in enumerate(comps):
            for n in comp:
                comp_of[n] = ci
        for h, b, strict, rule in deps:
            if strict and comp_of[h] == comp_of[b]:
                comp = comps[comp_of[h]]
                if any(isinstance(l, Agg) and l.atom.rel.name == b for l in rule.body) and not any(
                        isinstance(l, Neg) and l.atom.rel.name == b for l in rule.body):
                    raise AggregateStratumViolation(rule.label, b)
                raise NegationCycle(comp)
        # tarjan yields components in reverse topological order of the
        # "depends on" graph: dependencies first
        rules_by_head: dict[str, list] = {}
        for r in self.rules:
            rules_by_head.setdefault(r.head.rel.name, []).append(r)
        strata = []
        for comp in comps:
            members = tuple(sorted(comp, key=order.get))
            rules = [r for n in members for r in rules_by_head.get(n, [])]
            if not rules:
                continue
            rec = len(comp) > 1 or any(
                isinstance(l, Atom) and l.rel.name in comp for r in rules for l in r.body)
            strata.append(Stratum(members, rules, rec))
        return strata

    # -- evaluation --------------------------------------------------------------

    def evaluate(self, facts: Mapping[str, Iterable[tuple]] | None = None, jobs: int = 1) -> Database:
        facts = facts or {}
        strata = self.stratify()
        tables: dict[str, _Table] = {}
        for name, rel in self.relations.items():
            rows = facts.get(name, ())
            if rows and not rel.input:
                raise SchemaError("facts supplied for derived relation %r" % name)
            rows = [tuple(r) for r in rows]
            for row in rows:
                check_row(rel, row)
            tables[name] = _Table(rows)
        pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
        try:
            for st in strata:
                self._eval_stratum(st, tables, pool)
        finally:
            if pool is not None:
                pool.shutdown()
        return Database(self.relations, {n: t.rows for n, t in tables.items()})

    def _eval_stratum(self, st: Stratum, tables, pool):
        members = set(st.relations)
        full_plans = [_Plan(r, None) for r in st.rules]
        delta_plans = []
        if st.recursive:
            for r in st.rules:
                for i, lit in enumerate(r.body):
                    if isinstance(lit, Atom) and lit.rel.name in members:
                        delta_plans.append(_Plan(r, i))
        deltas = {n: _Table() for n in members}
        produced = self._run_plans(full_plans, tables, deltas, pool)
        deltas = self._commit(produced, tables, members)
        rounds = 0
        while st.recursive and any(d.rows for d in deltas.values()):
            rounds += 1
            plans = [p for p in delta_plans if deltas[p.rule.body[p.delta_index].rel.name].rows]
            produced = self._run_plans(plans, tables, deltas, pool)
            deltas = self._commit(produced, tables, members)
        log.debug("stratum %s: %d rounds", st.relations, rounds)

    def _commit(self, produced, tables, members):
        deltas = {n: _Table() for n in members}
        for name, rows in produced.items():
            rel = self.relations[name]
            fresh = [r for r in rows if r not in tables[name].rows]
            for row in fresh:
                check_row(rel, row)
            new = tables[name].add_all(fresh)
            deltas[name] = _Table(new)
        return deltas

    def _run_plans(self, plans, tables, deltas, pool):
        produced: dict[str, set] = {}
        if pool is None:
            results = [(p, _run_plan(p, tables, deltas)) for p in plans]
        else:
            futures = [(p, pool.submit(_run_plan, p, tables, deltas)) for p in plans]
            results = [(p, f.result()) for p, f in futures]
        for p, rows in results:
            produced.setdefault(p.rule.head.rel.name, set()).update(rows)
        return produced


def _tarjan(nodes, graph):
    """Strongly connected components, dependencies before dependents."""
    index = {}
    low = {}
    on_stack = set()
    stack = []
    comps = []
    counter = itertools.count()
    for root in nodes:
        if root in index:
            continue
        work = [(root, iter(sorted(graph[root])))]
        index[root] = low[root] = next(counter)
        stack.append(root)
        on_stack.add(root)
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = next(counter)
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(sorted(graph[w]))))
                    advanced = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                low[work[-1][0]] = min(low[work[-1][0]], low[v])
            if low[v] == index[v]:
                comp = set()
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.add(w)
                    if w == v:
                        break
                comps.append(comp)
    return comps


def _lookup(step, env):
    return tuple(env[s] if s is not None else c for s, c in zip(step.key_slots, step.key_consts))


def _aggregate(kind, values):
    if kind == "count":
        return len(values)
    if kind == "sum":
        total = sum(values)
        if not INT_MIN <= total <= INT_MAX:
            raise OverflowError
        return total
    if not values:
        return None
    return max(values) if kind == "max" else min(values)


def _run_plan(plan: _Plan, tables, deltas) -> set:
    label = plan.rule.label
    envs = [()]
    for st in plan.steps:
        if not envs:
            return set()
        kind = st.kind
        out = []
        if kind == "atom":
            table = deltas[st.rel] if st.source == "delta" else tables[st.rel]
            binds = st.binds
            checks = st.checks
            if st.key_pos:
                idx = table.index(st.key_pos)
                for env in envs:
                    rows = idx.get(_lookup(st, env))
                    if not rows:
                        continue
                    for row in rows:
                        if checks and any(row[a] != row[b] for a, b in checks):
                            continue
                        out.append(env + tuple(row[p] for p in binds))
            else:
                rows = list(table.rows)
                for env in envs:
                    for row in rows:
                        if checks and any(row[a] != row[b] for a, b in checks):
                            continue
                        out.append(env + tuple(row[p] for p in binds))
        elif kind == "neg":
            table = tables[st.rel]
            if len(st.key_pos) == len(st.lit.atom.terms):
                rows = table.rows
                for env in envs:
                    if _lookup(st, env) not in rows:
                        out.append(env)
            else:
                idx = table.index(st.key_pos)
                for env in envs:
                    if not idx.get(_lookup(st, env)):
                        out.append(env)
        elif kind == "cmp":
            fn = _CMP[st.lit.op]
            for env in envs:
                if fn(_eval_term(st.lit.lhs, env, plan.slots, label),
                      _eval_term(st.lit.rhs, env, plan.slots, label)):
                    out.append(env)
        elif kind == "let":
            for env in envs:
                out.append(env + (_eval_term(st.lit.expr, env, plan.slots, label),))
        elif kind == "test":
            for env in envs:
                if st.lit.fn(*[_eval_term(a, env, plan.slots, label) for a in st.lit.args]):
                    out.append(env)
        elif kind == "call":
            for env in envs:
                for v in st.lit.fn(*[_eval_term(a, env, plan.slots, label) for a in st.lit.args]):
                    out.append(env + (v,))
        elif kind == "callcheck":
            for env in envs:
                vals = st.lit.fn(*[_eval_term(a, env, plan.slots, label) for a in st.lit.args])
                if env[st.out_slot] in vals:
                    out.append(env)
        elif kind == "agg":
            agg = st.lit
            table = tables[st.rel]
            idx = table.index(st.key_pos)
            inner_slots = dict(plan.slots)
            for env in envs:
                rows = idx.get(_lookup(st, env), []) if st.key_pos else list(table.rows)
                values = []
                for row in rows:
                    if not _agg_row_matches(agg.atom, row, env, plan.slots):
                        continue
                    if agg.kind == "count":
                        values.append(row)
                    else:
                        values.append(_agg_value(agg, row, env, inner_slots, label))
                if agg.kind == "count":
                    values = set(values)
                try:
                    res = _aggregate(agg.kind, values)
                except OverflowError:
                    raise ArithmeticOverflow(label, env) from None
                if res is not None:
                    out.append(env + (res,))
        envs = out
    rows = set()
    for env in envs:
        rows.add(tuple(env[s] if s is not None else c for s, c in plan.head_slots))
    return rows


def _agg_row_matches(atom, row, env, slots):
    # repeated inner variables must agree
    seen = {}
    for pos, t in enumerate(atom.terms):
        if isinstance(t, Var) and t.name not in slots:
            if t.name in seen and seen[t.name] != row[pos]:
                return False
            seen[t.name] = row[pos]
    return True


def _agg_value(agg, row, env, slots, label):
    local = {}
    for pos, t in enumerate(agg.atom.terms):
        if isinstance(t, Var) and t.name not in slots:
            local[t.name] = row[pos]

    def ev(term):
        if isinstance(term, Var):
            if term.name in local:
                return local[term.name]
            return env[slots[term.name]]
        if isinstance(term, Const):
            return term.value
        a, b = ev(term.args[0]), ev(term.args[1])
        r = a + b if term.op == "+" else a - b if term.op == "-" else a * b
        if not INT_MIN <= r <= INT_MAX:
            raise ArithmeticOverflow(label, row)
        return r

    return ev(agg.value)
