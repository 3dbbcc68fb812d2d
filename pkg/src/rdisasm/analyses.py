"""Register def-use chains, relational register values and data access patterns.

Def-use and register values are rule programs evaluated by :mod:`relfix`;
the per-instruction semantics feeding them come from :mod:`semantics`.
Data access patterns combine the derived values in plain Python.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from . import semantics, x64
from .facts import FactBase
from .relfix import ADDR, INT, INT_MAX, INT_MIN, TEXT, Call, Let, Program, _, lt, ne, variables

log = logging.getLogger(__name__)

DEFAULT_STEP_LIMIT = 5
NONE = "NONE"
UNKNOWN = "Unknown"
PARAM = 0  # pseudo definition address for registers live on entry


@dataclass
class AnalysisResult:
    def_used: frozenset
    dua: frozenset
    reg_val_edge: frozenset
    reg_val: frozenset  # 7-tuples including the step count
    daps: frozenset
    propagated: frozenset
    reg_reg_op: frozenset = frozenset()
    stats: dict = field(default_factory=dict)

    def reg_vals(self) -> set:
        """reg_val tuples without the step column."""
        return {r[:6] for r in self.reg_val}

    def relations(self) -> dict:
        return {
            "def_used": (SCHEMA_DEF_USED, self.def_used),
            "def_used_for_address": ((ADDR, TEXT), self.dua),
            "reg_val_edge": (SCHEMA_REG_VAL[:6], self.reg_val_edge),
            "reg_val": (SCHEMA_REG_VAL, self.reg_val),
            "data_access_pattern": (SCHEMA_DAP, self.daps),
            "propagated_data_access": (SCHEMA_DAP, self.propagated),
            "reg_reg_op": (SCHEMA_REG_REG_OP, self.reg_reg_op),
        }


SCHEMA_DEF_USED = (ADDR, TEXT, ADDR, INT)
SCHEMA_REG_VAL = (ADDR, TEXT, ADDR, TEXT, INT, INT, INT)
SCHEMA_DAP = (ADDR, INT, INT, ADDR)
SCHEMA_REG_REG_OP = (ADDR, TEXT, ADDR, TEXT, INT, ADDR, TEXT, INT, INT)


def _in_range(v: int) -> bool:
    return INT_MIN <= v <= INT_MAX


def _checked(v: int):
    return (v,) if _in_range(v) else ()


# ---------------------------------------------------------------------------
# per-instruction tables


def memory_accesses(fb: FactBase, addr: int):
    """(operand index, mem operand) pairs that really touch memory."""
    opcode = fb.instructions[addr][3]
    if opcode in semantics.NO_ACCESS:
        return []
    return [(i, op) for i, op in enumerate(fb.insn_operands(addr), 1) if op[0] == "mem"]


def semantic_tables(fb: FactBase, insns) -> dict:
    defs, uses, forms, seeds = set(), set(), set(), set()
    for a in insns:
        row = fb.instructions[a]
        prefix, opcode = row[2], row[3]
        ops = fb.insn_operands(a)
        d, u = semantics.defs_uses(opcode, prefix, ops)
        defs.update((a, r) for r in d)
        uses.update((a, r, i) for r, i in u)
        vf = semantics.value_form(opcode, ops)
        if vf is not None:
            forms.add((a,) + vf)
        for i, op in memory_accesses(fb, a):
            if op[1] in ("FS", "GS"):
                continue
            seeds.update((a, r) for r in semantics.mem_regs(op))
        if opcode in ("jmp", "call") and ops and ops[0][0] == "reg":
            r = semantics._reg(ops[0][1])
            if r:
                seeds.add((a, r))
    return {"def": defs, "use": uses, "value_form": forms, "address_use": seeds}


def flow_edges(fb: FactBase, layout) -> tuple[set, set]:
    """Intra-procedural edges (fallthrough and direct jumps) and call fallthroughs."""
    insns = layout.instructions
    flow, call_ft = set(), set()
    for a in insns:
        row = fb.instructions[a]
        opcode = row[3]
        nxt = a + row[1]
        ops = fb.insn_operands(a)
        if opcode in x64.CALL_OPS:
            if nxt in insns:
                call_ft.add((a, nxt))
            continue
        if opcode in x64.JUMP_OPS and ops and ops[0][0] == "imm" and ops[0][1] in insns:
            flow.add((a, ops[0][1]))
        if (opcode not in x64.RETURN_OPS and opcode not in x64.UNCONDITIONAL_JUMP_OPS
                and opcode not in x64.HALT_OPS and nxt in insns):
            flow.add((a, nxt))
    return flow, call_ft


# ---------------------------------------------------------------------------
# rule program


def build_program(step_limit: int) -> Program:
    p = Program()
    R = p.relation
    def_ = R("def", (ADDR, TEXT), input=True)
    use = R("use", (ADDR, TEXT, INT), input=True)
    flow = R("flow", (ADDR, ADDR), input=True)
    call_ft = R("call_fallthrough", (ADDR, ADDR), input=True)
    preserved = R("preserved_across_call", (TEXT,), input=True)
    address_use = R("address_use", (ADDR, TEXT), input=True)
    value_form = R("value_form", (ADDR, TEXT, TEXT, TEXT, INT, TEXT, INT, INT), input=True)

    reach = R("reaching_def", (ADDR, TEXT, ADDR))
    def_used = R("def_used", SCHEMA_DEF_USED)
    dua = R("def_used_for_address", (ADDR, TEXT))
    has_src_def = R("has_source_def", (ADDR, TEXT))
    modeled = R("modeled_def", (ADDR, TEXT))
    edge = R("reg_val_edge", SCHEMA_REG_VAL[:6])
    reg_reg = R("reg_reg_op", SCHEMA_REG_REG_OP)
    reg_val = R("reg_val", SCHEMA_REG_VAL)

    A, B, D, Reg, I, U = variables("A B D Reg I U")
    A1, A2, A3, R1, R2, R3, RX, X = variables("A1 A2 A3 R1 R2 R3 RX X")
    M, M1, M2, Ma, Mb, Dd, D1, D2, Da, Db, Dn, Mn, S, Sa, Sb, Sn = variables(
        "M M1 M2 Ma Mb Dd D1 D2 Da Db Dn Mn S Sa Sb Sn")
    Src, Src2, Kind = variables("Src Src2 Kind")

    # reaching definitions over intra-procedural edges; across a call only
    # callee-saved registers survive
    p.rule(reach(D, Reg, B), def_(D, Reg), flow(D, B), label="reach_def")
    p.rule(reach(D, Reg, B), def_(D, Reg), call_ft(D, B), label="reach_call_def")
    p.rule(reach(D, Reg, B), reach(D, Reg, A), ~def_(A, Reg), flow(A, B), label="reach_flow")
    p.rule(reach(D, Reg, B), reach(D, Reg, A), ~def_(A, Reg), call_ft(A, B), preserved(Reg),
           label="reach_call")
    p.rule(def_used(D, Reg, U, I), reach(D, Reg, U), use(U, Reg, I), label="def_used")

    # definitions that feed address computations
    p.rule(dua(D, Reg), address_use(U, Reg), def_used(D, Reg, U, _()), label="dua_seed")
    p.rule(dua(D, Reg), dua(U, _()), def_used(D, Reg, U, _()), label="dua_step")

    # edges: one per modeled instruction and reaching definition of its source
    p.rule(edge(A, Reg, A, NONE, 0, Dd), dua(A, Reg), value_form(A, Reg, "const", _(), _(), _(), _(), Dd),
           label="edge_const")
    p.rule(edge(A, Reg, A2, Src, M, Dd), dua(A, Reg), value_form(A, Reg, "move", Src, M, _(), _(), Dd),
           def_used(A2, Src, A, _()), label="edge_move")
    p.rule(has_src_def(A, Reg), value_form(A, Reg, "move", Src, _(), _(), _(), _()),
           def_used(_(), Src, A, _()), label="has_source_def")
    p.rule(reg_reg(A, Reg, A1, Src, M1, A2, Src2, M2, Dd), dua(A, Reg),
           value_form(A, Reg, "two", Src, M1, Src2, M2, Dd), def_used(A1, Src, A, _()),
           def_used(A2, Src2, A, _()), label="reg_reg_op")
    p.rule(modeled(A, Reg), value_form(A, Reg, "const", _(), _(), _(), _(), _()), label="modeled_const")
    p.rule(modeled(A, Reg), has_src_def(A, Reg), label="modeled_move")
    # anything else is a leaf holding an opaque value
    p.rule(edge(A, Reg, A, Reg, 1, 0), dua(A, Reg), ~modeled(A, Reg), label="edge_opaque")

    # propagation with a step counter
    p.rule(reg_val(A, Reg, A, NONE, 0, Dd, 0), edge(A, Reg, A, NONE, 0, Dd), label="leaf_const")
    p.rule(reg_val(A, Reg, A, Reg, 1, 0, 0), edge(A, Reg, A, Reg, 1, 0), label="leaf_opaque")
    p.rule(reg_val(A1, R1, A3, R3, Mn, Dn, Sn),
           reg_val(A2, R2, A3, R3, M2, D2, S), edge(A1, R1, A2, R2, M1, D1), ne(A1, A2),
           Let(Sn, S + 1), lt(Sn, step_limit),
           Call(Mn, lambda a, b: _checked(a * b), M1, M2, name="mul"),
           Call(Dn, lambda d2, m1, d1: _checked(d2 * m1 + d1), D2, M1, D1, name="affine"),
           label="chain")
    # a register set to a constant and stepped by a constant on a self edge
    p.rule(reg_val(A, Reg, A2, UNKNOWN, D2, D1, Sn),
           reg_val(A, Reg, A2, NONE, 0, D1, S), edge(A, Reg, A, Reg, 1, D2), ne(D2, 0),
           Let(Sn, S + 1), lt(Sn, step_limit), label="loop")
    # two-register operations: both sides over one common register
    p.rule(reg_val(A, Reg, X, RX, Mn, Dn, Sn),
           reg_reg(A, Reg, A1, R1, M1, A2, R2, M2, Dd),
           reg_val(A1, R1, X, RX, Ma, Da, Sa), reg_val(A2, R2, X, RX, Mb, Db, Sb),
           ne(RX, NONE), ne(RX, UNKNOWN),
           Call(Sn, lambda a, b: (max(a, b) + 1,), Sa, Sb, name="max_step"), lt(Sn, step_limit),
           Call(Mn, lambda ma, m1, mb, m2: _checked(ma * m1 + mb * m2), Ma, M1, Mb, M2, name="mult2"),
           Call(Dn, lambda da, m1, db, m2, d: _checked(da * m1 + db * m2 + d), Da, M1, Db, M2, Dd,
                name="disp2"),
           label="diamond")
    # one side constant
    for const_first in (False, True):
        if const_first:
            lits = (reg_val(A1, R1, _(), NONE, 0, Da, Sa), reg_val(A2, R2, X, RX, Mb, Db, Sb))
            mult = Call(Mn, lambda m, mm: _checked(m * mm), Mb, M2, name="mult_side")
        else:
            lits = (reg_val(A1, R1, X, RX, Ma, Da, Sa), reg_val(A2, R2, _(), NONE, 0, Db, Sb))
            mult = Call(Mn, lambda m, mm: _checked(m * mm), Ma, M1, name="mult_side")
        p.rule(reg_val(A, Reg, X, RX, Mn, Dn, Sn),
               reg_reg(A, Reg, A1, R1, M1, A2, R2, M2, Dd), *lits,
               Call(Sn, lambda a, b: (max(a, b) + 1,), Sa, Sb, name="max_step"), lt(Sn, step_limit),
               mult,
               Call(Dn, lambda da, m1, db, m2, d: _checked(da * m1 + db * m2 + d), Da, M1, Db, M2, Dd,
                    name="disp2"),
               label="constant_side_%d" % (2 if const_first else 1))
    return p


# ---------------------------------------------------------------------------
# data access patterns


def _term_values(fb, reg, at, index, du_at, vals_of):
    """Linear values of ``reg`` read at ``at``: (key or None, coeff, const)."""
    defs = du_at.get((at, reg, index), ())
    if not defs:
        return [(("param", reg), 1, 0)]
    out = []
    for d in defs:
        vals = vals_of.get((d, reg))
        if not vals:
            out.append(((d, reg), 1, 0))
            continue
        for a2, r2, m, disp in vals:
            if r2 == NONE:
                out.append((None, 0, disp))
            elif r2 == UNKNOWN:
                out.append((("loop", a2), m, disp))
            else:
                out.append(((a2, r2), m, disp))
    return out


def compute_daps(fb: FactBase, layout, def_used, reg_vals) -> set:
    du_at: dict = {}
    for d, r, u, i in def_used:
        du_at.setdefault((u, r, i), set()).add(d)
    vals_of: dict = {}
    for a, r, a2, r2, m, disp in reg_vals:
        vals_of.setdefault((a, r), set()).add((a2, r2, m, disp))
    best: dict = {}
    for a in sorted(layout.instructions):
        for idx, op in memory_accesses(fb, a):
            _m, seg, base, index, scale, disp, size = op
            if seg in ("FS", "GS") or size <= 0:
                continue
            if base == "RIP" or (base == "NONE" and index == "NONE"):
                cands = [(disp, 0)]
            else:
                parts = []
                for reg, coeff in ((base, 1), (index, scale)):
                    r = semantics._reg(reg)
                    if r is None:
                        continue
                    parts.append([(k, c * coeff, v * coeff)
                                  for k, c, v in _term_values(fb, r, a, idx, du_at, vals_of)])
                cands = []
                combos = [[]]
                for options in parts:
                    combos = [c + [o] for c in combos for o in options]
                for combo in combos:
                    terms: dict = {}
                    const = disp
                    for key, c, v in combo:
                        const += v
                        if key is not None and c:
                            terms[key] = terms.get(key, 0) + c
                    terms = {k: c for k, c in terms.items() if c}
                    if len(terms) > 1:
                        continue
                    # a bare unscaled register with no known value and no
                    # displacement says nothing about where the access lands
                    known = any(key is None for key, _c, _v in combo)
                    if (not known and disp == 0
                            and any(abs(c) == 1 and k[0] != "loop" for k, c in terms.items())):
                        continue
                    mult = abs(next(iter(terms.values()))) if terms else 0
                    cands.append((const, mult))
            for addr, mult in cands:
                if fb.section_of(addr) is None:
                    continue
                key = (addr, a)
                if key not in best or best[key][1] < mult:
                    best[key] = (size, mult)
    return {(addr, size, mult, frm) for (addr, frm), (size, mult) in best.items()}


def propagate_daps(fb: FactBase, daps) -> set:
    """Replicate each DAP by its multiplier until the next DAP structure begins.

    Replication stops at an address holding a DAP from another instruction or
    once a DAP with a different multiplier has been passed.
    """
    by_addr: dict = {}
    for addr, size, mult, frm in daps:
        by_addr.setdefault(addr, []).append((mult, frm))
    addrs = sorted(by_addr)
    import bisect

    out = set(daps)
    for addr, size, mult, frm in daps:
        if mult <= 0 or mult < size:
            continue
        sec = fb.section_of(addr)
        if sec is None:
            continue
        prev = addr
        r = addr + mult
        while r + size <= sec.end:
            if any(f != frm for _m, f in by_addr.get(r, ())):
                break
            lo = bisect.bisect_right(addrs, prev)
            hi = bisect.bisect_right(addrs, r)
            if any(m != mult for x in addrs[lo:hi] for m, _f in by_addr[x]):
                break
            out.add((r, size, mult, frm))
            prev = r
            r += mult
    return out


# ---------------------------------------------------------------------------
# driver


def run_analyses(fb: FactBase, layout, config=None, jobs: int = 1) -> AnalysisResult:
    step_limit = DEFAULT_STEP_LIMIT
    preserved = semantics.CALLEE_SAVED
    if config is not None:
        step_limit = config.step_limit
        if config.call_convention == "kill-all":
            preserved = ()
    insns = sorted(layout.instructions)
    tables = semantic_tables(fb, insns)
    flow, call_ft = flow_edges(fb, layout)
    inputs = dict(tables)
    inputs.update({"flow": flow, "call_fallthrough": call_ft,
                   "preserved_across_call": [(r,) for r in preserved]})
    db = build_program(step_limit).evaluate(inputs, jobs=jobs)
    reg_val = db["reg_val"]
    vals = {r[:6] for r in reg_val}
    daps = compute_daps(fb, layout, db["def_used"], vals)
    propagated = propagate_daps(fb, daps)
    stats = {"def_used": len(db["def_used"]), "reg_val": len(reg_val),
             "step_limited": sum(1 for r in reg_val if r[6] == step_limit - 1),
             "daps": len(daps), "propagated": len(propagated)}
    log.info("analyses: %s", stats)
    return AnalysisResult(db["def_used"], db["def_used_for_address"], db["reg_val_edge"], reg_val,
                          frozenset(daps), frozenset(propagated), db["reg_reg_op"], stats)
