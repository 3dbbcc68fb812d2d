"""Literal versus symbolic decisions for numbers in data and code.

The stages are: symbol-symbol jump table detection, data object candidates
with point scoring and overlap resolution, code operand heuristics, and the
two symbol+constant repairs (scaled displacements and loop bounds).  The
result is a set of :class:`Decision` records keyed by the address of the
number's bytes, plus the resolved data objects used by the printer.
"""

from __future__ import annotations

import bisect
import logging
import re
from dataclasses import dataclass, field

from . import semantics, x64
from .analyses import NONE, UNKNOWN, memory_accesses
from .facts import FactBase, reg_width
from .relfix import ADDR, INT, TEXT, Program, _, variables

log = logging.getLogger(__name__)

# Sections that are regenerated by the toolchain rather than printed.
SKIPPED_SECTIONS = (".interp", ".hash", ".gnu.hash", ".dynsym", ".dynstr", ".init", ".fini",
                    ".dynamic", ".eh_frame", ".eh_frame_hdr", ".gcc_except_table")
SKIPPED_PREFIXES = (".note", ".gnu.version", ".rela", ".rel.", ".plt", ".got")
BOUNDARY_WINDOW = 0x1000


def is_emitted_section(name: str) -> bool:
    return name not in SKIPPED_SECTIONS and not name.startswith(SKIPPED_PREFIXES)


# ---------------------------------------------------------------------------
# symbolic expressions


@dataclass(frozen=True)
class Literal:
    value: int

    def render(self) -> str:
        return "lit:%d" % self.value


@dataclass(frozen=True)
class SymPlus:
    """``target + offset``; ``section`` names the section owning the label
    when the target sits at a section end rather than inside one."""

    target: int
    offset: int = 0
    section: str | None = None

    @property
    def value(self) -> int:
        return self.target + self.offset

    def render(self) -> str:
        s = "sym:0x%x" % self.target
        if self.offset:
            s += "%+d" % self.offset
        if self.section:
            s += "@end:" + self.section
        return s


@dataclass(frozen=True)
class SymMinusSym:
    target: int
    reference: int

    @property
    def value(self) -> int:
        return self.target - self.reference

    def render(self) -> str:
        return "symsym:0x%x-0x%x" % (self.target, self.reference)


_EXPR_RE = re.compile(r"^(?:lit:(-?\d+)|sym:0x([0-9a-f]+)([+-]\d+)?(?:@end:(\S+))?"
                      r"|symsym:0x([0-9a-f]+)-0x([0-9a-f]+))$")


def parse_expr(text: str):
    m = _EXPR_RE.match(text)
    if not m:
        raise ValueError("bad expression %r" % text)
    if m.group(1) is not None:
        return Literal(int(m.group(1)))
    if m.group(2) is not None:
        return SymPlus(int(m.group(2), 16), int(m.group(3) or 0), m.group(4))
    return SymMinusSym(int(m.group(5), 16), int(m.group(6), 16))


@dataclass
class Decision:
    addr: int  # address of the number's bytes
    context: str  # data | immediate | displacement | branch | pcrel
    expr: object
    total: int = 0
    heuristics: tuple = ()
    origin: int = 0  # instruction or data object holding the number
    size: int = 8

    @property
    def symbolic(self) -> bool:
        return not isinstance(self.expr, Literal)


@dataclass(frozen=True)
class DataObject:
    addr: int
    kind: str  # Symbol | String | SymbolSymbol | Other
    size: int
    total: int = 0


@dataclass(frozen=True)
class JumpTable:
    jump: int
    entry_size: int
    start: int
    reference: int
    entries: tuple = ()  # (entry address, target)

    @property
    def span(self):
        return (self.start, self.start + self.entry_size * max(1, len(self.entries)))


@dataclass
class SymbolizationResult:
    decisions: dict = field(default_factory=dict)  # addr -> Decision
    operand_exprs: dict = field(default_factory=dict)  # (insn addr, operand index) -> expr
    objects: list = field(default_factory=list)  # resolved DataObject, sorted
    candidates: list = field(default_factory=list)  # (DataObject, points rows)
    jump_tables: list = field(default_factory=list)
    ext_ranges: set = field(default_factory=set)  # (section, low, high, m)
    stats: dict = field(default_factory=dict)

    def relations(self) -> dict:
        return {
            "jump_table_start": ((ADDR, INT, ADDR, ADDR),
                                 {(t.jump, t.entry_size, t.start, t.reference) for t in self.jump_tables}),
            "extended_section_range": ((TEXT, ADDR, ADDR, INT), self.ext_ranges),
            "data_object_candidate": ((ADDR, TEXT, INT, INT),
                                      {(c.addr, c.kind, c.size, c.total) for c, _r in self.candidates}),
            "data_object_points": ((ADDR, TEXT, INT, TEXT),
                                   {(c.addr, c.kind, p, h) for c, rows in self.candidates for h, p in rows}),
            "data_object": ((ADDR, TEXT, INT), {(o.addr, o.kind, o.size) for o in self.objects}),
            "symbolic_operand": ((ADDR, TEXT, TEXT, INT),
                                 {(d.addr, d.context, d.expr.render(), d.total)
                                  for d in self.decisions.values() if d.symbolic}),
        }


# ---------------------------------------------------------------------------
# section geometry


class Sections:
    def __init__(self, fb: FactBase, special=()):
        self.all = sorted((s for s in fb.sections if s.size), key=lambda s: s.start)
        self.starts = [s.start for s in self.all]
        self.special = set(special)
        self.data = [s for s in self.all if not s.executable and is_emitted_section(s.name)]
        self.by_name = {s.name: s for s in self.all}

    def containing(self, v):
        i = bisect.bisect_right(self.starts, v) - 1
        if i >= 0 and v < self.all[i].end:
            return self.all[i]
        return None

    def ending_at(self, v):
        for s in self.all:
            if s.end == v:
                return s
        return None

    def anchor(self, v):
        """(section, at_end) for an in-range value or (None, False)."""
        s = self.containing(v)
        if s is not None:
            return s, False
        s = self.ending_at(v)
        if s is not None:
            return s, True
        return None, False

    def expr_for(self, v) -> SymPlus | None:
        s, at_end = self.anchor(v)
        if s is None:
            return None
        return SymPlus(v, 0, s.name if at_end else None)

    def is_special(self, s) -> bool:
        return s is not None and s.name in self.special

    def nearest_data_boundary(self, v):
        best = None
        for s in self.data:
            for b, at_end in ((s.start, False), (s.end, True)):
                dist = abs(v - b)
                if best is None or dist < best[0]:
                    best = (dist, b, s, at_end)
        return best


def expr_section(expr, secs: Sections):
    """Name of the section an expression's label belongs to."""
    if isinstance(expr, SymPlus):
        if expr.section:
            return expr.section
        s = secs.containing(expr.target)
        return s.name if s else None
    if isinstance(expr, SymMinusSym):
        s = secs.containing(expr.target)
        return s.name if s else None
    return None


# ---------------------------------------------------------------------------
# jump tables


def _jump_table_program() -> Program:
    p = Program()
    R = p.relation
    reg_jump = R("reg_jump", (ADDR, TEXT), input=True)
    def_used = R("def_used", (ADDR, TEXT, ADDR, INT), input=True)
    reg_reg_op = R("reg_reg_op", (ADDR, TEXT, ADDR, TEXT, INT, ADDR, TEXT, INT, INT), input=True)
    dap = R("data_access_pattern", (ADDR, INT, INT, ADDR), input=True)
    reg_val = R("reg_val", (ADDR, TEXT, ADDR, TEXT, INT, INT, INT), input=True)
    jts = R("jump_table_start", (ADDR, INT, ADDR, ADDR))
    AJ, ASum, Reg, AE, RE, AR, RR, Start, Size, Ref = variables("AJ ASum Reg AE RE AR RR Start Size Ref")
    for entry_first in (True, False):
        if entry_first:
            op = reg_reg_op(ASum, Reg, AE, RE, 1, AR, RR, 1, 0)
        else:
            op = reg_reg_op(ASum, Reg, AR, RR, 1, AE, RE, 1, 0)
        p.rule(jts(AJ, Size, Start, Ref),
               reg_jump(AJ, _()), def_used(ASum, Reg, AJ, _()), op,
               dap(Start, Size, Size, AE),
               reg_val(AR, RR, _(), NONE, 0, Ref, _()),
               label="jump_table_start_%s" % ("entry_first" if entry_first else "ref_first"))
    return p


def reg_jumps(fb: FactBase, insns) -> set:
    out = set()
    for a in insns:
        if fb.instructions[a][3] == "jmp":
            ops = fb.insn_operands(a)
            if ops and ops[0][0] == "reg":
                out.add((a, ops[0][1]))
    return out


def _entry_value(raw: bytes, size: int) -> int:
    return int.from_bytes(raw, "little", signed=size != 1)


def detect_jump_tables(fb: FactBase, layout, an, valid_target=None, jobs: int = 1) -> list:
    """Symbol-symbol jump tables with their entries expanded along propagated accesses."""
    insns = layout.instructions
    if valid_target is None:
        def valid_target(t):
            return t in insns
    db = _jump_table_program().evaluate({
        "reg_jump": reg_jumps(fb, insns),
        "def_used": an.def_used,
        "reg_reg_op": an.reg_reg_op,
        "data_access_pattern": an.daps,
        "reg_val": an.reg_val,
    }, jobs=jobs)
    prop = {(a, size, m, frm) for a, size, m, frm in an.propagated}
    daps = {}
    for a, size, m, frm in an.daps:
        daps.setdefault((a, size, m), set()).add(frm)
    tables = []
    for aj, size, start, ref in sorted(db["jump_table_start"]):
        froms = daps.get((start, size, size), set())
        entries = []
        e = start
        while any((e, size, size, f) in prop for f in froms):
            raw = fb.read_bytes(e, size)
            if raw is None:
                break
            target = ref + _entry_value(raw, size)
            if not valid_target(target):
                break
            entries.append((e, target))
            e += size
        tables.append(JumpTable(aj, size, start, ref, tuple(entries)))
    return tables


# ---------------------------------------------------------------------------
# data objects


PRINTABLE = frozenset(range(0x20, 0x7F)) | {0x09, 0x0A}


def _data_areas(fb: FactBase, layout, secs: Sections) -> list:
    """(start, end) byte ranges that hold data: data sections plus code data regions."""
    areas = [(s.start, s.end) for s in secs.data if s.initialized]
    areas += [(lo, hi) for lo, hi in layout.data_regions
              if (lambda s: s is not None and is_emitted_section(s.name))(secs.containing(lo))]
    return sorted(areas)


def _in_areas(areas, starts, lo, hi) -> bool:
    i = bisect.bisect_right(starts, lo) - 1
    return i >= 0 and hi <= areas[i][1]


def collect_data_candidates(fb: FactBase, layout, an, tables, secs: Sections) -> list:
    areas = _data_areas(fb, layout, secs)
    starts = [a for a, _b in areas]
    cands = []
    for a, v in sorted(fb["address_in_data"]):
        if _in_areas(areas, starts, a, a + 8):
            cands.append(DataObject(a, "Symbol", 8))
    data_bytes = fb.data_bytes
    for lo, hi in areas:
        run = None
        for x in range(lo, hi):
            b = data_bytes.get(x)
            if b in PRINTABLE:
                if run is None:
                    run = x
            else:
                if b == 0 and run is not None and x - run >= 2:
                    cands.append(DataObject(run, "String", x - run + 1))
                run = None
    for t in tables:
        for e, _target in t.entries:
            if _in_areas(areas, starts, e, e + t.entry_size):
                cands.append(DataObject(e, "SymbolSymbol", t.entry_size))
    for a, size, _m, _f in sorted(an.propagated):
        if size != 8 and _in_areas(areas, starts, a, a + size):
            cands.append(DataObject(a, "Other", size))
    return sorted(set(cands), key=lambda c: (c.addr, c.kind, c.size))


def _symbol_arrays(sym_addrs: set, strides=range(8, 72, 8)) -> tuple[set, list]:
    """Symbol candidates in evenly spaced runs of at least 3, and the 8-stride arrays."""
    member = set()
    for a in sym_addrs:
        for s in strides:
            if ((a - s in sym_addrs and a + s in sym_addrs)
                    or (a + s in sym_addrs and a + 2 * s in sym_addrs)
                    or (a - s in sym_addrs and a - 2 * s in sym_addrs)):
                member.add(a)
                break
    arrays = []
    seen = set()
    for a in sorted(sym_addrs):
        if a in seen or a - 8 in sym_addrs:
            continue
        run = [a]
        while run[-1] + 8 in sym_addrs:
            run.append(run[-1] + 8)
        seen.update(run)
        if len(run) >= 3:
            arrays.append(run)
    return member, arrays


def score_data_candidates(fb, layout, an, cands, tables, secs: Sections, weights: dict):
    insns = layout.instructions
    values = {a: v for a, v in fb["address_in_data"]}
    prop_sizes: dict = {}
    for a, size, _m, _f in an.propagated:
        prop_sizes.setdefault(a, set()).add(size)
    prop_addrs = sorted(prop_sizes)
    sym_addrs = {c.addr for c in cands if c.kind == "Symbol"}
    in_array, arrays = _symbol_arrays(sym_addrs)
    by_addr: dict = {}
    for c in cands:
        by_addr.setdefault(c.addr, []).append(c)
    pointed = set()
    for run in arrays:
        kinds: dict = {}
        for a in run:
            for c in by_addr.get(values.get(a), ()):
                if c.kind != "Symbol":
                    kinds.setdefault(c.kind, set()).add(c)
        for kind, targets in kinds.items():
            if len(targets) >= 2:
                pointed.update(targets)
    w = weights
    scored = []
    for c in cands:
        rows = []
        if c.kind == "Symbol":
            v = values[c.addr]
            if v in insns:
                rows.append(("pointer_to_instruction", w["pointer_to_instruction"]))
            if 8 in prop_sizes.get(c.addr, ()):
                rows.append(("data_access_match", w["data_access_match"]))
            if c.addr in in_array:
                rows.append(("symbol_array", w["symbol_array"]))
            if c.addr % 8 == 0:
                rows.append(("aligned", w["aligned"]))
            if secs.is_special(secs.containing(v)):
                rows.append(("special_section", w["special_section"]))
        elif c.kind == "String":
            rows.append(("string", w["string"]))
            if c.size - 1 > 5:
                rows.append(("long_string", w["long_string"]))
        elif c.kind == "SymbolSymbol":
            rows.append(("jump_table_entry", w["jump_table_entry"]))
        else:
            rows.append(("data_access_match", w["data_access_match"]))
        if c.kind != "Symbol" and c in pointed:
            rows.append(("pointed_by_symbol_array", w["pointed_by_symbol_array"]))
        lo = bisect.bisect_right(prop_addrs, c.addr)
        hi = bisect.bisect_left(prop_addrs, c.addr + c.size)
        if hi > lo:
            rows.append(("access_conflict", w["access_conflict"]))
        total = sum(p for _h, p in rows)
        scored.append((DataObject(c.addr, c.kind, c.size, total), tuple(rows)))
    return scored


def resolve_data_objects(scored, threshold: int):
    """Greedy selection by total (ties to the lower address); no two kept objects overlap."""
    order = sorted(scored, key=lambda cr: (-cr[0].total, cr[0].addr, cr[0].kind))
    owner: dict = {}
    kept = []
    for c, _rows in order:
        if c.total < threshold:
            continue
        if any(x in owner for x in range(c.addr, c.addr + c.size)):
            continue
        for x in range(c.addr, c.addr + c.size):
            owner[x] = c
        kept.append(c)
    return sorted(kept, key=lambda c: c.addr)


# ---------------------------------------------------------------------------
# code operands


class _Flow:
    """Def-use lookups shared by the code heuristics."""

    def __init__(self, fb: FactBase, an):
        self.fb = fb
        self.uses_of: dict = {}  # (def addr, reg) -> {use addr}
        self.defs_at: dict = {}  # (use addr, reg) -> {def addr}
        for d, r, u, _i in an.def_used:
            self.uses_of.setdefault((d, r), set()).add(u)
            self.defs_at.setdefault((u, r), set()).add(d)
        self.dua = set(an.dua)
        self.vals: dict = {}
        for row in an.reg_val:
            self.vals.setdefault((row[0], row[1]), set()).add(row[2:6])

    def opcode(self, a):
        return self.fb.instructions[a][3]

    def dest_reg(self, a):
        ops = self.fb.insn_operands(a)
        if ops and ops[-1][0] == "reg":
            return semantics._reg(ops[-1][1])
        return None


def _reads_value(fb, u, reg) -> bool:
    """True when ``reg`` is a register operand of ``u`` (not just an address part)."""
    return any(o[0] == "reg" and semantics._reg(o[1]) == reg for o in fb.insn_operands(u))


def _cmp_other_imm(fb, u, reg):
    """Immediate compared against ``reg`` at ``u``, if ``u`` is such a comparison."""
    if fb.instructions[u][3] not in ("cmp", "test"):
        return None
    ops = fb.insn_operands(u)
    regs = [semantics._reg(o[1]) for o in ops if o[0] == "reg"]
    imms = [o[1] for o in ops if o[0] == "imm"]
    if reg in regs and imms:
        return imms[0]
    return None


def immediate_heuristics(flow: _Flow, a: int, pos: int, v: int, secs: Sections, insns, w,
                         expr=None) -> list:
    fb = flow.fb
    rows = []
    opcode = flow.opcode(a)
    dst = flow.dest_reg(a)
    loads_reg = dst is not None and pos != len(fb.insn_operands(a))
    if v in insns:
        rows.append(("pointer_to_instruction", w["pointer_to_instruction"]))
    if loads_reg and (a, dst) in flow.dua:
        rows.append(("used_for_address", w["used_for_address"]))
    uncommon = opcode in semantics.UNCOMMON_POINTER_OPS
    if not uncommon and loads_reg and opcode in ("mov", "movabs"):
        uncommon = any(flow.opcode(u) in semantics.UNCOMMON_POINTER_OPS and _reads_value(fb, u, dst)
                       for u in flow.uses_of.get((a, dst), ()))
    if uncommon:
        rows.append(("uncommon_pointer_operation", w["uncommon_pointer_operation"]))
    compared = False
    if loads_reg and opcode in ("mov", "movabs"):
        for u in flow.uses_of.get((a, dst), ()):
            other = _cmp_other_imm(fb, u, dst)
            if other is not None and secs.anchor(other)[0] is None:
                compared = True
    elif opcode in ("cmp", "test"):
        regs = [semantics._reg(o[1]) for o in fb.insn_operands(a) if o[0] == "reg"]
        for r in regs:
            if r is None:
                continue
            for d in flow.defs_at.get((a, r), ()):
                for u in flow.uses_of.get((d, r), ()):
                    if u == a:
                        continue
                    other = _cmp_other_imm(fb, u, r)
                    if other is not None and secs.anchor(other)[0] is None:
                        compared = True
    if compared:
        rows.append(("compared_to_non_address", w["compared_to_non_address"]))
    sec = secs.containing(v)
    if expr is not None and expr.section:
        sec = secs.by_name.get(expr.section)
    if secs.is_special(sec):
        rows.append(("special_section", w["special_section"]))
    return rows


def _bound_use(fb, u, reg) -> bool:
    """``u`` compares ``reg`` as a value or addresses memory below it."""
    op = fb.instructions[u][3]
    if op == "cmp":
        return _reads_value(fb, u, reg)
    for o in fb.insn_operands(u):
        if o[0] == "mem" and semantics._reg(o[2]) == reg:
            return o[5] < 0
    return False


def _boundary_bound(flow: _Flow, a: int, v: int, e, secs: Sections):
    """Re-anchor ``v`` at the end of the previous data section when it is a bound.

    Applies only when ``v`` both starts one section and ends the section
    right before it, and the number is compared (directly or through the
    register it is loaded into) or only used to address memory below it.
    """
    nxt = secs.containing(v)
    if nxt is None or nxt.start != v:
        return e
    prev = secs.ending_at(v)
    if prev is None or prev.executable or not is_emitted_section(prev.name):
        return e
    end = SymPlus(v, 0, prev.name)
    fb = flow.fb
    opcode = flow.opcode(a)
    if opcode == "cmp":
        return end
    dst = flow.dest_reg(a)
    if opcode in ("mov", "movabs") and dst is not None:
        uses = flow.uses_of.get((a, dst), ())
        if uses and all(_bound_use(fb, u, dst) for u in uses):
            return end
    return e


def loop_counter_ranges(fb: FactBase, flow: _Flow, secs: Sections) -> list:
    """(counter def, reg, base, extended section range) for loop-shaped register values."""
    out = []
    for (a, r), vals in sorted(flow.vals.items()):
        for a2, r2, m, _d in vals:
            if r2 != UNKNOWN or m == 0:
                continue
            bases = {d for (x, rr, mm, d) in flow.vals.get((a2, r), ()) if rr == NONE and x == a2}
            for base in sorted(bases):
                s = secs.containing(base)
                if s is None:
                    continue
                step = abs(m)
                out.append((a, r, base, (s.name, max(0, s.start - step), s.end + step, step)))
    return out


def repair_immediates(fb, flow: _Flow, secs: Sections) -> tuple[dict, set]:
    """Loop bounds compared with a loop counter, rewritten relative to the counter base."""
    repaired: dict = {}  # (insn addr, operand pos) -> SymPlus
    ranges = set()
    for a, r, base, rng in loop_counter_ranges(fb, flow, secs):
        ranges.add(rng)
        _name, low, high, _m = rng
        base_sec = secs.containing(base)
        for u in sorted(flow.uses_of.get((a, r), ())):
            if flow.opcode(u) != "cmp":
                continue
            ops = fb.insn_operands(u)
            sites = []
            for pos, op in enumerate(ops, 1):
                if op[0] == "imm":
                    sites.append((u, pos, op[1]))
                elif op[0] == "reg":
                    rr = semantics._reg(op[1])
                    if rr is None or rr == r:
                        continue
                    for d in flow.defs_at.get((u, rr), ()):
                        dops = fb.insn_operands(d)
                        if (flow.opcode(d) in ("mov", "movabs") and len(dops) == 2
                                and dops[0][0] == "imm" and dops[1][0] == "reg"):
                            v = dops[0][1]
                            if reg_width(dops[1][1]) == 4:
                                v &= 0xFFFFFFFF
                            sites.append((d, 1, v))
            for site_a, pos, v in sites:
                if not low <= v <= high:
                    continue
                if secs.containing(v) is base_sec:
                    continue
                repaired[(site_a, pos)] = SymPlus(base, v - base)
    return repaired, ranges


def _displacement_repair(fb, flow: _Flow, a: int, pos: int, op, secs: Sections, dap_of: dict):
    """SymPlus for a scaled displacement outside every section, or None."""
    _m, seg, base, index, scale, disp, _size = op
    b = semantics._reg(base)
    i = semantics._reg(index)
    scaled = i is not None and scale > 1
    if b is not None:
        for d in flow.defs_at.get((a, b), ()):
            for a2, r2, m, dd in flow.vals.get((d, b), ()):
                if r2 == NONE and m == 0:
                    s = secs.containing(dd)
                    if s is not None and not s.executable:
                        return None
                elif r2 != NONE and abs(m) > 1 and dd == 0:
                    scaled = True
    if not scaled:
        return None
    anchors = sorted(dap_of.get(a, ()))
    if anchors:
        t = anchors[0]
        return SymPlus(t, disp - t)
    best = secs.nearest_data_boundary(disp)
    if best is None or best[0] > BOUNDARY_WINDOW:
        return None
    _dist, bnd, s, at_end = best
    return SymPlus(bnd, disp - bnd, s.name if at_end else None)


def symbolize_code(fb, layout, an, secs: Sections, weights: dict, threshold: int):
    insns = layout.instructions
    flow = _Flow(fb, an)
    fields = fb.operand_fields
    repaired_imm, ranges = repair_immediates(fb, flow, secs)
    dap_of: dict = {}
    for addr, _size, _m, frm in an.daps:
        dap_of.setdefault(frm, set()).add(addr)
    decisions = {}
    exprs = {}
    for a in sorted(insns):
        row = fb.instructions[a]
        opcode = row[3]
        ops = fb.insn_operands(a)
        branch = opcode in x64.JUMP_OPS or opcode in x64.CALL_OPS
        for pos, op in enumerate(ops, 1):
            fld = fields.get((a, pos))
            if fld is None:
                continue
            off, width = fld
            where = a + off
            if op[0] == "imm":
                v = op[1]
                if branch and pos == 1:
                    e = SymPlus(v)
                    decisions[where] = Decision(where, "branch", e, 0, (), a, width)
                    exprs[(a, pos)] = e
                    continue
                if (a, pos) in repaired_imm:
                    e = repaired_imm[(a, pos)]
                    decisions[where] = Decision(where, "immediate", e, 0, ("loop_bound_repair",), a, width)
                    exprs[(a, pos)] = e
                    continue
                if width < 4:
                    continue
                if width == 4 and opcode in ("mov",) and ops[-1][0] == "reg" and reg_width(ops[-1][1]) == 4:
                    v &= 0xFFFFFFFF
                e = secs.expr_for(v)
                if e is None:
                    continue
                e = _boundary_bound(flow, a, v, e, secs)
                rows = immediate_heuristics(flow, a, pos, v, secs, insns, weights, e)
                total = sum(p for _h, p in rows)
                if total >= threshold:
                    decisions[where] = Decision(where, "immediate", e, total, tuple(h for h, _ in rows), a, width)
                    exprs[(a, pos)] = e
                else:
                    decisions[where] = Decision(where, "immediate", Literal(op[1]), total,
                                                tuple(h for h, _ in rows), a, width)
            elif op[0] == "mem":
                _m, seg, base, index, scale, disp, _size = op
                if base == "RIP":
                    e = secs.expr_for(disp) or SymPlus(disp)
                    decisions[where] = Decision(where, "pcrel", e, 0, (), a, width)
                    exprs[(a, pos)] = e
                    continue
                if seg in ("FS", "GS") or width < 4:
                    continue
                e = secs.expr_for(disp)
                if e is not None:
                    rows = []
                    if disp in insns:
                        rows.append(("pointer_to_instruction", weights["pointer_to_instruction"]))
                    if secs.is_special(secs.containing(disp)):
                        rows.append(("special_section", weights["special_section"]))
                    total = sum(p for _h, p in rows)
                    sym = total >= threshold
                    decisions[where] = Decision(where, "displacement", e if sym else Literal(disp), total,
                                                tuple(h for h, _ in rows), a, width)
                    if sym:
                        exprs[(a, pos)] = e
                    continue
                e = _displacement_repair(fb, flow, a, pos, op, secs, dap_of)
                if e is not None:
                    decisions[where] = Decision(where, "displacement", e, 0, ("boundary_repair",), a, width)
                    exprs[(a, pos)] = e
    return decisions, exprs, ranges


# ---------------------------------------------------------------------------
# driver


def symbolize(fb: FactBase, layout, an, config=None, tables=None) -> SymbolizationResult:
    from .config import PipelineConfig

    config = config or PipelineConfig()
    secs = Sections(fb, config.special_sections)
    if tables is None:
        tables = detect_jump_tables(fb, layout, an, jobs=config.jobs)
    cands = collect_data_candidates(fb, layout, an, tables, secs)
    scored = score_data_candidates(fb, layout, an, cands, tables, secs, config.data_weights)
    objects = resolve_data_objects(scored, config.data_threshold)
    res = SymbolizationResult(objects=objects, candidates=scored, jump_tables=list(tables))

    values = {a: v for a, v in fb["address_in_data"]}
    entry_target = {e: (t.reference, tgt) for t in tables for e, tgt in t.entries}
    kept = {o.addr: o for o in objects}
    areas = _data_areas(fb, layout, secs)
    starts = [a for a, _b in areas]
    for a, v in sorted(values.items()):
        if not _in_areas(areas, starts, a, a + 8):
            continue
        o = kept.get(a)
        if o is not None and o.kind == "Symbol":
            e = secs.expr_for(v)
            res.decisions[a] = Decision(a, "data", e, o.total, (), a, 8)
        else:
            res.decisions[a] = Decision(a, "data", Literal(v), o.total if o else 0, (), a, 8)
    for o in objects:
        if o.kind == "SymbolSymbol":
            ref, tgt = entry_target[o.addr]
            res.decisions[o.addr] = Decision(o.addr, "data", SymMinusSym(tgt, ref), o.total,
                                             ("jump_table_entry",), o.addr, o.size)
    code, exprs, ranges = symbolize_code(fb, layout, an, secs, config.code_weights, config.code_threshold)
    res.decisions.update(code)
    res.operand_exprs = exprs
    res.ext_ranges = ranges
    res.stats = {
        "decisions": len(res.decisions),
        "symbolic": sum(1 for d in res.decisions.values() if d.symbolic),
        "objects": len(objects),
        "jump_tables": len(tables),
    }
    log.info("symbolization: %s", res.stats)
    return res


# ---------------------------------------------------------------------------
# report


def write_report(path: str, fb: FactBase, res: SymbolizationResult) -> None:
    with open(path, "w") as f:
        f.write(format_report(fb, res))


def format_report(fb: FactBase, res: SymbolizationResult) -> str:
    lines = ["# addr\tcontext\tdecision\texpr\ttotal\theuristics"]
    for a in sorted(res.decisions):
        d = res.decisions[a]
        lines.append("0x%x\t%s\t%s\t%s\t%d\t%s" % (
            a, d.context, "symbolic" if d.symbolic else "literal", d.expr.render(), d.total,
            ",".join(d.heuristics) or "-"))
    by_ctx: dict = {}
    for d in res.decisions.values():
        k = by_ctx.setdefault(d.context, [0, 0])
        k[0] += 1
        k[1] += d.symbolic
    lines.append("## summary")
    lines.append("## source\t%s" % fb.metadata.get("source", ""))
    for s in sorted(fb.sections, key=lambda s: (s.start, s.name)):
        lines.append("## section\t%s\t0x%x\t%d" % (s.name, s.start, s.size))
    for ctx in sorted(by_ctx):
        lines.append("## %s\t%d\tsymbolic=%d" % (ctx, by_ctx[ctx][0], by_ctx[ctx][1]))
    lines.append("## jump_tables\t%d" % len(res.jump_tables))
    lines.append("## data_objects\t%d" % len(res.objects))
    return "\n".join(lines) + "\n"


@dataclass
class Report:
    decisions: dict
    sections: list  # (name, start, size)
    source: str = ""


def read_report(path: str) -> Report:
    decisions = {}
    sections = []
    source = ""
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("# "):
                continue
            if line.startswith("## "):
                parts = line[3:].split("\t")
                if parts[0] == "section":
                    sections.append((parts[1], int(parts[2], 16), int(parts[3])))
                elif parts[0] == "source":
                    source = parts[1] if len(parts) > 1 else ""
                continue
            parts = line.split("\t")
            if len(parts) < 5:
                raise ValueError("%s:%d: malformed report line" % (path, lineno))
            a = int(parts[0], 16)
            heur = tuple(h for h in parts[5].split(",") if h and h != "-") if len(parts) > 5 else ()
            decisions[a] = Decision(a, parts[1], parse_expr(parts[3]), int(parts[4]), heur, 0, 0)
    return Report(decisions, sections, source)
