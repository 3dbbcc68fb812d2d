"""Reassembleable assembly printing, label assignment and the stretch transform.

The printer walks every emitted section in address order.  Code comes out as
Intel-syntax instructions (GNU ``.intel_syntax noprefix``), data as directives
chosen from the resolved data objects.  Labels are named ``.L_<HEXADDR>`` and
only defined when some symbolic expression refers to them.
"""

from __future__ import annotations

import bisect
import json
import logging
import os
import shutil
import subprocess
from dataclasses import asdict, dataclass, field

from . import x64
from .facts import FactBase
from .symbolization import SymMinusSym, SymPlus, is_emitted_section

log = logging.getLogger(__name__)

PTR_NAMES = {1: "BYTE", 2: "WORD", 4: "DWORD", 8: "QWORD", 10: "TBYTE", 16: "XMMWORD"}
DATA_DIRECTIVES = {1: ".byte", 2: ".short", 4: ".long", 8: ".quad"}
ARRAY_SECTIONS = (".init_array", ".fini_array", ".preinit_array")
STRETCH_EVERY = 8
STRETCH_NOPS = 8
STRETCH_DATA_PAD = 64
MAX_SECTION_ALIGN = 64
ZERO_RUN = 8  # zero runs at least this long print as .zero


class UnresolvedLabel(Exception):
    def __init__(self, addr, detail=""):
        super().__init__("no label can be defined for 0x%x%s" % (addr, ": " + detail if detail else ""))
        self.addr = addr


def label_name(addr: int) -> str:
    return ".L_%X" % addr


@dataclass
class Item:
    kind: str  # label | insn | data | zero | set
    text: str
    addr: int | None = None
    size: int = 0
    exprs: list = field(default_factory=list)  # rendered symbolic expressions
    block_start: bool = False


@dataclass
class AsmSection:
    name: str
    header: str
    kind: str  # code | data | bss
    align: int
    items: list = field(default_factory=list)


@dataclass
class AsmProgram:
    sections: list = field(default_factory=list)
    absolute: list = field(default_factory=list)  # (name, value) for targets outside emitted sections
    entry: str = "_start"
    table_spans: list = field(default_factory=list)  # code ranges that must not grow
    libraries: list = field(default_factory=list)
    original_sections: list = field(default_factory=list)  # (name, addr, size)
    warnings: list = field(default_factory=list)

    def render(self) -> str:
        out = [".intel_syntax noprefix"]
        if any(it.kind == "label" and it.text == self.entry for it in self.items()):
            out.append(".globl %s" % self.entry)
        for name, value in self.absolute:
            out.append(".set %s, 0x%x" % (name, value))
        for sec in self.sections:
            out.append("")
            out.append(sec.header)
            if sec.align > 1:
                out.append(".p2align %d" % (sec.align.bit_length() - 1))
            for it in sec.items:
                if it.kind == "label":
                    out.append(it.text + ":")
                else:
                    out.append("  " + it.text)
        out.append("")
        out.append('.section .note.GNU-stack,"",@progbits')
        return "\n".join(out) + "\n"

    def items(self):
        for sec in self.sections:
            yield from sec.items

    def defined_labels(self) -> list:
        names = [it.text for it in self.items() if it.kind == "label"]
        names += [it.text.split(",")[0].split()[1] for it in self.items() if it.kind == "set"]
        names += [n for n, _v in self.absolute]
        return names

    def referenced_labels(self) -> set:
        refs = set()
        for it in self.items():
            for e in it.exprs:
                refs.update(_label_tokens(e))
            if it.kind == "set":
                refs.update(_label_tokens(it.text.split(",", 1)[1]))
        return refs

    def expr_multiset(self) -> list:
        return sorted(e for it in self.items() for e in it.exprs)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AsmProgram":
        d = json.loads(text)
        secs = []
        for s in d.pop("sections"):
            items = [Item(**it) for it in s.pop("items")]
            secs.append(AsmSection(items=items, **s))
        prog = cls(sections=secs, **d)
        prog.absolute = [tuple(x) for x in prog.absolute]
        prog.table_spans = [tuple(x) for x in prog.table_spans]
        prog.original_sections = [tuple(x) for x in prog.original_sections]
        return prog


def _label_tokens(text: str):
    for tok in text.replace("+", " ").replace("-", " ").replace(",", " ").split():
        if tok.startswith(".L_"):
            yield tok


# ---------------------------------------------------------------------------
# external names: PLT stubs, GOT slots and copied objects


class ExternalNames:
    def __init__(self, fb: FactBase):
        self.plt: dict = {}
        self.got: dict = {}
        self.copy: dict = {}
        slots = {}
        for addr, rtype, name, _addend in fb["relocation"]:
            if not name:
                continue
            if rtype == "R_X86_64_JUMP_SLOT":
                slots[addr] = name
            elif rtype == "R_X86_64_GLOB_DAT":
                self.got[addr] = name
                slots.setdefault(addr, name)
            elif rtype == "R_X86_64_COPY":
                self.copy[addr] = name
        insns = fb.instructions
        for s in fb.sections:
            if not (s.executable and s.name.startswith(".plt")):
                continue
            for a in range(s.start, s.end):
                row = insns.get(a)
                if row is None or row[3] != "jmp":
                    continue
                ops = fb.insn_operands(a)
                if len(ops) != 1 or ops[0][0] != "mem" or ops[0][2] != "RIP":
                    continue
                name = slots.get(ops[0][5])
                if name is None:
                    continue
                self.plt.setdefault(a, name)
                prev = insns.get(a - 4)
                if prev is not None and prev[3] == "endbr64":
                    self.plt.setdefault(a - 4, name)


# ---------------------------------------------------------------------------
# printer


class _Printer:
    def __init__(self, fb: FactBase, layout, sym):
        self.fb = fb
        self.layout = layout
        self.sym = sym
        self.ext = ExternalNames(fb)
        self.sections = sorted((s for s in fb.sections if s.size), key=lambda s: s.start)
        self.emitted = [s for s in self.sections if is_emitted_section(s.name)]
        self.targets: dict = {}  # addr -> name of the section it ends, or None
        self.warnings: list = []

    # -- expressions ---------------------------------------------------------

    def _want(self, expr) -> None:
        if isinstance(expr, SymMinusSym):
            self.targets.setdefault(expr.target, None)
            self.targets.setdefault(expr.reference, None)
        elif expr.section:
            self.targets[expr.target] = expr.section
        else:
            self.targets.setdefault(expr.target, None)

    def expr_text(self, expr, context: str) -> str:
        if isinstance(expr, SymMinusSym):
            self._want(expr)
            return "%s-%s" % (label_name(expr.target), label_name(expr.reference))
        off = "%+d" % expr.offset if expr.offset else ""
        t = expr.target
        if t in self.ext.plt:
            if context == "branch" and not expr.offset:
                return self.ext.plt[t] + "@PLT"
            return self.ext.plt[t] + off
        if t in self.ext.got and context == "pcrel" and not expr.offset:
            return self.ext.got[t] + "@GOTPCREL"
        if t in self.ext.copy:
            return self.ext.copy[t] + off
        self._want(expr)
        return label_name(t) + off

    # -- instructions --------------------------------------------------------

    def render_insn(self, a: int) -> tuple[str, list]:
        fb = self.fb
        row = fb.instructions[a]
        prefix, opcode = row[2], row[3]
        ops = fb.insn_operands(a)
        if opcode == "nop" and ops:
            raw = fb.read_bytes(a, row[1])
            return ".byte " + ",".join("0x%02x" % b for b in raw), []
        exprs = self.sym.operand_exprs
        branch = opcode in x64.JUMP_OPS or opcode in x64.CALL_OPS
        rendered = []
        used = []
        for pos in range(len(ops), 0, -1):
            op = ops[pos - 1]
            e = exprs.get((a, pos))
            if op[0] == "reg":
                rendered.append(op[1])
            elif op[0] == "imm":
                if e is not None:
                    ctx = "branch" if branch and pos == 1 else "immediate"
                    txt = self.expr_text(e, ctx)
                    used.append(txt)
                    rendered.append(txt if ctx == "branch" else "OFFSET " + txt)
                elif branch and pos == 1:
                    raise UnresolvedLabel(op[1], "branch at 0x%x has no symbolic target" % a)
                else:
                    rendered.append(_num(op[1]))
            else:
                txt, sub = self._mem(a, opcode, op, e)
                used += sub
                rendered.append(txt)
        text = opcode
        if prefix:
            text = prefix + " " + text
        if rendered:
            text += " " + ",".join(rendered)
        return text, used

    def _mem(self, a, opcode, op, e):
        _m, seg, base, index, scale, disp, size = op
        parts = []
        if base != "NONE":
            parts.append(base)
        if index != "NONE":
            parts.append("%s*%d" % (index, scale))
        used = []
        if e is not None:
            txt = self.expr_text(e, "pcrel" if base == "RIP" else "displacement")
            used.append(txt)
            inner = "+".join(parts + [txt])
        elif base == "RIP":
            raise UnresolvedLabel(disp, "RIP-relative operand at 0x%x has no symbolic target" % a)
        elif not parts:
            inner = _num(disp)
        else:
            inner = "+".join(parts)
            if disp:
                inner += ("+" if disp > 0 else "-") + "0x%x" % abs(disp)
        mem = "[%s]" % inner
        if seg != "NONE":
            mem = "%s:%s" % (seg, mem)
        if opcode != "lea" and size in PTR_NAMES:
            mem = "%s PTR %s" % (PTR_NAMES[size], mem)
        return mem, used

    # -- sections ------------------------------------------------------------

    def build(self) -> AsmProgram:
        sym = self.sym
        self.data_exprs = {}
        for d in sym.decisions.values():
            if d.context == "data" and d.symbolic:
                self.data_exprs[d.addr] = d
        self.strings = {o.addr: o for o in sym.objects if o.kind == "String"}
        self._object_starts = sorted(set(self.data_exprs) | set(self.strings))
        # first pass registers every target; the second lays out labels
        for _ in range(2):
            self._target_list = sorted(self.targets)
            secs = [self._section(s) for s in self.emitted]
        prog = AsmProgram(sections=secs)
        self._place_labels(prog)
        entries = sorted(a for (a,) in self.fb["entry_point"])
        if entries:
            self._mark_entry(prog, entries[0])
        for t in sym.jump_tables:
            if t.entries:
                tg = [x for _e, x in t.entries]
                prog.table_spans.append((min(tg + [t.reference]), max(tg)))
        needed = self.fb.metadata.get("needed", "")
        prog.libraries = [n for n in needed.split(",") if n]
        prog.original_sections = [(s.name, s.start, s.size) for s in self.emitted]
        prog.warnings = self.warnings
        return prog

    def _section(self, s) -> AsmSection:
        flags = "a" + ("w" if s.writable else "") + ("x" if s.executable else "")
        if not s.initialized:
            typ, kind = "@nobits", "bss"
        elif s.name in ARRAY_SECTIONS:
            typ, kind = "@" + s.name[1:], "data"
        else:
            typ, kind = "@progbits", "code" if s.executable else "data"
        header = '.section %s,"%s",%s' % (s.name, flags, typ)
        align = min(MAX_SECTION_ALIGN, s.start & -s.start) if s.start else MAX_SECTION_ALIGN
        sec = AsmSection(s.name, header, kind, align)
        if kind == "bss":
            self._zeros(sec.items, s.start, s.end)
        elif kind == "data":
            self._data(sec.items, s.start, s.end)
        else:
            self._code(sec.items, s)
        return sec

    def _next_target(self, lo, hi):
        i = bisect.bisect_right(self._target_list, lo)
        if i < len(self._target_list) and self._target_list[i] < hi:
            return self._target_list[i]
        return hi

    def _zeros(self, items, lo, hi):
        p = lo
        while p < hi:
            q = self._next_target(p, hi)
            items.append(Item("zero", ".zero %d" % (q - p), p, q - p))
            p = q

    def _code(self, items, s):
        lay = self.layout
        starts = sorted([(b, "block") for b in lay.blocks if s.start <= b < s.end]
                        + [(lo, "data") for lo, hi in lay.data_regions if s.start <= lo < s.end])
        regions = dict(lay.data_regions)
        p = s.start
        for start, what in starts:
            if start < p:
                continue
            if start > p:
                self._data(items, p, start)
            if what == "data":
                p = regions[start]
                self._data(items, start, p)
                continue
            first = True
            for a in lay.blocks[start]:
                text, used = self.render_insn(a)
                size = self.fb.instructions[a][1]
                items.append(Item("insn", text, a, size, used, first))
                first = False
            p = lay.block_end[start]
        if p < s.end:
            self._data(items, p, s.end)

    def _data(self, items, lo, hi):
        fb = self.fb
        p = lo
        while p < hi:
            d = self.data_exprs.get(p)
            if d is not None and p + d.size <= hi:
                txt = self.expr_text(d.expr, "data")
                items.append(Item("data", "%s %s" % (DATA_DIRECTIVES[d.size], txt), p, d.size, [txt]))
                p += d.size
                continue
            so = self.strings.get(p)
            if so is not None and p + so.size <= hi:
                end = p + so.size
                while p < end:
                    q = self._next_target(p, end)
                    raw = fb.read_bytes(p, q - p)
                    if q == end:
                        items.append(Item("data", ".string %s" % _quote(raw[:-1]), p, q - p))
                    else:
                        items.append(Item("data", ".ascii %s" % _quote(raw), p, q - p))
                    p = q
                continue
            q = min(self._next_target(p, hi), self._next_object(p, hi))
            self._bytes(items, p, q)
            p = q

    def _next_object(self, lo, hi):
        i = bisect.bisect_right(self._object_starts, lo)
        if i < len(self._object_starts) and self._object_starts[i] < hi:
            return self._object_starts[i]
        return hi

    def _bytes(self, items, lo, hi):
        raw = self.fb.read_bytes(lo, hi - lo)
        if raw is None:
            raise UnresolvedLabel(lo, "no bytes for [0x%x, 0x%x)" % (lo, hi))
        i = 0
        while i < len(raw):
            j = i
            while j < len(raw) and raw[j] == 0:
                j += 1
            if j - i >= ZERO_RUN:
                items.append(Item("data", ".zero %d" % (j - i), lo + i, j - i))
                i = j
                continue
            j = i
            while j < len(raw) and j - i < 16:
                if raw[j] == 0 and raw[j:j + ZERO_RUN] == bytes(ZERO_RUN) and j + ZERO_RUN <= len(raw):
                    break
                j += 1
            j = max(j, i + 1)
            items.append(Item("data", ".byte " + ",".join("0x%02x" % b for b in raw[i:j]), lo + i, j - i))
            i = j

    # -- labels ----------------------------------------------------------------

    def _place_labels(self, prog: AsmProgram) -> None:
        sec_by_name = {s.name: s for s in self.emitted}
        asm_by_name = {s.name: s for s in prog.sections}
        starts = {}
        atoms = []
        for sec in prog.sections:
            for i, it in enumerate(sec.items):
                if it.addr is not None and it.size:
                    starts.setdefault(it.addr, (sec, i))
                    atoms.append((it.addr, it.addr + it.size, sec, i))
        atoms.sort(key=lambda x: (x[0], x[1]))
        atom_starts = [x[0] for x in atoms]
        before: dict = {}  # (section name, item index) -> names/sets to insert before
        at_end: dict = {}
        for t, end_of in sorted(self.targets.items()):
            name = label_name(t)
            if end_of is not None:
                if end_of in asm_by_name and sec_by_name[end_of].end == t:
                    at_end.setdefault(end_of, []).append(Item("label", name, t))
                    continue
                self._absolute(prog, name, t, "end of non-emitted section %s" % end_of)
                continue
            if t in starts:
                sec, i = starts[t]
                before.setdefault((sec.name, i), []).append(Item("label", name, t))
                continue
            k = bisect.bisect_right(atom_starts, t) - 1
            if k >= 0 and atoms[k][0] < t < atoms[k][1]:
                a0, _a1, sec, i = atoms[k]
                base = label_name(a0)
                lst = before.setdefault((sec.name, i), [])
                if not any(x.kind == "label" and x.text == base for x in lst):
                    lst.insert(0, Item("label", base, a0))
                lst.append(Item("set", ".set %s, %s+%d" % (name, base, t - a0), t))
                continue
            owner = next((s for s in self.sections if s.start <= t < s.end), None)
            if owner is None:
                owner = next((s for s in self.sections if s.end == t), None)
            if owner is None:
                raise UnresolvedLabel(t, "outside every section")
            self._absolute(prog, name, t, "inside non-emitted section %s" % owner.name)
        for sec in prog.sections:
            new = []
            for i, it in enumerate(sec.items):
                extra = before.get((sec.name, i), [])
                new += [x for x in extra if x.kind == "label"]
                new += [x for x in extra if x.kind == "set"]
                new.append(it)
            new += at_end.get(sec.name, [])
            sec.items = new
        refs = prog.referenced_labels()
        defined = prog.defined_labels()
        dup = {n for n in defined if defined.count(n) > 1}
        if dup:
            raise UnresolvedLabel(int(sorted(dup)[0][3:], 16), "label defined twice")
        missing = refs - set(defined)
        if missing:
            raise UnresolvedLabel(int(sorted(missing)[0][3:], 16), "referenced but never defined")

    def _absolute(self, prog, name, value, why):
        prog.absolute.append((name, value))
        msg = "label %s at 0x%x is absolute (%s)" % (name, value, why)
        self.warnings.append(msg)
        log.warning(msg)

    def _mark_entry(self, prog: AsmProgram, entry: int) -> None:
        for sec in prog.sections:
            for i, it in enumerate(sec.items):
                if it.kind == "insn" and it.addr == entry:
                    j = i
                    while j > 0 and sec.items[j - 1].kind in ("label", "set"):
                        j -= 1
                    sec.items[j:j] = [Item("label", prog.entry, entry)]
                    return
        self.warnings.append("entry point 0x%x is not an emitted instruction" % entry)


def _num(v: int) -> str:
    return "0x%x" % v if v >= 0 else "-0x%x" % -v


def _quote(raw: bytes) -> str:
    out = ['"']
    for b in raw:
        if b == 0x22:
            out.append('\\"')
        elif b == 0x5C:
            out.append("\\\\")
        elif 0x20 <= b < 0x7F:
            out.append(chr(b))
        else:
            out.append("\\%03o" % b)
    out.append('"')
    return "".join(out)


def print_asm(fb: FactBase, layout, sym) -> AsmProgram:
    """Build the assembly program for a finished symbolization."""
    prog = _Printer(fb, layout, sym).build()
    log.info("emit: %d sections, %d items, %d absolute labels", len(prog.sections),
             sum(len(s.items) for s in prog.sections), len(prog.absolute))
    return prog


# ---------------------------------------------------------------------------
# stretch


def _in_spans(a, spans) -> bool:
    return any(lo <= a < hi for lo, hi in spans)


def stretch(prog: AsmProgram) -> AsmProgram:
    """Copy of ``prog`` with NOP groups in code and zero padding in front of data."""
    out = AsmProgram.from_json(prog.to_json())
    for sec in out.sections:
        if sec.kind == "code":
            new = []
            count = 0
            for it in sec.items:
                if it.kind == "insn" and it.block_start:
                    count = 0
                new.append(it)
                if it.kind != "insn":
                    continue
                count += 1
                if count % STRETCH_EVERY == 0 and not _in_spans(it.addr, out.table_spans):
                    new += [Item("insn", "nop") for _ in range(STRETCH_NOPS)]
            sec.items = new
        elif sec.name not in ARRAY_SECTIONS:
            sec.items.insert(0, Item("zero", ".zero %d" % STRETCH_DATA_PAD, None, 0))
    return out


# ---------------------------------------------------------------------------
# linking


def link_recipe(prog: AsmProgram) -> dict:
    libs = []
    for name in prog.libraries:
        if name.startswith("libc.so"):
            continue
        libs.append("-l:" + name)
    return {
        "entry": prog.entry,
        "libraries": list(prog.libraries),
        "original_sections": [{"name": n, "addr": "0x%x" % a, "size": s} for n, a, s in prog.original_sections],
        "command": ["gcc", "-nostartfiles", "-no-pie", "-o", "{output}", "{asm}"] + libs,
    }


def write_outputs(prog: AsmProgram, asm_path: str, db_path: str | None = None) -> None:
    with open(asm_path, "w") as f:
        f.write(prog.render())
    with open(asm_path + ".link.json", "w") as f:
        json.dump(link_recipe(prog), f, indent=1)
    if db_path:
        with open(db_path, "w") as f:
            f.write(prog.to_json())


def assemble_and_link(asm_path: str, output: str, recipe: dict, cc: str | None = None) -> subprocess.CompletedProcess:
    cmd = [c.format(output=output, asm=asm_path) for c in recipe["command"]]
    if cc:
        cmd[0] = cc
    if shutil.which(cmd[0]) is None:
        raise FileNotFoundError(cmd[0])
    log.info("link: %s", " ".join(cmd))
    return subprocess.run(cmd, capture_output=True, text=True, cwd=os.path.dirname(os.path.abspath(asm_path)))
