"""Initial fact model and the on-disk ``.facts`` directory format.

Every relation is stored as ``<relation>.facts``: one row per line, columns
separated by tabs, address columns as lowercase ``0x`` hex, integer columns
as signed decimal and text columns verbatim.  Rows are sorted.
"""

from __future__ import annotations

import logging
import os
from typing import Iterable, Mapping

from .relfix import ADDR, INT, TEXT, SchemaError, check_row

log = logging.getLogger(__name__)

# name -> column kinds
SCHEMAS: dict[str, tuple] = {
    "instruction": (ADDR, INT, TEXT, TEXT, INT, INT, INT, INT),
    "op_regdirect": (INT, TEXT),
    "op_immediate": (INT, INT),
    "op_indirect": (INT, TEXT, TEXT, TEXT, INT, INT, INT),
    "operand_field": (ADDR, INT, INT, INT),
    "invalid": (ADDR,),
    "data_byte": (ADDR, INT),
    "address_in_data": (ADDR, ADDR),
    "section": (TEXT, ADDR, INT, INT, INT, INT),
    "symbol": (ADDR, TEXT, TEXT),
    "relocation": (ADDR, TEXT, TEXT, INT),
    "entry_point": (ADDR,),
    "extra_target": (ADDR,),
    "metadata": (TEXT, TEXT),
}

ACCESS_SIZES = frozenset({1, 2, 4, 8, 10, 16})

_GPR = [
    ("RAX", "EAX", "AX", "AL"), ("RBX", "EBX", "BX", "BL"),
    ("RCX", "ECX", "CX", "CL"), ("RDX", "EDX", "DX", "DL"),
    ("RSI", "ESI", "SI", "SIL"), ("RDI", "EDI", "DI", "DIL"),
    ("RBP", "EBP", "BP", "BPL"), ("RSP", "ESP", "SP", "SPL"),
] + [("R%d" % i, "R%dD" % i, "R%dW" % i, "R%dB" % i) for i in range(8, 16)]

# register name -> (canonical 64-bit name, width in bytes)
REGISTERS: dict[str, tuple[str, int]] = {}
for _names in _GPR:
    for _name, _width in zip(_names, (8, 4, 2, 1)):
        REGISTERS[_name] = (_names[0], _width)
for _high, _full in (("AH", "RAX"), ("BH", "RBX"), ("CH", "RCX"), ("DH", "RDX")):
    REGISTERS[_high] = (_full, 1)
REGISTERS["RIP"] = ("RIP", 8)
for _seg in ("ES", "CS", "SS", "DS", "FS", "GS"):
    REGISTERS[_seg] = (_seg, 2)

GPR64 = tuple(n[0] for n in _GPR)
RESERVED_REGS = ("NONE", "Unknown")


def canonical(reg: str) -> str:
    """64-bit name for any general purpose register alias."""
    return REGISTERS[reg][0]


def reg_width(reg: str) -> int:
    return REGISTERS[reg][1]


class ParseError(Exception):
    def __init__(self, path, line, reason):
        self.path = path
        self.line = line
        self.reason = reason
        super().__init__("%s:%d: %s" % (path, line, reason))


class IntegrityError(Exception):
    pass


def format_value(kind: str, v) -> str:
    if kind == ADDR:
        return "0x%x" % v
    if kind == INT:
        return str(v)
    if "\t" in v or "\n" in v:
        raise SchemaError("text value %r contains a tab or newline" % v)
    return v


def parse_value(kind: str, s: str):
    if kind == TEXT:
        return s
    if kind == ADDR:
        if not s.startswith("0x"):
            raise ValueError("address %r lacks 0x prefix" % s)
        return int(s, 16)
    return int(s, 10)


def write_relation_file(path: str, schema: tuple, rows: Iterable[tuple]) -> None:
    lines = ["\t".join(format_value(k, v) for k, v in zip(schema, row)) for row in sorted(rows)]
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for line in lines:
                f.write(line)
                f.write("\n")
    except OSError as e:
        raise OSError("cannot write %s: %s" % (path, e)) from e


def read_relation_file(path: str, schema: tuple) -> set:
    rows = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line and len(schema) == 1 and schema[0] != TEXT:
                continue
            parts = line.split("\t")
            if len(parts) != len(schema):
                raise ParseError(path, lineno, "expected %d columns, found %d" % (len(schema), len(parts)))
            try:
                row = tuple(parse_value(k, p) for k, p in zip(schema, parts))
            except ValueError as e:
                raise ParseError(path, lineno, str(e)) from None
            rows.add(row)
    return rows


class FactBase:
    """Immutable bundle of the initial relations."""

    def __init__(self, relations: Mapping[str, Iterable[tuple]] | None = None):
        relations = relations or {}
        unknown = set(relations) - set(SCHEMAS)
        if unknown:
            raise SchemaError("unknown relations: %s" % ", ".join(sorted(unknown)))
        self._rel = {}
        for name, schema in SCHEMAS.items():
            rows = frozenset(tuple(r) for r in relations.get(name, ()))
            self._rel[name] = rows
        self._cache: dict = {}

    def __getitem__(self, name) -> frozenset:
        return self._rel[name]

    def __eq__(self, other):
        return isinstance(other, FactBase) and self._rel == other._rel

    def __hash__(self):
        return hash(tuple(sorted((k, len(v)) for k, v in self._rel.items())))

    def relations(self) -> dict:
        return dict(self._rel)

    def replace(self, **changes) -> "FactBase":
        rel = dict(self._rel)
        rel.update(changes)
        return FactBase(rel)

    # -- convenience views --------------------------------------------------------

    @property
    def sections(self) -> list["Section"]:
        if "sections" not in self._cache:
            self._cache["sections"] = sorted(
                (Section(*row) for row in self._rel["section"]), key=lambda s: (s.start, s.name))
        return self._cache["sections"]

    def section_named(self, name: str) -> "Section | None":
        for s in self.sections:
            if s.name == name:
                return s
        return None

    def section_of(self, addr: int) -> "Section | None":
        for s in self.sections:
            if s.start <= addr < s.end:
                return s
        return None

    def section_ending_at(self, addr: int) -> "Section | None":
        found = None
        for s in self.sections:
            if s.end == addr:
                found = s
        return found

    @property
    def instructions(self) -> dict:
        if "insn" not in self._cache:
            self._cache["insn"] = {row[0]: row for row in self._rel["instruction"]}
        return self._cache["insn"]

    @property
    def operands(self) -> dict:
        """operand id -> ('reg', name) | ('imm', value) | ('mem', seg, base, index, mult, disp, size)"""
        if "ops" not in self._cache:
            ops = {}
            for op, reg in self._rel["op_regdirect"]:
                ops[op] = ("reg", reg)
            for op, imm in self._rel["op_immediate"]:
                ops[op] = ("imm", imm)
            for op, seg, base, index, mult, disp, size in self._rel["op_indirect"]:
                ops[op] = ("mem", seg, base, index, mult, disp, size)
            self._cache["ops"] = ops
        return self._cache["ops"]

    @property
    def data_bytes(self) -> dict:
        if "bytes" not in self._cache:
            self._cache["bytes"] = dict(self._rel["data_byte"])
        return self._cache["bytes"]

    @property
    def operand_fields(self) -> dict:
        if "fields" not in self._cache:
            self._cache["fields"] = {(a, i): (off, w) for a, i, off, w in self._rel["operand_field"]}
        return self._cache["fields"]

    def insn_operands(self, addr: int) -> list:
        """Operands of the instruction at ``addr`` in fact order (sources first)."""
        row = self.instructions[addr]
        ops = self.operands
        return [ops[o] for o in row[4:] if o]

    def read_bytes(self, addr: int, n: int) -> bytes | None:
        db = self.data_bytes
        out = bytearray()
        for a in range(addr, addr + n):
            v = db.get(a)
            if v is None:
                return None
            out.append(v)
        return bytes(out)

    @property
    def metadata(self) -> dict:
        return dict(self._rel["metadata"])


class Section:
    __slots__ = ("name", "start", "size", "executable", "writable", "initialized")

    def __init__(self, name, start, size, executable, writable, initialized):
        self.name = name
        self.start = start
        self.size = size
        self.executable = bool(executable)
        self.writable = bool(writable)
        self.initialized = bool(initialized)

    @property
    def end(self) -> int:
        return self.start + self.size

    def __contains__(self, addr) -> bool:
        return self.start <= addr < self.end

    def __repr__(self):
        return "Section(%s, 0x%x-0x%x)" % (self.name, self.start, self.end)


def in_any_section(sections, value: int) -> bool:
    return any(s.start <= value < s.end for s in sections)


def scan_address_in_data(sections, data_bytes: Mapping[int, int]) -> set:
    """Every 8-byte little-endian window that decodes to an address inside a section."""
    out = set()
    ranges = sorted((s.start, s.end) for s in sections if s.size)
    for s in sections:
        if not s.initialized:
            continue
        for a in range(s.start, s.end - 7):
            window = [data_bytes.get(a + i) for i in range(8)]
            if None in window:
                continue
            v = int.from_bytes(bytes(window), "little")
            for lo, hi in ranges:
                if lo <= v < hi:
                    out.add((a, v))
                    break
    return out


def load_facts(directory: str) -> FactBase:
    rels = {}
    if not os.path.isdir(directory):
        raise ParseError(directory, 0, "not a directory")
    for name, schema in SCHEMAS.items():
        path = os.path.join(directory, name + ".facts")
        if os.path.exists(path):
            try:
                rels[name] = read_relation_file(path, schema)
            except SchemaError as e:
                raise ParseError(path, 0, str(e)) from None
    fb = FactBase(rels)
    problems = validate(fb)
    if problems:
        raise IntegrityError("; ".join(problems[:10]))
    return fb


def dump_facts(fb: FactBase, directory: str, skip_empty: bool = False) -> None:
    os.makedirs(directory, exist_ok=True)
    for name, schema in SCHEMAS.items():
        rows = fb[name]
        if skip_empty and not rows:
            continue
        write_relation_file(os.path.join(directory, name + ".facts"), schema, rows)


def validate(fb: FactBase) -> list[str]:
    problems: list[str] = []
    for name, schema in SCHEMAS.items():
        from .relfix import Relation

        rel = Relation(name, schema)
        for row in fb[name]:
            try:
                check_row(rel, row)
            except SchemaError as e:
                problems.append(str(e))
    if problems:
        return problems

    # operands
    ids: dict[int, str] = {}
    for kind in ("op_regdirect", "op_immediate", "op_indirect"):
        for row in fb[kind]:
            op = row[0]
            if op == 0:
                problems.append("%s: operand id 0 is reserved" % kind)
            if op in ids:
                problems.append("operand id %d defined by %s and %s" % (op, ids[op], kind))
            ids[op] = kind
    for row in fb["op_regdirect"]:
        if row[1] not in REGISTERS:
            problems.append("operand %d: unknown register %r" % row)
    for op, seg, base, index, mult, disp, size in fb["op_indirect"]:
        for r in (seg, base, index):
            if r != "NONE" and r not in REGISTERS:
                problems.append("operand %d: unknown register %r" % (op, r))
        if size not in ACCESS_SIZES and size != 0:
            problems.append("operand %d: access size %d" % (op, size))
    seen_addr = set()
    for row in fb["instruction"]:
        a = row[0]
        if a in seen_addr:
            problems.append("two instruction facts at 0x%x" % a)
        seen_addr.add(a)
        if row[1] < 1:
            problems.append("instruction at 0x%x has size %d" % (a, row[1]))
        for op in row[4:]:
            if op and op not in ids:
                problems.append("instruction at 0x%x references missing operand %d" % (a, op))
    for (a,) in fb["invalid"]:
        if a in seen_addr:
            problems.append("0x%x is both instruction and invalid" % a)

    # sections
    secs = fb.sections
    for i, s in enumerate(secs):
        for t in secs[i + 1:]:
            if s.size and t.size and s.start < t.end and t.start < s.end:
                problems.append("sections %s and %s overlap" % (s.name, t.name))
    for a, v in fb["address_in_data"]:
        if not in_any_section(secs, v):
            problems.append("address_in_data(0x%x, 0x%x): value outside all sections" % (a, v))
        else:
            raw = fb.read_bytes(a, 8)
            if raw is not None and int.from_bytes(raw, "little") != v:
                problems.append("address_in_data(0x%x, 0x%x) disagrees with data bytes" % (a, v))
    exec_secs = [s for s in secs if s.executable]
    for (a,) in fb["entry_point"]:
        if not any(a in s for s in exec_secs):
            problems.append("entry point 0x%x not in an executable section" % a)
    for (a,) in fb["extra_target"]:
        if not any(a in s for s in exec_secs):
            problems.append("extra target 0x%x not in an executable section" % a)
    return problems
