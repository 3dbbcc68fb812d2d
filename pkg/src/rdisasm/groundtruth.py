"""Scoring a symbolization report against linker-emitted relocations.

The twin binary is the same link with static relocation sections kept.
Every relocation that lands in an emitted section marks a symbolic number;
everything else the report symbolized is a false positive.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from elftools.common.exceptions import ELFError
from elftools.elf.elffile import ELFFile
from elftools.elf.relocation import RelocationSection

from .symbolization import SymMinusSym, SymPlus, is_emitted_section

log = logging.getLogger(__name__)

# relocation type -> width of the patched field
TRUTH_TYPES = {
    1: 8,  # R_X86_64_64
    2: 4,  # R_X86_64_PC32
    4: 4,  # R_X86_64_PLT32
    9: 4,  # R_X86_64_GOTPCREL
    10: 4,  # R_X86_64_32
    11: 4,  # R_X86_64_32S
    24: 8,  # R_X86_64_PC64
    41: 4,  # R_X86_64_GOTPCRELX
    42: 4,  # R_X86_64_REX_GOTPCRELX
}
ABSOLUTE_TYPES = {1, 10, 11}
# contexts that are symbolic by construction and leave no relocation when
# the assembler resolves them locally
ALWAYS_SYMBOLIC = ("branch", "pcrel")


class GroundTruthMismatch(Exception):
    pass


@dataclass(frozen=True)
class TruthEntry:
    addr: int
    rtype: int
    symbol: str
    section: str | None  # section of the referenced symbol, None when undefined


@dataclass
class DiffResult:
    fp: int = 0
    fn: int = 0
    ws: int = 0
    rows: list = field(default_factory=list)  # (addr, class, context, expected, got)

    @property
    def clean(self) -> bool:
        return not (self.fp or self.fn or self.ws)

    def summary(self) -> str:
        return "FP=%d FN=%d WS=%d" % (self.fp, self.fn, self.ws)

    def table(self) -> str:
        lines = ["# addr\tclass\tcontext\texpected\tgot"]
        for a, cls, ctx, exp, got in self.rows:
            lines.append("0x%x\t%s\t%s\t%s\t%s" % (a, cls, ctx, exp, got))
        lines.append("## " + self.summary())
        return "\n".join(lines) + "\n"


def read_truth(path: str) -> tuple[list, list]:
    """(sections, truth entries) of a binary linked with ``--emit-relocs``."""
    try:
        with open(path, "rb") as f:
            elf = ELFFile(f)
            return _read_truth(elf)
    except ELFError as e:
        raise GroundTruthMismatch("%s: %s" % (path, e)) from None


def _read_truth(elf) -> tuple[list, list]:
    all_secs = list(elf.iter_sections())
    sections = [(s.name, s["sh_addr"], s["sh_size"]) for s in all_secs if s["sh_flags"] & 2]
    truth = []
    for rs in all_secs:
        if not isinstance(rs, RelocationSection) or rs["sh_flags"] & 2:
            continue
        target = all_secs[rs["sh_info"]] if rs["sh_info"] else None
        if target is None or not target["sh_flags"] & 2 or not is_emitted_section(target.name):
            continue
        symtab = elf.get_section(rs["sh_link"])
        for rel in rs.iter_relocations():
            rtype = rel["r_info_type"]
            if rtype not in TRUTH_TYPES:
                continue
            sym = symtab.get_symbol(rel["r_info_sym"])
            shndx = sym["st_shndx"]
            if shndx == "SHN_UNDEF":
                if rtype in ABSOLUTE_TYPES:
                    # weak undefined data references resolve to plain zero
                    continue
                sec = None
            elif isinstance(shndx, int):
                sec = all_secs[shndx].name
            else:
                sec = None
            name = sym.name or (sec or "")
            truth.append(TruthEntry(rel["r_offset"], rtype, name, sec))
    return sections, truth


def _equivalent_sections(sections) -> dict:
    """Names a section's label may legitimately use.

    An empty section's address is both the end of the section before it and
    the start of the section after it, so either neighbour is accepted.
    """
    alias = {n: {n} for n, _a, _s in sections}
    ends = {a + s: n for n, a, s in sections if s}
    starts = {a: n for n, a, s in sections if s}
    for n, a, s in sections:
        if s == 0:
            for other in (ends.get(a), starts.get(a)):
                if other:
                    alias[n].add(other)
    return alias


def diff_ground_truth(report, sections: list, truth: list) -> DiffResult:
    """Compare a report (see ``read_report``) with twin sections and relocations."""
    rep_secs = sorted((n, a, s) for n, a, s in report.sections)
    twin_secs = sorted(sections)
    if rep_secs and rep_secs != twin_secs:
        diffs = sorted(set(rep_secs) ^ set(twin_secs))
        raise GroundTruthMismatch("section layouts differ: %s" % ", ".join(
            "%s@0x%x+%d" % d for d in diffs[:6]))
    spans = [(a, a + s, n) for n, a, s in twin_secs if s]
    emitted = [(lo, hi) for lo, hi, n in spans if is_emitted_section(n)]

    def emitted_at(x):
        return any(lo <= x < hi for lo, hi in emitted)

    alias = _equivalent_sections(twin_secs)

    def section_of(expr):
        if isinstance(expr, SymPlus) and expr.section:
            return expr.section
        t = expr.target
        for lo, hi, n in spans:
            if lo <= t < hi:
                return n
        return None

    res = DiffResult()
    by_addr = {}
    for t in truth:
        if not any(lo <= t.addr < hi for lo, hi, _n in spans):
            raise GroundTruthMismatch("relocation at 0x%x is outside every section" % t.addr)
        by_addr[t.addr] = t
    for a in sorted(set(by_addr) | set(report.decisions)):
        if not emitted_at(a):
            continue
        d = report.decisions.get(a)
        t = by_addr.get(a)
        if t is None:
            if d is not None and d.symbolic and d.context not in ALWAYS_SYMBOLIC:
                res.fp += 1
                res.rows.append((a, "FP", d.context, "literal", d.expr.render()))
            continue
        if d is None or not d.symbolic:
            res.fn += 1
            res.rows.append((a, "FN", d.context if d else "-", t.symbol, d.expr.render() if d else "-"))
            continue
        if t.section is None or isinstance(d.expr, SymMinusSym):
            continue
        got = section_of(d.expr)
        if got is None or not alias.get(got, {got}) & alias.get(t.section, {t.section}):
            res.ws += 1
            res.rows.append((a, "WS", d.context, t.section, "%s (%s)" % (d.expr.render(), got)))
    return res
