"""ELF64 loading and exhaustive decoding into a FactBase."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

from elftools.common.exceptions import ELFError
from elftools.elf.constants import SH_FLAGS
from elftools.elf.dynamic import DynamicSection
from elftools.elf.elffile import ELFFile
from elftools.elf.relocation import RelocationSection
from elftools.elf.sections import SymbolTableSection

from . import x64
from .facts import FactBase, scan_address_in_data

log = logging.getLogger(__name__)


class FrontendError(Exception):
    pass


class NotElf(FrontendError):
    pass


class UnsupportedClass(FrontendError):
    pass


class MalformedHeader(FrontendError):
    pass


@dataclass
class ImageSection:
    name: str
    addr: int
    size: int
    executable: bool
    writable: bool
    initialized: bool
    data: bytes = b""


@dataclass
class BinaryImage:
    path: str
    kind: str  # "executable" | "shared object"
    entry: int
    sections: list = field(default_factory=list)
    symbols: list = field(default_factory=list)  # (addr, name, kind)
    relocations: list = field(default_factory=list)  # (addr, type, symbol, addend)
    exported: list = field(default_factory=list)
    needed: list = field(default_factory=list)  # DT_NEEDED library names


_RELOC_NAMES = {
    0: "R_X86_64_NONE", 1: "R_X86_64_64", 2: "R_X86_64_PC32", 3: "R_X86_64_GOT32",
    4: "R_X86_64_PLT32", 5: "R_X86_64_COPY", 6: "R_X86_64_GLOB_DAT", 7: "R_X86_64_JUMP_SLOT",
    8: "R_X86_64_RELATIVE", 9: "R_X86_64_GOTPCREL", 10: "R_X86_64_32", 11: "R_X86_64_32S",
    12: "R_X86_64_16", 13: "R_X86_64_PC16", 14: "R_X86_64_8", 15: "R_X86_64_PC8",
    24: "R_X86_64_PC64", 26: "R_X86_64_GOTPC32", 37: "R_X86_64_IRELATIVE",
    41: "R_X86_64_GOTPCRELX", 42: "R_X86_64_REX_GOTPCRELX",
}


def load_binary(path: str) -> BinaryImage:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as f:
        magic = f.read(16)
        if magic[:4] != b"\x7fELF":
            raise NotElf("%s is not an ELF file" % path)
        if magic[4] != 2:
            raise UnsupportedClass("%s: only ELF64 is supported" % path)
        if magic[5] != 1:
            raise UnsupportedClass("%s: only little-endian ELF is supported" % path)
        f.seek(0)
        try:
            elf = ELFFile(f)
            return _read_image(path, elf)
        except ELFError as e:
            raise MalformedHeader("%s: %s" % (path, e)) from None
        except (ValueError, KeyError, AssertionError) as e:
            raise MalformedHeader("%s: %s" % (path, e)) from None


def _read_image(path: str, elf: ELFFile) -> BinaryImage:
    if elf["e_machine"] != "EM_X86_64":
        raise UnsupportedClass("%s: machine %s is not x86-64" % (path, elf["e_machine"]))
    etype = elf["e_type"]
    kind = "shared object" if etype == "ET_DYN" else "executable"
    img = BinaryImage(path, kind, elf["e_entry"])
    by_index = {}
    for idx, sec in enumerate(elf.iter_sections()):
        flags = sec["sh_flags"]
        if not flags & SH_FLAGS.SHF_ALLOC:
            continue
        init = sec["sh_type"] != "SHT_NOBITS"
        data = sec.data() if init else b""
        if init and len(data) != sec["sh_size"]:
            raise MalformedHeader("section %s: %d bytes, header says %d"
                                  % (sec.name, len(data), sec["sh_size"]))
        s = ImageSection(sec.name, sec["sh_addr"], sec["sh_size"],
                         bool(flags & SH_FLAGS.SHF_EXECINSTR), bool(flags & SH_FLAGS.SHF_WRITE),
                         init, data)
        img.sections.append(s)
        by_index[idx] = s
    spans = sorted((s.addr, s.addr + s.size, s.name) for s in img.sections if s.size)
    for (a0, a1, n0), (b0, b1, n1) in zip(spans, spans[1:]):
        if b0 < a1:
            raise MalformedHeader("sections %s and %s overlap" % (n0, n1))

    section_names = {i: s.name for i, s in enumerate(elf.iter_sections())}
    for sec in elf.iter_sections():
        if isinstance(sec, SymbolTableSection) and sec.name == ".symtab":
            for sym in sec.iter_symbols():
                if not sym.name or sym["st_shndx"] in ("SHN_UNDEF", "SHN_ABS"):
                    continue
                stype = sym["st_info"]["type"]
                if stype in ("STT_FILE", "STT_SECTION"):
                    continue
                img.symbols.append((sym["st_value"], sym.name, stype[4:]))
        if isinstance(sec, SymbolTableSection) and sec.name == ".dynsym":
            for sym in sec.iter_symbols():
                if (sym.name and sym["st_shndx"] not in ("SHN_UNDEF", "SHN_ABS")
                        and sym["st_info"]["type"] == "STT_FUNC"
                        and sym["st_info"]["bind"] in ("STB_GLOBAL", "STB_WEAK")):
                    img.exported.append((sym["st_value"], sym.name))
    for sec in elf.iter_sections():
        if isinstance(sec, DynamicSection):
            img.needed += [t.needed for t in sec.iter_tags() if t.entry.d_tag == "DT_NEEDED"]
    for sec in elf.iter_sections():
        if not isinstance(sec, RelocationSection):
            continue
        symtab = elf.get_section(sec["sh_link"]) if sec["sh_link"] else None
        for rel in sec.iter_relocations():
            rtype = _RELOC_NAMES.get(rel["r_info_type"], "R_X86_64_%d" % rel["r_info_type"])
            name = ""
            if symtab is not None and rel["r_info_sym"]:
                sym = symtab.get_symbol(rel["r_info_sym"])
                name = sym.name
                if sym["st_info"]["type"] == "STT_SECTION":
                    name = section_names.get(sym["st_shndx"], "")
            addend = rel["r_addend"] if rel.is_RELA() else 0
            img.relocations.append((rel["r_offset"], rtype, name, addend))
    return img


def encode_instruction(ins: x64.Insn, next_id) -> tuple:
    """Fact rows for one decoded instruction (operands reversed: sources first)."""
    rows = {"instruction": [], "op_regdirect": [], "op_immediate": [], "op_indirect": [],
            "operand_field": []}
    ids = []
    for pos, op in enumerate(reversed(ins.operands), 1):
        oid = next_id()
        ids.append(oid)
        if isinstance(op, x64.Reg):
            rows["op_regdirect"].append((oid, op.name))
        elif isinstance(op, x64.Imm):
            rows["op_immediate"].append((oid, op.value))
            if op.width:
                rows["operand_field"].append((ins.addr, pos, op.offset, op.width))
        else:
            disp = op.disp
            if op.base == "RIP" or op.base == "NONE" and op.index == "NONE":
                disp &= 0xFFFFFFFFFFFFFFFF
                if disp >= 1 << 63:
                    disp -= 1 << 64
            rows["op_indirect"].append((oid, op.seg, op.base, op.index, op.scale, disp, op.size))
            if op.disp_width:
                rows["operand_field"].append((ins.addr, pos, op.disp_offset, op.disp_width))
    ids += [0] * (4 - len(ids))
    if len(ids) > 4:
        raise ValueError("too many operands at 0x%x" % ins.addr)
    rows["instruction"].append((ins.addr, ins.size, ins.prefix, ins.mnemonic, *ids))
    return rows


def decode_all(image: BinaryImage) -> dict:
    """instruction/operand/invalid rows for every executable address."""
    out = {"instruction": [], "op_regdirect": [], "op_immediate": [], "op_indirect": [],
           "operand_field": [], "invalid": []}
    counter = iter(range(1, 1 << 62))

    def next_id():
        return next(counter)

    for sec in image.sections:
        if not sec.executable or not sec.initialized:
            continue
        buf = sec.data
        for off in range(len(buf)):
            addr = sec.addr + off
            ins = x64.decode(buf, off, addr)
            if ins is None:
                out["invalid"].append((addr,))
                continue
            for k, v in encode_instruction(ins, next_id).items():
                out[k].extend(v)
    return out


def scan_data(image: BinaryImage) -> dict:
    data_bytes = {}
    for sec in image.sections:
        if sec.initialized:
            for i, b in enumerate(sec.data):
                data_bytes[sec.addr + i] = b
    from .facts import Section

    secs = [Section(s.name, s.addr, s.size, s.executable, s.writable, s.initialized)
            for s in image.sections]
    aid = scan_address_in_data(secs, data_bytes)
    return {"data_byte": sorted(data_bytes.items()), "address_in_data": sorted(aid)}


def extract_facts(path: str) -> FactBase:
    image = load_binary(path)
    rels = decode_all(image)
    rels.update(scan_data(image))
    rels["section"] = [(s.name, s.addr, s.size, int(s.executable), int(s.writable), int(s.initialized))
                       for s in image.sections]
    rels["symbol"] = sorted(set(image.symbols))
    rels["relocation"] = sorted(set(image.relocations))
    exec_ranges = [(s.addr, s.addr + s.size) for s in image.sections if s.executable]

    def in_exec(a):
        return any(lo <= a < hi for lo, hi in exec_ranges)

    entries = set()
    if image.entry and in_exec(image.entry):
        entries.add((image.entry,))
    if image.kind == "shared object":
        for a, _ in image.exported:
            if in_exec(a):
                entries.add((a,))
    rels["entry_point"] = sorted(entries)
    rels["metadata"] = [("source", os.path.abspath(path)), ("decoder", x64.DECODER_VERSION),
                        ("file_kind", image.kind)]
    if image.needed:
        rels["metadata"].append(("needed", ",".join(image.needed)))
    log.info("%s: %d instructions, %d invalid, %d address_in_data", path,
             len(rels["instruction"]), len(rels["invalid"]), len(rels["address_in_data"]))
    return FactBase(rels)
