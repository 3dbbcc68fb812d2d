"""Regenerate the checked-in fact fixtures.

Each fixture is assembled with the platform assembler, linked at fixed
addresses with a linker script, stripped and run through the ELF front end.
The hand-written ``diamond_struct`` fixture is emitted directly as facts.

Usage: python3 tests/fixtures/build_fixtures.py [--keep DIR]
"""

from __future__ import annotations

import argparse
import os
import shutil
import subprocess
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, os.path.join(HERE, "..", "..", "src"))

from rdisasm.facts import FactBase, dump_facts, validate  # noqa: E402
from rdisasm.frontend_elf import extract_facts  # noqa: E402

PRELUDE = ".intel_syntax noprefix\n"

# Code from the def-use / value analysis running example.
WGET_EX1 = PRELUDE + r"""
.section .text.callee,"ax",@progbits
    mov rax, QWORD PTR ds:0x45D328
    ret

.text
.globl _start
_start:
    mov rbx, -624                       # 416C35
    .byte 0x0f, 0x1f, 0x40, 0x00        # 416C3C nop DWORD PTR [rax+0]
.L1:
    mov rdi, QWORD PTR [rip + D673E80]  # 416C40
    mov rsi, QWORD PTR [rbx + 0x45D328] # 416C47
    mov edx, 0x45CB23                   # 416C4E
    call CALLEE                         # 416C53
    add rbx, 24                         # 416C58
    jne .L1                             # 416C5C
    ret                                 # 416C5E

.section .rodata,"a",@progbits
    .fill 0xB23, 1, 0
    .asciz "wget example"
    .fill 0x1400 - 0xB23 - 13, 1, 0

.data
    .quad 0x1122334455667788
"""
WGET_EX1_LD = """
ENTRY(_start)
CALLEE = 0x413050;
D673E80 = 0x673E80;
SECTIONS {
  . = 0x413050; .text.callee : { *(.text.callee) }
  . = 0x416C35; .text : { *(.text) }
  . = 0x45C000; .rodata : { *(.rodata) }
  . = 0x673E80; .data : { *(.data) }
  /DISCARD/ : { *(.note*) *(.comment) }
}
"""

# Symbol-symbol jump table with 1-byte entries.
TAR_JT = PRELUDE + r"""
.text
.globl _start
_start:
    movzx ecx, BYTE PTR [rdi]           # 47DA73
    cmp ecx, 3                          # 47DA76
    ja .Ldefault                        # 47DA79
    lea rdx, [rip + TABLE]              # 47DA7B
    movzx edx, BYTE PTR [rdx + rcx*1]   # 47DA82
    lea rax, [rip + .Ldefault]          # 47DA86
    add rax, rdx                        # 47DA8D
    jmp rax                             # 47DA90
    nop                                 # 47DA92
.Ldefault:
    mov eax, DWORD PTR [rip + TABLE + 4] # 47DA93
    ret
    .fill 0x47DB20 - 0x47DA9A, 1, 0xcc
    mov eax, 3                          # 47DB20
    ret
    .fill 5, 1, 0xcc
    mov eax, 2                          # 47DB2B
    ret
    .fill 5, 1, 0xcc
    mov eax, 1                          # 47DB36
    ret
    .fill 3, 1, 0xcc
    xor eax, eax                        # 47DB3F
    ret

.section .rodata,"a",@progbits
    .byte 0xAC, 0xA3, 0x98, 0x8D
    .byte 0x07, 0x00, 0x00, 0x00
"""
TAR_JT_LD = """
ENTRY(_start)
TABLE = 0x4A09F0;
SECTIONS {
  . = 0x47DA73; .text : { *(.text) }
  . = 0x4A09F0; .rodata : { *(.rodata) }
  /DISCARD/ : { *(.note*) *(.comment) }
}
"""

# Loop over an array whose bound is the end of .rodata (symbol+constant).
CONFLICT = PRELUDE + r"""
.text
.globl _start
_start:
    mov ebx, 0x402D40                   # 40109D
    mov ebp, 0x402DE8                   # 4010A2
.Lloop:
    mov rcx, QWORD PTR [rbx]            # 4010A7
    add rax, rcx                        # 4010AA
    .byte 0x0f, 0x1f, 0x84, 0, 0, 0, 0, 0
    .byte 0x0f, 0x1f, 0x84, 0, 0, 0, 0, 0
    .byte 0x0f, 0x1f, 0x84, 0, 0, 0, 0, 0
    add rbx, 8                          # 4010C5
    cmp rbx, rbp                        # 4010C9
    jne .Lloop                          # 4010CC
    ret                                 # 4010CE

.section .rodata,"a",@progbits
    .fill 0x402DE8 - 0x402720, 1, 0x11

.section .eh_frame_hdr,"a",@progbits
    .byte 1, 0x1b, 3, 0x3b
    .long 0, 0
"""
CONFLICT_LD = """
ENTRY(_start)
SECTIONS {
  . = 0x40109D; .text : { *(.text) }
  . = 0x402720; .rodata : { *(.rodata) }
  . = 0x402DE8; .eh_frame_hdr : { *(.eh_frame_hdr) }
  /DISCARD/ : { *(.note*) *(.comment) }
}
"""

# Known miss: a scaled displacement that equals the end of .rodata, which is
# also the start of .eh_frame_hdr.
MISS_SPECIAL = PRELUDE + r"""
.text
.globl _start
_start:
    movsxd rbx, edi                     # 401000
    mov rax, QWORD PTR [rbx*8 + 0x402DE8]
    ret

.section .rodata,"a",@progbits
    .fill 0x402DE8 - 0x402720, 1, 0x22

.section .eh_frame_hdr,"a",@progbits
    .byte 1, 0x1b, 3, 0x3b
    .long 0, 0
"""
MISS_SPECIAL_LD = """
ENTRY(_start)
SECTIONS {
  . = 0x401000; .text : { *(.text) }
  . = 0x402720; .rodata : { *(.rodata) }
  . = 0x402DE8; .eh_frame_hdr : { *(.eh_frame_hdr) }
  /DISCARD/ : { *(.note*) *(.comment) }
}
"""

# Known miss: a loop bound for an array walked by three nested loops lies
# further past the end of .rodata than the single-multiplier extension.
MISS_NESTED = PRELUDE + r"""
.text
.globl _start
_start:
    mov ebx, 0x402D40                   # inner cursor base
.Louter:
    mov ecx, 4
.Lmiddle:
    mov rdx, QWORD PTR [rbx]
    add rax, rdx
    add rbx, 8
    dec ecx
    jne .Lmiddle
    cmp rbx, 0x402E40                   # bound well past .rodata end
    jne .Louter
    ret

.section .rodata,"a",@progbits
    .fill 0x402DE8 - 0x402720, 1, 0x33

.section .eh_frame_hdr,"a",@progbits
    .fill 0x100, 1, 0
"""
MISS_NESTED_LD = """
ENTRY(_start)
SECTIONS {
  . = 0x401000; .text : { *(.text) }
  . = 0x402720; .rodata : { *(.rodata) }
  . = 0x402DE8; .eh_frame_hdr : { *(.eh_frame_hdr) }
  /DISCARD/ : { *(.note*) *(.comment) }
}
"""

ELF_FIXTURES = {
    "wget_ex1": (WGET_EX1, WGET_EX1_LD, {0x416C47: (14806, 538), 0x416C58: (188, 519)}),
    "tar_jump_table": (TAR_JT, TAR_JT_LD, {}),
    "conflict": (CONFLICT, CONFLICT_LD, {}),
    "miss_special_section": (MISS_SPECIAL, MISS_SPECIAL_LD, {}),
    "miss_nested_loop": (MISS_NESTED, MISS_NESTED_LD, {}),
}


def run(*cmd):
    subprocess.run(cmd, check=True)


def build_elf(name: str, src: str, script: str, workdir: str) -> str:
    s = os.path.join(workdir, name + ".s")
    o = os.path.join(workdir, name + ".o")
    ld = os.path.join(workdir, name + ".ld")
    exe = os.path.join(workdir, name)
    with open(s, "w") as f:
        f.write(src)
    with open(ld, "w") as f:
        f.write(script)
    run("as", "--64", "-o", o, s)
    run("ld", "-static", "-nostdlib", "--no-relax", "-z", "noexecstack", "-z", "norelro",
        "--build-id=none", "-T", ld, "-o", exe, o)
    run("strip", "--strip-all", exe)
    return exe


def renumber(fb: FactBase, pinned: dict, name: str) -> FactBase:
    """Assign operand ids sequentially, keeping the pinned ids for chosen instructions."""
    rels = fb.relations()
    reserved = {i for ids in pinned.values() for i in ids}
    mapping = {}
    for row in sorted(rels["instruction"]):
        if row[0] in pinned:
            for old, new in zip([o for o in row[4:] if o], pinned[row[0]]):
                mapping[old] = new
    nxt = 1
    for row in sorted(rels["instruction"]):
        for old in row[4:]:
            if old and old not in mapping:
                while nxt in reserved:
                    nxt += 1
                mapping[old] = nxt
                nxt += 1
    rels["instruction"] = [r[:4] + tuple(mapping.get(o, 0) for o in r[4:]) for r in rels["instruction"]]
    for rel in ("op_regdirect", "op_immediate", "op_indirect"):
        rels[rel] = [(mapping[r[0]],) + tuple(r[1:]) for r in rels[rel]]
    rels["metadata"] = [(k, name if k == "source" else v) for k, v in rels["metadata"]]
    return FactBase(rels)


def diamond_struct() -> FactBase:
    """Diamond value pattern feeding a strided struct-array access."""
    insns = [
        (0, "mov", [("mem", "NONE", "RCX", "NONE", 1, 0, 8), ("reg", "RBX")]),
        (1, "mov", [("reg", "RBX"), ("reg", "RAX")]),
        (2, "add", [("reg", "RAX"), ("reg", "RAX")]),
        (3, "add", [("reg", "RBX"), ("reg", "RAX")]),
        (4, "mov", [("mem", "NONE", "NONE", "RAX", 8, 0x1000, 8), ("reg", "RDX")]),
        (5, "movzx", [("mem", "NONE", "NONE", "RAX", 8, 0x1008, 2), ("reg", "EDX")]),
        (6, "movzx", [("mem", "NONE", "NONE", "RAX", 8, 0x1010, 1), ("reg", "EDX")]),
        (7, "ret", []),
    ]
    rels = {k: [] for k in ("instruction", "op_regdirect", "op_immediate", "op_indirect")}
    oid = 0
    for addr, opc, ops in insns:
        ids = []
        for op in ops:
            oid += 1
            ids.append(oid)
            if op[0] == "reg":
                rels["op_regdirect"].append((oid, op[1]))
            else:
                rels["op_indirect"].append((oid,) + op[1:])
        rels["instruction"].append((addr, 1, "", opc, *(ids + [0] * (4 - len(ids)))))
    rels["section"] = [(".text", 0, 8, 1, 0, 1), (".data", 0x1000, 0x60, 0, 1, 1)]
    # a filler pattern that never reads as an address
    rels["data_byte"] = [(0x1000 + i, 0xAA) for i in range(0x60)]
    rels["entry_point"] = [(0,)]
    rels["metadata"] = [("source", "diamond_struct"), ("decoder", "hand-written")]
    return FactBase(rels)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--keep", help="also copy the stripped ELF files here")
    args = ap.parse_args(argv)
    with tempfile.TemporaryDirectory() as work:
        for name, (src, script, pinned) in ELF_FIXTURES.items():
            exe = build_elf(name, src, script, work)
            if args.keep:
                os.makedirs(args.keep, exist_ok=True)
                shutil.copy(exe, os.path.join(args.keep, name))
            fb = renumber(extract_facts(exe), pinned, name)
            _write(fb, name)
    _write(diamond_struct(), "diamond_struct")
    return 0


def _write(fb: FactBase, name: str) -> None:
    problems = validate(fb)
    if problems:
        raise SystemExit("%s: %s" % (name, problems))
    out = os.path.join(HERE, name + ".facts")
    shutil.rmtree(out, ignore_errors=True)
    dump_facts(fb, out)
    print("wrote", out)


if __name__ == "__main__":
    sys.exit(main())
