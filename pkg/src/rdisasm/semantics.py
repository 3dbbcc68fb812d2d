"""Per-instruction register semantics: definitions, uses and linear value forms.

Operands arrive in fact order (sources first, destination last) as produced
by :meth:`FactBase.insn_operands`; indexes are 1-based positions in that
order.  Implicit operands use index 0.
"""

from __future__ import annotations

from .facts import REGISTERS, canonical, reg_width

IGNORED_REGS = frozenset({"RIP", "ES", "CS", "SS", "DS", "FS", "GS"})

CALLEE_SAVED = ("RBX", "RBP", "RSP", "R12", "R13", "R14", "R15")

# opcodes whose last operand is written without being read
PURE_WRITE = frozenset({"mov", "movabs", "movzx", "movsx", "movsxd", "lea", "pop", "bsf", "bsr",
                        "tzcnt", "lzcnt"} | {"set" + c for c in
                                             ("o", "no", "b", "ae", "e", "ne", "be", "a", "s", "ns",
                                              "p", "np", "l", "ge", "le", "g")})
# opcodes that read every operand and write nothing
READ_ONLY = frozenset({"cmp", "test", "bt", "push"})
# opcodes that read and write the destination
READ_WRITE = frozenset({"add", "or", "adc", "sbb", "and", "sub", "xor", "rol", "ror", "rcl", "rcr",
                        "shl", "shr", "sal", "sar", "inc", "dec", "not", "neg", "bts", "btr", "btc",
                        "bswap", "imul"} | {"cmov" + c for c in
                                            ("o", "no", "b", "ae", "e", "ne", "be", "a", "s", "ns",
                                             "p", "np", "l", "ge", "le", "g")})
NO_ACCESS = frozenset({"lea", "nop"})
UNCOMMON_POINTER_OPS = frozenset({"imul", "mul", "div", "idiv", "xor", "and", "or", "shl", "shr",
                                  "sar", "sal", "rol", "ror", "not", "neg", "bt", "bts", "btr", "btc",
                                  "adc", "sbb", "bswap"})

_STRING_REGS = {
    "movs": (("RSI", "RDI"), ("RSI", "RDI")),
    "cmps": (("RSI", "RDI"), ("RSI", "RDI")),
    "stos": (("RDI", "RAX"), ("RDI",)),
    "lods": (("RSI",), ("RSI", "RAX")),
    "scas": (("RDI", "RAX"), ("RDI",)),
}


def _reg(name):
    if name in ("NONE", "Unknown") or name in IGNORED_REGS or name not in REGISTERS:
        return None
    return canonical(name)


def mem_regs(op):
    """Registers read to form the address of a memory operand."""
    out = []
    for r in (op[2], op[3]):
        c = _reg(r)
        if c is not None and c not in out:
            out.append(c)
    return out


def defs_uses(opcode: str, prefix: str, ops: list) -> tuple[set, set]:
    """``(defs, uses)`` with defs a set of registers and uses a set of (reg, index)."""
    defs: set = set()
    uses: set = set()
    n = len(ops)

    def read(i):
        op = ops[i]
        if op[0] == "reg":
            r = _reg(op[1])
            if r:
                uses.add((r, i + 1))

    def write(i):
        op = ops[i]
        if op[0] == "reg":
            r = _reg(op[1])
            if r:
                defs.add(r)

    # address registers are read for any memory operand
    for i, op in enumerate(ops):
        if op[0] == "mem" and opcode != "nop":
            for r in mem_regs(op):
                uses.add((r, i + 1))

    if opcode in ("nop", "endbr64", "hlt", "int3", "ud2", "pause", "ret", "cld", "std", "clc", "stc",
                  "cmc"):
        return defs, uses
    if opcode == "call":
        for i in range(n):
            read(i)
        defs.add("RAX")
        return defs, uses
    if opcode == "jmp" or opcode.startswith("j"):
        for i in range(n):
            read(i)
        return defs, uses
    if opcode in ("xor", "sub") and n == 2 and ops[0][0] == "reg" and ops[0] == ops[1]:
        write(1)
        return defs, uses
    if opcode == "imul" and n == 1 or opcode in ("mul", "div", "idiv"):
        read(0)
        uses.add(("RAX", 0))
        if opcode in ("div", "idiv"):
            uses.add(("RDX", 0))
        defs.update(("RAX", "RDX"))
        return defs, uses
    if opcode == "imul" and n == 3:
        read(1)
        write(2)
        return defs, uses
    if opcode in ("xchg", "xadd"):
        for i in range(n):
            read(i)
            write(i)
        return defs, uses
    if opcode == "cmpxchg":
        for i in range(n):
            read(i)
        uses.add(("RAX", 0))
        write(n - 1)
        defs.add("RAX")
        return defs, uses
    if opcode in ("cdq", "cqo", "cwd"):
        uses.add(("RAX", 0))
        defs.add("RDX")
        return defs, uses
    if opcode in ("cdqe", "cwde", "cbw"):
        uses.add(("RAX", 0))
        defs.add("RAX")
        return defs, uses
    if opcode == "leave":
        uses.add(("RBP", 0))
        defs.update(("RBP", "RSP"))
        return defs, uses
    if opcode == "syscall":
        uses.add(("RAX", 0))
        defs.update(("RAX", "RCX", "R11"))
        return defs, uses
    if opcode[:-1] in _STRING_REGS and opcode[-1] in "bwdq":
        reads, writes = _STRING_REGS[opcode[:-1]]
        for r in reads:
            uses.add((r, 0))
        defs.update(writes)
        if prefix:
            uses.add(("RCX", 0))
            defs.add("RCX")
        return defs, uses
    if opcode in READ_ONLY:
        for i in range(n):
            read(i)
        return defs, uses
    if opcode in PURE_WRITE:
        for i in range(n - 1):
            read(i)
        write(n - 1)
        return defs, uses
    if opcode in READ_WRITE:
        for i in range(n):
            read(i)
        write(n - 1)
        return defs, uses
    # unknown opcodes: read everything, write the destination
    for i in range(n):
        read(i)
    if n:
        write(n - 1)
    return defs, uses


def value_form(opcode: str, ops: list):
    """Linear form of the destination register or ``None``.

    Returns ``(dst, kind, src1, m1, src2, m2, disp)`` where kind is ``const``
    (dst = disp), ``move`` (dst = src1*m1 + disp) or ``two``
    (dst = src1*m1 + src2*m2 + disp).
    """
    n = len(ops)
    if not n or ops[-1][0] != "reg":
        return None
    dname = ops[-1][1]
    dst = _reg(dname)
    if dst is None or reg_width(dname) < 4:
        return None
    width = reg_width(dname)
    src = ops[0] if n >= 2 else None

    def reg_of(op):
        if op[0] != "reg" or reg_width(op[1]) < 4:
            return None
        return _reg(op[1])

    if opcode in ("mov", "movabs") and n == 2:
        if src[0] == "imm":
            v = src[1] & 0xFFFFFFFF if width == 4 else src[1]
            return (dst, "const", "NONE", 0, "NONE", 0, v)
        r = reg_of(src)
        if r is not None:
            return (dst, "move", r, 1, "NONE", 0, 0)
        return None
    if opcode == "movsxd" and n == 2:
        r = reg_of(src)
        if r is not None:
            return (dst, "move", r, 1, "NONE", 0, 0)
        return None
    if opcode in ("xor", "sub") and n == 2 and src == ops[1]:
        return (dst, "const", "NONE", 0, "NONE", 0, 0)
    if opcode == "lea" and n == 2 and src[0] == "mem":
        _m, seg, base, index, mult, disp, _size = src
        if base == "RIP" or (base == "NONE" and index == "NONE"):
            return (dst, "const", "NONE", 0, "NONE", 0, disp)
        b = _reg(base)
        i = _reg(index)
        if b and not i:
            return (dst, "move", b, 1, "NONE", 0, disp)
        if i and not b:
            return (dst, "move", i, mult, "NONE", 0, disp)
        if b == i:
            return (dst, "move", b, 1 + mult, "NONE", 0, disp)
        return (dst, "two", b, 1, i, mult, disp)
    if opcode in ("add", "sub") and n == 2:
        sign = 1 if opcode == "add" else -1
        if src[0] == "imm":
            return (dst, "move", dst, 1, "NONE", 0, sign * src[1])
        r = reg_of(src)
        if r is None:
            return None
        if r == dst:
            return (dst, "move", dst, 2, "NONE", 0, 0) if sign == 1 else None
        return (dst, "two", dst, 1, r, sign, 0)
    if opcode in ("inc", "dec") and n == 1:
        return (dst, "move", dst, 1, "NONE", 0, 1 if opcode == "inc" else -1)
    if opcode in ("shl", "sal") and n == 2 and src[0] == "imm" and 0 <= src[1] < 32:
        return (dst, "move", dst, 1 << src[1], "NONE", 0, 0)
    if opcode == "imul" and n == 3 and ops[0][0] == "imm":
        r = reg_of(ops[1])
        if r is not None:
            return (dst, "move", r, ops[0][1], "NONE", 0, 0)
    return None
