"""Table-driven decoder for the x64 integer instruction subset.

``decode(buf, offset, addr)`` looks at most 15 bytes starting at ``offset``
and returns a :class:`Insn` or ``None`` when the bytes are not in the
supported subset.  Operands are kept in Intel order here; the fact encoder
reverses them so that sources come first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

DECODER_VERSION = "x64-int-subset/3"

REG64 = ["RAX", "RCX", "RDX", "RBX", "RSP", "RBP", "RSI", "RDI",
         "R8", "R9", "R10", "R11", "R12", "R13", "R14", "R15"]
REG32 = ["EAX", "ECX", "EDX", "EBX", "ESP", "EBP", "ESI", "EDI"] + ["R%dD" % i for i in range(8, 16)]
REG16 = ["AX", "CX", "DX", "BX", "SP", "BP", "SI", "DI"] + ["R%dW" % i for i in range(8, 16)]
REG8_REX = ["AL", "CL", "DL", "BL", "SPL", "BPL", "SIL", "DIL"] + ["R%dB" % i for i in range(8, 16)]
REG8_LEGACY = ["AL", "CL", "DL", "BL", "AH", "CH", "DH", "BH"]

CC = ["o", "no", "b", "ae", "e", "ne", "be", "a", "s", "ns", "p", "np", "l", "ge", "le", "g"]

ALU = ["add", "or", "adc", "sbb", "and", "sub", "xor", "cmp"]
SHIFTS = ["rol", "ror", "rcl", "rcr", "shl", "shr", "sal", "sar"]

STRING_OPS = {0xA4: "movs", 0xA5: "movs", 0xA6: "cmps", 0xA7: "cmps", 0xAA: "stos",
              0xAB: "stos", 0xAC: "lods", 0xAD: "lods", 0xAE: "scas", 0xAF: "scas"}
STRING_SUFFIX = {1: "b", 2: "w", 4: "d", 8: "q"}


@dataclass
class Reg:
    name: str


@dataclass
class Imm:
    value: int
    offset: int  # byte offset of the encoded field inside the instruction
    width: int


@dataclass
class Mem:
    seg: str
    base: str
    index: str
    scale: int
    disp: int
    size: int
    disp_offset: int = 0
    disp_width: int = 0


@dataclass
class Insn:
    addr: int
    size: int
    prefix: str
    mnemonic: str
    operands: list = field(default_factory=list)  # Intel order
    raw: bytes = b""


class _Bad(Exception):
    pass


def _sx(v: int, bits: int) -> int:
    if v & (1 << (bits - 1)):
        return v - (1 << bits)
    return v


class _Cursor:
    def __init__(self, buf, pos, end):
        self.buf = buf
        self.start = pos
        self.pos = pos
        self.end = min(end, pos + 15)

    def u8(self):
        if self.pos >= self.end:
            raise _Bad
        v = self.buf[self.pos]
        self.pos += 1
        return v

    def take(self, n):
        if self.pos + n > self.end:
            raise _Bad
        v = int.from_bytes(self.buf[self.pos:self.pos + n], "little")
        self.pos += n
        return v

    @property
    def off(self):
        return self.pos - self.start


class _State:
    def __init__(self):
        self.rex = 0
        self.opsize16 = False
        self.rep = None
        self.lock = False
        self.seg = "NONE"
        self.addr32 = False

    @property
    def w(self):
        return bool(self.rex & 8)

    @property
    def r(self):
        return (self.rex >> 2) & 1

    @property
    def x(self):
        return (self.rex >> 1) & 1

    @property
    def b(self):
        return self.rex & 1

    def osize(self):
        if self.w:
            return 8
        if self.opsize16:
            return 2
        return 4


def reg_name(num: int, size: int, rex: bool) -> str:
    if size == 8:
        return REG64[num]
    if size == 4:
        return REG32[num]
    if size == 2:
        return REG16[num]
    if rex:
        return REG8_REX[num]
    if num >= 8:
        raise _Bad
    return REG8_LEGACY[num]


class _ModRM:
    __slots__ = ("mod", "reg", "rm", "mem")


def _modrm(cur: _Cursor, st: _State, size: int, next_ip_fixup: list) -> _ModRM:
    b = cur.u8()
    m = _ModRM()
    m.mod = b >> 6
    m.reg = ((b >> 3) & 7) | (st.r << 3)
    rm = b & 7
    m.mem = None
    if m.mod == 3:
        m.rm = rm | (st.b << 3)
        return m
    m.rm = None
    base = index = "NONE"
    scale = 1
    rip = False
    if rm == 4:
        sib = cur.u8()
        ss, idx, bs = sib >> 6, (sib >> 3) & 7, sib & 7
        idx |= st.x << 3
        scale = 1 << ss
        if idx != 4:
            index = REG64[idx]
        if bs == 5 and m.mod == 0:
            base = "NONE"
            disp_width = 4
        else:
            base = REG64[bs | (st.b << 3)]
            disp_width = {0: 0, 1: 1, 2: 4}[m.mod]
    elif rm == 5 and m.mod == 0:
        rip = True
        base = "RIP"
        disp_width = 4
    else:
        base = REG64[rm | (st.b << 3)]
        disp_width = {0: 0, 1: 1, 2: 4}[m.mod]
    disp_off = cur.off
    disp = _sx(cur.take(disp_width), disp_width * 8) if disp_width else 0
    mem = Mem(st.seg, base, index, scale, disp, size, disp_off if disp_width else 0, disp_width)
    if rip:
        next_ip_fixup.append(mem)
    m.mem = mem
    return m


def _rm_operand(m: _ModRM, size: int, st: _State):
    if m.mem is not None:
        m.mem.size = size
        return m.mem
    return Reg(reg_name(m.rm, size, bool(st.rex)))


def _imm(cur: _Cursor, width: int, ext_bits: int | None = None) -> Imm:
    off = cur.off
    v = cur.take(width)
    return Imm(_sx(v, width * 8), off, width)


def decode(buf: bytes, offset: int = 0, addr: int = 0, end: int | None = None) -> Insn | None:
    if end is None:
        end = len(buf)
    cur = _Cursor(buf, offset, end)
    try:
        ins = _decode(cur, addr)
    except (_Bad, KeyError, IndexError):
        return None
    if ins is None:
        return None
    ins.size = cur.pos - offset
    ins.raw = bytes(buf[offset:cur.pos])
    return ins


def _decode(cur: _Cursor, addr: int) -> Insn | None:
    st = _State()
    # legacy prefixes
    while True:
        b = cur.u8()
        if b == 0x66:
            st.opsize16 = True
        elif b == 0xF3:
            st.rep = "rep"
        elif b == 0xF2:
            st.rep = "repne"
        elif b == 0xF0:
            st.lock = True
        elif b == 0x64:
            st.seg = "FS"
        elif b == 0x65:
            st.seg = "GS"
        elif b in (0x2E, 0x3E, 0x26, 0x36):
            pass
        elif b == 0x67:
            st.addr32 = True
        else:
            break
    if 0x40 <= b <= 0x4F:
        st.rex = b
        b = cur.u8()
    if st.addr32:
        return None
    rip_mems: list = []
    ops: list = []
    mnem = None
    osz = st.osize()
    string_op = False

    def finish(m, operands):
        return m, operands

    if b == 0x0F:
        mnem, ops = _decode_0f(cur, st, rip_mems, addr)
        if mnem is None:
            return None
    elif b < 0x40 and (b & 7) < 6:
        fam = ALU[b >> 3]
        kind = b & 7
        if kind == 0:
            m = _modrm(cur, st, 1, rip_mems)
            ops = [_rm_operand(m, 1, st), Reg(reg_name(m.reg, 1, bool(st.rex)))]
        elif kind == 1:
            m = _modrm(cur, st, osz, rip_mems)
            ops = [_rm_operand(m, osz, st), Reg(reg_name(m.reg, osz, bool(st.rex)))]
        elif kind == 2:
            m = _modrm(cur, st, 1, rip_mems)
            ops = [Reg(reg_name(m.reg, 1, bool(st.rex))), _rm_operand(m, 1, st)]
        elif kind == 3:
            m = _modrm(cur, st, osz, rip_mems)
            ops = [Reg(reg_name(m.reg, osz, bool(st.rex))), _rm_operand(m, osz, st)]
        elif kind == 4:
            ops = [Reg("AL"), _imm(cur, 1)]
        else:
            ops = [Reg(reg_name(0, osz, False)), _imm(cur, 2 if osz == 2 else 4)]
        mnem = fam
    elif 0x50 <= b <= 0x57:
        mnem = "push"
        ops = [Reg(reg_name((b & 7) | (st.b << 3), 2 if st.opsize16 else 8, True))]
    elif 0x58 <= b <= 0x5F:
        mnem = "pop"
        ops = [Reg(reg_name((b & 7) | (st.b << 3), 2 if st.opsize16 else 8, True))]
    elif b == 0x63:
        if not st.w:
            return None
        m = _modrm(cur, st, 4, rip_mems)
        mnem = "movsxd"
        ops = [Reg(reg_name(m.reg, 8, True)), _rm_operand(m, 4, st)]
    elif b == 0x68:
        mnem = "push"
        ops = [_imm(cur, 2 if st.opsize16 else 4)]
    elif b == 0x6A:
        mnem = "push"
        ops = [_imm(cur, 1)]
    elif b in (0x69, 0x6B):
        m = _modrm(cur, st, osz, rip_mems)
        mnem = "imul"
        reg = Reg(reg_name(m.reg, osz, bool(st.rex)))
        src = _rm_operand(m, osz, st)
        imm = _imm(cur, 1) if b == 0x6B else _imm(cur, 2 if osz == 2 else 4)
        ops = [reg, src, imm]
    elif 0x70 <= b <= 0x7F:
        rel = _imm(cur, 1)
        mnem = "j" + CC[b & 0xF]
        ops = [_Rel(rel)]
    elif b in (0x80, 0x81, 0x83):
        size = 1 if b == 0x80 else osz
        m = _modrm(cur, st, size, rip_mems)
        mnem = ALU[m.reg & 7]
        dst = _rm_operand(m, size, st)
        if b == 0x81:
            imm = _imm(cur, 2 if osz == 2 else 4)
        else:
            imm = _imm(cur, 1)
        ops = [dst, imm]
    elif b in (0x84, 0x85):
        size = 1 if b == 0x84 else osz
        m = _modrm(cur, st, size, rip_mems)
        mnem = "test"
        ops = [_rm_operand(m, size, st), Reg(reg_name(m.reg, size, bool(st.rex)))]
    elif b in (0x86, 0x87):
        size = 1 if b == 0x86 else osz
        m = _modrm(cur, st, size, rip_mems)
        mnem = "xchg"
        ops = [_rm_operand(m, size, st), Reg(reg_name(m.reg, size, bool(st.rex)))]
    elif 0x88 <= b <= 0x8B:
        size = 1 if b in (0x88, 0x8A) else osz
        m = _modrm(cur, st, size, rip_mems)
        mnem = "mov"
        reg = Reg(reg_name(m.reg, size, bool(st.rex)))
        rm = _rm_operand(m, size, st)
        ops = [rm, reg] if b in (0x88, 0x89) else [reg, rm]
    elif b == 0x8D:
        m = _modrm(cur, st, osz, rip_mems)
        if m.mem is None:
            return None
        mnem = "lea"
        ops = [Reg(reg_name(m.reg, osz, bool(st.rex))), _rm_operand(m, osz, st)]
    elif b == 0x8F:
        m = _modrm(cur, st, 8, rip_mems)
        if m.reg & 7:
            return None
        mnem = "pop"
        ops = [_rm_operand(m, 2 if st.opsize16 else 8, st)]
    elif b == 0x90:
        if st.b:
            mnem = "xchg"
            ops = [Reg(reg_name(8, osz, True)), Reg(reg_name(0, osz, True))]
        elif st.rep == "rep":
            mnem = "pause"
        else:
            mnem = "nop"
    elif 0x91 <= b <= 0x97:
        mnem = "xchg"
        ops = [Reg(reg_name((b & 7) | (st.b << 3), osz, True)), Reg(reg_name(0, osz, True))]
    elif b == 0x98:
        mnem = {2: "cbw", 4: "cwde", 8: "cdqe"}[osz]
    elif b == 0x99:
        mnem = {2: "cwd", 4: "cdq", 8: "cqo"}[osz]
    elif b in STRING_OPS:
        size = 1 if b % 2 == 0 else osz
        mnem = STRING_OPS[b] + STRING_SUFFIX[size]
        string_op = True
    elif b == 0xA8:
        mnem = "test"
        ops = [Reg("AL"), _imm(cur, 1)]
    elif b == 0xA9:
        mnem = "test"
        ops = [Reg(reg_name(0, osz, False)), _imm(cur, 2 if osz == 2 else 4)]
    elif 0xB0 <= b <= 0xB7:
        mnem = "mov"
        ops = [Reg(reg_name((b & 7) | (st.b << 3), 1, bool(st.rex))), _imm(cur, 1)]
    elif 0xB8 <= b <= 0xBF:
        r = (b & 7) | (st.b << 3)
        if st.w:
            mnem = "movabs"
            ops = [Reg(REG64[r]), _imm(cur, 8)]
        else:
            mnem = "mov"
            ops = [Reg(reg_name(r, osz, True)), _imm(cur, 2 if osz == 2 else 4)]
    elif b in (0xC0, 0xC1, 0xD0, 0xD1, 0xD2, 0xD3):
        size = 1 if b in (0xC0, 0xD0, 0xD2) else osz
        m = _modrm(cur, st, size, rip_mems)
        mnem = SHIFTS[m.reg & 7]
        dst = _rm_operand(m, size, st)
        if b in (0xC0, 0xC1):
            cnt = _imm(cur, 1)
            cnt.value &= 0xFF
        elif b in (0xD0, 0xD1):
            cnt = Imm(1, 0, 0)
        else:
            cnt = Reg("CL")
        ops = [dst, cnt]
    elif b == 0xC2:
        mnem = "ret"
        imm = cur.take(2)
        ops = [Imm(imm, cur.off - 2, 2)]
    elif b == 0xC3:
        mnem = "ret"
    elif b in (0xC6, 0xC7):
        size = 1 if b == 0xC6 else osz
        m = _modrm(cur, st, size, rip_mems)
        if m.reg & 7:
            return None
        mnem = "mov"
        dst = _rm_operand(m, size, st)
        imm = _imm(cur, 1 if size == 1 else 2 if size == 2 else 4)
        ops = [dst, imm]
    elif b == 0xC9:
        mnem = "leave"
    elif b == 0xCC:
        mnem = "int3"
    elif b == 0xCD:
        mnem = "int"
        v = cur.u8()
        ops = [Imm(v, cur.off - 1, 1)]
    elif b == 0xE8:
        mnem = "call"
        ops = [_Rel(_imm(cur, 4))]
    elif b == 0xE9:
        mnem = "jmp"
        ops = [_Rel(_imm(cur, 4))]
    elif b == 0xEB:
        mnem = "jmp"
        ops = [_Rel(_imm(cur, 1))]
    elif b == 0xF4:
        mnem = "hlt"
    elif b in (0xF6, 0xF7):
        size = 1 if b == 0xF6 else osz
        m = _modrm(cur, st, size, rip_mems)
        sub = m.reg & 7
        dst = _rm_operand(m, size, st)
        if sub in (0, 1):
            mnem = "test"
            ops = [dst, _imm(cur, 1 if size == 1 else 2 if size == 2 else 4)]
        else:
            mnem = ["", "", "not", "neg", "mul", "imul", "div", "idiv"][sub]
            ops = [dst]
    elif b in (0xF5, 0xF8, 0xF9, 0xFC, 0xFD):
        mnem = {0xF5: "cmc", 0xF8: "clc", 0xF9: "stc", 0xFC: "cld", 0xFD: "std"}[b]
    elif b == 0xFE:
        m = _modrm(cur, st, 1, rip_mems)
        sub = m.reg & 7
        if sub > 1:
            return None
        mnem = ("inc", "dec")[sub]
        ops = [_rm_operand(m, 1, st)]
    elif b == 0xFF:
        m = _modrm(cur, st, osz, rip_mems)
        sub = m.reg & 7
        if sub in (0, 1):
            mnem = ("inc", "dec")[sub]
            ops = [_rm_operand(m, osz, st)]
        elif sub in (2, 4):
            mnem = "call" if sub == 2 else "jmp"
            ops = [_rm_operand(m, 8, st)]
        elif sub == 6:
            mnem = "push"
            ops = [_rm_operand(m, 2 if st.opsize16 else 8, st)]
        else:
            return None
    else:
        return None

    next_ip = addr + cur.off
    for mem in rip_mems:
        mem.disp = (next_ip + mem.disp) & 0xFFFFFFFFFFFFFFFF
    final_ops = []
    for op in ops:
        if isinstance(op, _Rel):
            target = (next_ip + op.imm.value) & 0xFFFFFFFFFFFFFFFF
            if target >= 1 << 63:
                target -= 1 << 64
            final_ops.append(Imm(target, op.imm.offset, op.imm.width))
        else:
            final_ops.append(op)
    prefix = ""
    if st.lock:
        if mnem not in LOCKABLE or not final_ops or not isinstance(final_ops[0], Mem):
            return None
        prefix = "lock"
    if st.rep and string_op:
        if mnem[:4] in ("cmps", "scas"):
            prefix = "repe" if st.rep == "rep" else "repne"
        else:
            if st.rep != "rep":
                return None
            prefix = "rep"
    return Insn(addr, 0, prefix, mnem, final_ops)


LOCKABLE = frozenset({"add", "or", "adc", "sbb", "and", "sub", "xor", "xchg", "inc", "dec",
                      "not", "neg", "bts", "btr", "btc", "cmpxchg", "xadd"})


class _Rel:
    __slots__ = ("imm",)

    def __init__(self, imm):
        self.imm = imm


def _decode_0f(cur: _Cursor, st: _State, rip_mems, addr):
    b = cur.u8()
    osz = st.osize()
    if b == 0x1E and st.rep == "rep":
        if cur.u8() == 0xFA:
            st.rep = None
            return "endbr64", []
        return None, None
    if b == 0x1F:
        m = _modrm(cur, st, osz, rip_mems)
        return "nop", [_rm_operand(m, osz, st)]
    if b == 0x0B:
        return "ud2", []
    if b == 0x05:
        return "syscall", []
    if 0x80 <= b <= 0x8F:
        return "j" + CC[b & 0xF], [_Rel(_imm(cur, 4))]
    if 0x40 <= b <= 0x4F:
        m = _modrm(cur, st, osz, rip_mems)
        return "cmov" + CC[b & 0xF], [Reg(reg_name(m.reg, osz, bool(st.rex))), _rm_operand(m, osz, st)]
    if 0x90 <= b <= 0x9F:
        m = _modrm(cur, st, 1, rip_mems)
        return "set" + CC[b & 0xF], [_rm_operand(m, 1, st)]
    if b == 0xAF:
        m = _modrm(cur, st, osz, rip_mems)
        return "imul", [Reg(reg_name(m.reg, osz, bool(st.rex))), _rm_operand(m, osz, st)]
    if b in (0xB6, 0xB7, 0xBE, 0xBF):
        src_size = 1 if b in (0xB6, 0xBE) else 2
        m = _modrm(cur, st, src_size, rip_mems)
        name = "movzx" if b < 0xB8 else "movsx"
        return name, [Reg(reg_name(m.reg, osz, bool(st.rex))), _rm_operand(m, src_size, st)]
    if b in (0xA3, 0xAB, 0xB3, 0xBB):
        m = _modrm(cur, st, osz, rip_mems)
        name = {0xA3: "bt", 0xAB: "bts", 0xB3: "btr", 0xBB: "btc"}[b]
        return name, [_rm_operand(m, osz, st), Reg(reg_name(m.reg, osz, bool(st.rex)))]
    if b == 0xBA:
        m = _modrm(cur, st, osz, rip_mems)
        sub = m.reg & 7
        if sub < 4:
            return None, None
        dst = _rm_operand(m, osz, st)
        imm = _imm(cur, 1)
        imm.value &= 0xFF
        return ("bt", "bts", "btr", "btc")[sub - 4], [dst, imm]
    if b in (0xBC, 0xBD):
        m = _modrm(cur, st, osz, rip_mems)
        if st.rep == "rep":
            name = "tzcnt" if b == 0xBC else "lzcnt"
            st.rep = None
        else:
            name = "bsf" if b == 0xBC else "bsr"
        return name, [Reg(reg_name(m.reg, osz, bool(st.rex))), _rm_operand(m, osz, st)]
    if 0xC8 <= b <= 0xCF:
        if osz == 2:
            return None, None
        return "bswap", [Reg(reg_name((b & 7) | (st.b << 3), osz, True))]
    if b in (0xB0, 0xB1, 0xC0, 0xC1):
        size = 1 if b in (0xB0, 0xC0) else osz
        m = _modrm(cur, st, size, rip_mems)
        name = "cmpxchg" if b < 0xC0 else "xadd"
        return name, [_rm_operand(m, size, st), Reg(reg_name(m.reg, size, bool(st.rex)))]
    return None, None


# instruction classes used by the fact encoder and the rules
RETURN_OPS = frozenset({"ret"})
HALT_OPS = frozenset({"hlt", "ud2"})
CALL_OPS = frozenset({"call"})
INTERRUPT_OPS = frozenset({"int", "int3", "syscall"})
JUMP_OPS = frozenset(["jmp"] + ["j" + c for c in CC])
UNCONDITIONAL_JUMP_OPS = frozenset({"jmp"})
NOP_OPS = frozenset({"nop", "pause", "endbr64"})
PADDING_OPS = frozenset({"nop", "int3"})


def is_string_op(mnemonic: str) -> bool:
    return mnemonic[:-1] in ("movs", "cmps", "stos", "lods", "scas") and mnemonic[-1] in "bwdq"


def decode_all(buf: bytes, base: int):
    """Decode at every offset of ``buf``: ``(addr, Insn or None)`` pairs."""
    for off in range(len(buf)):
        yield base + off, decode(buf, off, base + off)
