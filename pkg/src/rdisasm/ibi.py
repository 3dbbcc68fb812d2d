"""Instruction boundary identification.

Three phases run inside one rule program: backward propagation of invalid
addresses, an aggressive forward traversal that creates block candidates,
and point scoring of the candidates.  Overlap resolution over the scored
candidates happens in :func:`resolve_conflicts`.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field

from . import x64
from .facts import FactBase
from .relfix import (ADDR, INT, TEXT, Agg, Call, Let, Program, Test, _, eq, ge, gt, le, lt, ne,
                     variables)

log = logging.getLogger(__name__)

DEFAULT_BLOCK_WEIGHTS = {
    "incoming": 3,
    "data_ref": 2,
    "aligned_data_ref": 1,
    "code_ref": 2,
    "entry": 3,
    "outgoing": 1,
    "jump_table_overlap": -2,
}
DEFAULT_BLOCK_THRESHOLD = 0


def opcode_classes() -> list[tuple[str, str]]:
    rows = []
    for name, ops in (("return", x64.RETURN_OPS), ("halt", x64.HALT_OPS), ("call", x64.CALL_OPS),
                      ("interrupt", x64.INTERRUPT_OPS), ("jump", x64.JUMP_OPS),
                      ("unconditional_jump", x64.UNCONDITIONAL_JUMP_OPS),
                      ("padding", x64.PADDING_OPS)):
        rows += [(op, name) for op in ops]
    for base in ("movs", "cmps", "stos", "lods", "scas"):
        for suffix in "bwdq":
            rows.append((base + suffix, "string"))
    return rows


class SectionIndex:
    """Fast containment queries over section ranges."""

    def __init__(self, sections):
        self.sections = sorted((s for s in sections if s.size), key=lambda s: s.start)
        self.starts = [s.start for s in self.sections]

    def find(self, addr):
        i = bisect.bisect_right(self.starts, addr) - 1
        if i >= 0 and addr < self.sections[i].end:
            return self.sections[i]
        return None

    def contains(self, addr) -> bool:
        return self.find(addr) is not None


def build_program(weights: dict, section_index: SectionIndex, exec_index: SectionIndex) -> Program:
    """The IBI rule set."""
    p = Program()
    R = p.relation
    instruction = R("instruction", (ADDR, INT, TEXT, TEXT, INT, INT, INT, INT), input=True)
    op_immediate = R("op_immediate", (INT, INT), input=True)
    op_indirect = R("op_indirect", (INT, TEXT, TEXT, TEXT, INT, INT, INT), input=True)
    decode_invalid = R("decode_invalid", (ADDR,), input=True)
    address_in_data = R("address_in_data", (ADDR, ADDR), input=True)
    entry_point = R("entry_point", (ADDR,), input=True)
    function_symbol = R("function_symbol", (ADDR,), input=True)
    extra_target = R("extra_target", (ADDR,), input=True)
    exec_section_start = R("exec_section_start", (ADDR,), input=True)
    opcode_class = R("opcode_class", (TEXT, TEXT), input=True)
    jump_table_span = R("jump_table_span", (ADDR, ADDR), input=True)

    insn_operand = R("insn_operand", (ADDR, INT, INT))
    has_loop_prefix = R("instruction_has_loop_prefix", (ADDR,))
    no_fallthrough_op = R("no_fallthrough_op", (TEXT,))
    not_must_op = R("not_must_op", (TEXT,))
    may_ft = R("may_fallthrough", (ADDR, ADDR))
    must_ft = R("must_fallthrough", (ADDR, ADDR))
    direct_jump = R("direct_jump", (ADDR, ADDR))
    direct_call = R("direct_call", (ADDR, ADDR))
    # x64 relative branches decode to absolute targets (direct_jump/direct_call),
    # so these stay empty unless a producer supplies them.
    pc_relative_jump = R("pc_relative_jump", (ADDR, ADDR), input=True)
    pc_relative_call = R("pc_relative_call", (ADDR, ADDR), input=True)
    invalid = R("invalid", (ADDR,))
    pea = R("possible_effective_address", (ADDR,))
    msi = R("may_have_symbolic_immediate", (ADDR, ADDR))
    initial_target = R("initial_target", (ADDR,))
    padding = R("padding", (ADDR,))
    ends_flow = R("ends_flow", (ADDR,))
    limit_after = R("limit_after", (ADDR, ADDR))
    block_limit = R("block_limit", (ADDR,))
    cibc = R("code_in_block_candidate", (ADDR, ADDR))
    possible_target = R("possible_target", (ADDR,))
    after_end_scan = R("after_end_scan", (ADDR, ADDR))
    after_block_end = R("after_block_end", (ADDR, ADDR))
    block = R("block_candidate", (ADDR,))
    block_covers = R("block_covers", (ADDR, ADDR))
    block_overlap = R("block_overlap", (ADDR, ADDR))
    code_edge = R("code_edge", (ADDR, ADDR, TEXT))
    block_points = R("block_points", (ADDR, ADDR, INT, TEXT))
    block_total = R("block_total", (ADDR, INT))

    A, B, C, X, Y, Z, S, O, T = variables("A B C X Y Z S O T")
    Op1, Op2, Op3, Op4, Pre, Opc, Size, Blk, Src, To, From, End, P, Tot = variables(
        "Op1 Op2 Op3 Op4 Pre Opc Size Blk Src To From End P Tot")

    # operand enumeration
    for pos in range(4):
        ops = [_(), _(), _(), _()]
        ops[pos] = O
        p.rule(insn_operand(A, pos + 1, O), instruction(A, _(), _(), _(), *ops), ne(O, 0),
               label="insn_operand%d" % (pos + 1))
    p.rule(has_loop_prefix(A), instruction(A, _(), Pre, Opc, _(), _(), _(), _()),
           opcode_class(Opc, "string"), Test(lambda pre: pre in ("rep", "repe", "repne"), Pre,
                                             name="loop_prefix"),
           label="loop_prefix")

    # fallthrough
    for cls in ("return", "unconditional_jump", "halt"):
        p.rule(no_fallthrough_op(Opc), opcode_class(Opc, cls), label="no_ft_" + cls)
    for cls in ("call", "interrupt", "jump"):
        p.rule(not_must_op(Opc), opcode_class(Opc, cls), label="not_must_" + cls)
    p.rule(may_ft(From, To), instruction(From, Size, _(), Opc, _(), _(), _(), _()),
           Let(To, From + Size), ~no_fallthrough_op(Opc), label="may_fallthrough")
    p.rule(must_ft(From, To), may_ft(From, To), instruction(From, _(), _(), Opc, _(), _(), _(), _()),
           ~not_must_op(Opc), ~has_loop_prefix(From), label="must_fallthrough")

    # direct transfers: the branch target is the first operand immediate
    p.rule(direct_jump(From, To), instruction(From, _(), _(), Opc, Op1, 0, 0, 0),
           opcode_class(Opc, "jump"), op_immediate(Op1, To), ge(To, 0), label="direct_jump")
    p.rule(direct_call(From, To), instruction(From, _(), _(), Opc, Op1, 0, 0, 0),
           opcode_class(Opc, "call"), op_immediate(Op1, To), ge(To, 0), label="direct_call")

    # backward traversal
    p.rule(invalid(A), decode_invalid(A), label="invalid_decode")
    no_insn = lambda To_: ~instruction(To_, _(), _(), _(), _(), _(), _(), _())
    for edge in (must_ft, direct_jump, direct_call, pc_relative_jump, pc_relative_call):
        p.rule(invalid(From), edge(From, To), invalid(To), label="invalid_" + edge.name)
        p.rule(invalid(From), edge(From, To), no_insn(To), label="invalid_missing_" + edge.name)
    p.rule(pea(A), instruction(A, _(), _(), _(), _(), _(), _(), _()), ~invalid(A),
           label="possible_effective_address")

    in_section = section_index.contains
    p.rule(msi(A, X), insn_operand(A, _(), O), op_immediate(O, X), ge(X, 0),
           Test(in_section, X, name="in_section"), label="symbolic_immediate")
    p.rule(msi(A, X), insn_operand(A, _(), O), op_indirect(O, _(), _(), _(), _(), X, _()), ge(X, 0),
           Test(in_section, X, name="in_section"), label="symbolic_displacement")

    p.rule(initial_target(A), entry_point(A), label="init_entry")
    p.rule(initial_target(A), function_symbol(A), label="init_function")
    p.rule(initial_target(A), extra_target(A), label="init_extra")
    p.rule(initial_target(A), exec_section_start(A), label="init_section")
    p.rule(initial_target(X), address_in_data(_(), X), label="init_data")

    # linear-sweep component: skip padding after a block that cannot fall through
    p.rule(padding(A), instruction(A, _(), _(), Opc, _(), _(), _(), _()), opcode_class(Opc, "padding"),
           label="padding")
    p.rule(ends_flow(A), instruction(A, _(), _(), Opc, _(), _(), _(), _()), no_fallthrough_op(Opc),
           label="ends_flow")
    p.rule(limit_after(End, To), pea(End), ends_flow(End),
           instruction(End, Size, _(), _(), _(), _(), _(), _()), Let(To, End + Size),
           label="limit_after")
    p.rule(limit_after(End, To), limit_after(End, A), padding(A),
           instruction(A, Size, _(), _(), _(), _(), _(), _()), Let(To, A + Size), label="limit_after_pad")

    # block_limit over-approximates possible_target
    p.rule(block_limit(A), initial_target(A), label="limit_initial")
    p.rule(block_limit(X), pea(A), msi(A, X), label="limit_immediate")
    p.rule(block_limit(X), pea(A), pc_relative_jump(A, X), label="limit_pcjump")
    p.rule(block_limit(X), pea(A), pc_relative_call(A, X), label="limit_pccall")
    p.rule(block_limit(A), limit_after(_(), A), ~padding(A), label="limit_after_end")

    # forward traversal
    p.rule(cibc(A, A), possible_target(A), pea(A), label="block_start")
    p.rule(cibc(A, Blk), cibc(B, Blk), must_ft(B, A), ~block_limit(A), label="block_extend")
    p.rule(cibc(A, A), cibc(B, _()), may_ft(B, A), ~must_ft(B, A), pea(A), label="block_split")
    p.rule(cibc(A, A), cibc(B, _()), may_ft(B, A), block_limit(A), pea(A), label="block_limit_split")
    p.rule(possible_target(A), initial_target(A), label="target_initial")
    p.rule(possible_target(X), cibc(Src, _()), msi(Src, X), label="target_immediate")
    p.rule(possible_target(X), cibc(Src, _()), pc_relative_jump(Src, X), label="target_pcjump")
    p.rule(possible_target(X), cibc(Src, _()), pc_relative_call(Src, X), label="target_pccall")
    p.rule(after_end_scan(End, To), cibc(End, _()), ends_flow(End),
           instruction(End, Size, _(), _(), _(), _(), _(), _()), Let(To, End + Size),
           label="after_end")
    p.rule(after_end_scan(End, To), after_end_scan(End, A), padding(A),
           instruction(A, Size, _(), _(), _(), _(), _(), _()), Let(To, A + Size), label="after_end_pad")
    p.rule(after_block_end(End, A), after_end_scan(End, A), ~padding(A), label="after_block_end")
    p.rule(possible_target(A), after_block_end(_(), A), label="target_after_end")

    # candidate geometry
    p.rule(block(Blk), cibc(_(), Blk), label="block")
    p.rule(block_covers(Blk, X), cibc(A, Blk), instruction(A, Size, _(), _(), _(), _(), _(), _()),
           Call(X, lambda a, n: range(a, a + n), A, Size, name="bytes"), label="block_covers")
    p.rule(block_overlap(B, C), block_covers(B, X), block_covers(C, X), ne(B, C), label="block_overlap")

    # scoring
    p.rule(code_edge(A, To, "jump"), direct_jump(A, To), label="edge_jump")
    p.rule(code_edge(A, To, "call"), direct_call(A, To), label="edge_call")
    p.rule(code_edge(A, To, "fallthrough"), may_ft(A, To), label="edge_fallthrough")
    w = weights
    p.rule(block_points(B, Src, w["incoming"], "incoming"), block(B), cibc(A, Src), code_edge(A, B, _()),
           ne(Src, B), ~block_overlap(Src, B), label="points_incoming")
    p.rule(block_points(B, 0, w["data_ref"], "data_ref"), block(B), address_in_data(_(), B),
           label="points_data_ref")
    p.rule(block_points(B, 0, w["aligned_data_ref"], "aligned_data_ref"), block(B),
           address_in_data(X, B), Test(lambda x: x % 8 == 0, X, name="aligned8"),
           label="points_aligned_data_ref")
    p.rule(block_points(B, Src, w["code_ref"], "code_ref"), block(B), cibc(A, Src), msi(A, B),
           ~direct_jump(A, B), ~direct_call(A, B), ne(Src, B), ~block_overlap(Src, B),
           label="points_code_ref")
    p.rule(block_points(B, 0, w["entry"], "entry"), block(B), entry_point(B), label="points_entry")
    p.rule(block_points(B, 0, w["entry"], "entry"), block(B), function_symbol(B), label="points_symbol")
    p.rule(block_points(B, T, w["outgoing"], "outgoing"), block(B), cibc(A, B), direct_jump(A, T),
           block(T), ne(T, B), ~block_overlap(B, T), label="points_outgoing_jump")
    p.rule(block_points(B, T, w["outgoing"], "outgoing"), block(B), cibc(A, B), direct_call(A, T),
           block(T), ne(T, B), ~block_overlap(B, T), label="points_outgoing_call")
    p.rule(block_points(B, 0, w["jump_table_overlap"], "jump_table_overlap"), block_covers(B, X),
           jump_table_span(S, End), le(S, X), lt(X, End), label="points_jump_table")
    p.rule(block_total(B, Tot), block(B), Agg(Tot, "sum", block_points(B, _(), P, _()), P),
           label="block_total")
    return p


@dataclass
class CodeLayout:
    blocks: dict = field(default_factory=dict)  # start -> list of instruction addresses
    block_end: dict = field(default_factory=dict)  # start -> end (exclusive)
    data_regions: list = field(default_factory=list)  # (start, end) within executable sections
    discarded: list = field(default_factory=list)  # (block, reason, winner)
    totals: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def instructions(self) -> set:
        out = set()
        for members in self.blocks.values():
            out.update(members)
        return out

    def block_of(self) -> dict:
        out = {}
        for b, members in self.blocks.items():
            for a in members:
                out[a] = b
        return out


@dataclass
class IbiResult:
    db: object
    layout: CodeLayout


def ibi_inputs(fb: FactBase, extra_targets=(), jump_table_spans=()) -> dict:
    exec_secs = [s for s in fb.sections if s.executable]
    return {
        "instruction": fb["instruction"],
        "op_immediate": fb["op_immediate"],
        "op_indirect": fb["op_indirect"],
        "decode_invalid": fb["invalid"],
        "address_in_data": fb["address_in_data"],
        "entry_point": fb["entry_point"],
        "function_symbol": {(a,) for a, _n, kind in fb["symbol"] if kind == "FUNC"
                            and any(a in s for s in exec_secs)},
        "extra_target": set(fb["extra_target"]) | {(a,) for a in extra_targets
                                                   if any(a in s for s in exec_secs)},
        "exec_section_start": {(s.start,) for s in exec_secs if s.size},
        "opcode_class": opcode_classes(),
        "jump_table_span": set(jump_table_spans),
        "pc_relative_jump": (),
        "pc_relative_call": (),
    }


def run_ibi(fb: FactBase, config=None, extra_targets=(), jump_table_spans=(), jobs: int = 1) -> IbiResult:
    weights = dict(DEFAULT_BLOCK_WEIGHTS)
    threshold = DEFAULT_BLOCK_THRESHOLD
    if config is not None:
        weights.update(config.block_weights)
        threshold = config.block_threshold
    sidx = SectionIndex(fb.sections)
    eidx = SectionIndex([s for s in fb.sections if s.executable])
    prog = build_program(weights, sidx, eidx)
    db = prog.evaluate(ibi_inputs(fb, extra_targets, jump_table_spans), jobs=jobs)
    layout = resolve_conflicts(fb, db, threshold)
    return IbiResult(db, layout)


def candidate_blocks(fb: FactBase, db) -> dict:
    members: dict[int, list] = {}
    for a, b in db["code_in_block_candidate"]:
        members.setdefault(b, []).append(a)
    for b in members:
        members[b].sort()
    return members


def resolve_conflicts(fb: FactBase, db, threshold: int = 0) -> CodeLayout:
    """Keep the best-scoring candidates so that no two kept blocks overlap."""
    insns = fb.instructions
    members = candidate_blocks(fb, db)
    totals = dict(db["block_total"])
    spans = {}
    for b, ms in members.items():
        last = ms[-1]
        spans[b] = (b, last + insns[last][1])
    layout = CodeLayout(totals=totals)
    order = sorted(members, key=lambda b: (-totals.get(b, 0), b))
    kept_starts: list = []
    kept_spans: list = []  # sorted by start
    byte_owner = {}
    for b in order:
        lo, hi = spans[b]
        tot = totals.get(b, 0)
        if tot < threshold:
            layout.discarded.append((b, "below_threshold", 0))
            continue
        winner = None
        for x in range(lo, hi):
            if x in byte_owner:
                winner = byte_owner[x]
                break
        if winner is not None:
            if totals.get(winner, 0) == tot:
                msg = "blocks 0x%x and 0x%x tie at %d points; keeping 0x%x" % (
                    min(b, winner), max(b, winner), tot, winner)
                layout.warnings.append(msg)
                log.warning(msg)
            layout.discarded.append((b, "overlap", winner))
            continue
        for x in range(lo, hi):
            byte_owner[x] = b
        layout.blocks[b] = members[b]
        layout.block_end[b] = hi
    # data regions: executable bytes not covered by kept blocks
    for s in fb.sections:
        if not s.executable or not s.size:
            continue
        run_start = None
        for x in range(s.start, s.end):
            if x in byte_owner:
                if run_start is not None:
                    layout.data_regions.append((run_start, x))
                    run_start = None
            elif run_start is None:
                run_start = x
        if run_start is not None:
            layout.data_regions.append((run_start, s.end))
    layout.discarded.sort()
    return layout
