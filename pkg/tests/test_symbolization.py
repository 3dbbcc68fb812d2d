import pytest

from conftest import FIXTURE_NAMES, fixture, make_fb, pipeline
from rdisasm.config import PipelineConfig
from rdisasm.frontend_elf import extract_facts
from rdisasm.groundtruth import GroundTruthMismatch, TruthEntry, diff_ground_truth
from rdisasm.pipeline import run_pipeline
from rdisasm.symbolization import (
    Decision, Literal, Report, Sections, SymMinusSym, SymPlus, _data_areas, _in_areas,
    format_report, parse_expr, read_report)
from rdisasm.facts import reg_width


def patch(fb, addr, opcode, ops):
    """Replace the instruction at ``addr`` keeping its size."""
    rels = fb.relations()
    ind = set(rels["op_indirect"])
    reg = set(rels["op_regdirect"])
    oid = 1 + max(r[0] for k in ("op_indirect", "op_regdirect", "op_immediate") for r in rels[k])
    ids = []
    for op in ops:
        (ind if op[0] == "mem" else reg).add((oid,) + tuple(op[1:]))
        ids.append(oid)
        oid += 1
    row = fb.instructions[addr]
    insn = {r for r in rels["instruction"] if r[0] != addr}
    insn.add((addr, row[1], "", opcode, *(ids + [0] * (4 - len(ids)))))
    return fb.replace(instruction=insn, op_indirect=ind, op_regdirect=reg)


# -- jump tables ----------------------------------------------------------------

TAR_ENTRIES = ((0x4A09F0, 0x47DB3F), (0x4A09F1, 0x47DB36), (0x4A09F2, 0x47DB2B), (0x4A09F3, 0x47DB20))


def test_tar_jump_table():
    sym = pipeline("tar_jump_table").symbols
    assert len(sym.jump_tables) == 1
    t = sym.jump_tables[0]
    assert (t.jump, t.entry_size, t.start, t.reference) == (0x47DA90, 1, 0x4A09F0, 0x47DA93)
    assert t.entries == TAR_ENTRIES
    kinds = {(o.addr, o.kind, o.size) for o in sym.objects}
    assert {(e, "SymbolSymbol", 1) for e, _t in TAR_ENTRIES} | {(0x4A09F4, "Other", 4)} == kinds
    for e, tgt in TAR_ENTRIES:
        assert sym.decisions[e].expr == SymMinusSym(tgt, 0x47DA93)


def test_tar_entry_bytes_are_truncated_differences():
    fb = fixture("tar_jump_table")
    t = pipeline("tar_jump_table").symbols.jump_tables[0]
    for e, tgt in t.entries:
        assert fb.read_bytes(e, 1)[0] == (tgt - t.reference) & 0xFF


def test_lea_sum_is_detected():
    # lea rax, [rax+rdx] in place of add rax, rdx
    fb = patch(fixture("tar_jump_table"), 0x47DA8D, "lea",
               [("mem", "NONE", "RAX", "RDX", 1, 0, 8), ("reg", "RAX")])
    tables = run_pipeline(fb).symbols.jump_tables
    assert [(t.jump, t.start, t.reference, t.entries) for t in tables] == [
        (0x47DA90, 0x4A09F0, 0x47DA93, TAR_ENTRIES)]


def test_plain_load_is_not_a_table():
    # mov rax, [rdx] in place of the sum
    fb = patch(fixture("tar_jump_table"), 0x47DA8D, "mov",
               [("mem", "NONE", "RDX", "NONE", 1, 0, 8), ("reg", "RAX")])
    assert run_pipeline(fb).symbols.jump_tables == []


# -- data objects ------------------------------------------------------------------

TEXT = (".text", 0x1000, 0x10, 1, 0, 1)


def data_fb(blob: bytes, code=None, sections=None, base=0x3000):
    code = code or [(0x1000, 1, "ret", []), (0x1001, 1, "ret", []), (0x1002, 1, "ret", [])]
    sections = sections or [TEXT, (".data", base, len(blob), 0, 1, 1)]
    data = {base + i: b for i, b in enumerate(blob)}
    return make_fb(code, sections=sections, data=data, entry=0x1000)


def cands(res):
    return {(c.addr, c.kind, c.size): dict(rows) for c, rows in res.symbols.candidates}


def test_candidate_kinds():
    code = [(0x1000, 5, "mov", [("imm", 0x300C), ("reg", "EBX")]),
            (0x1005, 3, "movzx", [("mem", "NONE", "RBX", "NONE", 1, 0, 2), ("reg", "EAX")]),
            (0x1008, 1, "ret", [])]
    blob = (0x1000).to_bytes(8, "little") + b"abc\0" + b"\x07\x00\xaa\xaa"
    res = run_pipeline(data_fb(blob, code))
    c = cands(res)
    assert c[(0x3000, "Symbol", 8)] == {"pointer_to_instruction": 2, "aligned": 1}
    assert c[(0x3008, "String", 4)] == {"string": 1}
    assert c[(0x300C, "Other", 2)] == {"data_access_match": 2}
    assert res.symbols.decisions[0x3000].expr == SymPlus(0x1000)


def test_symbol_array_needs_three():
    three = b"".join(a.to_bytes(8, "little") for a in (0x1000, 0x1001, 0x1002))
    c = cands(run_pipeline(data_fb(three)))
    assert all("symbol_array" in c[(0x3000 + 8 * i, "Symbol", 8)] for i in range(3))
    two = three[:16] + b"\xaa" * 8
    c = cands(run_pipeline(data_fb(two)))
    assert not any("symbol_array" in rows for rows in c.values())


def test_symbol_inside_string_loses():
    # "xyzBA@\0" at 0x404080: the window at 0x404083 reads 0x404142, an instruction
    code = [(0x404140 + i, 1, "ret", []) for i in range(4)]
    blob = b"\xaa" * 0x80 + b"xyzBA@\0" + b"\0" * 4 + b"\xaa" * 0x75
    secs = [(".text", 0x404140, 4, 1, 0, 1), (".data", 0x404000, 0x100, 0, 1, 1)]
    fb = make_fb(code, sections=secs, data={0x404000 + i: b for i, b in enumerate(blob)}, entry=0x404140)
    res = run_pipeline(fb)
    c = cands(res)
    assert c[(0x404083, "Symbol", 8)] == {"pointer_to_instruction": 2}
    assert c[(0x404080, "String", 7)] == {"string": 1, "long_string": 2}
    kept = {(o.addr, o.kind) for o in res.symbols.objects}
    assert (0x404080, "String") in kept and (0x404083, "Symbol") not in kept
    assert isinstance(res.symbols.decisions[0x404083].expr, Literal)


def test_pointer_to_special_section_is_penalised():
    secs = [TEXT, (".rodata", 0x2000, 0x10, 0, 0, 1), (".eh_frame_hdr", 0x2010, 0x10, 0, 0, 1),
            (".data", 0x3000, 8, 0, 1, 1)]
    res = run_pipeline(data_fb((0x2010).to_bytes(8, "little"), sections=secs))
    assert cands(res)[(0x3000, "Symbol", 8)] == {"aligned": 1, "special_section": -5}
    assert res.symbols.decisions[0x3000].expr == Literal(0x2010)


def test_access_conflict_penalty():
    # an 8-byte pointer straddled by a 2-byte field access
    code = [(0x1000, 5, "mov", [("imm", 0x3004), ("reg", "EBX")]),
            (0x1005, 3, "movzx", [("mem", "NONE", "RBX", "NONE", 1, 0, 2), ("reg", "EAX")]),
            (0x1008, 1, "ret", [])]
    res = run_pipeline(data_fb((0x1000).to_bytes(8, "little"), code))
    assert cands(res)[(0x3000, "Symbol", 8)]["access_conflict"] == -3


# -- code operands ------------------------------------------------------------------

CODE_SECS = [(".text", 0x1000, 0x40, 1, 0, 1), (".data", 0x3000, 16, 0, 1, 1)]


def code_decisions(code):
    fb = make_fb(code, sections=CODE_SECS, data={0x3000 + i: 0xAA for i in range(16)}, fields=True)
    return run_pipeline(fb).symbols.decisions


def test_wget_operands():
    d = pipeline("wget_ex1").symbols.decisions
    assert d[0x416C4F].expr == SymPlus(0x45CB23)
    # passed to the callee: no evidence either way, kept at threshold
    assert d[0x416C4F].total == 0
    assert d[0x413054].expr == d[0x416C4A].expr == SymPlus(0x45D328)
    assert d[0x416C43].context == "pcrel" and d[0x416C43].expr == SymPlus(0x673E80)
    # add rbx, 24 is out of range and never considered
    assert not any(x.origin == 0x416C58 for x in d.values())
    kept = {(o.addr, o.kind, o.size) for o in pipeline("wget_ex1").symbols.objects}
    assert (0x45CB23, "String", 13) in kept


def test_xor_consumer_keeps_literal():
    d = code_decisions([(0x1000, 5, "mov", [("imm", 0x3000), ("reg", "EAX")]),
                        (0x1005, 2, "xor", [("reg", "EAX"), ("reg", "EBX")]), (0x1007, 1, "ret", [])])
    assert d[0x1001].expr == Literal(0x3000)
    assert d[0x1001].heuristics == ("uncommon_pointer_operation",)


def test_address_use_makes_symbol():
    d = code_decisions([(0x1000, 5, "mov", [("imm", 0x3000), ("reg", "EAX")]),
                        (0x1005, 3, "mov", [("mem", "NONE", "RAX", "NONE", 1, 0, 8), ("reg", "RBX")]),
                        (0x1008, 1, "ret", [])])
    assert d[0x1001].expr == SymPlus(0x3000) and d[0x1001].total == 2


def test_scaled_displacement_past_end_is_repaired():
    d = code_decisions([(0x1000, 8, "mov", [("mem", "NONE", "NONE", "RCX", 8, 0x3020, 8), ("reg", "RAX")]),
                        (0x1008, 1, "ret", [])])
    assert d[0x1001].expr == SymPlus(0x3010, 16, ".data")
    assert d[0x1001].heuristics == ("boundary_repair",)


def test_constant_base_leaves_displacement_literal():
    d = code_decisions([(0x1000, 5, "mov", [("imm", 0x3000), ("reg", "EBX")]),
                        (0x1005, 8, "mov", [("mem", "NONE", "RBX", "RCX", 8, 0x3020, 8), ("reg", "RAX")]),
                        (0x100D, 1, "ret", [])])
    assert 0x1006 not in d


def test_loop_bound_repair_on_conflict_fixture():
    sym = pipeline("conflict").symbols
    assert sym.decisions[0x40109E].expr == SymPlus(0x402D40)
    assert sym.decisions[0x4010A3].expr == SymPlus(0x402D40, 168)
    assert sym.decisions[0x4010A3].heuristics == ("loop_bound_repair",)
    assert sym.ext_ranges == {(".rodata", 0x402718, 0x402DF0, 8)}


@pytest.mark.parametrize("name,addr,value", [("miss_special_section", 0x401007, 0x402DE8),
                                             ("miss_nested_loop", 0x40101B, 0x402E40)])
def test_documented_misses_stay_literal(name, addr, value):
    d = pipeline(name).symbols.decisions[addr]
    assert d.expr == Literal(value)
    assert "special_section" in d.heuristics and d.total < 0


# -- ground truth diff ----------------------------------------------------------------

SECS = [(".text", 0x1000, 0x100), (".data", 0x3000, 0x100)]


def report(**exprs):
    decisions = {}
    for k, e in exprs.items():
        a = int(k[1:], 16)
        decisions[a] = Decision(a, "immediate", parse_expr(e))
    return Report(decisions, list(SECS))


def test_diff_identical_is_clean():
    truth = [TruthEntry(0x1010, 10, "buf", ".data")]
    assert diff_ground_truth(report(a1010="sym:0x3000"), SECS, truth).clean


def test_diff_dropped_symbol_is_fn():
    truth = [TruthEntry(0x1010, 10, "buf", ".data")]
    res = diff_ground_truth(report(a1010="lit:12288"), SECS, truth)
    assert (res.fp, res.fn, res.ws) == (0, 1, 0)
    res = diff_ground_truth(report(), SECS, truth)
    assert res.fn == 1


def test_diff_extra_symbol_is_fp_and_wrong_section_is_ws():
    res = diff_ground_truth(report(a1010="sym:0x3000"), SECS, [])
    assert res.fp == 1
    truth = [TruthEntry(0x1010, 10, "f", ".text")]
    assert diff_ground_truth(report(a1010="sym:0x3000"), SECS, truth).ws == 1


def test_diff_mismatched_layout_raises():
    with pytest.raises(GroundTruthMismatch):
        diff_ground_truth(report(), [(".text", 0x1000, 0x80)], [])
    with pytest.raises(GroundTruthMismatch):
        diff_ground_truth(report(), SECS, [TruthEntry(0x9000, 10, "x", ".data")])


# -- invariants -------------------------------------------------------------------------


def corpus_results(corpus_binaries):
    for name, opt, path, _twin in corpus_binaries:
        fb = extract_facts(path)
        yield "%s%s" % (name, opt), fb, run_pipeline(fb)


def all_results(corpus_binaries):
    for name in FIXTURE_NAMES:
        yield name, fixture(name), pipeline(name)
    yield from corpus_results(corpus_binaries)


def check_objects(fb, sym):
    secs = Sections(fb)
    prev_end = None
    for o in sym.objects:
        assert prev_end is None or o.addr >= prev_end, o
        prev_end = o.addr + o.size
        s = secs.containing(o.addr)
        assert s is not None and o.addr + o.size <= s.end, o


def raw_field(fb, d):
    raw = fb.read_bytes(d.addr, d.size)
    return int.from_bytes(raw, "little")


def check_values(fb, sym):
    """A symbolic number must re-evaluate to the bytes it replaces."""
    for d in sym.decisions.values():
        if d.context in ("branch", "pcrel") or not d.symbolic:
            continue
        mask = (1 << (8 * d.size)) - 1
        assert d.expr.value & mask == raw_field(fb, d), (hex(d.addr), d.expr.render())


def check_completeness(fb, res):
    """Every candidate number gets exactly one decision."""
    sym, lay = res.symbols, res.layout
    secs = Sections(fb, res.config.special_sections)
    expected = set()
    areas = _data_areas(fb, lay, secs)
    starts = [a for a, _b in areas]
    for a, _v in fb["address_in_data"]:
        if _in_areas(areas, starts, a, a + 8):
            expected.add(a)
    fields = fb.operand_fields
    for a in lay.instructions:
        for pos, op in enumerate(fb.insn_operands(a), 1):
            fld = fields.get((a, pos))
            if fld is None or fld[1] < 4:
                continue
            if op[0] == "imm":
                v = op[1]
                last = fb.insn_operands(a)[-1]
                if fld[1] == 4 and last[0] == "reg" and reg_width(last[1]) == 4:
                    v &= 0xFFFFFFFF
                if secs.anchor(v)[0] is not None or secs.anchor(op[1])[0] is not None:
                    expected.add(a + fld[0])
            elif op[0] == "mem" and op[1] not in ("FS", "GS"):
                if op[2] == "RIP" or secs.anchor(op[5])[0] is not None:
                    expected.add(a + fld[0])
    got = set(sym.decisions)
    assert expected <= got, sorted(hex(x) for x in expected - got)[:5]
    # anything beyond that is an explained extra: a repair or a table entry
    for a in got - expected:
        d = sym.decisions[a]
        assert d.context == "branch" or set(d.heuristics) & {
            "loop_bound_repair", "boundary_repair", "jump_table_entry"}, d


def check_report_round_trip(tmp_path, fb, sym):
    p = tmp_path / "r.rep"
    p.write_text(format_report(fb, sym))
    rep = read_report(str(p))
    assert set(rep.decisions) == set(sym.decisions)
    for a, d in sym.decisions.items():
        r = rep.decisions[a]
        assert (r.context, r.expr, r.total, r.heuristics) == (d.context, d.expr, d.total, d.heuristics)
    assert sorted(rep.sections) == sorted((s.name, s.start, s.size) for s in fb.sections)


def scaled_config(k):
    cfg = PipelineConfig()
    cfg.block_weights = {h: w * k for h, w in cfg.block_weights.items()}
    cfg.data_weights = {h: w * k for h, w in cfg.data_weights.items()}
    cfg.code_weights = {h: w * k for h, w in cfg.code_weights.items()}
    cfg.block_threshold *= k
    cfg.data_threshold *= k
    cfg.code_threshold *= k
    return cfg


def outcome(sym):
    return ({a: d.expr for a, d in sym.decisions.items()},
            [(o.addr, o.kind, o.size) for o in sym.objects])


@pytest.mark.parametrize("name", FIXTURE_NAMES)
def test_fixture_invariants(tmp_path, name):
    fb, res = fixture(name), pipeline(name)
    check_objects(fb, res.symbols)
    check_values(fb, res.symbols)
    check_completeness(fb, res)
    check_report_round_trip(tmp_path, fb, res.symbols)


def test_corpus_invariants(tmp_path, corpus_binaries):
    for _label, fb, res in corpus_results(corpus_binaries):
        check_objects(fb, res.symbols)
        check_values(fb, res.symbols)
        check_completeness(fb, res)
        check_report_round_trip(tmp_path, fb, res.symbols)


@pytest.mark.parametrize("name", FIXTURE_NAMES)
def test_weight_scaling_keeps_argmax(name):
    base = outcome(pipeline(name).symbols)
    assert outcome(run_pipeline(fixture(name), scaled_config(3)).symbols) == base


def test_weight_scaling_on_corpus(corpus_binaries):
    for _name, _opt, path, _twin in corpus_binaries[::5]:
        fb = extract_facts(path)
        assert outcome(run_pipeline(fb, scaled_config(7)).symbols) == outcome(run_pipeline(fb).symbols)
