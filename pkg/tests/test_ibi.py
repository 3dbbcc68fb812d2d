from collections import deque

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FIXTURE_NAMES, fixture, make_fb
from rdisasm.config import PipelineConfig
from rdisasm.facts import FactBase
from rdisasm.ibi import (DEFAULT_BLOCK_WEIGHTS, SectionIndex, build_program, resolve_conflicts,
                         run_ibi)


def ibi(fb, **kw):
    return run_ibi(fb, **kw)


@pytest.fixture(scope="module")
def wget():
    return ibi(fixture("wget_ex1"))


def test_wget_fallthrough_edges(wget):
    may, must = wget.db["may_fallthrough"], wget.db["must_fallthrough"]
    assert (0x416C4E, 0x416C53) in must and (0x416C4E, 0x416C53) in may
    assert (0x416C53, 0x416C58) in may and (0x416C53, 0x416C58) not in must
    assert not any(a == 0x416C5E for a, _b in may)


def test_wget_immediate_becomes_target(wget):
    assert (0x45CB23,) in wget.db["possible_target"]


def test_jump_to_undecodable_is_invalid():
    fb = make_fb([(0x10, 2, "jmp", [("imm", 0x20)]), (0x20, 1, "ret", [])],
                 sections=[(".text", 0x10, 0x18, 1, 0, 1)])
    fb = fb.replace(invalid=[(0x20,)], instruction=[r for r in fb["instruction"] if r[0] != 0x20])
    db = ibi(fb).db
    assert (0x10,) in db["invalid"]


def test_must_chain_propagates_invalid():
    fb = make_fb([(0, 1, "push", [("reg", "RAX")]), (1, 1, "push", [("reg", "RBX")]),
                  (2, 1, "push", [("reg", "RCX")])], sections=[(".text", 0, 4, 1, 0, 1)])
    fb = fb.replace(invalid=[(3,)])
    db = ibi(fb).db
    assert {(0,), (1,), (2,)} <= db["invalid"]
    assert not db["possible_effective_address"]


def test_single_ret_is_one_block():
    lay = ibi(make_fb([(0x400, 1, "ret", [])])).layout
    assert lay.blocks == {0x400: [0x400]}
    assert lay.data_regions == []


def test_after_block_end_skips_padding():
    insns = [(0, 2, "jmp", [("imm", 0x20)]), (2, 1, "nop", []), (3, 1, "nop", []), (4, 1, "nop", []),
             (5, 1, "push", [("reg", "RBP")]), (6, 1, "ret", []),
             (0x20, 1, "ret", [])]
    fb = make_fb(insns, sections=[(".text", 0, 0x21, 1, 0, 1)])
    db = ibi(fb).db
    assert (0, 5) in db["after_block_end"]
    assert (5,) in db["possible_target"]
    assert not any(b in (2, 3, 4) for (b,) in db["block_candidate"])


def test_aligned_data_reference_scores_twice():
    code = [(0x1000, 1, "ret", []), (0x1001, 1, "ret", [])]
    data = {0x2000 + i: b for i, b in enumerate((0x1001).to_bytes(8, "little"))}
    fb = make_fb(code, sections=[(".text", 0x1000, 2, 1, 0, 1), (".data", 0x2000, 8, 0, 1, 1)], data=data)
    rows = {r for r in ibi(fb).db["block_points"] if r[0] == 0x1001}
    assert {r[3] for r in rows} == {"data_ref", "aligned_data_ref"}


def test_unreferenced_candidate_has_no_points():
    fb = make_fb([(0x10, 1, "ret", []), (0x11, 1, "ret", [])], extra=[0x11], entry=0x10)
    rows = [r for r in ibi(fb).db["block_points"] if r[0] == 0x11]
    assert rows == []


def test_jump_target_outscores_overlapping_candidate():
    # 0x10: mov eax, imm32 (5 bytes); 0x11 decodes inside it and is a jump target
    insns = [(0x0, 2, "jmp", [("imm", 0x11)]), (0x2, 1, "ret", []),
             (0x10, 5, "mov", [("imm", 0xC3), ("reg", "EAX")]), (0x15, 1, "ret", []),
             (0x11, 1, "ret", [])]
    fb = make_fb(insns, sections=[(".text", 0, 0x16, 1, 0, 1)], entry=0, extra=[0x10])
    lay = ibi(fb).layout
    assert 0x11 in lay.blocks and 0x10 not in lay.blocks
    assert any(b == 0x10 and winner == 0x11 for b, _why, winner in lay.discarded)


def fake_db(members: dict, totals: dict):
    return {"code_in_block_candidate": {(a, b) for b, ms in members.items() for a in ms},
            "block_total": set(totals.items())}


TWO = [(0x10, 4, "mov", [("imm", 1), ("reg", "EAX")]), (0x12, 1, "ret", []), (0x14, 1, "ret", [])]


def test_higher_total_wins():
    fb = make_fb(TWO)
    lay = resolve_conflicts(fb, fake_db({0x10: [0x10], 0x12: [0x12]}, {0x10: 3, 0x12: 5}))
    assert set(lay.blocks) == {0x12}
    assert (0x10, "overlap", 0x12) in lay.discarded


def test_tie_keeps_lower_address_with_warning():
    fb = make_fb(TWO)
    lay = resolve_conflicts(fb, fake_db({0x10: [0x10], 0x12: [0x12]}, {0x10: 4, 0x12: 4}))
    assert set(lay.blocks) == {0x10}
    assert lay.warnings and "tie" in lay.warnings[0]


def test_no_overlap_keeps_all():
    fb = make_fb(TWO)
    lay = resolve_conflicts(fb, fake_db({0x10: [0x10], 0x14: [0x14]}, {0x10: 1, 0x14: 1}))
    assert set(lay.blocks) == {0x10, 0x14}
    assert lay.data_regions == []
    lay = resolve_conflicts(fb, fake_db({0x14: [0x14]}, {0x14: 1}))
    assert lay.data_regions == [(0x10, 0x14)]


def test_strata_order():
    prog = build_program(DEFAULT_BLOCK_WEIGHTS, SectionIndex([]), SectionIndex([]))
    order = {}
    for i, st_ in enumerate(prog.stratify()):
        for r in st_.relations:
            order[r] = i
    chain = ["must_fallthrough", "invalid", "possible_effective_address", "code_in_block_candidate",
             "block_points", "block_total"]
    assert [order[c] for c in chain] == sorted(order[c] for c in chain)
    assert len({order[c] for c in chain}) == len(chain)


# -- invariants ---------------------------------------------------------------

EDGE_RELS = ("must_fallthrough", "direct_jump", "direct_call", "pc_relative_jump", "pc_relative_call")


def invalid_oracle(fb, db):
    """Reverse reachability from undecodable addresses over the edge relations."""
    decoded = {r[0] for r in fb["instruction"]}
    preds = {}
    sinks = {a for (a,) in fb["invalid"]}
    for rel in EDGE_RELS:
        for a, b in db[rel]:
            preds.setdefault(b, set()).add(a)
            if b not in decoded:
                sinks.add(a)
    seen = set(sinks)
    todo = deque(sinks)
    while todo:
        x = todo.popleft()
        for p in preds.get(x, ()):
            if p not in seen:
                seen.add(p)
                todo.append(p)
    return seen


def check_invariants(fb, res):
    db, lay = res.db, res.layout
    assert db["must_fallthrough"] <= db["may_fallthrough"]
    assert {a for (a,) in db["invalid"]} == invalid_oracle(fb, db)
    spans = sorted([(b, lay.block_end[b]) for b in lay.blocks] + list(lay.data_regions))
    for (a0, a1), (b0, _b1) in zip(spans, spans[1:]):
        assert a1 <= b0, "overlap at 0x%x" % b0
    covered = sum(hi - lo for lo, hi in spans)
    assert covered == sum(s.size for s in fb.sections if s.executable)
    insns = fb.instructions
    for b, ms in lay.blocks.items():
        assert ms[0] == b
        for x, y in zip(ms, ms[1:]):
            assert (x, y) in db["must_fallthrough"]
        assert lay.block_end[b] == ms[-1] + insns[ms[-1]][1]


@pytest.mark.parametrize("name", FIXTURE_NAMES)
def test_fixture_invariants(name):
    fb = fixture(name)
    check_invariants(fb, ibi(fb))


def discard_stable(fb) -> bool:
    """Re-run without the discarded blocks' instructions; False when nothing was discarded."""
    res = ibi(fb)
    kept = res.layout.instructions
    drop = set()
    for b, _why, _winner in res.layout.discarded:
        drop.update(a for a, blk in res.db["code_in_block_candidate"] if blk == b and a not in kept)
    if not drop:
        return False
    fb2 = fb.replace(instruction=[r for r in fb["instruction"] if r[0] not in drop],
                     invalid=set(fb["invalid"]) | {(a,) for a in drop})
    assert ibi(fb2).layout.blocks == res.layout.blocks
    return True


def test_discard_stability(corpus_binaries):
    from rdisasm.frontend_elf import extract_facts

    insns = [(0x0, 2, "jmp", [("imm", 0x11)]), (0x2, 1, "ret", []),
             (0x10, 5, "mov", [("imm", 0xC3), ("reg", "EAX")]), (0x15, 1, "ret", []),
             (0x11, 1, "ret", [])]
    assert discard_stable(make_fb(insns, sections=[(".text", 0, 0x16, 1, 0, 1)], entry=0, extra=[0x10]))
    for _name, _opt, path, _twin in corpus_binaries[:4]:
        discard_stable(extract_facts(path))


def test_corpus_invariants(corpus_binaries):
    from rdisasm.frontend_elf import extract_facts

    for _name, _opt, path, _twin in corpus_binaries:
        fb = extract_facts(path)
        check_invariants(fb, ibi(fb))


OPS = ["ret", "push", "jmp", "je", "call", "hlt"]


@st.composite
def random_code(draw):
    n = draw(st.integers(2, 14))
    insns = []
    bad = set()
    for a in range(n):
        if draw(st.integers(0, 5)) == 0:
            bad.add(a)
            continue
        opc = draw(st.sampled_from(OPS))
        ops = []
        if opc in ("jmp", "je", "call"):
            ops = [("imm", draw(st.integers(0, n + 2)))]
        elif opc == "push":
            ops = [("reg", "RAX")]
        insns.append((a, draw(st.integers(1, 2)), opc, ops))
    if not insns:
        insns.append((0, 1, "ret", []))
        bad.discard(0)
    fb = make_fb(insns, sections=[(".text", 0, n + 3, 1, 0, 1)], entry=insns[0][0])
    decoded = {r[0] for r in insns}
    extra_bad = {a for a in range(n + 3) if a not in decoded}
    return fb.replace(invalid={(a,) for a in bad | extra_bad})


@settings(max_examples=80, deadline=None)
@given(random_code())
def test_random_invalid_closure(fb):
    check_invariants(fb, ibi(fb))


def test_config_weights_are_used():
    fb = make_fb([(0x10, 1, "ret", []), (0x11, 1, "ret", [])], extra=[0x11], entry=0x10)
    cfg = PipelineConfig()
    cfg.block_weights = dict(cfg.block_weights, entry=11)
    res = run_ibi(fb, cfg)
    assert res.layout.totals[0x10] == 11
    assert isinstance(fb, FactBase)


def test_executed_instructions_lie_in_final_blocks(tmp_path, corpus_binaries):
    import harness
    from rdisasm.frontend_elf import extract_facts

    if not harness.tracer_available():
        pytest.skip("valgrind not available")
    cases = harness.load_cases()
    for name, opt, path, _twin in corpus_binaries:
        fb = extract_facts(path)
        kept = ibi(fb).layout.instructions
        spans = [(s.start, s.end) for s in fb.sections if s.executable]
        seen = harness.executed_addresses(path, cases[name][0], str(tmp_path / "trace.log"))
        own = {a for a in seen if any(lo <= a < hi for lo, hi in spans)}
        assert own, name + opt
        assert own <= kept, (name + opt, sorted(hex(a) for a in own - kept)[:5])
