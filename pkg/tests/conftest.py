import functools
import os
import shutil
import subprocess
import sys

import pytest

HERE = os.path.dirname(os.path.abspath(__file__))
FIXTURES = os.path.join(HERE, "fixtures")
sys.path.insert(0, os.path.join(HERE, "corpus"))

import harness  # noqa: E402

from rdisasm.facts import load_facts  # noqa: E402
from rdisasm.pipeline import run_pipeline  # noqa: E402

FIXTURE_NAMES = ("wget_ex1", "tar_jump_table", "conflict", "diamond_struct",
                 "miss_special_section", "miss_nested_loop")

needs_toolchain = pytest.mark.skipif(not harness.toolchain_available(),
                                     reason="C toolchain not available")


def fixture_path(name: str) -> str:
    return os.path.join(FIXTURES, name + ".facts")


@functools.lru_cache(maxsize=None)
def fixture(name: str):
    return load_facts(fixture_path(name))


@functools.lru_cache(maxsize=None)
def pipeline(name: str):
    return run_pipeline(fixture(name))


def build_elf(tmp_dir, asm: str, name: str = "prog", ldflags=()) -> str:
    """Assemble and link a freestanding Intel-syntax program."""
    src = os.path.join(str(tmp_dir), name + ".s")
    out = os.path.join(str(tmp_dir), name)
    with open(src, "w") as f:
        f.write(".intel_syntax noprefix\n" + asm)
    subprocess.run(["gcc", "-nostdlib", "-static", "-no-pie", "-o", out, src, *ldflags],
                   check=True, capture_output=True)
    return out


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    if not harness.toolchain_available():
        pytest.skip("C toolchain not available")
    d = str(tmp_path_factory.mktemp("corpus"))
    return d, harness.build(d)


@pytest.fixture(scope="session")
def corpus_round_trips(corpus_dir):
    _d, rows = corpus_dir
    cases = harness.load_cases()
    return [harness.round_trip(name, opt, path, twin, cases[name]) for name, opt, path, twin in rows]


@pytest.fixture(scope="session")
def corpus_binaries(corpus_dir):
    return corpus_dir[1]


def has_tool(*tools) -> bool:
    return all(shutil.which(t) for t in tools)


def make_fb(insns, sections=None, data=None, entry=None, extra=(), fields=False):
    """A FactBase from ``(addr, size, opcode, [operand, ...])`` rows.

    Operands are given in fact order (sources first) as ``('reg', name)``,
    ``('imm', value)`` or ``('mem', seg, base, index, mult, disp, size)``.
    With ``fields`` every immediate and memory operand gets a 4-byte field
    at offset ``pos`` so the code symbolizer sees it.
    """
    from rdisasm.facts import FactBase, scan_address_in_data

    rels = {k: [] for k in ("instruction", "op_regdirect", "op_immediate", "op_indirect", "operand_field")}
    oid = 0
    for addr, size, opc, ops in insns:
        ids = []
        for op in ops:
            oid += 1
            ids.append(oid)
            kind = {"reg": "op_regdirect", "imm": "op_immediate", "mem": "op_indirect"}[op[0]]
            rels[kind].append((oid,) + tuple(op[1:]))
            if fields and op[0] != "reg":
                rels["operand_field"].append((addr, len(ids), len(ids), 4))
        rels["instruction"].append((addr, size, "", opc, *(ids + [0] * (4 - len(ids)))))
    if sections is None:
        lo = min(a for a, *_r in insns)
        hi = max(a + s for a, s, *_r in insns)
        sections = [(".text", lo, hi - lo, 1, 0, 1)]
    rels["section"] = sections
    rels["data_byte"] = sorted((data or {}).items())
    rels["entry_point"] = [(entry if entry is not None else min(a for a, *_r in insns),)]
    rels["extra_target"] = [(a,) for a in extra]
    fb = FactBase(rels)
    return fb.replace(address_in_data=scan_address_in_data(fb.sections, fb.data_bytes))
