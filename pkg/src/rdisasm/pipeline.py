"""Runs the stages in order: boundaries, analyses, jump tables, symbolization."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field

from .analyses import AnalysisResult, run_analyses
from .config import PipelineConfig
from .facts import FactBase, write_relation_file
from .ibi import IbiResult, run_ibi
from .symbolization import SymbolizationResult, detect_jump_tables, symbolize

log = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    fb: FactBase
    ibi: IbiResult
    analyses: AnalysisResult
    symbols: SymbolizationResult
    config: PipelineConfig
    timings: dict = field(default_factory=dict)

    @property
    def layout(self):
        return self.ibi.layout

    def dump_relations(self, directory: str) -> None:
        """Write derived relations in the fact-file format."""
        os.makedirs(directory, exist_ok=True)
        self.ibi.db.dump(os.path.join(directory), names=[
            "block_candidate", "block_points", "block_total", "code_in_block_candidate",
            "possible_target", "invalid", "may_fallthrough", "must_fallthrough"])
        lay = self.layout
        layout_rels = {
            "block": (("addr", "addr"), {(b, lay.block_end[b]) for b in lay.blocks}),
            "code_in_block": (("addr", "addr"), {(a, b) for b, ms in lay.blocks.items() for a in ms}),
            "data_region": (("addr", "addr"), set(lay.data_regions)),
            "discarded_block": (("addr", "text", "addr"), set(lay.discarded)),
        }
        for src in (layout_rels, self.analyses.relations(), self.symbols.relations()):
            for name, (schema, rows) in src.items():
                write_relation_file(os.path.join(directory, name + ".facts"), schema, rows)


def run_pipeline(fb: FactBase, config: PipelineConfig | None = None) -> PipelineResult:
    config = config or PipelineConfig()
    jobs = config.jobs
    t = {}
    t0 = time.perf_counter()
    ibi = run_ibi(fb, config, jobs=jobs)
    t["ibi"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    an = run_analyses(fb, ibi.layout, config, jobs=jobs)
    t["analyses"] = time.perf_counter() - t0
    pea = {a for (a,) in ibi.db["possible_effective_address"]}
    tables = detect_jump_tables(fb, ibi.layout, an, valid_target=pea.__contains__, jobs=jobs)
    if tables and config.jump_table_feedback:
        # the table targets become block seeds and the table bytes are
        # penalized for code candidates; then everything downstream reruns
        targets = sorted({tgt for tb in tables for _e, tgt in tb.entries})
        spans = sorted({tb.span for tb in tables})
        log.info("jump tables: %d, rerunning boundaries with %d targets", len(tables), len(targets))
        t0 = time.perf_counter()
        ibi = run_ibi(fb, config, extra_targets=targets, jump_table_spans=spans, jobs=jobs)
        an = run_analyses(fb, ibi.layout, config, jobs=jobs)
        t["feedback"] = time.perf_counter() - t0
        tables = detect_jump_tables(fb, ibi.layout, an, jobs=jobs)
    t0 = time.perf_counter()
    sym = symbolize(fb, ibi.layout, an, config, tables)
    t["symbolization"] = time.perf_counter() - t0
    return PipelineResult(fb, ibi, an, sym, config, t)
