"""Pipeline configuration: embedded defaults plus a key=value override file.

Keys are dotted: ``block.<name>`` and ``data.<name>`` / ``code.<name>`` hold
heuristic weights, the remaining keys are scalars.  ``dump()`` renders the
effective configuration in the same format that ``load()`` reads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .analyses import DEFAULT_STEP_LIMIT
from .ibi import DEFAULT_BLOCK_THRESHOLD, DEFAULT_BLOCK_WEIGHTS

DEFAULT_DATA_WEIGHTS = {
    "pointer_to_instruction": 2,
    "data_access_match": 2,
    "symbol_array": 2,
    "pointed_by_symbol_array": 1,
    "aligned": 1,
    "string": 1,
    "long_string": 2,
    "jump_table_entry": 5,
    "access_conflict": -3,
    "special_section": -5,
}
DEFAULT_DATA_THRESHOLD = 1

DEFAULT_CODE_WEIGHTS = {
    "pointer_to_instruction": 2,
    "used_for_address": 2,
    "uncommon_pointer_operation": -3,
    "compared_to_non_address": -3,
    "special_section": -5,
}
DEFAULT_CODE_THRESHOLD = 0

DEFAULT_SPECIAL_SECTIONS = (".eh_frame", ".eh_frame_hdr", ".gcc_except_table", ".dynamic", ".got", ".plt")


class ConfigError(Exception):
    pass


@dataclass
class PipelineConfig:
    block_weights: dict = field(default_factory=lambda: dict(DEFAULT_BLOCK_WEIGHTS))
    block_threshold: int = DEFAULT_BLOCK_THRESHOLD
    data_weights: dict = field(default_factory=lambda: dict(DEFAULT_DATA_WEIGHTS))
    data_threshold: int = DEFAULT_DATA_THRESHOLD
    code_weights: dict = field(default_factory=lambda: dict(DEFAULT_CODE_WEIGHTS))
    code_threshold: int = DEFAULT_CODE_THRESHOLD
    step_limit: int = DEFAULT_STEP_LIMIT
    call_convention: str = "sysv"
    special_sections: tuple = DEFAULT_SPECIAL_SECTIONS
    jump_table_feedback: bool = True
    jobs: int = 1

    def validate(self) -> None:
        for table in (self.block_weights, self.data_weights, self.code_weights):
            for k, v in table.items():
                if not isinstance(v, int) or not math.isfinite(v):
                    raise ConfigError("weight %s must be an integer, got %r" % (k, v))
        if self.step_limit < 1:
            raise ConfigError("step_limit must be >= 1")
        if self.call_convention not in ("sysv", "kill-all"):
            raise ConfigError("call_convention must be 'sysv' or 'kill-all'")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def dump(self) -> str:
        lines = []
        for prefix, table in (("block", self.block_weights), ("data", self.data_weights),
                              ("code", self.code_weights)):
            for k in sorted(table):
                lines.append("%s.%s=%d" % (prefix, k, table[k]))
        lines += [
            "block_threshold=%d" % self.block_threshold,
            "data_threshold=%d" % self.data_threshold,
            "code_threshold=%d" % self.code_threshold,
            "step_limit=%d" % self.step_limit,
            "call_convention=%s" % self.call_convention,
            "special_sections=%s" % ",".join(self.special_sections),
            "jump_table_feedback=%s" % ("yes" if self.jump_table_feedback else "no"),
            "jobs=%d" % self.jobs,
        ]
        return "\n".join(lines) + "\n"


_TABLES = {"block": "block_weights", "data": "data_weights", "code": "code_weights"}
_INTS = ("block_threshold", "data_threshold", "code_threshold", "step_limit", "jobs")


def _int(key, value, lineno):
    try:
        return int(value, 0)
    except ValueError:
        raise ConfigError("line %d: %s expects an integer, got %r" % (lineno, key, value)) from None


def parse(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    cfg = base or PipelineConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("line %d: expected key=value, got %r" % (lineno, raw))
        key, value = (s.strip() for s in line.split("=", 1))
        if "." in key:
            prefix, name = key.split(".", 1)
            if prefix not in _TABLES:
                raise ConfigError("line %d: unknown key %r" % (lineno, key))
            table = getattr(cfg, _TABLES[prefix])
            if name not in table:
                raise ConfigError("line %d: unknown %s weight %r" % (lineno, prefix, name))
            table[name] = _int(key, value, lineno)
        elif key in _INTS:
            setattr(cfg, key, _int(key, value, lineno))
        elif key == "call_convention":
            cfg.call_convention = value
        elif key == "special_sections":
            cfg.special_sections = tuple(s.strip() for s in value.split(",") if s.strip())
        elif key == "jump_table_feedback":
            if value not in ("yes", "no"):
                raise ConfigError("line %d: jump_table_feedback expects yes or no" % lineno)
            cfg.jump_table_feedback = value == "yes"
        else:
            raise ConfigError("line %d: unknown key %r" % (lineno, key))
    cfg.validate()
    return cfg


def load(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError("cannot read config %s: %s" % (path, e)) from None
    return parse(text)
