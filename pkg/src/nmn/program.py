"""Reasoning-program DSL: opcode catalog, parsing, consolidation and validation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Dict, List, Optional, Tuple

ATTENTION, BOOLEAN, ANSWER = "attention", "boolean", "answer"
KINDS = (ATTENTION, BOOLEAN, ANSWER)


class ProgramError(ValueError):
    code = "program-error"


class MalformedProgram(ProgramError):
    code = "malformed-json"


class UnknownOpcode(ProgramError):
    code = "unknown-opcode"


class ForwardReference(ProgramError):
    code = "forward-reference"


@dataclass(frozen=True)
class Opcode:
    name: str
    output_kind: str
    input_kinds: Tuple[str, ...] = ()
    takes_text_arg: bool = False

    @property
    def arity(self) -> int:
        return len(self.input_kinds)


def _catalog(*ops: Opcode) -> Dict[str, Opcode]:
    out: Dict[str, Opcode] = {}
    for op in ops:
        if op.name in out:
            raise ValueError(f"duplicate opcode {op.name}")
        out[op.name] = op
    return out


CATALOG: Dict[str, Opcode] = _catalog(
    Opcode("Select", ATTENTION, (), True),
    Opcode("FilterAttr", ATTENTION, (ATTENTION,), True),
    Opcode("FilterName", ATTENTION, (ATTENTION,), True),
    Opcode("RelateSub", ATTENTION, (ATTENTION,), True),
    Opcode("RelateObj", ATTENTION, (ATTENTION,), True),
    Opcode("And", BOOLEAN, (BOOLEAN, BOOLEAN), False),
    Opcode("Or", BOOLEAN, (BOOLEAN, BOOLEAN), False),
    Opcode("Exist", BOOLEAN, (ATTENTION,), False),
    Opcode("VerifyAttr", BOOLEAN, (ATTENTION,), True),
    Opcode("VerifyRel", BOOLEAN, (ATTENTION, ATTENTION), True),
    Opcode("QueryName", ANSWER, (ATTENTION,), False),
    Opcode("QueryAttr", ANSWER, (ATTENTION,), True),
    Opcode("ChooseAttr", ANSWER, (ATTENTION,), True),
    Opcode("ChooseName", ANSWER, (ATTENTION,), True),
)


@lru_cache(maxsize=None)
def consolidation_table() -> Dict[str, str]:
    text = resources.files("nmn").joinpath("data/consolidation.json").read_text(encoding="utf-8")
    return json.loads(text)


def consolidate_opcode(raw: str, catalog: Optional[Dict[str, Opcode]] = None) -> str:
    """Map a raw (dataset-specific) module name onto its canonical catalog entry."""
    catalog = CATALOG if catalog is None else catalog
    if raw in catalog:
        return raw
    name = consolidation_table().get(raw)
    if name is None or name not in catalog:
        raise UnknownOpcode(f"unknown opcode {raw!r}")
    return name


@dataclass
class ProgramStep:
    index: int
    op: str
    deps: Tuple[int, ...] = ()
    arg: Optional[str] = None

    @property
    def opcode(self) -> Opcode:
        return CATALOG[self.op]

    @property
    def output_kind(self) -> str:
        return CATALOG[self.op].output_kind

    def to_dict(self) -> dict:
        out = {"op": self.op, "deps": list(self.deps)}
        if self.arg is not None:
            out["arg"] = self.arg
        return out


@dataclass
class Program:
    id: str
    steps: List[ProgramStep] = field(default_factory=list)
    question: Optional[str] = None

    @property
    def kinds(self) -> List[str]:
        return [s.output_kind for s in self.steps]

    def to_dict(self) -> dict:
        out = {"id": self.id, "steps": [s.to_dict() for s in self.steps]}
        if self.question is not None:
            out["question"] = self.question
        return out

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def __len__(self):
        return len(self.steps)


def program_from_dict(obj: dict, catalog: Optional[Dict[str, Opcode]] = None) -> Program:
    if not isinstance(obj, dict) or not isinstance(obj.get("steps"), list):
        raise MalformedProgram("program must be an object with a 'steps' list")
    steps = []
    for i, raw in enumerate(obj["steps"]):
        if not isinstance(raw, dict) or not isinstance(raw.get("op"), str):
            raise MalformedProgram(f"step {i}: expected an object with a string 'op'")
        op = consolidate_opcode(raw["op"], catalog)
        deps = raw.get("deps", [])
        if not isinstance(deps, list) or not all(isinstance(d, int) and not isinstance(d, bool) for d in deps):
            raise MalformedProgram(f"step {i}: deps must be a list of integers")
        for d in deps:
            if d < 0 or d >= i:
                raise ForwardReference(f"step {i}: dependency {d} does not refer to an earlier step")
        arg = raw.get("arg")
        if arg is not None and not isinstance(arg, str):
            raise MalformedProgram(f"step {i}: arg must be a string")
        steps.append(ProgramStep(i, op, tuple(deps), arg))
    question = obj.get("question")
    return Program(str(obj.get("id", "")), steps, question)


def parse_program(text: str, catalog: Optional[Dict[str, Opcode]] = None) -> Program:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedProgram(f"malformed json: {exc}") from exc
    return program_from_dict(obj, catalog)


def read_programs(path) -> List[Program]:
    with open(path, encoding="utf-8") as fh:
        return [parse_program(line) for line in fh if line.strip()]


def write_programs(path, programs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in programs:
            fh.write(p.serialize() + "\n")


@dataclass(frozen=True)
class Diagnostic:
    step: int
    code: str
    reason: str

    def __str__(self):
        return f"step {self.step}: {self.code}: {self.reason}"


def validate_program(p: Program, catalog: Optional[Dict[str, Opcode]] = None) -> List[Diagnostic]:
    """Type-check a parsed program; an empty list means it is valid."""
    catalog = CATALOG if catalog is None else catalog
    diags: List[Diagnostic] = []
    if not p.steps:
        return [Diagnostic(-1, "empty", "program has no steps")]

    kinds: List[Optional[str]] = []
    used = set()
    for t, step in enumerate(p.steps):
        op = catalog.get(step.op)
        if op is None:
            diags.append(Diagnostic(t, "unknown-opcode", f"{step.op!r} is not in the catalog"))
            kinds.append(None)
            continue
        kinds.append(op.output_kind)
        if step.index != t:
            diags.append(Diagnostic(t, "index", f"step index {step.index} != position {t}"))
        if len(step.deps) != op.arity:
            diags.append(Diagnostic(t, "arity", f"{op.name} takes {op.arity} dependencies, got {len(step.deps)}"))
        for d, want in zip(step.deps, op.input_kinds):
            if not 0 <= d < t:
                diags.append(Diagnostic(t, "forward-reference", f"dependency {d} is not an earlier step"))
                continue
            got = kinds[d]
            if got is not None and got != want:
                diags.append(Diagnostic(t, "kind-mismatch", f"{op.name} needs {want} input, step {d} gives {got}"))
        used.update(step.deps)
        if op.takes_text_arg and not step.arg:
            diags.append(Diagnostic(t, "missing-arg", f"{op.name} requires a text argument"))
        if not op.takes_text_arg and step.arg is not None:
            diags.append(Diagnostic(t, "unexpected-arg", f"{op.name} takes no text argument"))
        if op.name in ("ChooseAttr", "ChooseName") and step.arg and len(split_choices(step.arg)) < 2:
            diags.append(Diagnostic(t, "choices", f"{op.name} needs two candidates 'a|b', got {step.arg!r}"))

    last = len(p.steps) - 1
    if kinds[last] not in (ANSWER, BOOLEAN, None):
        diags.append(Diagnostic(last, "terminal", f"last step must give an answer, got {kinds[last]}"))
    for t in range(last):
        if kinds[t] == ANSWER:
            diags.append(Diagnostic(t, "terminal", "only the last step may produce an answer"))
        if t not in used:
            diags.append(Diagnostic(t, "dead-step", "output is never consumed"))
    return diags


def split_choices(arg: str) -> List[str]:
    return [c for c in arg.split("|") if c]
