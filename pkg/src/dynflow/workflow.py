"""Actors, templates and workflows.

A template is an ordered list of stages; each stage is either a single role
slot or a parallel group of role slots. A workflow binds one actor id to every
slot, in stage order, with parallel slots in their listed order.
"""
from __future__ import annotations

import ast
import itertools
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence


class ActorRole(str, Enum):
    REDUCER = "reducer"
    PARSER = "parser"
    GENERATOR = "generator"
    DECOMPOSER = "decomposer"
    SCALER = "scaler"
    OPTIMIZER = "optimizer"
    SELECTOR = "selector"


# Roles allowed in the last stage of a template.
FINAL_ROLES = frozenset({ActorRole.GENERATOR, ActorRole.OPTIMIZER, ActorRole.SELECTOR})
# Roles that emit SQL candidates.
SQL_ROLES = frozenset({ActorRole.GENERATOR, ActorRole.SCALER})


class Difficulty(str, Enum):
    EASY = "easy"
    MODERATE = "moderate"
    COMPLEX = "complex"
    HIGHLY_COMPLEX = "highly_complex"


DIFFICULTIES = tuple(Difficulty)

_ID_FORBIDDEN = re.compile(r"[\s,|'\"\[\]]")


class WorkflowError(ValueError):
    """Base class for workflow construction failures."""


class RoleMismatchError(WorkflowError):
    def __init__(self, slot: int, expected: ActorRole, actor_id: str, got: ActorRole):
        super().__init__(
            f"slot {slot}: expected role {expected.value}, actor {actor_id!r} is a {got.value}"
        )
        self.slot = slot


class UnknownActorError(WorkflowError):
    def __init__(self, actor_id: str):
        super().__init__(f"unknown actor {actor_id!r}")
        self.actor_id = actor_id


class ArityError(WorkflowError):
    pass


class InvalidTemplateError(WorkflowError):
    pass


@dataclass(frozen=True)
class Binding:
    """How an actor is executed: ``synthetic`` (planted environment) or
    ``external`` (a child process speaking newline-delimited JSON)."""

    kind: str = "synthetic"
    command: tuple[str, ...] = ()
    env: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "external"):
            raise ValueError(f"unknown binding kind {self.kind!r}")
        if self.kind == "external" and not self.command:
            raise ValueError("external binding needs a command")

    def to_json(self):
        if self.kind == "synthetic":
            return {"kind": "synthetic", "env": self.env} if self.env else "synthetic"
        return {"kind": "external", "command": list(self.command)}

    @classmethod
    def from_json(cls, obj) -> "Binding":
        if obj is None or obj == "synthetic":
            return cls()
        if isinstance(obj, str):
            return cls(kind=obj)
        return cls(kind=obj.get("kind", "synthetic"), command=tuple(obj.get("command", ())),
                   env=obj.get("env"))


@dataclass(frozen=True)
class ActorSpec:
    id: str
    role: ActorRole
    binding: Binding = field(default_factory=Binding)
    cost_hint: float | None = None

    def __post_init__(self):
        if not self.id or _ID_FORBIDDEN.search(self.id):
            raise ValueError(f"invalid actor id {self.id!r}")
        object.__setattr__(self, "role", ActorRole(self.role))
        if self.cost_hint is not None and self.cost_hint < 0:
            raise ValueError("cost_hint must be nonnegative")


@dataclass(frozen=True)
class TemplateStage:
    roles: tuple[ActorRole, ...]
    parallel: bool = False

    def __post_init__(self):
        object.__setattr__(self, "roles", tuple(ActorRole(r) for r in self.roles))
        if self.parallel and len(self.roles) < 2:
            raise InvalidTemplateError("a parallel group needs at least 2 slots")
        if not self.parallel and len(self.roles) != 1:
            raise InvalidTemplateError("a single stage has exactly one slot")

    @classmethod
    def single(cls, role) -> "TemplateStage":
        return cls((role,), False)

    @classmethod
    def group(cls, *roles) -> "TemplateStage":
        return cls(tuple(roles), True)

    @property
    def width(self) -> int:
        return len(self.roles)


@dataclass(frozen=True)
class Template:
    id: str
    stages: tuple[TemplateStage, ...]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise InvalidTemplateError(f"template {self.id!r} has no stages")

    @property
    def slots(self) -> tuple[ActorRole, ...]:
        return tuple(r for s in self.stages for r in s.roles)

    @property
    def max_width(self) -> int:
        return max(s.width for s in self.stages)

    @property
    def complexity_rank(self) -> tuple[int, int, int]:
        return (len(self.stages), len(self.slots), self.max_width)

    def stage_slices(self) -> list[slice]:
        """Slot index ranges of each stage within a flat assignment."""
        out, start = [], 0
        for s in self.stages:
            out.append(slice(start, start + s.width))
            start += s.width
        return out


def complexity_order(templates: Iterable[Template]) -> list[Template]:
    """Simplest first; ties broken by template id."""
    return sorted(templates, key=lambda t: (t.complexity_rank, t.id))


@dataclass(frozen=True)
class ActorPool:
    actors: tuple[ActorSpec, ...]

    def __post_init__(self):
        actors = tuple(sorted(self.actors, key=lambda a: a.id))
        if not actors:
            raise ValueError("actor pool is empty")
        ids = [a.id for a in actors]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate actor ids in pool")
        object.__setattr__(self, "actors", actors)
        object.__setattr__(self, "_index", {a.id: a for a in actors})

    def __contains__(self, actor_id) -> bool:
        return actor_id in self._index

    def __getitem__(self, actor_id: str) -> ActorSpec:
        try:
            return self._index[actor_id]
        except KeyError:
            raise UnknownActorError(actor_id) from None

    def __len__(self) -> int:
        return len(self.actors)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(a.id for a in self.actors)

    def by_role(self, role: ActorRole) -> tuple[str, ...]:
        return tuple(a.id for a in self.actors if a.role == role)


@dataclass(frozen=True)
class MaskVector:
    """Actor availability bits, keyed by actor id (sorted)."""

    bits: tuple[tuple[str, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(sorted((k, int(v)) for k, v in self.bits)))
        if any(v not in (0, 1) for _, v in self.bits):
            raise ValueError("mask bits must be 0 or 1")

    @classmethod
    def full(cls, pool: ActorPool) -> "MaskVector":
        return cls(tuple((i, 1) for i in pool.ids))

    @classmethod
    def from_dict(cls, bits: Mapping[str, int]) -> "MaskVector":
        return cls(tuple(bits.items()))

    def as_dict(self) -> dict[str, int]:
        return dict(self.bits)

    @property
    def retained(self) -> frozenset[str]:
        return frozenset(k for k, v in self.bits if v)

    def __getitem__(self, actor_id: str) -> int:
        return dict(self.bits)[actor_id]

    def key(self) -> str:
        return "".join(str(v) for _, v in self.bits)

    def __le__(self, other: "MaskVector") -> bool:
        a, b = dict(self.bits), dict(other.bits)
        return a.keys() == b.keys() and all(a[k] <= b[k] for k in a)


@dataclass(frozen=True)
class Task:
    task_id: str
    question: str
    db_ref: str
    gold_sql: str
    difficulty: Difficulty = Difficulty.EASY
    knowledge: str | None = None

    def __post_init__(self):
        if not self.gold_sql or not self.gold_sql.strip():
            raise ValueError(f"task {self.task_id}: gold_sql is empty")
        object.__setattr__(self, "difficulty", Difficulty(self.difficulty))


@dataclass(frozen=True)
class Workflow:
    template: Template
    assignment: tuple[str, ...]

    @property
    def template_id(self) -> str:
        return self.template.id

    def stage_actors(self) -> list[tuple[TemplateStage, tuple[str, ...]]]:
        return [(st, self.assignment[sl])
                for st, sl in zip(self.template.stages, self.template.stage_slices())]

    def __str__(self) -> str:
        return canonical_string(self)


# --------------------------------------------------------------------------- ops


def validate_template(t: Template) -> list[str]:
    """Return the list of structural violations; an empty list means ok."""
    violations = []
    last = len(t.stages) - 1
    final = t.stages[last]
    if final.parallel:
        violations.append(f"stage {last}: final stage must be a single slot")
    elif final.roles[0] not in FINAL_ROLES:
        violations.append(
            f"stage {last}: final role {final.roles[0].value} is not generator/optimizer/selector"
        )
    for i, st in enumerate(t.stages):
        if not st.parallel:
            continue
        later = t.stages[i + 1:]
        if not any(not s.parallel and s.roles[0] == ActorRole.SELECTOR for s in later):
            violations.append(f"stage {i}: parallel group without later selector")
    return violations


def f_match(t: Template, assignment: Sequence[str], pool: ActorPool) -> Workflow:
    """Bind actors to the template's slots."""
    violations = validate_template(t)
    if violations:
        raise InvalidTemplateError(f"template {t.id!r}: " + "; ".join(violations))
    slots = t.slots
    assignment = tuple(assignment)
    if len(assignment) != len(slots):
        raise ArityError(
            f"template {t.id!r} has {len(slots)} slots, got {len(assignment)} actors"
        )
    for i, (role, actor_id) in enumerate(zip(slots, assignment)):
        actor = pool[actor_id]
        if actor.role != role:
            raise RoleMismatchError(i, role, actor_id, actor.role)
    return Workflow(t, assignment)


def _kept(pool: ActorPool, mask: MaskVector | None) -> frozenset[str]:
    if mask is None:
        return frozenset(pool.ids)
    if tuple(k for k, _ in mask.bits) != pool.ids:
        raise ValueError("mask domain differs from the actor pool")
    return mask.retained


def count_workflows(templates: Iterable[Template], pool: ActorPool,
                    mask: MaskVector | None = None) -> int:
    keep = _kept(pool, mask)
    total = 0
    for t in templates:
        n = 1
        for role in t.slots:
            n *= sum(1 for a in pool.by_role(role) if a in keep)
        total += n
    return total


def enumerate_workflows(templates: Iterable[Template], pool: ActorPool,
                        mask: MaskVector | None = None) -> list[Workflow]:
    """Every workflow buildable from ``templates`` using only unmasked actors.

    Ordered by template id, then lexicographically by assignment.
    """
    keep = _kept(pool, mask)
    out = []
    for t in sorted(templates, key=lambda t: t.id):
        choices = [[a for a in pool.by_role(role) if a in keep] for role in t.slots]
        for combo in itertools.product(*choices):
            out.append(Workflow(t, combo))
    return out


def canonical_string(w: Workflow) -> str:
    return f"{w.template.id}|{','.join(w.assignment)}"


def parse_canonical(s: str, templates: Iterable[Template], pool: ActorPool) -> Workflow:
    tid, _, rest = s.partition("|")
    by_id = {t.id: t for t in templates}
    if tid not in by_id:
        raise WorkflowError(f"unknown template {tid!r} in {s!r}")
    return f_match(by_id[tid], rest.split(",") if rest else [], pool)


# ---------------------------------------------------------------- answer grammar


class AnswerFormatError(ValueError):
    """A policy answer that fails the format gate. ``kind`` is one of
    missing_think, missing_answer, malformed_list, unknown_actor,
    no_matching_template."""

    KINDS = ("missing_think", "missing_answer", "malformed_list", "unknown_actor",
             "no_matching_template")

    def __init__(self, kind: str, detail: str = ""):
        assert kind in self.KINDS
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind
        self.detail = detail


_THINK = re.compile(r"<think>(.*?)</think>", re.DOTALL)
_ANSWER = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
_LIST = re.compile(r"^list\[(.*)\]$", re.DOTALL)


def _flatten_answer(items) -> list[str]:
    flat = []
    for item in items:
        if isinstance(item, str):
            flat.append(item)
        elif isinstance(item, (list, tuple)) and item and all(isinstance(x, str) for x in item):
            flat.extend(item)
        else:
            raise AnswerFormatError("malformed_list", f"unexpected element {item!r}")
    if not flat:
        raise AnswerFormatError("malformed_list", "empty actor list")
    return flat


def parse_answer(text: str, pool: ActorPool, templates: Iterable[Template]) -> Workflow:
    """Parse ``<think>..</think><answer>list[...]</answer>`` into a workflow.

    Nested lists are flattened in stage order; the template is the first one,
    in complexity order, whose slot roles equal the listed actors' roles.
    Raises :class:`AnswerFormatError`.
    """
    think = _THINK.search(text)
    answers = list(_ANSWER.finditer(text))
    if not answers:
        raise AnswerFormatError("missing_answer")
    if len(answers) > 1:
        raise AnswerFormatError("missing_answer", "more than one <answer> block")
    answer = answers[0]
    if think is None or think.end() > answer.start():
        raise AnswerFormatError("missing_think")
    m = _LIST.match(answer.group(1).strip())
    if m is None:
        raise AnswerFormatError("malformed_list", "answer is not list[...]")
    try:
        items = ast.literal_eval("[" + m.group(1) + "]")
    except (ValueError, SyntaxError) as exc:
        raise AnswerFormatError("malformed_list", str(exc)) from None
    ids = _flatten_answer(items)
    for actor_id in ids:
        if actor_id not in pool:
            raise AnswerFormatError("unknown_actor", actor_id)
    roles = tuple(pool[a].role for a in ids)
    for t in complexity_order(templates):
        if t.slots == roles:
            return f_match(t, ids, pool)
    raise AnswerFormatError("no_matching_template",
                            "[" + ", ".join(r.value for r in roles) + "]")


def render_answer(w: Workflow, think: str = "", nested: bool = False) -> str:
    """Inverse of :func:`parse_answer`."""
    parts = []
    for stage, actors in w.stage_actors():
        if nested and stage.parallel:
            parts.append(repr(list(actors)))
        else:
            parts.extend(repr(a) for a in actors)
    return f"<think>{think}</think><answer>list[{', '.join(parts)}]</answer>"


# ---------------------------------------------------------------------- registry


@dataclass(frozen=True)
class Registry:
    pool: ActorPool
    templates: tuple[Template, ...]

    def template(self, template_id: str) -> Template:
        for t in self.templates:
            if t.id == template_id:
                return t
        raise WorkflowError(f"unknown template {template_id!r}")


def template_from_json(obj) -> Template:
    stages = []
    for st in obj["stages"]:
        kind = st.get("kind", "single")
        if kind not in ("single", "parallel"):
            raise InvalidTemplateError(f"unknown stage kind {kind!r}")
        stages.append(TemplateStage(tuple(st["roles"]), kind == "parallel"))
    return Template(str(obj["id"]), tuple(stages))


def template_to_json(t: Template) -> dict:
    return {"id": t.id, "stages": [
        {"kind": "parallel" if s.parallel else "single", "roles": [r.value for r in s.roles]}
        for s in t.stages
    ]}


def actor_from_json(obj) -> ActorSpec:
    return ActorSpec(obj["id"], ActorRole(obj["role"]), Binding.from_json(obj.get("binding")),
                     obj.get("cost_hint"))


def actor_to_json(a: ActorSpec) -> dict:
    return {"id": a.id, "role": a.role.value, "binding": a.binding.to_json(),
            "cost_hint": a.cost_hint}


def registry_from_json(obj) -> Registry:
    templates = tuple(template_from_json(t) for t in obj["templates"])
    for t in templates:
        violations = validate_template(t)
        if violations:
            raise InvalidTemplateError(f"template {t.id!r}: " + "; ".join(violations))
    return Registry(ActorPool(tuple(actor_from_json(a) for a in obj["actors"])), templates)


def registry_to_json(reg: Registry) -> dict:
    return {"actors": [actor_to_json(a) for a in reg.pool.actors],
            "templates": [template_to_json(t) for t in reg.templates]}


def load_registry(path: str | Path | None = None) -> Registry:
    """Load a registry JSON document; ``None`` loads the bundled one."""
    if path is None:
        text = resources.files("dynflow.data").joinpath("registry.json").read_text()
    else:
        text = Path(path).read_text()
    return registry_from_json(json.loads(text))


def builtin_templates() -> tuple[Template, ...]:
    """Templates 0 and A through I."""
    return load_registry().templates
