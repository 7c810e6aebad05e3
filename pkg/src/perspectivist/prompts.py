"""Rater prompts: description, demographics, packed rater examples, target instance."""
from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Protocol, Sequence

from .data import Annotator, Instance, Rating
from .schema import LabelSchema, LabelValue

DEFAULT_HEADROOM = 64
DEFAULT_BUDGET = 3000


class PromptError(ValueError):
    pass


class BudgetError(PromptError):
    def __init__(self, needed: int, budget: int):
        self.needed = needed
        self.budget = budget
        super().__init__(
            f"budget {budget} tokens too small for header + target + headroom "
            f"({needed} tokens needed, short by {needed - budget})"
        )


class TokenCounter(Protocol):
    approximate: bool

    def __call__(self, text: str) -> int: ...


class ApproxTokenCounter:
    """ceil(utf-8 bytes / 4); used when no tokenizer is available."""

    approximate = True

    def __call__(self, text: str) -> int:
        return math.ceil(len(text.encode("utf-8")) / 4)


@dataclass
class PromptTemplate:
    """How one dataset's records become prompt text.

    ``output_style`` is ``"bare"`` (output is just the label, as for MP/CSC) or
    ``"json"`` (output is a JSON object holding ``label_key`` and, when present,
    ``explanation_key``).
    """

    task_description: str
    input_fields: list
    output_style: str = "bare"
    label_key: str = "label"
    explanation_key: str = "explanation"
    demographics_prefix: str = "Annotator demographics:"
    turn_open: str = "<start_of_turn>"
    turn_close: str = "<end_of_turn>"
    include_annotator_id: bool = False
    include_demographics: bool = True
    schema_kind: str = "likert"

    def __post_init__(self):
        if self.output_style not in ("bare", "json"):
            raise PromptError(f"unknown output_style {self.output_style!r}")

    @property
    def string_valued(self) -> bool:
        return self.schema_kind == "multi_binary"

    def label_text(self, label: LabelValue) -> str:
        if isinstance(label, tuple):
            return " ".join(label)
        return str(int(label))

    def output_prefix(self) -> str:
        """Fixed output text emitted before the label value starts."""
        if self.output_style == "bare":
            return ""
        key = json.dumps(self.label_key)
        return "{" + key + (': "' if self.string_valued else ":")

    def value_close(self) -> str:
        """Text that terminates a label value (scores label-set closure)."""
        if self.output_style == "bare":
            return self.turn_close
        return '"' if self.string_valued else ","

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PromptTemplate":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise PromptError(f"unknown template keys: {sorted(unknown)}")
        return cls(**d)


def load_template(path) -> PromptTemplate:
    return PromptTemplate.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_template(t: PromptTemplate, path) -> None:
    Path(path).write_text(json.dumps(t.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


@dataclass
class RenderedPrompt:
    text: str
    token_count: int
    example_count: int
    annotator_id: str
    target_instance_id: str
    seed: int
    example_ids: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def render_input(t: PromptTemplate, inst: Instance) -> str:
    fields = {}
    for name in t.input_fields:
        if name in inst.payload:
            fields[name] = inst.payload[name]
        elif name == "lang" and inst.language_tag is not None:
            fields[name] = inst.language_tag
        else:
            raise PromptError(f"instance {inst.instance_id!r} has no payload field {name!r}")
    return json.dumps(fields)


def render_output(t: PromptTemplate, label: LabelValue, explanation: Optional[str] = None) -> str:
    if t.output_style == "bare":
        return t.label_text(label)
    value = t.label_text(label) if t.string_valued else int(label)
    obj = {t.label_key: value}
    if explanation:
        obj[t.explanation_key] = explanation
    return json.dumps(obj)


def render_example(t: PromptTemplate, r: Rating, inst: Instance) -> str:
    """One demonstration: input line, then the turn-wrapped output, newline-terminated."""
    if r.instance_id != inst.instance_id:
        raise PromptError(f"rating is for {r.instance_id!r} but instance is {inst.instance_id!r}")
    if r.label is None:
        raise PromptError(f"rating ({r.annotator_id}, {r.instance_id}) has no label")
    return f"{render_input(t, inst)}\n{t.turn_open}{render_output(t, r.label, r.explanation)}{t.turn_close}\n"


def render_demographics(t: PromptTemplate, a: Annotator, include: Optional[bool] = None) -> str:
    include = t.include_demographics if include is None else include
    pairs = []
    if include:
        if t.include_annotator_id:
            pairs.append(("annotator_id", a.annotator_id))
        pairs.extend(a.demographics.items())
    if not pairs:
        return t.demographics_prefix
    return t.demographics_prefix + " " + "; ".join(f"{k}: {v}" for k, v in pairs)


def render_header(t: PromptTemplate, a: Annotator) -> str:
    return f"{t.task_description}\n{render_demographics(t, a)}\n"


def render_target(t: PromptTemplate, inst: Instance) -> str:
    return f"{render_input(t, inst)}\n{t.turn_open}{t.output_prefix()}"


def build_prompt(
    t: PromptTemplate,
    annotator: Annotator,
    history: Sequence[Rating],
    target: Instance,
    budget_tokens: int = DEFAULT_BUDGET,
    seed: int = 0,
    counter: Optional[TokenCounter] = None,
    instances: Optional[dict] = None,
    headroom: int = DEFAULT_HEADROOM,
    max_examples: Optional[int] = None,
) -> RenderedPrompt:
    """Pack a rater's examples in seeded random order until the next would overflow.

    ``instances`` maps instance_id -> Instance for the history ratings. Packing
    stops at the first example that does not fit; smaller later examples are not
    tried. ``max_examples`` caps the count (1 gives the one-example ablation).
    """
    counter = counter or ApproxTokenCounter()
    instances = instances or {}
    header = render_header(t, annotator)
    tail = render_target(t, target)
    needed = counter(header + tail) + headroom
    if needed > budget_tokens:
        raise BudgetError(needed, budget_tokens)

    pool = []
    for r in history:
        if r.annotator_id != annotator.annotator_id:
            raise PromptError(f"history rating by {r.annotator_id!r} in prompt for {annotator.annotator_id!r}")
        if r.instance_id == target.instance_id or r.label is None:
            continue
        pool.append(r)
    pool.sort(key=lambda r: r.instance_id)
    random.Random(seed).shuffle(pool)

    body = []
    ids = []
    count = counter(header + tail)
    for r in pool:
        if max_examples is not None and len(body) >= max_examples:
            break
        inst = instances.get(r.instance_id)
        if inst is None:
            raise PromptError(f"no instance record for history rating {r.instance_id!r}")
        ex = render_example(t, r, inst)
        trial = counter(header + "".join(body) + ex + tail)
        if trial + headroom > budget_tokens:
            break
        body.append(ex)
        ids.append(r.instance_id)
        count = trial

    text = header + "".join(body) + tail
    return RenderedPrompt(text, count, len(body), annotator.annotator_id, target.instance_id, seed, ids)


# Task descriptions and field layouts for the four competition datasets.
PRESET_TEMPLATES = {
    "MP": PromptTemplate(
        task_description=(
            "Read a social media post and a reply to it. Decide whether the reply is meant ironically "
            "(1) or not (0). The source platform, the reply's depth in the thread, the language variety "
            "and the language code are given as extra fields."
        ),
        input_fields=["post", "reply", "source", "level", "language_variety", "lang"],
        schema_kind="binary",
    ),
    "CSC": PromptTemplate(
        task_description=(
            "Read a short conversation context and a response. Score the sarcasm of the response from 1 "
            "(not sarcastic) to 6 (very sarcastic)."
        ),
        input_fields=["context", "response", "lang"],
        schema_kind="likert",
    ),
    "Par": PromptTemplate(
        task_description=(
            "Read two questions posted on a question-answering site. Score from -5 (clearly different "
            "questions) to 5 (clearly the same question) how closely they paraphrase each other, and "
            "briefly explain the score."
        ),
        input_fields=["question1", "question2", "lang"],
        output_style="json",
        label_key="paraphrase_rating",
        include_annotator_id=True,
        schema_kind="likert",
    ),
    "VEN": PromptTemplate(
        task_description=(
            "Read a premise (context) and a hypothesis (statement). Label how the hypothesis relates to the "
            "premise with every label that applies out of entailment, neutral and contradiction, and explain "
            "the choice."
        ),
        input_fields=["context", "statement", "lang"],
        output_style="json",
        label_key="nli_label",
        schema_kind="multi_binary",
    ),
}


def template_for(schema: LabelSchema, description: str, input_fields: list, **kw) -> PromptTemplate:
    return PromptTemplate(description, list(input_fields), schema_kind=schema.kind, **kw)
