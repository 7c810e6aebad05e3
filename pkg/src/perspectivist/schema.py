"""Label spaces: binary, Likert ranges, and constrained multi-binary label sets."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Sequence, Union

LabelValue = Union[int, tuple]

KINDS = ("binary", "likert", "multi_binary")


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSchema:
    kind: str
    min_label: int = 0
    max_label: int = 1
    label_names: tuple = ()
    at_least_one_positive: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown label kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "binary":
            object.__setattr__(self, "min_label", 0)
            object.__setattr__(self, "max_label", 1)
        if self.kind == "likert" and not self.min_label < self.max_label:
            raise SchemaError(f"likert needs min_label < max_label, got {self.min_label}..{self.max_label}")
        if self.kind == "multi_binary":
            names = tuple(self.label_names)
            if not names:
                raise SchemaError("multi_binary schema needs label_names")
            if len(set(names)) != len(names):
                raise SchemaError(f"duplicate label names: {names}")
            object.__setattr__(self, "label_names", names)

    @classmethod
    def binary(cls) -> "LabelSchema":
        return cls("binary")

    @classmethod
    def likert(cls, lo: int, hi: int) -> "LabelSchema":
        return cls("likert", min_label=lo, max_label=hi)

    @classmethod
    def multi_binary(cls, names: Sequence[str], at_least_one_positive: bool = True) -> "LabelSchema":
        return cls("multi_binary", label_names=tuple(names), at_least_one_positive=at_least_one_positive)

    @property
    def ordered(self) -> bool:
        return self.kind != "multi_binary"

    def labels(self) -> list:
        """All valid label values, in canonical order.

        Label sets for multi_binary are tuples of names in declaration order,
        enumerated by size and then lexicographically by name index.
        """
        if self.kind != "multi_binary":
            return list(range(self.min_label, self.max_label + 1))
        n = len(self.label_names)
        out = [] if self.at_least_one_positive else [()]
        for size in range(1, n + 1):
            for idx in combinations(range(n), size):
                out.append(tuple(self.label_names[i] for i in idx))
        return out

    def __len__(self) -> int:
        return len(self.labels())

    def index(self, label: LabelValue) -> int:
        return self.labels().index(self.validate(label))

    def is_valid(self, label: Any) -> bool:
        try:
            self.validate(label)
        except SchemaError:
            return False
        return True

    def validate(self, label: Any) -> LabelValue:
        """Normalize a raw label and check it against the schema.

        Accepts ints or integral strings for binary/likert; for multi_binary a
        list of names or a comma/space separated string. Returns the canonical
        value or raises SchemaError.
        """
        if self.kind == "multi_binary":
            if isinstance(label, str):
                parts = label.replace(",", " ").split()
            elif isinstance(label, (list, tuple, set, frozenset)):
                parts = list(label)
            else:
                raise SchemaError(f"label {label!r} is not a label set")
            unknown = [p for p in parts if p not in self.label_names]
            if unknown:
                raise SchemaError(f"unknown label name(s) {unknown} (valid: {list(self.label_names)})")
            if len(set(parts)) != len(parts):
                raise SchemaError(f"repeated label name in {label!r}")
            if self.at_least_one_positive and not parts:
                raise SchemaError("label set must contain at least one positive label")
            return tuple(n for n in self.label_names if n in parts)

        if isinstance(label, bool):
            value = int(label)
        elif isinstance(label, int):
            value = label
        elif isinstance(label, float) and label.is_integer():
            value = int(label)
        elif isinstance(label, str):
            try:
                f = float(label.strip())
            except ValueError:
                raise SchemaError(f"label {label!r} is not numeric") from None
            if not f.is_integer():
                raise SchemaError(f"label {label!r} is not an integer")
            value = int(f)
        else:
            raise SchemaError(f"label {label!r} has unsupported type {type(label).__name__}")
        if not self.min_label <= value <= self.max_label:
            raise SchemaError(f"label {value} outside {self.min_label}..{self.max_label}")
        return value

    def to_json_label(self, label: LabelValue):
        return list(label) if self.kind == "multi_binary" else int(label)

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == "likert":
            d.update(min_label=self.min_label, max_label=self.max_label)
        if self.kind == "multi_binary":
            d.update(label_names=list(self.label_names), at_least_one_positive=self.at_least_one_positive)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSchema":
        kind = d.get("kind")
        if kind == "likert":
            return cls.likert(int(d["min_label"]), int(d["max_label"]))
        if kind == "multi_binary":
            return cls.multi_binary(d["label_names"], bool(d.get("at_least_one_positive", True)))
        return cls(kind)


@dataclass
class SchemaConfig:
    """Sidecar describing a dataset: its name, label schema and record field names."""

    name: str
    schema: LabelSchema
    field_names: dict = field(default_factory=dict)
    has_explanations: bool = False

    DEFAULT_FIELDS = {
        "instance_id": "id",
        "payload": "payload",
        "language_tag": "lang",
        "annotator_id": "id",
        "demographics": "demographics",
        "rating_annotator": "annotator_id",
        "rating_instance": "instance_id",
        "label": "label",
        "explanation": "explanation",
    }

    def field(self, key: str) -> str:
        return self.field_names.get(key, self.DEFAULT_FIELDS[key])

    def to_dict(self) -> dict:
        d = {"name": self.name, **self.schema.to_dict(), "has_explanations": self.has_explanations}
        if self.field_names:
            d["field_names"] = dict(self.field_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SchemaConfig":
        try:
            schema = LabelSchema.from_dict(d)
        except (KeyError, TypeError) as e:
            raise SchemaError(f"bad schema config: missing {e}") from None
        return cls(
            name=d.get("name", "dataset"),
            schema=schema,
            field_names=dict(d.get("field_names", {})),
            has_explanations=bool(d.get("has_explanations", False)),
        )


# Label spaces of the four competition datasets.
PRESETS = {
    "MP": SchemaConfig("MP", LabelSchema.binary()),
    "CSC": SchemaConfig("CSC", LabelSchema.likert(1, 6)),
    "Par": SchemaConfig("Par", LabelSchema.likert(-5, 5), has_explanations=True),
    "VEN": SchemaConfig(
        "VEN", LabelSchema.multi_binary(["entailment", "neutral", "contradiction"]), has_explanations=True
    ),
}
