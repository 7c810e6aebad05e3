"""Loading, validating and indexing disagreement datasets.

On-disk layout of a dataset directory::

    schema.json          label kind, bounds/names, optional field-name overrides
    train.json           {"instances": [...], "annotators": [...], "ratings": [...]}
    dev.json
    test.json            ratings may carry ``"label": null`` (assignment only)
    annotators.json      optional, annotator records shared by all splits

Missing split files simply mean the split is absent.
"""
from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .schema import LabelSchema, LabelValue, SchemaConfig, SchemaError

SPLITS = ("train", "dev", "test")


class DatasetError(Exception):
    pass


class ParseError(DatasetError):
    """Malformed file or record; message carries a file/record locator."""


class ValidationError(DatasetError):
    """A record is well-formed but violates a dataset invariant."""


@dataclass(frozen=True)
class Instance:
    instance_id: str
    payload: dict
    language_tag: Optional[str] = None


@dataclass(frozen=True)
class Annotator:
    annotator_id: str
    demographics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Rating:
    annotator_id: str
    instance_id: str
    label: Optional[LabelValue] = None
    explanation: Optional[str] = None

    @property
    def labeled(self) -> bool:
        return self.label is not None


@dataclass
class Split:
    name: str
    instances: dict = field(default_factory=dict)
    annotators: dict = field(default_factory=dict)
    ratings: list = field(default_factory=list)

    def assignments(self) -> dict:
        """instance_id -> annotator ids assigned to it, in rating order."""
        idx: dict = defaultdict(list)
        for r in self.ratings:
            idx[r.instance_id].append(r.annotator_id)
        return dict(idx)

    def labeled_ratings(self) -> list:
        return [r for r in self.ratings if r.label is not None]


@dataclass
class Dataset:
    name: str
    schema: LabelSchema
    splits: dict
    config: Optional[SchemaConfig] = None

    def split(self, name: str) -> Split:
        try:
            return self.splits[name]
        except KeyError:
            raise DatasetError(f"dataset {self.name!r} has no split {name!r} (have {sorted(self.splits)})") from None

    @property
    def annotators(self) -> dict:
        out: dict = {}
        for s in self.splits.values():
            for k, a in s.annotators.items():
                out.setdefault(k, a)
        return out

    def annotator(self, annotator_id: str) -> Annotator:
        for s in self.splits.values():
            if annotator_id in s.annotators:
                return s.annotators[annotator_id]
        raise DatasetError(f"unknown annotator {annotator_id!r}")

    def instance(self, instance_id: str, split: Optional[str] = None) -> Instance:
        names = [split] if split else list(self.splits)
        for n in names:
            s = self.split(n)
            if instance_id in s.instances:
                return s.instances[instance_id]
        raise DatasetError(f"unknown instance {instance_id!r}")


@dataclass
class StatsReport:
    dataset: str
    split: str
    n_ratings: int
    n_instances: int
    n_annotators: int
    mean_per_annotator: float
    min_per_annotator: int
    max_per_annotator: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        rows = [
            ("# Ratings", f"{self.n_ratings:,}"),
            ("# Instances", f"{self.n_instances:,}"),
            ("# Annotators", f"{self.n_annotators:,}"),
            ("# Mean Rat./Ann.", f"{self.mean_per_annotator:.1f}"),
            ("# Min Rat./Ann.", f"{self.min_per_annotator:,}"),
            ("# Max Rat./Ann.", f"{self.max_per_annotator:,}"),
        ]
        width = max(len(k) for k, _ in rows)
        vwidth = max(len(v) for _, v in rows)
        head = f"{self.dataset} / {self.split}"
        return "\n".join([head] + [f"{k:<{width}}  {v:>{vwidth}}" for k, v in rows])


def _read_json(path: Path):
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"{path}: cannot read ({e})") from None
    if not text.strip():
        return {}
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None


def _load_schema_config(path: Path, schema_config) -> SchemaConfig:
    if isinstance(schema_config, SchemaConfig):
        return schema_config
    if isinstance(schema_config, LabelSchema):
        return SchemaConfig(path.name, schema_config)
    if isinstance(schema_config, dict):
        return SchemaConfig.from_dict(schema_config)
    cfg_path = Path(schema_config) if schema_config else path / "schema.json"
    raw = _read_json(cfg_path)
    if not isinstance(raw, dict):
        raise ParseError(f"{cfg_path}: schema config must be a JSON object")
    try:
        return SchemaConfig.from_dict(raw)
    except SchemaError as e:
        raise ParseError(f"{cfg_path}: {e}") from None


def _parse_annotator(rec, where: str, cfg: SchemaConfig) -> Annotator:
    if not isinstance(rec, dict) or cfg.field("annotator_id") not in rec:
        raise ParseError(f"{where}: annotator record needs {cfg.field('annotator_id')!r}")
    demo = rec.get(cfg.field("demographics")) or {}
    if not isinstance(demo, dict):
        raise ParseError(f"{where}: demographics must be an object")
    return Annotator(str(rec[cfg.field("annotator_id")]), {str(k): str(v) for k, v in demo.items()})


def _load_split(fname: Path, split_name: str, cfg: SchemaConfig, shared: dict) -> Split:
    raw = _read_json(fname)
    if not isinstance(raw, dict):
        raise ParseError(f"{fname}: top level must be an object with instances/annotators/ratings")
    split = Split(split_name)
    split.annotators.update(shared)

    for i, rec in enumerate(raw.get("instances", [])):
        where = f"{fname.name}: instances[{i}]"
        if not isinstance(rec, dict) or cfg.field("instance_id") not in rec:
            raise ParseError(f"{where}: instance record needs {cfg.field('instance_id')!r}")
        payload = rec.get(cfg.field("payload"))
        if not isinstance(payload, dict) or not payload:
            raise ValidationError(f"{where}: payload must be a non-empty object")
        iid = str(rec[cfg.field("instance_id")])
        if iid in split.instances:
            raise ValidationError(f"{where}: duplicate instance_id {iid!r}")
        lang = rec.get(cfg.field("language_tag"))
        split.instances[iid] = Instance(iid, payload, None if lang is None else str(lang))

    for i, rec in enumerate(raw.get("annotators", [])):
        a = _parse_annotator(rec, f"{fname.name}: annotators[{i}]", cfg)
        if a.annotator_id in split.annotators and a.annotator_id not in shared:
            raise ValidationError(f"{fname.name}: annotators[{i}]: duplicate annotator_id {a.annotator_id!r}")
        split.annotators[a.annotator_id] = a

    seen = set()
    for i, rec in enumerate(raw.get("ratings", [])):
        where = f"{fname.name}: ratings[{i}]"
        akey, ikey = cfg.field("rating_annotator"), cfg.field("rating_instance")
        if not isinstance(rec, dict) or akey not in rec or ikey not in rec:
            raise ParseError(f"{where}: rating record needs {akey!r} and {ikey!r}")
        aid, iid = str(rec[akey]), str(rec[ikey])
        who = f"{where} (annotator={aid}, instance={iid})"
        if iid not in split.instances:
            raise ValidationError(f"{who}: unknown instance")
        if aid not in split.annotators:
            raise ValidationError(f"{who}: unknown annotator")
        if (aid, iid) in seen:
            raise ValidationError(f"{who}: duplicate (annotator, instance) pair")
        seen.add((aid, iid))
        raw_label = rec.get(cfg.field("label"))
        label = None
        if raw_label is not None:
            try:
                label = cfg.schema.validate(raw_label)
            except SchemaError as e:
                raise ValidationError(f"{who}: {e}") from None
        expl = rec.get(cfg.field("explanation"))
        split.ratings.append(Rating(aid, iid, label, None if expl in (None, "") else str(expl)))
    return split


def load_dataset(path: Union[str, os.PathLike], schema_config=None) -> Dataset:
    """Load a dataset directory.

    ``schema_config`` may be a SchemaConfig, a LabelSchema, a dict, a path to a
    sidecar file, or None to read ``<path>/schema.json``.
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a dataset directory")
    cfg = _load_schema_config(root, schema_config)

    shared: dict = {}
    shared_file = root / "annotators.json"
    if shared_file.exists():
        raw = _read_json(shared_file)
        records = raw.get("annotators", []) if isinstance(raw, dict) else raw
        for i, rec in enumerate(records):
            a = _parse_annotator(rec, f"annotators.json: [{i}]", cfg)
            shared[a.annotator_id] = a

    splits = {}
    for name in SPLITS:
        f = root / f"{name}.json"
        if f.exists():
            splits[name] = _load_split(f, name, cfg, shared)
    if not splits:
        raise DatasetError(f"{root}: no split files ({', '.join(s + '.json' for s in SPLITS)})")
    return Dataset(cfg.name, cfg.schema, splits, cfg)


def split_to_dict(d: Dataset, split: Split) -> dict:
    cfg = d.config or SchemaConfig(d.name, d.schema)
    instances = []
    for inst in sorted(split.instances.values(), key=lambda x: x.instance_id):
        rec = {cfg.field("instance_id"): inst.instance_id, cfg.field("payload"): inst.payload}
        if inst.language_tag is not None:
            rec[cfg.field("language_tag")] = inst.language_tag
        instances.append(rec)
    annotators = [
        {cfg.field("annotator_id"): a.annotator_id, cfg.field("demographics"): a.demographics}
        for a in sorted(split.annotators.values(), key=lambda x: x.annotator_id)
    ]
    ratings = []
    for r in sorted(split.ratings, key=lambda x: (x.instance_id, x.annotator_id)):
        rec = {
            cfg.field("rating_annotator"): r.annotator_id,
            cfg.field("rating_instance"): r.instance_id,
            cfg.field("label"): None if r.label is None else d.schema.to_json_label(r.label),
        }
        if r.explanation is not None:
            rec[cfg.field("explanation")] = r.explanation
        ratings.append(rec)
    return {"instances": instances, "annotators": annotators, "ratings": ratings}


def save_dataset(d: Dataset, path: Union[str, os.PathLike]) -> Path:
    """Write a dataset in the layout ``load_dataset`` reads (records sorted by id)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    cfg = d.config or SchemaConfig(d.name, d.schema)
    (root / "schema.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    for name, split in d.splits.items():
        body = json.dumps(split_to_dict(d, split), indent=1, ensure_ascii=False)
        (root / f"{name}.json").write_text(body + "\n", encoding="utf-8")
    return root


def dataset_stats(d: Dataset, split: str) -> StatsReport:
    s = d.split(split)
    per_ann: dict = defaultdict(int)
    for r in s.ratings:
        per_ann[r.annotator_id] += 1
    counts = list(per_ann.values())
    return StatsReport(
        dataset=d.name,
        split=split,
        n_ratings=len(s.ratings),
        n_instances=len(s.instances),
        n_annotators=len(per_ann),
        mean_per_annotator=(sum(counts) / len(counts)) if counts else 0.0,
        min_per_annotator=min(counts) if counts else 0,
        max_per_annotator=max(counts) if counts else 0,
    )


def rater_history(d: Dataset, annotator_id: str, exclude_instance: Optional[str] = None) -> list:
    """Labeled train ratings of one annotator, ordered by instance_id."""
    d.annotator(annotator_id)
    if "train" not in d.splits:
        return []
    out = [
        r
        for r in d.splits["train"].ratings
        if r.annotator_id == annotator_id and r.label is not None and r.instance_id != exclude_instance
    ]
    out.sort(key=lambda r: r.instance_id)
    return out
