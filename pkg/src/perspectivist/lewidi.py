"""Conversion from the competition's released JSON files into the package layout.

The release ships one file per split, ``<NAME>_<split>.json``, holding an object
keyed by item id. Each item carries ``text`` (payload fields), ``annotators``
(comma-separated ids), ``annotations`` (annotator id -> label) and optional
``lang`` / ``other_info``. Annotator demographics come from
``<NAME>_annotators_meta.json`` when present. Unknown extra keys are ignored.
"""
from __future__ import annotations

import json
from pathlib import Path

from .data import Annotator, Dataset, DatasetError, Instance, Rating, Split, save_dataset
from .schema import PRESETS, SchemaError

SPLIT_NAMES = ("train", "dev", "test")


def _find(root: Path, name: str, split: str):
    hits = sorted(p for p in root.glob(f"*{name}*{split}*.json") if "meta" not in p.name.lower())
    return hits[0] if hits else None


def _ids(value) -> list:
    if value is None:
        return []
    if isinstance(value, str):
        return [x.strip() for x in value.split(",") if x.strip()]
    return [str(x) for x in value]


def _payload(item: dict) -> dict:
    text = item.get("text")
    payload = dict(text) if isinstance(text, dict) else {"text": text}
    other = item.get("other_info")
    if isinstance(other, dict):
        for k, v in other.items():
            # per-annotator side data is not instance payload
            if not isinstance(v, (dict, list)):
                payload.setdefault(k, v)
    if item.get("lang") is not None:
        payload.setdefault("lang", item["lang"])
    return payload


def _explanations(item: dict) -> dict:
    other = item.get("other_info")
    if isinstance(other, dict):
        for key in ("explanations", "explanation"):
            if isinstance(other.get(key), dict):
                return {str(k): v for k, v in other[key].items()}
    return {}


def convert_release(src, name: str) -> Dataset:
    """Build a Dataset for one of the four competition datasets from its release files."""
    if name not in PRESETS:
        raise DatasetError(f"unknown competition dataset {name!r}; expected one of {sorted(PRESETS)}")
    cfg = PRESETS[name]
    root = Path(src)
    annotators: dict = {}
    meta = sorted(root.glob(f"*{name}*meta*.json"))
    if meta:
        for aid, demo in json.loads(meta[0].read_text(encoding="utf-8")).items():
            demo = demo if isinstance(demo, dict) else {}
            annotators[str(aid)] = Annotator(str(aid), {str(k): str(v) for k, v in demo.items()})

    splits = {}
    for split_name in SPLIT_NAMES:
        path = _find(root, name, split_name)
        if path is None:
            continue
        raw = json.loads(path.read_text(encoding="utf-8"))
        split = Split(split_name)
        for iid, item in raw.items():
            iid = str(iid)
            split.instances[iid] = Instance(iid, _payload(item), item.get("lang"))
            labels = item.get("annotations") or {}
            expl = _explanations(item)
            for aid in _ids(item.get("annotators")) or [str(a) for a in labels]:
                split.annotators.setdefault(aid, annotators.get(aid, Annotator(aid)))
                lab = labels.get(aid)
                try:
                    value = None if lab in (None, "") else cfg.schema.validate(lab)
                except SchemaError as e:
                    raise DatasetError(f"{path.name}: item {iid}, annotator {aid}: {e}") from None
                e = expl.get(aid)
                split.ratings.append(Rating(aid, iid, value, None if e in (None, "") else str(e)))
        splits[split_name] = split
    if not splits:
        raise DatasetError(f"{root}: no {name}_<split>.json files found")
    return Dataset(name, cfg.schema, splits, cfg)


def convert_release_to_dir(src, name: str, out) -> Path:
    return save_dataset(convert_release(src, name), out)
