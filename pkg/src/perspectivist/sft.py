"""Loss-masked training sequences for an external trainer.

Each sequence is a rater prompt split into segments; only the output spans
and their closing turn markers are trainable. This module never trains.
"""
from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

from .data import Dataset, Rating
from .prompts import ApproxTokenCounter, PromptTemplate, render_header, render_input, render_output

log = logging.getLogger(__name__)


class ExportError(Exception):
    pass


@dataclass
class MaskedSequence:
    segments: list
    meta: dict = field(default_factory=dict)

    @property
    def text(self) -> str:
        return "".join(t for t, _ in self.segments)

    @property
    def n_examples(self) -> int:
        return sum(1 for _, train in self.segments if train)

    def to_record(self) -> dict:
        return {"segments": [{"text": t, "train": bool(tr)} for t, tr in self.segments], "meta": self.meta}

    @classmethod
    def from_record(cls, rec: dict) -> "MaskedSequence":
        return cls([(s["text"], bool(s["train"])) for s in rec["segments"]], dict(rec.get("meta", {})))


@dataclass
class TrainingDescriptor:
    """Hyperparameters recorded alongside an export, for the trainer's benefit."""

    stage: str
    max_length: int = 1024
    per_device_train_batch_size: int = 1
    gradient_accumulation_steps: int = 4
    learning_rate: float = 1e-6
    loss: str = "cross-entropy on output spans and closing turn marker only"

    def to_dict(self) -> dict:
        return asdict(self)


DATASET_SFT = TrainingDescriptor("dataset_sft")
POST_TRAINING = TrainingDescriptor("post_training", gradient_accumulation_steps=512, learning_rate=3e-6)


def derive_seed(root: int, *parts) -> int:
    """Stable 32-bit seed for a component, from the root seed and identifying parts."""
    h = hashlib.sha256(":".join([str(root)] + [str(p) for p in parts]).encode()).hexdigest()
    return int(h[:8], 16)


def _example_segments(t: PromptTemplate, r: Rating, inst) -> list:
    return [
        (f"{render_input(t, inst)}\n{t.turn_open}", False),
        (f"{render_output(t, r.label, r.explanation)}{t.turn_close}", True),
        ("\n", False),
    ]


def masked_sequence(t: PromptTemplate, annotator, ratings, instances: dict, meta: Optional[dict] = None) -> MaskedSequence:
    segs = [(render_header(t, annotator), False)]
    for r in ratings:
        segs.extend(_example_segments(t, r, instances[r.instance_id]))
    return MaskedSequence(segs, dict(meta or {}))


def _shuffled_train(d: Dataset, seed: int) -> dict:
    by_ann: dict = {}
    for r in sorted(d.split("train").labeled_ratings(), key=lambda r: (r.annotator_id, r.instance_id)):
        by_ann.setdefault(r.annotator_id, []).append(r)
    for aid, rs in by_ann.items():
        random.Random(derive_seed(seed, "sft", aid)).shuffle(rs)
    return by_ann


def _train_or_fail(d: Dataset):
    if "train" not in d.splits or not d.split("train").labeled_ratings():
        raise ExportError(f"dataset {d.name!r} has no labeled train ratings to export")
    return d.split("train")


def export_per_annotator(d: Dataset, t: PromptTemplate, max_len_tokens: int = 1024, seed: int = 0,
                         counter=None) -> list:
    """One sequence per annotator, trailing examples dropped to fit ``max_len_tokens``."""
    counter = counter or ApproxTokenCounter()
    train = _train_or_fail(d)
    by_ann = _shuffled_train(d, seed)
    for aid in sorted(set(train.annotators) - set(by_ann)):
        log.warning("annotator %s skipped: no labeled train ratings", aid)
    out = []
    for aid, rs in by_ann.items():
        ann = d.annotator(aid)
        header = render_header(t, ann)
        used = 0
        text = header
        for r in rs:
            ex = "".join(s for s, _ in _example_segments(t, r, train.instances[r.instance_id]))
            if counter(text + ex) > max_len_tokens:
                break
            text += ex
            used += 1
        if used == 0:
            log.warning("annotator %s skipped: first example does not fit in %d tokens", aid, max_len_tokens)
            continue
        meta = {"dataset": d.name, "annotator_id": aid, "group": 0, "seed": seed,
                "n_examples": used, "n_dropped": len(rs) - used}
        out.append(masked_sequence(t, ann, rs[:used], train.instances, meta))
    return out


def export_grouped(d: Dataset, t: PromptTemplate, group_size: int, seed: int = 0) -> list:
    """Each annotator's shuffled ratings chunked into groups of ``group_size``, one sequence per group."""
    if group_size < 1:
        raise ExportError("group_size must be >= 1")
    train = _train_or_fail(d)
    out = []
    for aid, rs in _shuffled_train(d, seed).items():
        ann = d.annotator(aid)
        for g, start in enumerate(range(0, len(rs), group_size)):
            chunk = rs[start:start + group_size]
            meta = {"dataset": d.name, "annotator_id": aid, "group": g, "seed": seed, "n_examples": len(chunk)}
            out.append(masked_sequence(t, ann, chunk, train.instances, meta))
    return out


def emit(seqs, path, descriptor: TrainingDescriptor = DATASET_SFT, template: Optional[PromptTemplate] = None) -> tuple:
    """Write sequences as JSONL plus a ``<stem>.config.json`` descriptor; returns both paths."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as f:
            for s in seqs:
                f.write(json.dumps(s.to_record(), ensure_ascii=False) + "\n")
        desc_path = path.with_name(path.stem + ".config.json")
        desc = {**descriptor.to_dict(), "n_sequences": len(seqs), "data_file": path.name}
        if template is not None:
            desc["turn_open"] = template.turn_open
            desc["turn_close"] = template.turn_close
        desc_path.write_text(json.dumps(desc, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise ExportError(f"cannot write {path}: {e}") from None
    return path, desc_path


def load_sequences(path) -> list:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(MaskedSequence.from_record(json.loads(line)))
    return out


def structural_violations(seqs, turn_open: str) -> list:
    """Trainable segments not immediately preceded by a segment ending in ``turn_open``."""
    bad = []
    for k, s in enumerate(seqs):
        prev = ""
        for j, (text, train) in enumerate(s.segments):
            if train and not prev.endswith(turn_open):
                bad.append((k, j))
            prev = text
    return bad
