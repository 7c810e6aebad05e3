"""Print split statistics for the four competition datasets.

DATA_DIR holds either <NAME>/ directories in package layout or the released
<NAME>_<split>.json files (directly or under <NAME>/).

Usage: python3 scripts/split_stats.py DATA_DIR
"""
import sys
from pathlib import Path

from perspectivist.data import dataset_stats, load_dataset
from perspectivist.lewidi import convert_release

ROWS = [("# Ratings", "n_ratings"), ("# Instances", "n_instances"), ("# Annotators", "n_annotators"),
        ("Mean Rat./Ann.", "mean_per_annotator"), ("Min Rat./Ann.", "min_per_annotator"),
        ("Max Rat./Ann.", "max_per_annotator")]


def load(root: Path, name: str):
    sub = root / name
    if (sub / "schema.json").exists():
        return load_dataset(sub)
    return convert_release(sub if sub.is_dir() else root, name)


def main(root: Path) -> None:
    names = ["MP", "CSC", "Par", "VEN"]
    data = {n: load(root, n) for n in names}
    for split in ("train", "dev", "test"):
        stats = {n: dataset_stats(d, split) for n, d in data.items() if split in d.splits}
        print(f"\n{split.upper():<16}" + "".join(f"{n:>10}" for n in stats))
        for label, attr in ROWS:
            cells = []
            for s in stats.values():
                v = getattr(s, attr)
                cells.append(f"{v:>10,.1f}" if isinstance(v, float) else f"{v:>10,}")
            print(f"{label:<16}" + "".join(cells))


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    main(Path(sys.argv[1]))
