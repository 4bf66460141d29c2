#!/usr/bin/env python3
"""Rebuild MovieLens100K ``u.data`` and ``u.item`` from a PyPI-hosted copy.

The GroupLens site is the canonical source.  When only a Python package index is
reachable, the same 100,000 ratings (in the original ``u.data`` row order) and the
per-movie genre lists ship inside the ``recbole`` wheel.  This script downloads that
wheel, extracts the two files and rewrites them in the GroupLens layout:

* ``u.data``: ``user<TAB>item<TAB>rating<TAB>timestamp``
* ``u.item``: ``id|title|release date|video release date|url|<19 genre flags>``

Usage::

    python tools/fetch_ml100k.py [--out data/ml-100k] [--wheel path/to/recbole.whl]
"""

import argparse
import glob
import os
import subprocess
import sys
import tempfile
import zipfile

GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery",
    "Romance", "Sci-Fi", "Thriller", "War", "Western",
]
PREFIX = "recbole/dataset_example/ml-100k/"


def _download_wheel(dest):
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "recbole==1.2.1", "-d", dest],
        check=True,
    )
    wheels = glob.glob(os.path.join(dest, "recbole-*.whl"))
    if not wheels:
        raise SystemExit("recbole wheel not found after download")
    return wheels[0]


def convert(wheel, out):
    os.makedirs(out, exist_ok=True)
    with zipfile.ZipFile(wheel) as zf:
        inter = zf.read(PREFIX + "ml-100k.inter").decode("utf-8").splitlines()
        items = zf.read(PREFIX + "ml-100k.item").decode("utf-8").splitlines()

    with open(os.path.join(out, "u.data"), "w", encoding="utf-8", newline="\n") as fh:
        for line in inter[1:]:
            user, item, rating, ts = line.split("\t")
            fh.write(f"{user}\t{item}\t{int(float(rating))}\t{int(float(ts))}\n")

    rows = []
    for line in items[1:]:
        item_id, title, year, classes = line.split("\t")
        present = set(classes.split())
        unknown = present - set(GENRES)
        if unknown:
            raise SystemExit(f"unexpected genre(s) {sorted(unknown)} for item {item_id}")
        flags = ["1" if g in present else "0" for g in GENRES]
        rows.append((int(item_id), "|".join([item_id, f"{title} ({year})", "", "", ""] + flags)))
    rows.sort()
    with open(os.path.join(out, "u.item"), "w", encoding="utf-8", newline="\n") as fh:
        for _, row in rows:
            fh.write(row + "\n")
    print(f"wrote {len(inter) - 1} ratings and {len(rows)} items to {out}")


def main():
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=os.path.join(root, "data", "ml-100k"))
    parser.add_argument("--wheel", help="use an already downloaded recbole wheel")
    args = parser.parse_args()

    if args.wheel:
        convert(args.wheel, args.out)
    else:
        with tempfile.TemporaryDirectory() as tmp:
            convert(_download_wheel(tmp), args.out)


if __name__ == "__main__":
    main()
