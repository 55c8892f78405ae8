#!/usr/bin/env python3
"""Convert an extracted ogbn-mag download into the hetmp graph directory layout.

    python3 tools/convert_ogbn_mag.py <ogb>/mag <out_dir>

<ogb>/mag is the folder OGB extracts (it holds raw/ and split/). Only numpy and
pandas are needed. The output loads with `hetmp ... --set dataset=<out_dir>`.
"""

import argparse
import json
import os
import struct
import sys

import numpy as np
import pandas as pd

NODE_TYPES = ["paper", "author", "institution", "field_of_study"]
RELATIONS = [
    ("author", "affiliated_with", "institution"),
    ("author", "writes", "paper"),
    ("paper", "cites", "paper"),
    ("paper", "has_topic", "field_of_study"),
]


def read_csv(path, dtype):
    return pd.read_csv(path, header=None, dtype=dtype).values


def write_features(path, x):
    x = np.ascontiguousarray(x, dtype="<f4")
    with open(path, "wb") as f:
        f.write(b"HGF1")
        f.write(struct.pack("<II", x.shape[0], x.shape[1]))
        f.write(x.tobytes())


def write_pairs(path, a, b):
    pd.DataFrame({"a": a, "b": b}).to_csv(path, header=False, index=False)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("mag_dir")
    ap.add_argument("out_dir")
    args = ap.parse_args()
    raw = os.path.join(args.mag_dir, "raw")
    os.makedirs(args.out_dir, exist_ok=True)

    counts_df = pd.read_csv(os.path.join(raw, "num-node-dict.csv.gz"))
    counts = {t: int(counts_df[t].iloc[0]) for t in NODE_TYPES}

    feat = read_csv(os.path.join(raw, "node-feat", "paper", "node-feat.csv.gz"), np.float32)
    if feat.shape[0] != counts["paper"]:
        sys.exit(f"paper features: {feat.shape[0]} rows, expected {counts['paper']}")
    write_features(os.path.join(args.out_dir, "paper.feat.bin"), feat)

    labels = read_csv(os.path.join(raw, "node-label", "paper", "node-label.csv.gz"), np.int64)[:, 0]
    write_pairs(os.path.join(args.out_dir, "paper.labels.csv"), np.arange(len(labels)), labels)

    split_dir = os.path.join(args.mag_dir, "split", "time", "paper")
    idx, name = [], []
    for part in ("train", "valid", "test"):
        rows = read_csv(os.path.join(split_dir, f"{part}.csv.gz"), np.int64)[:, 0]
        idx.append(rows)
        name += [part] * len(rows)
    write_pairs(os.path.join(args.out_dir, "paper.split.csv"), np.concatenate(idx), name)

    for src, rel, dst in RELATIONS:
        edges = read_csv(os.path.join(raw, "relations", f"{src}___{rel}___{dst}", "edge.csv.gz"), np.int64)
        write_pairs(os.path.join(args.out_dir, f"{src}__{rel}__{dst}.edges.csv"), edges[:, 0], edges[:, 1])

    schema = {
        "node_types": NODE_TYPES,
        "relations": [list(r) for r in RELATIONS],
        "node_counts": counts,
        "feature_dims": {"paper": int(feat.shape[1])},
        "num_classes": int(labels.max()) + 1,
    }
    with open(os.path.join(args.out_dir, "schema.json"), "w") as f:
        json.dump(schema, f, indent=2)
        f.write("\n")
    print(f"wrote {sum(counts.values())} nodes to {args.out_dir}")


if __name__ == "__main__":
    main()
