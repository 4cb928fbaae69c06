#!/usr/bin/env python3
"""Reference encoder for one pre-training pair.

Reads two token-record files (segment a, segment b), builds both
vocabularies from their union and prints the encoded example in the text
dump format:

    python3 encode_reference.py a.tok b.tok LABEL > pair.golden
"""
import sys
from collections import Counter

TOKEN_SPECIALS = ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"]
TYPE_SPECIALS = ["[UNK]"]


def read_records(path):
    rows = []
    with open(path, encoding="utf-8") as f:
        for raw in f:
            raw = raw.rstrip("\n")
            if not raw or raw.startswith("#"):
                continue
            cat, text, typ, line = raw.split("\t")
            rows.append((cat, text, typ or None, int(line)))
    return rows


def vocab(strings, specials):
    counts = Counter(strings)
    ranked = sorted(counts, key=lambda s: (-counts[s], s))
    return {w: i for i, w in enumerate(specials + ranked)}


def main():
    a, b, label = read_records(sys.argv[1]), read_records(sys.argv[2]), int(sys.argv[3])
    rows = a + b
    tok = vocab([r[1] for r in rows], TOKEN_SPECIALS)
    typ = vocab([r[2] for r in rows if r[2]], TYPE_SPECIALS)

    layout = [("other", "[CLS]", None)] + [r[:3] for r in a] + [("other", "[SEP]", None)] + [r[:3] for r in b]
    original = [tok.get(text, 4) for _, text, _ in layout]
    masked = [i for i, (_, _, t) in enumerate(layout) if t]
    input_ids = [2 if i in masked else original[i] for i in range(len(layout))]
    segments = [0] * (len(a) + 2) + [1] * len(b)

    def emit(key, values):
        print(key + ":" + "".join(f" {v}" for v in values))

    print("example")
    emit("input_ids", input_ids)
    emit("segment_ids", segments)
    emit("positions", range(len(layout)))
    emit("mask_positions", masked)
    emit("mask_token_targets", [original[i] for i in masked])
    emit("mask_type_targets", [typ.get(layout[i][2], 0) for i in masked])
    print(f"ncp_label: {label}")
    emit("ulm_targets", original[1:] + [3])
    print("end")


if __name__ == "__main__":
    main()
