"""Build a DLEC embedding cache for `tasklab` from a sentence-transformers model.

    tasklab instructions --scenario a | python tools/embed_instructions.py out.dlec
"""

import argparse
import struct
import sys

import numpy as np

DIM = 768


def write_cache(path, texts, vectors):
    with open(path, "wb") as f:
        f.write(b"DLEC")
        f.write(struct.pack("<I", len(texts)))
        for text, v in zip(texts, vectors):
            raw = text.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(np.asarray(v, dtype="<f4").tobytes())


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out")
    p.add_argument("--model", default="sentence-transformers/all-mpnet-base-v2")
    args = p.parse_args()

    texts = sorted({line.strip() for line in sys.stdin if line.strip()})
    from sentence_transformers import SentenceTransformer

    model = SentenceTransformer(args.model)
    vectors = model.encode(texts, batch_size=64, show_progress_bar=False)
    if vectors.shape[1] != DIM:
        sys.exit(f"model produces {vectors.shape[1]}-d vectors, expected {DIM}")
    write_cache(args.out, texts, vectors)
    print(f"wrote {len(texts)} embeddings to {args.out}", file=sys.stderr)


if __name__ == "__main__":
    main()
