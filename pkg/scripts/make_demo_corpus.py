#!/usr/bin/env python3
"""Materialize the bundled synthetic language corpus to a file.

Usage: python scripts/make_demo_corpus.py [OUT_PATH] [N_BYTES]
"""

import sys

from seqlab.tasks import write_demo_corpus


def main() -> None:
    out = sys.argv[1] if len(sys.argv) > 1 else "demo_corpus.txt"
    n_bytes = int(sys.argv[2]) if len(sys.argv) > 2 else 1_000_000
    write_demo_corpus(out, n_bytes=n_bytes)
    print(f"wrote {n_bytes} bytes to {out}")


if __name__ == "__main__":
    main()
