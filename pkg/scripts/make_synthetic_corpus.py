"""Write the small synthetic document corpus and embeddings used by configs/docs.ini.

Usage: python scripts/make_synthetic_corpus.py [outdir]
"""

import json
import sys
from pathlib import Path

import numpy as np

from vardfs.dataio import write_synthetic_corpus


def main(outdir="data/synth_docs"):
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    indicative = write_synthetic_corpus(out / "corpus.tsv", out / "embeddings.txt",
                                        np.random.default_rng(7))
    (out / "indicative.json").write_text(json.dumps(indicative, indent=1))
    print(f"wrote {out}")


if __name__ == "__main__":
    main(*sys.argv[1:])
