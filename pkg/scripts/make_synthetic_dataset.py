"""Write the desk-scale synthetic dataset as a one-hot CSV (id,label,<permissions...>).

Usage:
  python3 scripts/make_synthetic_dataset.py [out.csv] [seed]
"""

import sys
from pathlib import Path

import pandas as pd

from malkit.synthetic import make_synthetic

out = Path(sys.argv[1] if len(sys.argv) > 1 else "data/synthetic.csv")
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 42
out.parent.mkdir(parents=True, exist_ok=True)

d = make_synthetic(seed=seed)
df = pd.DataFrame(d.X, columns=list(d.vocab.names))
df.insert(0, "label", list(d.labels))
df.insert(0, "id", list(d.ids))
df.to_csv(out, index=False, lineterminator="\n")
print(f"Wrote {out} (n={d.n}, P={d.P}, families={len(d.families)})")
