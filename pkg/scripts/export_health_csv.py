"""Write the diabetes and breast-cancer tables bundled with scikit-learn as CSV files.

Usage: python scripts/export_health_csv.py OUT_DIR
"""

import sys
from pathlib import Path

from sklearn.datasets import load_breast_cancer, load_diabetes


def export(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, loader in (("diabetes", load_diabetes), ("breastcancer", load_breast_cancer)):
        frame = loader(as_frame=True).frame
        frame.to_csv(out_dir / f"{name}.csv", index=False, float_format="%.17g")
        print(f"{name}: {frame.shape[0]} rows, {frame.shape[1] - 1} features -> {out_dir / (name + '.csv')}")


if __name__ == "__main__":
    export(Path(sys.argv[1] if len(sys.argv) > 1 else "data"))
