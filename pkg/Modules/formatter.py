"""
Comparison tables built from stored run artifacts.
"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .errors import ArtifactError
from .metrics import AccuracyMatrix, build_report, mean_report
from .store import ACC_MATRIX, MANIFEST, METRICS, list_seed_dirs, missing_artifacts, read_csv, read_json

PathLike = Union[str, Path]

REPORT_COLUMNS = ["method", "final_accuracy", "global_forgetting", "local_forgetting", "trials", "digest"]


def summarize_experiment(directory: PathLike) -> Dict:
    """One table row: metrics recomputed from each seed's stored matrix, then averaged."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ArtifactError(f"{directory} is not an artifact directory")
    seeds = list_seed_dirs(directory)
    if not seeds:
        raise ArtifactError(f"{directory} holds no seed directories")

    reports, manifest = [], {}
    for seed_dir in seeds:
        missing = missing_artifacts(seed_dir, (MANIFEST, ACC_MATRIX, METRICS))
        if missing:
            raise ArtifactError(f"incomplete artifacts in {seed_dir}: missing {', '.join(missing)}")
        manifest = read_json(seed_dir / MANIFEST)
        matrix = AccuracyMatrix.from_frame(read_csv(seed_dir / ACC_MATRIX))
        reports.append(build_report(matrix))

    mean = mean_report(reports)
    return {
        "method": manifest.get("method", directory.name),
        "final_accuracy": mean.final_accuracy,
        "global_forgetting": mean.global_forgetting,
        "local_forgetting": mean.local_forgetting,
        "trials": len(reports),
        "digest": manifest.get("digest", ""),
    }


def build_report_frame(directories: Sequence[PathLike]) -> pd.DataFrame:
    return pd.DataFrame([summarize_experiment(d) for d in directories], columns=REPORT_COLUMNS)


def _pct(value: Optional[float]) -> str:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return "-"
    return f"{100.0 * value:.1f}"


def format_report_table(frame: pd.DataFrame, title: str = "CLASS-INCREMENTAL RESULTS") -> str:
    """Plain-text table in percent, one decimal; columns A_{1:N} (up), F^G_N (down), F^L_N (down)."""
    width = max([len("Method")] + [len(str(m)) for m in frame["method"]]) + 2
    header = f"{'Method':<{width}}{'A_1:N (↑)':>12}{'F^G_N (↓)':>12}{'F^L_N (↓)':>12}{'trials':>8}"
    table = f"""
{'='*70}
{title}
{'='*70}
{header}
{'-'*70}
"""
    for _, row in frame.iterrows():
        table += (
            f"{str(row['method']):<{width}}"
            f"{_pct(row['final_accuracy']):>12}"
            f"{_pct(row['global_forgetting']):>12}"
            f"{_pct(row['local_forgetting']):>12}"
            f"{int(row['trials']):>8}\n"
        )
    table += f"{'='*70}\n"
    return table


def format_trial_summary(method: str, seeds: List[int], reports: Dict) -> str:
    """Short per-seed listing printed after a run."""
    lines = [f"{method}"]
    for seed in seeds:
        r = reports[seed]
        lines.append(
            f"  seed {seed}: A_1:N {_pct(r.final_accuracy)}  "
            f"F^G {_pct(r.global_forgetting)}  F^L {_pct(r.local_forgetting)}"
        )
    return "\n".join(lines)
