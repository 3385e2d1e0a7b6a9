"""Write result tables as CSV and a combined JSON summary."""
from __future__ import annotations

import csv
import json
import math
import subprocess
from pathlib import Path

import numpy as np

from .. import __version__
from .config import RunConfig
from .experiments import ResultTable

SCHEMA_VERSION = "1.0"


def _cell(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if hasattr(v, "item"):
        return _json_safe(v.item())
    return v


def code_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_csv(table: ResultTable, path: Path) -> None:
    # no timings here, so reruns with the same seed are byte-identical
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.columns)
        for row in table.rows:
            w.writerow([_cell(v) for v in row])


def emit(tables: list[ResultTable], config: RunConfig, command: str) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    experiments = []
    for t in tables:
        name = "".join(c if c.isalnum() or c in "-_." else "_" for c in t.name)
        write_csv(t, out / f"{name}.csv")
        experiments.append({
            "name": t.name,
            "kind": t.kind,
            "csv": f"{name}.csv",
            "rows": len(t.rows),
            "opts_hash": t.opts_hash,
            "verdicts": t.verdicts,
            "timings_seconds": t.timings,
        })
    summary = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "version": code_version(),
        "seed": config.seed,
        "threads": config.threads,
        "config": config.echo(),
        "experiments": experiments,
        "all_verdicts_pass": all(all(v for v in t.verdicts.values()) for t in tables),
    }
    path = out / "summary.json"
    path.write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True) + "\n")
    return path
