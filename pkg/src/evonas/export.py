"""Front-0 export as CSV or versioned JSON."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .errors import ConfigError, UsageError
from .objectives import accuracy_speed
from .search_space import format_genome

PARETO_SCHEMA = "evonas.pareto/1"
PARETO_COLUMNS = ("genome_id", "error", "params", "flops", "latency_ms", "speed", "genome")


def pareto_rows(state, cfg) -> list[dict]:
    from .engine import front0

    idx = front0(state, cfg)
    if not idx:
        raise UsageError("front 0 of a non-empty population cannot be empty")
    rows = []
    for i in idx:
        g = state.population[i]
        rec = state.records[g.id]
        rows.append({
            "genome_id": g.id,
            "error": repr(rec.error),
            "params": rec.params,
            "flops": rec.flops,
            "latency_ms": repr(float(rec.latency_ms)),
            "speed": repr(float(accuracy_speed(rec, cfg.newcomer_speed))),
            "genome": format_genome(g, state.net.space),
        })
    return rows


def export_pareto(state, cfg, path: str | Path, fmt: str = "json") -> Path:
    """Write front 0 of ``state.population``.

    Numbers are written with the same text as ``fitness.csv`` (JSON keeps
    them as strings for that reason).
    """
    rows = pareto_rows(state, cfg)
    path = Path(path)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, PARETO_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        path.write_text(buf.getvalue())
    elif fmt == "json":
        doc = {
            "schema": PARETO_SCHEMA,
            "generation": state.generation,
            "objectives": list(cfg.objectives),
            "space": state.net.space.to_dict(),
            "front": rows,
        }
        path.write_text(json.dumps(doc, indent=1) + "\n")
    else:
        raise ConfigError(f"unknown export format {fmt!r}; use csv or json")
    return path
