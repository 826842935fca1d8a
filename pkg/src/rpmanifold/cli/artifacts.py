"""Deterministic report/table files plus a checksummed manifest."""

import csv
import hashlib
import json
import math
import os
import platform
from datetime import datetime, timezone

from .. import __version__

MANIFEST = "manifest.json"


def _clean(v):
    # JSON has no NaN/inf; keep the file standard
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_clean(x) for x in v]
    return v


def dump_json(obj, path):
    # float repr is the shortest string that round-trips exactly
    text = json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"
    with open(path, "w") as fh:
        fh.write(text)


def _cell(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_manifest(out_dir):
    path = os.path.join(out_dir, MANIFEST)
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        return json.load(fh)


def write_outputs(out_dir, command, cfg, outcome, started, elapsed, forced, workers):
    """Write ``report.json``, tables and ``manifest.json``.

    If a manifest from the same command and config already exists, the new
    checksums are compared with it; returns the list of files that changed.
    """
    os.makedirs(out_dir, exist_ok=True)
    previous = read_manifest(out_dir)
    files = {}
    dump_json(cfg.to_dict(), os.path.join(out_dir, "config.json"))
    files["config.json"] = None
    dump_json(outcome.report, os.path.join(out_dir, "report.json"))
    files["report.json"] = None
    for name, (header, rows) in sorted(outcome.tables.items()):
        write_csv(os.path.join(out_dir, name), header, rows)
        files[name] = None
    checksums = {name: sha256(os.path.join(out_dir, name)) for name in sorted(files)}

    mismatched = []
    verified = None
    if previous and previous.get("config_hash") == cfg.digest() and previous.get("command") == command:
        old = previous.get("checksums", {})
        mismatched = sorted(k for k in checksums if k in old and old[k] != checksums[k])
        verified = not mismatched

    manifest = {
        "command": command,
        "config_hash": cfg.digest(),
        "version": __version__,
        "python": platform.python_version(),
        "seed": cfg.seed,
        "replications": cfg.replications,
        "workers": workers,
        "forced": forced,
        "feasibility": outcome.gate,
        "started_utc": started.astimezone(timezone.utc).isoformat(),
        "finished_utc": datetime.now(timezone.utc).isoformat(),
        "wall_clock_seconds": elapsed,
        "checksums": checksums,
        "verified_against_previous": verified,
        "mismatched_files": mismatched,
    }
    dump_json(manifest, os.path.join(out_dir, MANIFEST))
    return mismatched
