"""Run log and reproducibility check.

Every command appends one JSON line to ``.fragility/history/run-log.jsonl``
inside its output directory: command, seed, a digest of the settings that
determine the results, the report summary and the files written.  Before
appending, the latest entry of the same command with the same digest is
read back; a seeded run is reproduced when its summary matches that entry.
"""

from __future__ import annotations

import hashlib
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Optional

from config import RunConfig
from pipeline import dumps

logger = logging.getLogger(__name__)

_LOG_DIR = Path(".fragility") / "history"
_LOG_FILE = "run-log.jsonl"

# Config sections that only say where and how results are printed.
_PRESENTATION_SECTIONS = {"output"}


def log_path(out_dir: Path) -> Path:
    return Path(out_dir) / _LOG_DIR / _LOG_FILE


def config_digest(config: RunConfig) -> str:
    """Short SHA-256 of every config value that can change a command's numbers."""
    data = config.model_dump(mode="json", exclude=_PRESENTATION_SECTIONS)
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def read_history(
    out_dir: Path,
    limit: int = 10,
    command: Optional[str] = None,
    digest: Optional[str] = None,
) -> list[dict]:
    """Read the last *limit* run entries, oldest first.

    *command* and *digest* filter the entries.  Unreadable lines, such as
    one left by an interrupted write, are skipped.
    """
    path = log_path(out_dir)
    if not path.exists():
        return []

    entries = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError:
            logger.warning("Skipping unreadable history line %d in %s", number, path)
            continue
        if command is not None and entry.get("command") != command:
            continue
        if digest is not None and entry.get("config_digest") != digest:
            continue
        entries.append(entry)
    return entries[-limit:] if limit > 0 else []


def summary_changes(before: dict, after: dict) -> dict[str, list]:
    """Summary keys whose JSON values differ, mapped to ``[before, after]``."""
    changes = {}
    for key in sorted(set(before) | set(after)):
        old, new = before.get(key), after.get(key)
        if json.dumps(old, sort_keys=True) != json.dumps(new, sort_keys=True):
            changes[key] = [old, new]
    return changes


def record_run(
    out_dir: Path,
    command: str,
    config: RunConfig,
    summary: dict,
    outputs: Optional[list] = None,
) -> dict:
    """Compare with the previous identical run, then append this run to the log.

    Returns the ``reproducibility`` block for the report:
    ``previous_timestamp`` of the matching entry (None for a first run),
    ``reproduced`` (None for a first run) and the differing summary
    ``changes``.  A mismatch is logged as a warning.
    """
    digest = config_digest(config)
    summary = json.loads(dumps(summary))
    previous = read_history(out_dir, limit=1, command=command, digest=digest)
    if previous:
        changes = summary_changes(previous[-1].get("summary", {}), summary)
        block = {
            "previous_timestamp": previous[-1].get("timestamp"),
            "reproduced": not changes,
            "changes": changes,
        }
        if changes:
            logger.warning(
                "%s summary differs from the run at %s with identical settings: %s",
                command, block["previous_timestamp"], sorted(changes),
            )
    else:
        block = {"previous_timestamp": None, "reproduced": None, "changes": {}}

    path = log_path(out_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    entry = {
        "timestamp": datetime.now().isoformat(timespec="seconds"),
        "command": command,
        "seed": config.seed,
        "config_digest": digest,
        "summary": summary,
        "outputs": outputs or [],
    }
    with path.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry) + "\n")
    return block
