"""Run manifests written beside every artifact-producing command."""
from __future__ import annotations

import datetime as _dt
import json
import subprocess
from pathlib import Path

from . import __version__
from .config import Config, config_hash, to_dict


def code_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


def write_manifest(out_dir: str | Path, command: str, cfg: Config, artifacts: dict, started: _dt.datetime,
                   name: str = "manifest.json") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": to_dict(cfg),
        "seeds": {"train": cfg.train.seed},
        "started": started.isoformat(timespec="seconds"),
        "finished": _dt.datetime.now().isoformat(timespec="seconds"),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "code_version": code_version(),
    }
    path = out / name
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path
