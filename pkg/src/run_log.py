"""Structured run log: JSON lines on disk plus a tagged console echo."""
from __future__ import annotations

import json
import pathlib
import time
import typing as t


class RunLog:
    """Append ``{"ts", "kind", **payload}`` events to ``<log_dir>/<name>.log.jsonl``.

    ``log_dir=None`` keeps the console echo and skips the file. ``quiet=True``
    silences the echo; tests use it to keep output clean.
    """

    def __init__(
        self,
        name: str = "manifold",
        log_dir: t.Optional[t.Union[str, pathlib.Path]] = None,
        quiet: bool = False,
    ) -> None:
        self.name = name
        self.quiet = quiet
        self.path: t.Optional[pathlib.Path] = None
        if log_dir is not None:
            self.path = pathlib.Path(log_dir) / f"{name}.log.jsonl"
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def event(self, kind: str, **payload: t.Any) -> None:
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps({"ts": time.time(), "kind": kind, **payload}, default=float) + "\n")
        if not self.quiet:
            fields = " ".join(f"{key}={_fmt(value)}" for key, value in payload.items())
            print(f"[{self.name}] {kind} {fields}".rstrip())


def _fmt(value: t.Any) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


NULL_LOG = RunLog(quiet=True)


__all__ = ["RunLog", "NULL_LOG"]
