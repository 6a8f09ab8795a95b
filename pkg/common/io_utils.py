from __future__ import annotations

import hashlib
import json
import pathlib
import typing as t

JSONDict = t.Dict[str, t.Any]
PathLike = t.Union[str, pathlib.Path]


def ndjson_iter(path: PathLike) -> t.Iterator[JSONDict]:
    """Yield one object per non-blank line; a bad line names ``path:line``."""
    p = pathlib.Path(path)
    with p.open("r", encoding="utf-8") as f:
        for i, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{p}:{i}: invalid JSON - {e}") from e
            if not isinstance(obj, dict):
                raise ValueError(f"{p}:{i}: expected a JSON object, got {type(obj).__name__}")
            yield obj


def ndjson_write(path: PathLike, rows: t.Iterable[JSONDict]) -> int:
    p = pathlib.Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with p.open("w", encoding="utf-8") as f:
        for obj in rows:
            f.write(json.dumps(obj, separators=(",", ":"), allow_nan=False) + "\n")
            count += 1
    return count


def json_write(path: PathLike, obj: JSONDict) -> None:
    # allow_nan=False: a NaN weight must fail here, not on reload
    p = pathlib.Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(obj, separators=(",", ":"), allow_nan=False) + "\n", encoding="utf-8")


def json_read(path: PathLike) -> JSONDict:
    p = pathlib.Path(path)
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"{p}: invalid JSON - {e}") from e
    if not isinstance(obj, dict):
        raise ValueError(f"{p}: expected a JSON object at top level")
    return obj


def canonical_hash(obj: t.Any, algo: str = "sha256") -> str:
    """Stable content hash using sorted keys and no spaces."""
    data = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    h = hashlib.new(algo)
    h.update(data)
    return f"{algo}:{h.hexdigest()}"
