from __future__ import annotations

import functools
import json
import pathlib
import typing as t
from dataclasses import asdict, dataclass

from jsonschema import Draft202012Validator
from referencing import Registry, Resource

from .io_utils import JSONDict, PathLike, canonical_hash, json_read, json_write, ndjson_iter, ndjson_write

SCHEMA_BASE = pathlib.Path(__file__).resolve().parent / "schema"
CHECKPOINT_SCHEMAS = {"encoder": "encoder.checkpoint.json", "mil": "mil.checkpoint.json"}


def _load_schema(name: str) -> dict:
    return json.loads((SCHEMA_BASE / name).read_text(encoding="utf-8"))


def _registry() -> Registry:
    resources = []
    for path in sorted(SCHEMA_BASE.glob("*.json")):
        schema = _load_schema(path.name)
        resources.append((schema["$id"], Resource.from_contents(schema)))
    return Registry().with_resources(resources)


@functools.lru_cache(maxsize=None)
def _validator(name: str) -> Draft202012Validator:
    return Draft202012Validator(_load_schema(name), registry=_registry())


@dataclass
class BagRecord:
    slide_id: str
    label: int
    bag: t.List[float]

    SCHEMA = "mil.bag.json"

    def validate(self) -> None:
        _validator(self.SCHEMA).validate(asdict(self))


@dataclass
class CheckpointFile:
    """A model checkpoint payload plus the content hash of its layers."""

    payload: JSONDict
    hash: t.Optional[str] = None

    @property
    def kind(self) -> str:
        return str(self.payload.get("kind"))

    def validate(self) -> None:
        schema = CHECKPOINT_SCHEMAS.get(self.kind)
        if schema is None:
            raise ValueError(f"unknown checkpoint kind {self.kind!r}; expected one of {sorted(CHECKPOINT_SCHEMAS)}")
        _validator(schema).validate(self.to_json())
        if self.hash is not None and self.hash != self.layers_hash():
            raise ValueError(f"{self.kind} checkpoint hash mismatch (stored {self.hash}, computed {self.layers_hash()})")

    def layers_hash(self, algo: str = "sha256") -> str:
        return canonical_hash(self.payload.get("layers", []), algo)

    def with_hash(self) -> "CheckpointFile":
        self.hash = self.layers_hash()
        return self

    def to_json(self) -> JSONDict:
        out = dict(self.payload)
        if self.hash is not None:
            out["sha256"] = self.hash
        return out


def write_checkpoint_json(path: PathLike, payload: JSONDict) -> CheckpointFile:
    checkpoint = CheckpointFile(payload=payload).with_hash()
    checkpoint.validate()
    json_write(path, checkpoint.to_json())
    return checkpoint


def read_checkpoint_json(path: PathLike, kind: str) -> JSONDict:
    obj = json_read(path)
    stored = obj.pop("sha256", None)
    checkpoint = CheckpointFile(payload=obj, hash=stored)
    if checkpoint.kind != kind:
        raise ValueError(f"{path}: expected a {kind} checkpoint, found kind={checkpoint.kind!r}")
    checkpoint.validate()
    return checkpoint.payload


def read_bags_ndjson(path: PathLike) -> t.List[BagRecord]:
    out: t.List[BagRecord] = []
    validator = _validator(BagRecord.SCHEMA)
    for obj in ndjson_iter(path):
        validator.validate(obj)
        out.append(BagRecord(**obj))
    if not out:
        raise ValueError(f"{path}: no bags")
    return out


def write_bags_ndjson(path: PathLike, records: t.Iterable[BagRecord]) -> int:
    rows: t.List[JSONDict] = []
    for record in records:
        record.validate()
        rows.append(asdict(record))
    return ndjson_write(path, rows)
