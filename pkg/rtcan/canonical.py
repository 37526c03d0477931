"""Canonical JSON and sha256 signatures for configs, manifests and reports."""

from __future__ import annotations

import hashlib
import json
from typing import Any

from pydantic import BaseModel

MANIFEST_VERSION = 1
CHECKPOINT_FORMAT_VERSION = "1.0.0"


def canonical_json(obj: BaseModel | dict[str, Any] | list[Any], indent: int | None = None) -> str:
    """Sorted-key JSON with a trailing newline when indented. Byte-stable for equal inputs."""
    data = obj.model_dump(mode="json") if isinstance(obj, BaseModel) else obj
    text = json.dumps(data, sort_keys=True, indent=indent, ensure_ascii=False)
    return text + "\n" if indent is not None else text


def canonical_sha256(obj: BaseModel | dict[str, Any] | list[Any]) -> str:
    """Stable SHA256 of canonical JSON (sorted keys, compact)."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()
