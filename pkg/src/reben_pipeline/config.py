"""Run configuration: one declarative document, flags override file values.

The config file is a TOML document restricted to the constructs the run
configuration needs: comments, ``key = value`` pairs and one level of
``[section]`` tables, with string, integer, float, boolean and flat
array values.  The resolved configuration hashes canonically so run
manifests can prove two runs used identical settings.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from .errors import DomainError
from .pipeline import Modality

_BARE_KEY = re.compile(r"^[A-Za-z0-9_-]+$")


def _parse_scalar(text: str, where: str) -> Any:
    text = text.strip()
    if not text:
        raise DomainError(f"empty value {where}")
    if text.startswith('"') or text.startswith("'"):
        quote = text[0]
        if len(text) < 2 or not text.endswith(quote):
            raise DomainError(f"unterminated string {where}")
        return text[1:-1]
    if text == "true":
        return True
    if text == "false":
        return False
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        if not inner:
            return []
        return [_parse_scalar(part, where) for part in inner.split(",")]
    try:
        if re.fullmatch(r"[+-]?\d+", text):
            return int(text)
        return float(text)
    except ValueError:
        raise DomainError(f"cannot parse value {text!r} {where}") from None


def parse_toml_subset(text: str) -> dict:
    """Parse the supported TOML subset into nested dictionaries."""
    root: dict[str, Any] = {}
    table = root
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        where = f"on line {lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise DomainError(f"malformed table header {where}")
            name = line[1:-1].strip()
            if not _BARE_KEY.match(name):
                raise DomainError(f"malformed table name {name!r} {where}")
            table = root.setdefault(name, {})
            if not isinstance(table, dict):
                raise DomainError(f"table {name!r} collides with a value {where}")
            continue
        if "=" not in line:
            raise DomainError(f"expected key = value {where}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not _BARE_KEY.match(key):
            raise DomainError(f"malformed key {key!r} {where}")
        # strip trailing comments outside strings
        value = value.strip()
        if not (value.startswith('"') or value.startswith("'")):
            value = value.split("#", 1)[0].strip()
        table[key] = _parse_scalar(value, where)
    return root


@dataclass(frozen=True)
class RunConfig:
    """All tunables of a pipeline run, with the documented defaults."""

    patch_size_m: float = 1200.0
    resolution_m: float = 10.0
    p: float = 0.25
    q: float = 0.25
    coverage_threshold: float = 0.75
    min_label_fraction: float = 0.0
    nomenclature_path: Optional[str] = None
    modality: str = "S1+S2"
    input_dir: Optional[str] = None
    out_dir: Optional[str] = None
    map_size: int = 1 << 30
    seed: int = 0
    jobs: int = 1

    def __post_init__(self) -> None:
        if not self.patch_size_m > 0:
            raise DomainError(f"patch_size_m must be positive: {self.patch_size_m}")
        if not self.resolution_m > 0:
            raise DomainError(f"resolution_m must be positive: {self.resolution_m}")
        if self.p < 0 or self.q < 0 or self.p + self.q > 1:
            raise DomainError(f"split fractions invalid: p={self.p}, q={self.q}")
        if not 0 < self.coverage_threshold <= 1:
            raise DomainError(
                f"coverage_threshold must be in (0, 1]: {self.coverage_threshold}"
            )
        if not 0 <= self.min_label_fraction < 1:
            raise DomainError(
                f"min_label_fraction must be in [0, 1): {self.min_label_fraction}"
            )
        Modality(self.modality)  # raises ValueError on unknown names
        if self.map_size <= 0:
            raise DomainError(f"map_size must be positive: {self.map_size}")
        if self.jobs < 1:
            raise DomainError(f"jobs must be at least 1: {self.jobs}")

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def from_mapping(cls, doc: Mapping) -> "RunConfig":
        """Build from a parsed config document, rejecting unknown keys.

        ``[split]`` with ``p``/``q`` is accepted as the nested spelling of
        the two split fractions.
        """
        known = set(cls.field_names())
        values: dict[str, Any] = {}
        for key, value in doc.items():
            if key == "split":
                if not isinstance(value, Mapping) or not set(value) <= {"p", "q"}:
                    raise DomainError(f"[split] accepts only p and q, got {value!r}")
                values.update(value)
            elif key in known:
                if isinstance(value, Mapping):
                    raise DomainError(f"config key {key!r} must be a value, not a table")
                values[key] = value
            else:
                raise DomainError(f"unknown config key {key!r}")
        return cls(**values)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        return cls.from_mapping(parse_toml_subset(Path(path).read_text()))

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Apply non-None overrides (command-line flags win over the file)."""
        effective = {k: v for k, v in overrides.items() if v is not None}
        unknown = set(effective) - set(self.field_names())
        if unknown:
            raise DomainError(f"unknown config overrides: {sorted(unknown)}")
        return replace(self, **effective) if effective else self

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.field_names()}

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()
