"""Export manifests: data-driven tensor name mapping and filtering.

A manifest is a JSON file (or equivalent dict) with:

  {
    "mappings": {"model.layers.0.self_attn.q_proj.weight": "blocks.0.attn.q_proj"},
    "include": ["model.layers.*"],      # optional fnmatch patterns on source names
    "exclude": ["*.bias"],              # optional, wins over include
    "dtype_policy": "fp32"              # the only supported policy
  }

With an empty `mappings`, names are mapped to themselves (identity), which
suits sources that already use the canonical layout. Every mapped name must
match the canonical grammar so the consuming toolkit can resolve it.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from fnmatch import fnmatchcase

CANONICAL_NAME = re.compile(
    r"^(embedding|head|blocks\.\d+\."
    r"(attn\.(q|k|v|o)_proj|mlp\.(gate|up|down)_proj))$"
)

DTYPE_POLICIES = ("fp32",)


class ManifestError(ValueError):
    """Invalid manifest contents."""


@dataclass
class Manifest:
    mappings: dict[str, str] = field(default_factory=dict)
    include: list[str] = field(default_factory=list)
    exclude: list[str] = field(default_factory=list)
    dtype_policy: str = "fp32"

    def __post_init__(self):
        if self.dtype_policy not in DTYPE_POLICIES:
            raise ManifestError(
                f"unsupported dtype policy {self.dtype_policy!r}; "
                f"supported: {', '.join(DTYPE_POLICIES)}"
            )
        targets = list(self.mappings.values())
        if len(set(targets)) != len(targets):
            dupes = sorted({t for t in targets if targets.count(t) > 1})
            raise ManifestError(f"duplicate exported names: {dupes}")
        for source, target in self.mappings.items():
            if not CANONICAL_NAME.match(target):
                raise ManifestError(
                    f"{source!r} maps to {target!r}, which does not match the "
                    "canonical name grammar"
                )

    @classmethod
    def identity(cls, include=(), exclude=()) -> "Manifest":
        """Name-preserving manifest for sources already in canonical layout."""
        return cls(include=list(include), exclude=list(exclude))

    @classmethod
    def from_file(cls, path) -> "Manifest":
        with open(path) as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}: not valid JSON: {e}")
        if not isinstance(raw, dict):
            raise ManifestError(f"{path}: manifest must be a JSON object")
        unknown = set(raw) - {"mappings", "include", "exclude", "dtype_policy"}
        if unknown:
            raise ManifestError(f"{path}: unknown manifest keys {sorted(unknown)}")
        return cls(
            mappings=dict(raw.get("mappings", {})),
            include=list(raw.get("include", [])),
            exclude=list(raw.get("exclude", [])),
            dtype_policy=raw.get("dtype_policy", "fp32"),
        )

    def selects(self, source_name: str) -> bool:
        """Filter a source tensor name through include/exclude patterns."""
        if any(fnmatchcase(source_name, pat) for pat in self.exclude):
            return False
        if self.include:
            return any(fnmatchcase(source_name, pat) for pat in self.include)
        return True

    def target_name(self, source_name: str) -> str:
        """Canonical export name for a selected source tensor."""
        if self.mappings:
            try:
                return self.mappings[source_name]
            except KeyError:
                raise ManifestError(
                    f"source tensor {source_name!r} has no mapping; map it "
                    "explicitly or exclude it"
                )
        if not CANONICAL_NAME.match(source_name):
            raise ManifestError(
                f"identity export requires canonical source names; "
                f"{source_name!r} does not match the grammar"
            )
        return source_name
