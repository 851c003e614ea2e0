"""
Run manifests: what a command was asked to do, with digests of what it read.

A manifest holds no timestamps, so re-running a command writes the same
manifest bytes again.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

from src import __version__
from src.config import get_logger
from src.errors import ArtifactIOError, ConfigError, ParseError

logger = get_logger("manifest")


def file_digest(path: str) -> str:
    """SHA-256 hex digest of a file's bytes."""
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
    except OSError as exc:
        raise ArtifactIOError(f"Cannot read {path}: {exc}") from exc
    return digest.hexdigest()


def manifest_path_for(output: str, is_dir: bool = False) -> str:
    return os.path.join(output, "manifest.json") if is_dir else f"{output}.manifest.json"


@dataclass
class RunManifest:
    """Command name, its replayable arguments, resolved config, seed and input digests."""

    command: str
    arguments: Dict[str, Any]
    resolved_config: Dict[str, str] = field(default_factory=dict)
    seed: Optional[int] = None
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    version: str = __version__

    @classmethod
    def record(
        cls,
        command: str,
        arguments: Dict[str, Any],
        inputs: Sequence[Optional[str]],
        outputs: Sequence[str],
        resolved_config: Optional[Dict[str, str]] = None,
        seed: Optional[int] = None,
    ) -> "RunManifest":
        digests = {path: file_digest(path) for path in inputs if path}
        return cls(command, dict(arguments), dict(resolved_config or {}), seed, digests, list(outputs))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    def save_to_file(self, filepath: str) -> None:
        """
        Write the manifest as JSON.

        Args:
            filepath: Destination path
        """
        try:
            parent = os.path.dirname(filepath)
            if parent:
                os.makedirs(parent, exist_ok=True)
            with open(filepath, "w", encoding="utf-8", newline="\n") as f:
                f.write(self.to_json())
        except OSError as exc:
            raise ArtifactIOError(f"Cannot write manifest {filepath}: {exc}") from exc
        logger.debug("manifest written to %s", filepath)

    @classmethod
    def load_from_file(cls, filepath: str) -> "RunManifest":
        try:
            with open(filepath, "r", encoding="utf-8") as f:
                data = json.load(f)
        except OSError as exc:
            raise ArtifactIOError(f"Cannot read manifest {filepath}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", filepath, exc.lineno)
        try:
            return cls(**data)
        except TypeError as exc:
            raise ParseError(f"unexpected manifest fields ({exc})", filepath)

    def changed_inputs(self) -> List[str]:
        """Inputs whose current digest differs from the recorded one."""
        return [path for path, digest in sorted(self.inputs.items()) if file_digest(path) != digest]

    def verify_inputs(self) -> None:
        changed = self.changed_inputs()
        if changed:
            raise ConfigError(f"Inputs changed since the manifest was written: {', '.join(changed)}")
