# SPDX-FileCopyrightText: 2025 Luis Villa <luis@lu.is>
#
# SPDX-License-Identifier: BlueOak-1.0.0

"""Run directory layout and the hash-indexed run manifest."""

import logging
import shutil
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Iterable, Optional

from utils import file_sha256, read_json, write_json

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
CONFIG_NAME = "config.json"
RUN_SUBDIRS = ('checkpoints', 'metrics', 'patterns', 'figures')


def tool_version() -> str:
    """Installed package version, or the source-tree version when running uninstalled."""
    try:
        return metadata.version('cycle-interpret')
    except metadata.PackageNotFoundError:
        return '0.1.0'


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


class ArtifactError(RuntimeError):
    """Missing artifacts or a hash mismatch; `problems` lists every offending item."""

    def __init__(self, message: str, problems: Optional[list] = None):
        self.problems = list(problems or [])
        if self.problems:
            message = message + ":\n" + "\n".join(f"  - {p}" for p in self.problems)
        super().__init__(message)


@dataclass
class RunManifest:
    """Config snapshot, seeds, tool version, timestamps and a sha256 index of every artifact."""

    config: dict = field(default_factory=dict)
    tool_version: str = field(default_factory=tool_version)
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    commands: list = field(default_factory=list)
    created_at: str = field(default_factory=_now)
    updated_at: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> 'RunManifest':
        known = {k: v for k, v in payload.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class RunDirectory:
    """Manages one run directory: fixed subfolders plus manifest.json."""

    def __init__(self, root: Path | str, create: bool = True, subdirs: Iterable[str] = RUN_SUBDIRS):
        """
        Open (and optionally create) a run directory.

        Args:
            root: Run directory path
            create: Create the directory and its subfolders if missing
            subdirs: Subfolders to create (dataset directories use none)
        """
        self.root = Path(root)
        if create:
            self.root.mkdir(parents=True, exist_ok=True)
            for sub in subdirs:
                (self.root / sub).mkdir(parents=True, exist_ok=True)
        elif not self.root.is_dir():
            raise ArtifactError(f"Run directory {self.root} does not exist")

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    def load_manifest(self) -> RunManifest:
        """Existing manifest, or a fresh one if this run has none yet."""
        if self.manifest_path.exists():
            return RunManifest.from_dict(read_json(self.manifest_path))
        return RunManifest()

    def record(
        self,
        command: str,
        paths: Iterable[Path | str],
        config: Optional[dict] = None,
        seeds: Optional[dict] = None,
        inputs: Optional[dict] = None,
    ) -> RunManifest:
        """
        Hash the files a command wrote and store them in the manifest.

        Entries previously written by the same command are replaced.

        Args:
            command: Command name
            paths: Files or directories written (directories are expanded)
            config: Config snapshot to store
            seeds: Seeds used
            inputs: Input references (data directory, checkpoints) with their hashes

        Returns:
            The updated manifest
        """
        manifest = self.load_manifest()
        manifest.artifacts = {k: v for k, v in manifest.artifacts.items() if v.get('command') != command}

        for item in paths:
            item = Path(item)
            files = sorted(p for p in item.rglob('*') if p.is_file()) if item.is_dir() else [item]
            for file in files:
                if not file.exists():
                    raise ArtifactError(f"Command {command} reported a file it did not write", [str(file)])
                rel = file.resolve().relative_to(self.root.resolve()).as_posix()
                manifest.artifacts[rel] = {'sha256': file_sha256(file), 'command': command}

        if config is not None:
            manifest.config = config
        if seeds is not None:
            manifest.seeds.update(seeds)
        if inputs is not None:
            manifest.inputs.update(inputs)
        manifest.updated_at = _now()
        manifest.commands.append({'command': command, 'at': manifest.updated_at})

        write_json(self.manifest_path, manifest.to_dict())
        logger.info(f"Recorded {command} in {self.manifest_path}")
        return manifest

    def require(
        self,
        relpaths: Iterable[str],
        message: Optional[str] = None,
        known_missing: Iterable[str] = (),
        error: type = ArtifactError,
    ) -> None:
        """
        Raise if any input is missing, naming all of them at once.

        Args:
            relpaths: Paths relative to the run root that must exist
            message: Error message (default names the run directory)
            known_missing: Items the caller already found missing, listed after relpaths
            error: ArtifactError subclass to raise
        """
        missing = [rel for rel in relpaths if not self.path(rel).exists()] + list(known_missing)
        if missing:
            raise error(message or f"Run directory {self.root} is missing required inputs", missing)

    def verify(self, prefix: str = "", command: str = "") -> int:
        """
        Re-hash manifest artifacts.

        Args:
            prefix: Only check artifacts under this relative path
            command: Only check artifacts whose recording command starts with this

        Returns:
            Number of artifacts checked

        Raises:
            ArtifactError: listing every missing file and hash mismatch
        """
        if not self.manifest_path.exists():
            raise ArtifactError(f"No {MANIFEST_NAME} in {self.root}")
        manifest = self.load_manifest()
        selected = {rel: entry for rel, entry in manifest.artifacts.items()
                    if rel.startswith(prefix) and entry.get('command', '').startswith(command)}
        problems = []
        for rel, entry in sorted(selected.items()):
            file = self.path(rel)
            if not file.exists():
                problems.append(f"missing: {rel}")
            elif file_sha256(file) != entry['sha256']:
                problems.append(f"hash mismatch: {rel}")
        if problems:
            raise ArtifactError(f"Run directory {self.root} failed verification", problems)
        return len(selected)

    def clear(self, subdir: str) -> bool:
        """
        Remove one subfolder's contents (e.g. before re-running a command).

        Manifest entries under the subfolder are dropped too, whichever command recorded them.

        Returns:
            True if anything was cleared
        """
        target = self.path(subdir)
        cleared = target.exists()
        if cleared:
            shutil.rmtree(target)
            target.mkdir(parents=True, exist_ok=True)
        self._forget(subdir)
        return cleared

    def _forget(self, subdir: str) -> None:
        if not self.manifest_path.exists():
            return
        prefix = subdir.rstrip('/') + '/'
        manifest = self.load_manifest()
        kept = {rel: entry for rel, entry in manifest.artifacts.items() if not rel.startswith(prefix)}
        if len(kept) != len(manifest.artifacts):
            logger.debug(f"Dropping {len(manifest.artifacts) - len(kept)} manifest entries under {prefix}")
            manifest.artifacts = kept
            write_json(self.manifest_path, manifest.to_dict())

    def list_pattern_methods(self) -> list[str]:
        """Methods with at least one stored pattern, sorted."""
        patterns = self.path('patterns')
        if not patterns.is_dir():
            return []
        return sorted(d.name for d in patterns.iterdir() if d.is_dir() and any(d.glob('*.json')))
