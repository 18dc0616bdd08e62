"""On-disk checkpoints: JSON metadata plus a flat float64 parameter blob.

Directory layout for a checkpoint taken at iteration ``t`` and global step
``s``::

    ckpt-<t>-<s>.meta     JSON: iteration_number, train_step, kind,
                          architecture metadata, and a manifest of
                          (name, shape, offset) for every array
    ckpt-<t>-<s>.params   little-endian float64 values, arrays concatenated
                          in manifest order
    ckpt-<t>-<s>.digest   hex SHA-256 of meta bytes followed by params bytes

Each file is written to a temporary name and renamed into place. The digest
file is written last and marks the checkpoint as committed; a checkpoint
whose digest is missing or does not match is ignored by ``load_checkpoint``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import CheckpointNotFoundError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
_NAME_RE = re.compile(r"^ckpt-(\d+)-(\d+)\.digest$")


def encode_arrays(arrays: dict) -> tuple[list, bytes]:
    """Manifest and concatenated little-endian float64 bytes for ``arrays``."""
    manifest, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append([name, list(a.shape), offset])
        chunks.append(a.tobytes())
        offset += a.size
    return manifest, b"".join(chunks)


def decode_arrays(manifest: list, blob: bytes) -> dict:
    flat = np.frombuffer(blob, dtype="<f8")
    out = {}
    for name, shape, offset in manifest:
        size = int(np.prod(shape)) if shape else 1
        if offset + size > flat.size:
            raise ValueError(f"parameter blob too short for {name}")
        a = flat[offset : offset + size].astype(np.float64).reshape(shape)
        a.setflags(write=False)
        out[name] = a
    return out


def _dumps(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, indent=1).encode("utf-8")


@dataclass
class Checkpoint:
    iteration_number: int
    train_step: int
    metadata: dict
    arrays: dict = field(repr=False)
    kind: str = "train"

    def encode(self) -> tuple[bytes, bytes]:
        manifest, blob = encode_arrays(self.arrays)
        doc = {
            "format_version": FORMAT_VERSION,
            "iteration_number": self.iteration_number,
            "train_step": self.train_step,
            "kind": self.kind,
            "architecture": self.metadata,
            "manifest": manifest,
        }
        return _dumps(doc), blob

    @property
    def digest(self) -> str:
        meta, blob = self.encode()
        return hashlib.sha256(meta + blob).hexdigest()

    @property
    def stem(self) -> str:
        return f"ckpt-{self.iteration_number}-{self.train_step}"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if list(self.arrays) != list(other.arrays):
            return False
        return (
            self.encode() == other.encode()
            and all(
                self.arrays[k].shape == other.arrays[k].shape
                and np.array_equal(self.arrays[k], other.arrays[k])
                for k in self.arrays
            )
        )


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_checkpoint(
    c: Checkpoint, directory, before_commit: Optional[Callable[[], None]] = None
) -> Path:
    """Write ``c`` and return the path of its digest (commit) file.

    ``before_commit`` runs after the data files are in place but before the
    digest is written; an exception there leaves the checkpoint uncommitted.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta, blob = c.encode()
    digest = hashlib.sha256(meta + blob).hexdigest()
    _atomic_write(directory / f"{c.stem}.meta", meta)
    _atomic_write(directory / f"{c.stem}.params", blob)
    if before_commit is not None:
        before_commit()
    path = directory / f"{c.stem}.digest"
    _atomic_write(path, digest.encode("ascii"))
    return path


def committed_stems(directory) -> list[tuple[int, int, str]]:
    """``(iteration, step, stem)`` of every checkpoint with a digest file, newest first."""
    directory = Path(directory)
    if not directory.is_dir():
        return []
    found = []
    for entry in directory.iterdir():
        m = _NAME_RE.match(entry.name)
        if m:
            found.append((int(m.group(1)), int(m.group(2)), entry.name[: -len(".digest")]))
    found.sort(reverse=True)
    return found


def read_checkpoint(directory, stem: str) -> Checkpoint:
    """Read and verify one checkpoint; raises ``ValueError`` on any mismatch."""
    directory = Path(directory)
    expected = (directory / f"{stem}.digest").read_text().strip()
    meta = (directory / f"{stem}.meta").read_bytes()
    blob = (directory / f"{stem}.params").read_bytes()
    if hashlib.sha256(meta + blob).hexdigest() != expected:
        raise ValueError(f"digest mismatch for {stem}")
    doc = json.loads(meta)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format in {stem}")
    return Checkpoint(
        iteration_number=int(doc["iteration_number"]),
        train_step=int(doc["train_step"]),
        metadata=doc["architecture"],
        arrays=decode_arrays(doc["manifest"], blob),
        kind=str(doc["kind"]),
    )


def load_checkpoint(directory) -> Checkpoint:
    """Latest valid checkpoint by (iteration_number, train_step).

    Checkpoints that fail verification are skipped with a warning and the next
    newest one is tried.
    """
    for _, _, stem in committed_stems(directory):
        try:
            return read_checkpoint(directory, stem)
        except (OSError, ValueError, KeyError) as exc:
            log.warning("skipping invalid checkpoint %s: %s", stem, exc)
    raise CheckpointNotFoundError(f"no valid checkpoint in {directory}")


def has_checkpoint(directory) -> bool:
    try:
        load_checkpoint(directory)
    except CheckpointNotFoundError:
        return False
    return True
