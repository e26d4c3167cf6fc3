"""
Artifact storage
CSV, JSON and 16-bit PGM writers for run outputs, each registered with its
checksum in the run manifest.
"""

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from PIL import Image

from app.core.config import settings
from app.core.exceptions import InvalidArgumentError

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    """Provenance of one run: config digest, seed, artifacts and their checksums"""

    command: str
    config_digest: str
    seed: int
    version: str = settings.PROJECT_VERSION
    artifacts: List[Dict[str, str]] = field(default_factory=list)
    started_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    wall_clock_s: float = 0.0

    def add(self, relative_path: str, sha256: str, kind: str) -> None:
        self.artifacts.append({"path": relative_path, "sha256": sha256, "kind": kind})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "version": self.version,
            "started_at": self.started_at,
            "wall_clock_s": self.wall_clock_s,
            "artifacts": self.artifacts,
        }


class ArtifactStore:
    """
    Writes run artifacts under one output directory

    Writes are sequential and ordered; every file lands in the manifest.
    """

    def __init__(self, output_dir: str, manifest: RunManifest):
        self.output_dir = output_dir
        self.manifest = manifest
        self._started = time.perf_counter()
        os.makedirs(output_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def _register(self, name: str, kind: str) -> str:
        path = self.path(name)
        self.manifest.add(name, file_sha256(path), kind)
        logger.debug(f"wrote {path}")
        return path

    def write_csv(self, name: str, frame: pd.DataFrame) -> str:
        """CSV with header row, LF endings and 12 significant digits"""
        os.makedirs(os.path.dirname(self.path(name)) or ".", exist_ok=True)
        frame.to_csv(
            self.path(name),
            index=False,
            float_format=f"%.{settings.CSV_SIGNIFICANT_DIGITS}g",
            lineterminator="\n",
        )
        return self._register(name, "csv")

    def write_json(self, name: str, payload: Any) -> str:
        with open(self.path(name), "w", newline="\n") as f:
            json.dump(payload, f, indent=2, sort_keys=True, default=_json_default)
            f.write("\n")
        return self._register(name, "json")

    def write_pgm(self, name: str, counts: np.ndarray, sidecar: Optional[Dict[str, Any]] = None) -> str:
        """
        16-bit binary PGM (P5, big-endian samples) plus a JSON sidecar

        Counts above the 16-bit range are clipped with a warning.
        """
        counts = np.asarray(counts)
        if counts.ndim != 2:
            raise InvalidArgumentError("PGM frames must be 2-D")
        data = np.rint(counts).astype(np.int64)
        saturated = int(np.count_nonzero(data > settings.PGM_MAX_COUNT))
        if saturated:
            logger.warning(f"{name}: {saturated} pixels saturate at {settings.PGM_MAX_COUNT} counts")
        data = np.clip(data, 0, settings.PGM_MAX_COUNT).astype(np.int32)
        os.makedirs(os.path.dirname(self.path(name)) or ".", exist_ok=True)
        Image.fromarray(data).save(self.path(name), format="PPM")
        path = self._register(name, "pgm")
        if sidecar is not None:
            self.write_json(os.path.splitext(name)[0] + ".json", sidecar)
        return path

    def finalize(self) -> str:
        """Write manifest.json; it lists every artifact but not itself"""
        self.manifest.wall_clock_s = round(time.perf_counter() - self._started, 3)
        path = self.path(MANIFEST_FILE)
        with open(path, "w", newline="\n") as f:
            json.dump(self.manifest.to_dict(), f, indent=2)
            f.write("\n")
        logger.info(f"{len(self.manifest.artifacts)} artifacts written to {self.output_dir}")
        return path


def read_pgm(path: str) -> np.ndarray:
    with Image.open(path) as image:
        return np.asarray(image, dtype=np.int64)


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")
