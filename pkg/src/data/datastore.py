"""
Demonstration storage: the "CPNT" trajectory format (one file per trajectory),
the JSON dataset manifest, and leave-one-task-out splitting with an access audit.

CPNT layout (all little-endian):
    magic "CPNT" | version u32 | step count u32 | action width u32 | image dims 3 x u32
    per step: image f32 row-major, action f32
    goal image f32
"""
import fcntl
import hashlib
import json
import logging
import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np

from src.core.errors import ContractViolation, DatasetIOError, ensure

logger = logging.getLogger(__name__)

TRAJ_MAGIC = b"CPNT"
TRAJ_VERSION = 1
MANIFEST_VERSION = 1
HEADER = struct.Struct("<4sIIIIII")
MANIFEST_NAME = "manifest.json"


@dataclass
class Trajectory:
    task_id: str
    seed: int
    images: np.ndarray
    actions: np.ndarray
    success: bool = True

    @property
    def steps(self) -> int:
        return len(self.images)

    @property
    def goal_image(self) -> np.ndarray:
        return self.images[-1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def validate(self) -> None:
        ensure(self.images.ndim == 4, f"images must be [T, H, W, C], got {self.images.shape}")
        ensure(self.actions.ndim == 2, f"actions must be [T, A], got {self.actions.shape}")
        ensure(self.steps >= 2, f"a trajectory needs at least 2 steps, got {self.steps}")
        ensure(len(self.actions) == self.steps, "one action per stored image")
        ensure(self.success, "only successful trajectories are stored as demonstrations")


@contextmanager
def _locked(path: Path, mode: str):
    """Open a file under an flock: exclusive for writers, shared for readers.

    Writers open without O_TRUNC and empty the file only once the exclusive
    lock is held, so a reader holding the shared lock always sees whole files.
    """
    writing = "w" in mode
    if writing:
        handle = os.fdopen(os.open(path, os.O_RDWR | os.O_CREAT, 0o644), "r+b")
    else:
        handle = open(path, mode)
    with handle:
        fcntl.flock(handle, fcntl.LOCK_EX if writing else fcntl.LOCK_SH)
        try:
            if writing:
                handle.seek(0)
                handle.truncate()
            yield handle
        finally:
            fcntl.flock(handle, fcntl.LOCK_UN)


def encode_trajectory(traj: Trajectory) -> bytes:
    traj.validate()
    height, width, channels = traj.images.shape[1:]
    images = np.ascontiguousarray(traj.images, dtype="<f4")
    actions = np.ascontiguousarray(traj.actions, dtype="<f4")
    chunks = [HEADER.pack(TRAJ_MAGIC, TRAJ_VERSION, traj.steps, traj.action_dim, height, width, channels)]
    for image, action in zip(images, actions):
        chunks.append(image.tobytes())
        chunks.append(action.tobytes())
    chunks.append(images[-1].tobytes())
    return b"".join(chunks)


def decode_trajectory(data: bytes, task_id: str = "", seed: int = -1) -> Trajectory:
    if len(data) < HEADER.size:
        raise DatasetIOError("trajectory file truncated before header")
    magic, version, steps, action_dim, height, width, channels = HEADER.unpack_from(data)
    if magic != TRAJ_MAGIC:
        raise DatasetIOError(f"not a CPNT trajectory (magic {magic!r})")
    if version != TRAJ_VERSION:
        raise DatasetIOError(f"unsupported CPNT version {version}")
    pixels = height * width * channels
    expected = HEADER.size + steps * (pixels + action_dim) * 4 + pixels * 4
    if len(data) != expected:
        raise DatasetIOError(f"trajectory size {len(data)} != expected {expected}")

    values = np.frombuffer(data, dtype="<f4", offset=HEADER.size)
    body = values[:steps * (pixels + action_dim)].reshape(steps, pixels + action_dim)
    images = body[:, :pixels].reshape(steps, height, width, channels).astype(np.float32)
    actions = body[:, pixels:].astype(np.float32)
    goal = values[steps * (pixels + action_dim):].reshape(height, width, channels)
    if steps == 0 or not np.array_equal(goal, images[-1]):
        raise DatasetIOError("goal image does not match the final frame")
    return Trajectory(task_id=task_id, seed=seed, images=images, actions=actions, success=True)


def expected_file_size(steps: int, action_dim: int = 4, image_shape: Tuple[int, int, int] = (84, 84, 3)) -> int:
    pixels = int(np.prod(image_shape))
    return HEADER.size + steps * (pixels + action_dim) * 4 + pixels * 4


def write_trajectory(traj: Trajectory, path: Union[str, Path]) -> Path:
    """Write a trajectory; refuses (ContractViolation) when its invariants do not hold"""
    data = encode_trajectory(traj)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with _locked(path, "wb") as handle:
            handle.write(data)
            handle.flush()
            os.fsync(handle.fileno())
    except OSError as e:
        raise DatasetIOError(f"cannot write trajectory {path}: {e}")
    logger.debug(f"Wrote {traj.task_id} trajectory ({traj.steps} steps) to {path}")
    return path


class AccessAudit:
    """Records every trajectory file read; used to prove holdout demos never leak into training"""

    def __init__(self):
        self.reads: List[Path] = []

    def record(self, path: Path) -> None:
        self.reads.append(Path(path).resolve())

    def touched(self, paths) -> List[Path]:
        wanted = {Path(p).resolve() for p in paths}
        return [p for p in self.reads if p in wanted]


def read_trajectory(path: Union[str, Path], task_id: str = "", seed: int = -1,
                    audit: Optional[AccessAudit] = None) -> Trajectory:
    path = Path(path)
    try:
        with _locked(path, "rb") as handle:
            data = handle.read()
    except OSError as e:
        raise DatasetIOError(f"cannot read trajectory {path}: {e}")
    if audit is not None:
        audit.record(path)
    return decode_trajectory(data, task_id=task_id, seed=seed)


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class ManifestEntry:
    path: str
    seed: int
    steps: int
    sha256: str

    def to_dict(self) -> Dict:
        return {"path": self.path, "seed": self.seed, "steps": self.steps, "sha256": self.sha256}


@dataclass
class DatasetManifest:
    seed: int
    suite_hash: str
    tasks: Dict[str, List[ManifestEntry]] = field(default_factory=dict)
    version: int = MANIFEST_VERSION
    root: Optional[Path] = None

    @property
    def counts(self) -> Dict[str, int]:
        return {task: len(entries) for task, entries in sorted(self.tasks.items())}

    @property
    def task_ids(self) -> List[str]:
        return sorted(self.tasks)

    def to_dict(self) -> Dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "suite_hash": self.suite_hash,
            "counts": self.counts,
            "tasks": {task: [entry.to_dict() for entry in entries] for task, entries in sorted(self.tasks.items())},
        }

    @classmethod
    def from_dict(cls, data: Dict, root: Optional[Path] = None) -> "DatasetManifest":
        if data.get("version") != MANIFEST_VERSION:
            raise DatasetIOError(f"unsupported manifest version {data.get('version')}")
        tasks = {task: [ManifestEntry(**entry) for entry in entries] for task, entries in data["tasks"].items()}
        manifest = cls(seed=data["seed"], suite_hash=data["suite_hash"], tasks=tasks, root=root)
        if data.get("counts", manifest.counts) != manifest.counts:
            raise DatasetIOError("manifest counts disagree with its trajectory lists")
        return manifest

    def resolve(self, entry: ManifestEntry) -> Path:
        return (self.root or Path(".")) / entry.path

    def paths(self, task: str) -> List[Path]:
        return [self.resolve(entry) for entry in self.tasks.get(task, [])]


class TrajectoryStore:
    """A directory of CPNT files plus an atomically rewritten manifest"""

    def __init__(self, root: Union[str, Path], seed: int = 0, suite_hash: str = ""):
        self.root = Path(root)
        self.logger = logging.getLogger(__name__)
        self.manifest = DatasetManifest(seed=seed, suite_hash=suite_hash, root=self.root)
        self.audit = AccessAudit()

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    def add(self, traj: Trajectory) -> ManifestEntry:
        entries = self.manifest.tasks.setdefault(traj.task_id, [])
        relative = Path(traj.task_id) / f"{traj.task_id}_{len(entries):04d}.cpnt"
        path = write_trajectory(traj, self.root / relative)
        entry = ManifestEntry(path=relative.as_posix(), seed=int(traj.seed), steps=traj.steps, sha256=file_sha256(path))
        entries.append(entry)
        return entry

    def save_manifest(self) -> Path:
        """Write the manifest to a temporary file and rename it over the old one"""
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(prefix=".manifest-", suffix=".json", dir=self.root)
            with os.fdopen(fd, "w", encoding="utf-8") as handle:
                json.dump(self.manifest.to_dict(), handle, indent=2, sort_keys=True)
                handle.flush()
                os.fsync(handle.fileno())
            os.replace(tmp, self.manifest_path)
        except OSError as e:
            raise DatasetIOError(f"cannot write manifest in {self.root}: {e}")
        self.logger.info(f"Saved manifest {self.manifest.counts} to {self.manifest_path}")
        return self.manifest_path

    @classmethod
    def open(cls, root: Union[str, Path], suite_hash: Optional[str] = None, verify_hashes: bool = False) -> "TrajectoryStore":
        """Load and verify a dataset: counts match files on disk, hash matches the suite config"""
        root = Path(root)
        try:
            with open(root / MANIFEST_NAME, "r", encoding="utf-8") as handle:
                data = json.load(handle)
        except (OSError, json.JSONDecodeError) as e:
            raise DatasetIOError(f"cannot load manifest from {root}: {e}")
        manifest = DatasetManifest.from_dict(data, root=root)
        if suite_hash is not None and manifest.suite_hash != suite_hash:
            raise DatasetIOError("dataset was generated with a different suite configuration")
        for task, entries in manifest.tasks.items():
            for entry in entries:
                path = manifest.resolve(entry)
                if not path.is_file():
                    raise DatasetIOError(f"manifest lists missing file {path}")
                if verify_hashes and file_sha256(path) != entry.sha256:
                    raise DatasetIOError(f"checksum mismatch for {path}")
        store = cls(root, seed=manifest.seed, suite_hash=manifest.suite_hash)
        store.manifest = manifest
        return store

    def read(self, task: str, index: int) -> Trajectory:
        entry = self.manifest.tasks[task][index]
        return read_trajectory(self.manifest.resolve(entry), task_id=task, seed=entry.seed, audit=self.audit)

    def iter_task(self, task: str) -> Iterator[Trajectory]:
        for index in range(len(self.manifest.tasks.get(task, []))):
            yield self.read(task, index)


@dataclass
class TrainSplit:
    """Trajectories of every task except the holdout; nothing else is reachable from here"""
    holdout: str
    manifest: DatasetManifest
    entries: Dict[str, List[ManifestEntry]]

    @property
    def tasks(self) -> List[str]:
        return sorted(self.entries)

    def __len__(self) -> int:
        return sum(len(entries) for entries in self.entries.values())

    def paths(self) -> List[Path]:
        return [self.manifest.resolve(entry) for task in self.tasks for entry in self.entries[task]]

    def load(self, audit: Optional[AccessAudit] = None, limit_per_task: Optional[int] = None) -> List[Trajectory]:
        trajectories = []
        for task in self.tasks:
            for entry in self.entries[task][:limit_per_task]:
                trajectories.append(read_trajectory(self.manifest.resolve(entry), task_id=task,
                                                    seed=entry.seed, audit=audit))
        return trajectories


def leave_one_out_split(manifest: DatasetManifest, holdout: str,
                        suite: Optional[Mapping[str, object]] = None) -> Tuple[TrainSplit, object]:
    """Train on every other task; the holdout contributes only its environment spec"""
    if holdout not in manifest.tasks:
        raise ContractViolation(f"unknown holdout task {holdout!r}; dataset has {manifest.task_ids}")
    entries = {task: list(items) for task, items in manifest.tasks.items() if task != holdout}
    split = TrainSplit(holdout=holdout, manifest=manifest, entries=entries)
    held_out = set(manifest.paths(holdout))
    ensure(not held_out.intersection(split.paths()), "train split overlaps the holdout task")
    test_task = suite[holdout] if suite is not None else holdout
    logger.info(f"Leave-one-out split: holdout={holdout}, train tasks={split.tasks} ({len(split)} trajectories)")
    return split, test_task
