"""Data migration between central storage and per-node local disks.

Two copy strategies: a single sequential stream, and a multi-stream mode that
runs up to ``workers`` concurrent file copies (parallelism is at file
granularity; large single files see no speedup). Replicas preserve file
contents, relative paths, permission bits and symlink targets. Ownership and
mtimes are not preserved.
"""

from __future__ import annotations

import csv
import hashlib
import os
import random
import shutil
import stat
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (DestinationUnwritable, InsufficientScratch, PartialCopy,
                     SourceMissing)

CENTRAL_TO_LOCAL = "central_to_local"
LOCAL_TO_CENTRAL = "local_to_central"
DIRECTIONS = (CENTRAL_TO_LOCAL, LOCAL_TO_CENTRAL)

DEFAULT_MULTI_WORKERS = 3
BENCH_FILE_BYTES = 1 << 20  # synthetic corpora are built from 1 MiB files


@dataclass(frozen=True)
class CopyMode:
    kind: str  # "single" | "multi"
    workers: int = 1

    @classmethod
    def single(cls) -> "CopyMode":
        return cls(kind="single", workers=1)

    @classmethod
    def multi(cls, workers: int = DEFAULT_MULTI_WORKERS) -> "CopyMode":
        if workers < 1:
            raise ValueError("workers must be >= 1")
        return cls(kind="multi", workers=workers)

    @classmethod
    def parse(cls, text: str) -> "CopyMode":
        text = text.strip().lower()
        if text == "single":
            return cls.single()
        if text == "multi":
            return cls.multi()
        if text.startswith("multi:"):
            return cls.multi(int(text.split(":", 1)[1]))
        raise ValueError(f"unknown copy mode {text!r}")

    def label(self) -> str:
        return self.kind


@dataclass(frozen=True)
class CopyReport:
    direction: str | None
    bytes: int
    files: int
    seconds: float
    mode: CopyMode

    @property
    def mb_per_sec(self) -> float:
        if self.seconds <= 0:
            return 0.0
        return self.bytes / self.seconds / 1e6


@dataclass(frozen=True)
class VerificationReport:
    equal: bool
    mismatches: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class BenchmarkRow:
    direction: str
    mode: CopyMode
    bytes_per_node: int
    files: int
    seconds: float

    @property
    def mb_per_sec(self) -> float:
        if self.seconds <= 0:
            return 0.0
        return self.bytes_per_node / self.seconds / 1e6


@dataclass
class BenchmarkTable:
    rows: list[BenchmarkRow] = field(default_factory=list)

    CSV_HEADER = ["direction", "mode", "workers", "bytes_per_node", "files",
                  "seconds", "mb_per_sec"]

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_HEADER)
            for row in self.rows:
                writer.writerow([
                    row.direction, row.mode.label(), row.mode.workers,
                    row.bytes_per_node, row.files,
                    f"{row.seconds:.6f}", f"{row.mb_per_sec:.3f}",
                ])


def _scan(src: Path):
    """Deterministic lexicographic walk: (dirs, files, symlinks) as rel paths."""
    dirs, files, symlinks = [], [], []
    for root, dirnames, filenames in os.walk(src, followlinks=False):
        dirnames.sort()
        rel_root = Path(root).relative_to(src)
        linked = [d for d in dirnames if (Path(root) / d).is_symlink()]
        for d in linked:
            symlinks.append(rel_root / d)
            dirnames.remove(d)
        for d in dirnames:
            dirs.append(rel_root / d)
        for f in sorted(filenames):
            p = Path(root) / f
            if p.is_symlink():
                symlinks.append(rel_root / f)
            else:
                files.append(rel_root / f)
    return sorted(dirs), sorted(files), sorted(symlinks)


def copy_tree(src: Path, dst: Path, mode: CopyMode, *,
              direction: str | None = None,
              observer=None) -> CopyReport:
    """Replicate the tree at ``src`` into ``dst``.

    ``dst`` is replaced if it already exists (the replica fully mirrors the
    source). Failed file copies are collected and raised as PartialCopy after
    all attempts, leaving the partial destination in place for inspection.

    ``observer``, when given, receives ("start"|"end", relpath) around every
    file copy; test harnesses use it to bound in-flight concurrency.
    """
    src, dst = Path(src), Path(dst)
    if not src.is_dir():
        raise SourceMissing(f"source {src} is not a readable directory")
    if not dst.parent.is_dir() or not os.access(dst.parent, os.W_OK):
        raise DestinationUnwritable(f"cannot create {dst}")
    if dst.exists():
        if dst.is_dir() and not dst.is_symlink():
            shutil.rmtree(dst)
        else:
            raise DestinationUnwritable(f"{dst} exists and is not a directory")

    dirs, files, symlinks = _scan(src)
    started = time.monotonic()
    dst.mkdir()

    for rel in dirs:
        (dst / rel).mkdir()

    failed: list[str] = []
    failed_lock = threading.Lock()
    total_bytes = 0
    bytes_lock = threading.Lock()

    def copy_one(rel: Path) -> None:
        nonlocal total_bytes
        if observer is not None:
            observer("start", str(rel))
        try:
            s, d = src / rel, dst / rel
            shutil.copyfile(s, d)
            shutil.copymode(s, d)
            n = d.stat().st_size
            with bytes_lock:
                total_bytes += n
        except OSError:
            with failed_lock:
                failed.append(str(rel))
        finally:
            if observer is not None:
                observer("end", str(rel))

    if mode.kind == "single" or mode.workers == 1:
        for rel in files:
            copy_one(rel)
    else:
        with ThreadPoolExecutor(max_workers=mode.workers) as pool:
            list(pool.map(copy_one, files))

    for rel in symlinks:
        try:
            os.symlink(os.readlink(src / rel), dst / rel)
        except OSError:
            failed.append(str(rel))

    # Apply directory modes last, deepest first, so read-only bits on parents
    # cannot block the copy itself.
    for rel in sorted(dirs, key=lambda p: len(p.parts), reverse=True):
        shutil.copymode(src / rel, dst / rel)
    shutil.copymode(src, dst)

    seconds = time.monotonic() - started
    if failed:
        raise PartialCopy(failed_paths=sorted(failed))
    return CopyReport(direction=direction, bytes=total_bytes,
                      files=len(files), seconds=seconds, mode=mode)


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def verify_tree(src: Path, dst: Path, *, limit: int = 100) -> VerificationReport:
    """Compare trees on relative paths, file contents and permission bits."""
    src, dst = Path(src), Path(dst)
    mismatches: list[str] = []

    def note(msg: str) -> None:
        if len(mismatches) < limit:
            mismatches.append(msg)

    def entries(root: Path) -> dict[str, tuple]:
        out: dict[str, tuple] = {}
        for base, dirnames, filenames in os.walk(root, followlinks=False):
            rel_base = Path(base).relative_to(root)
            for name in dirnames + filenames:
                p = Path(base) / name
                rel = str(rel_base / name)
                try:
                    if p.is_symlink():
                        out[rel] = ("symlink", os.readlink(p), None)
                    elif p.is_dir():
                        out[rel] = ("dir", None, stat.S_IMODE(p.stat().st_mode))
                    else:
                        out[rel] = ("file", None, stat.S_IMODE(p.stat().st_mode))
                except OSError as exc:
                    out[rel] = ("unreadable", str(exc), None)
        return out

    left, right = entries(src), entries(dst)
    for rel in sorted(set(left) | set(right)):
        if rel not in right:
            note(f"missing in destination: {rel}")
            continue
        if rel not in left:
            note(f"extra in destination: {rel}")
            continue
        lkind, lextra, lmode = left[rel]
        rkind, rextra, rmode = right[rel]
        if "unreadable" in (lkind, rkind):
            note(f"unreadable: {rel}")
            continue
        if lkind != rkind:
            note(f"kind differs: {rel} ({lkind} vs {rkind})")
            continue
        if lkind == "symlink":
            if lextra != rextra:
                note(f"symlink target differs: {rel}")
            continue
        if lmode != rmode:
            note(f"mode differs: {rel} ({oct(lmode)} vs {oct(rmode)})")
            continue
        if lkind == "file":
            try:
                if _file_digest(src / rel) != _file_digest(dst / rel):
                    note(f"content differs: {rel}")
            except OSError:
                note(f"unreadable: {rel}")
    return VerificationReport(equal=not mismatches, mismatches=mismatches)


def make_synthetic_corpus(root: Path, total_bytes: int, *, seed: int = 1234) -> int:
    """Corpus of 1 MiB files with reproducible pseudo-random content.

    Returns the number of files written (at least one).
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    count = max(1, total_bytes // BENCH_FILE_BYTES)
    rng = random.Random(seed)
    for i in range(count):
        (root / f"chunk-{i:05d}.bin").write_bytes(rng.randbytes(BENCH_FILE_BYTES))
    return count


def run_benchmark(scratch: Path, sizes_per_node: list[int],
                  modes: list[CopyMode], directions: list[str],
                  trials: int, *, seed: int = 1234) -> BenchmarkTable:
    """Time copies of synthetic datasets, reporting the median over trials."""
    scratch = Path(scratch)
    scratch.mkdir(parents=True, exist_ok=True)
    if not sizes_per_node or trials < 1:
        raise ValueError("need at least one size and one trial")
    need = 2 * max(sizes_per_node) + (64 << 20)
    free = shutil.disk_usage(scratch).free
    if free < need:
        raise InsufficientScratch(f"{free} bytes free, {need} required")
    for d in directions:
        if d not in DIRECTIONS:
            raise ValueError(f"unknown direction {d!r}")

    central = scratch / "central"
    local = scratch / "local"
    table = BenchmarkTable()
    for size in sizes_per_node:
        shutil.rmtree(central, ignore_errors=True)
        files = make_synthetic_corpus(central / "corpus", size, seed=seed)
        for direction in directions:
            if direction == CENTRAL_TO_LOCAL:
                src, dst = central / "corpus", local / "corpus"
            else:
                shutil.rmtree(local, ignore_errors=True)
                local.mkdir(parents=True)
                copy_tree(central / "corpus", local / "corpus", CopyMode.single())
                src, dst = local / "corpus", central / "replica"
            for mode in modes:
                timings = []
                for _ in range(trials):
                    shutil.rmtree(dst, ignore_errors=True)
                    dst.parent.mkdir(parents=True, exist_ok=True)
                    report = copy_tree(src, dst, mode, direction=direction)
                    timings.append(report.seconds)
                timings.sort()
                median = timings[len(timings) // 2] if len(timings) % 2 else (
                    (timings[len(timings) // 2 - 1] + timings[len(timings) // 2]) / 2)
                table.rows.append(BenchmarkRow(
                    direction=direction, mode=mode,
                    bytes_per_node=files * BENCH_FILE_BYTES,
                    files=files, seconds=median))
                shutil.rmtree(dst, ignore_errors=True)
        shutil.rmtree(local, ignore_errors=True)
        shutil.rmtree(central, ignore_errors=True)
    return table


def parse_size(text: str) -> int:
    """Parse sizes like '64MiB', '1GiB', '512KiB' or plain byte counts."""
    text = text.strip()
    for suffix, factor in (("GiB", 1 << 30), ("MiB", 1 << 20), ("KiB", 1 << 10),
                           ("GB", 10 ** 9), ("MB", 10 ** 6), ("KB", 10 ** 3)):
        if text.endswith(suffix):
            return int(float(text[:-len(suffix)])) * factor
    return int(text)
