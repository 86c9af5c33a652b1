"""Copy engine: replica fidelity, worker bounds, verification, benchmark."""

from __future__ import annotations

import os
import random
import threading
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dbmgr import migrate
from dbmgr.errors import (DestinationUnwritable, InsufficientScratch,
                          PartialCopy, SourceMissing)
from dbmgr.migrate import CopyMode, copy_tree, run_benchmark, verify_tree

from .oracles import hash_tree


def build_tree(root: Path, spec: dict) -> None:
    """spec: {relpath: bytes | ("link", target) | None for a directory}."""
    for rel, content in spec.items():
        p = root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        if content is None:
            p.mkdir(exist_ok=True)
        elif isinstance(content, tuple):
            p.symlink_to(content[1])
        else:
            p.write_bytes(content)


def random_tree(root: Path, rng: random.Random, *, max_files=25,
                max_size=4096, with_symlinks=True) -> None:
    root.mkdir(parents=True, exist_ok=True)
    dirs = [Path(".")]
    for i in range(rng.randint(0, 4)):
        d = rng.choice(dirs) / f"d{i}"
        (root / d).mkdir(exist_ok=True)
        dirs.append(d)
    names = []
    for i in range(rng.randint(1, max_files)):
        rel = rng.choice(dirs) / f"f{i:03d}.bin"
        data = rng.randbytes(rng.randint(0, max_size))
        (root / rel).write_bytes(data)
        if rng.random() < 0.2:
            (root / rel).chmod(rng.choice([0o600, 0o640, 0o755, 0o444]))
        names.append(rel)
    if with_symlinks and names and rng.random() < 0.5:
        (root / "alink").symlink_to(str(names[0]))
        (root / "dangling").symlink_to("nowhere/else")


class TestCopyTree:
    def test_empty_directory(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        report = copy_tree(src, tmp_path / "dst", CopyMode.single())
        assert (tmp_path / "dst").is_dir()
        assert report.bytes == 0
        assert report.files == 0

    @pytest.mark.parametrize("mode", [CopyMode.single(), CopyMode.multi(3)])
    def test_replicas_hash_identical(self, tmp_path, mode):
        src = tmp_path / "src"
        build_tree(src, {
            "a.bin": os.urandom(1 << 16),
            "sub/b.bin": os.urandom(1 << 12),
            "sub/deeper/c.txt": b"hello",
            "empty": None,
        })
        (src / "sub/b.bin").chmod(0o640)
        dst = tmp_path / f"dst-{mode.kind}-{mode.workers}"
        copy_tree(src, dst, mode)
        assert hash_tree(src) == hash_tree(dst)

    def test_mb_per_sec_recomputes(self, tmp_path):
        src = tmp_path / "src"
        build_tree(src, {"a": os.urandom(1 << 20)})
        report = copy_tree(src, tmp_path / "dst", CopyMode.single())
        recomputed = report.bytes / report.seconds / 1e6
        assert report.mb_per_sec == pytest.approx(recomputed, rel=1e-3)

    def test_source_missing(self, tmp_path):
        with pytest.raises(SourceMissing):
            copy_tree(tmp_path / "nope", tmp_path / "dst", CopyMode.single())

    def test_destination_unwritable(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        with pytest.raises(DestinationUnwritable):
            copy_tree(src, tmp_path / "no" / "such" / "dst", CopyMode.single())

    def test_partial_copy_lists_failures_and_keeps_dst(self, tmp_path, monkeypatch):
        src = tmp_path / "src"
        build_tree(src, {"ok.bin": b"fine", "bad.bin": b"doomed",
                         "also-ok.bin": b"fine too"})
        real_copyfile = migrate.shutil.copyfile

        def flaky(s, d, **kw):
            if str(s).endswith("bad.bin"):
                raise OSError("injected")
            return real_copyfile(s, d, **kw)

        monkeypatch.setattr(migrate.shutil, "copyfile", flaky)
        with pytest.raises(PartialCopy) as exc:
            copy_tree(src, tmp_path / "dst", CopyMode.multi(2))
        assert exc.value.failed_paths == ["bad.bin"]
        assert (tmp_path / "dst" / "ok.bin").exists()

    def test_symlink_targets_preserved(self, tmp_path):
        src = tmp_path / "src"
        build_tree(src, {"real.txt": b"x", "link": ("link", "real.txt")})
        copy_tree(src, tmp_path / "dst", CopyMode.single())
        assert os.readlink(tmp_path / "dst" / "link") == "real.txt"

    def test_existing_destination_replaced(self, tmp_path):
        src = tmp_path / "src"
        build_tree(src, {"new.txt": b"new"})
        dst = tmp_path / "dst"
        build_tree(dst, {"stale.txt": b"stale"})
        copy_tree(src, dst, CopyMode.single())
        assert not (dst / "stale.txt").exists()
        assert (dst / "new.txt").read_bytes() == b"new"


class TestModeEquivalence:
    @given(seed=st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=20, deadline=None)
    def test_all_worker_counts_identical(self, tmp_path_factory, seed):
        tmp_path = tmp_path_factory.mktemp("modes")
        rng = random.Random(seed)
        src = tmp_path / "src"
        random_tree(src, rng)
        want = hash_tree(src)
        for k in (1, 2, 3, 8):
            dst = tmp_path / f"dst{k}"
            copy_tree(src, dst, CopyMode.multi(k))
            assert hash_tree(dst) == want
        dst = tmp_path / "dst-single"
        copy_tree(src, dst, CopyMode.single())
        assert hash_tree(dst) == want

    def test_multi1_behaves_like_single(self, tmp_path):
        src = tmp_path / "src"
        build_tree(src, {f"f{i:02d}.bin": bytes([i]) * 100 for i in range(12)})
        orders = {}
        for label, mode in (("single", CopyMode.single()),
                            ("multi1", CopyMode.multi(1))):
            events = []
            copy_tree(src, tmp_path / f"dst-{label}", mode,
                      observer=lambda edge, rel: events.append((edge, rel)))
            orders[label] = events
        assert orders["single"] == orders["multi1"]
        assert hash_tree(tmp_path / "dst-single") == hash_tree(tmp_path / "dst-multi1")

    @pytest.mark.parametrize("workers", [1, 2, 3, 8])
    def test_worker_bound_respected(self, tmp_path, workers):
        src = tmp_path / "src"
        build_tree(src, {f"f{i:03d}.bin": os.urandom(1 << 14) for i in range(64)})
        in_flight = 0
        high_water = 0
        lock = threading.Lock()

        def observer(edge, _rel):
            nonlocal in_flight, high_water
            with lock:
                in_flight += 1 if edge == "start" else -1
                high_water = max(high_water, in_flight)

        copy_tree(src, tmp_path / f"dst{workers}", CopyMode.multi(workers),
                  observer=observer)
        assert high_water <= workers


class TestVerifyTree:
    def test_reflexive(self, tmp_path):
        src = tmp_path / "t"
        build_tree(src, {"a.bin": os.urandom(512), "d/b.bin": b"b"})
        assert verify_tree(src, src).equal

    def test_single_flipped_byte_detected(self, tmp_path):
        src = tmp_path / "src"
        build_tree(src, {"a.bin": bytes(64), "b.bin": bytes(64)})
        dst = tmp_path / "dst"
        copy_tree(src, dst, CopyMode.single())
        raw = bytearray((dst / "a.bin").read_bytes())
        raw[17] ^= 0xFF
        (dst / "a.bin").write_bytes(bytes(raw))
        report = verify_tree(src, dst)
        assert not report.equal
        assert any("a.bin" in m for m in report.mismatches)

    def test_thousand_files_agree_with_oracle(self, tmp_path):
        rng = random.Random(99)
        src = tmp_path / "src"
        src.mkdir()
        for i in range(1000):
            sub = src / f"d{i % 10}"
            sub.mkdir(exist_ok=True)
            (sub / f"f{i:04d}").write_bytes(rng.randbytes(rng.randint(0, 256)))
        dst = tmp_path / "dst"
        copy_tree(src, dst, CopyMode.multi(3))
        assert verify_tree(src, dst).equal
        assert hash_tree(src) == hash_tree(dst)

    def test_mode_difference_detected(self, tmp_path):
        src = tmp_path / "src"
        build_tree(src, {"a": b"x"})
        dst = tmp_path / "dst"
        copy_tree(src, dst, CopyMode.single())
        (dst / "a").chmod(0o777)
        assert not verify_tree(src, dst).equal


class TestBenchmark:
    def test_smoke_one_row(self, tmp_path):
        table = run_benchmark(tmp_path / "scratch", [4 << 20],
                              [CopyMode.single()], [migrate.CENTRAL_TO_LOCAL],
                              trials=1)
        assert len(table.rows) == 1
        row = table.rows[0]
        assert row.seconds > 0
        assert row.files == 4

    def test_doubling_size_monotone(self, tmp_path):
        scratch = Path("/dev/shm") if Path("/dev/shm").is_dir() else tmp_path
        table = run_benchmark(scratch / "dbm-bench-mono", [16 << 20, 32 << 20],
                              [CopyMode.single()], [migrate.CENTRAL_TO_LOCAL],
                              trials=3)
        small, big = table.rows[0], table.rows[1]
        assert big.bytes_per_node == 2 * small.bytes_per_node
        ratio = big.seconds / small.seconds
        assert 1.0 <= ratio <= 4.0, f"doubling ratio {ratio:.2f} outside [1, 4]"

    def test_cross_product_and_csv(self, tmp_path):
        out = tmp_path / "bench.csv"
        modes = [CopyMode.single(), CopyMode.multi(3)]
        table = run_benchmark(tmp_path / "scratch", [2 << 20], modes,
                              list(migrate.DIRECTIONS), trials=1)
        assert len(table.rows) == len(modes) * len(migrate.DIRECTIONS)
        table.write_csv(out)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "direction,mode,workers,bytes_per_node,files,seconds,mb_per_sec"
        assert len(lines) == 1 + len(table.rows)

    def test_multi_vs_single_ratio_reported(self, tmp_path, capsys):
        scratch = Path("/dev/shm") if Path("/dev/shm").is_dir() else tmp_path
        table = run_benchmark(scratch / "dbm-bench-ratio", [32 << 20],
                              [CopyMode.single(), CopyMode.multi(3)],
                              [migrate.CENTRAL_TO_LOCAL], trials=3)
        single = next(r for r in table.rows if r.mode.kind == "single")
        multi = next(r for r in table.rows if r.mode.kind == "multi")
        print(f"multi/single MB/s ratio: {multi.mb_per_sec / single.mb_per_sec:.2f}")

    def test_insufficient_scratch(self, tmp_path):
        import shutil as _shutil
        free = _shutil.disk_usage(tmp_path).free
        with pytest.raises(InsufficientScratch):
            run_benchmark(tmp_path / "scratch", [free * 2],
                          [CopyMode.single()], [migrate.CENTRAL_TO_LOCAL],
                          trials=1)

    def test_parse_size(self):
        assert migrate.parse_size("64MiB") == 64 << 20
        assert migrate.parse_size("1GiB") == 1 << 30
        assert migrate.parse_size("512KiB") == 512 << 10
        assert migrate.parse_size("1000") == 1000
        assert migrate.parse_size("5MB") == 5_000_000

    def test_synthetic_corpus_reproducible(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        migrate.make_synthetic_corpus(a, 3 << 20, seed=42)
        migrate.make_synthetic_corpus(b, 3 << 20, seed=42)
        assert hash_tree(a) == hash_tree(b)
        c = tmp_path / "c"
        migrate.make_synthetic_corpus(c, 3 << 20, seed=43)
        assert hash_tree(a) != hash_tree(c)
