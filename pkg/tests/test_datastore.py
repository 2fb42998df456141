import json

import numpy as np
import pytest

from src.core.errors import ContractViolation, DatasetIOError
from src.data.datastore import (HEADER, MANIFEST_NAME, AccessAudit, DatasetManifest, Trajectory, TrajectoryStore,
                                decode_trajectory, encode_trajectory, expected_file_size, leave_one_out_split,
                                read_trajectory, write_trajectory)

TASKS = ("reach", "push", "button", "lever", "reach3d")


def make_trajectory(task_id="reach", steps=3, seed=0):
    rng = np.random.default_rng(seed)
    return Trajectory(task_id=task_id, seed=seed,
                      images=rng.random((steps, 84, 84, 3)).astype(np.float32),
                      actions=rng.uniform(-1, 1, (steps, 4)).astype(np.float32))


@pytest.fixture
def store(tmp_path):
    store = TrajectoryStore(tmp_path / "demos", seed=5, suite_hash="abc")
    for task_id in TASKS:
        for i in range(2):
            store.add(make_trajectory(task_id, steps=2 + i, seed=i))
    store.save_manifest()
    return store


class TestTrajectoryFormat:
    def test_round_trip(self, tmp_path):
        traj = make_trajectory(steps=4)
        path = write_trajectory(traj, tmp_path / "t.cpnt")
        loaded = read_trajectory(path, task_id="reach", seed=0)
        assert np.array_equal(loaded.images, traj.images)
        assert np.array_equal(loaded.actions, traj.actions)
        assert np.array_equal(loaded.goal_image, traj.images[-1])

    def test_file_size(self, tmp_path):
        path = write_trajectory(make_trajectory(steps=3), tmp_path / "t.cpnt")
        expected = 28 + 3 * (21168 + 4) * 4 + 21168 * 4
        assert HEADER.size == 28
        assert expected_file_size(3) == expected
        assert path.stat().st_size == expected

    def test_bad_magic(self):
        data = bytearray(encode_trajectory(make_trajectory()))
        data[:4] = b"NOPE"
        with pytest.raises(DatasetIOError):
            decode_trajectory(bytes(data))

    def test_truncated_file(self):
        data = encode_trajectory(make_trajectory())
        with pytest.raises(DatasetIOError):
            decode_trajectory(data[:-8])
        with pytest.raises(DatasetIOError):
            decode_trajectory(data[:10])

    def test_goal_must_equal_final_frame(self):
        data = bytearray(encode_trajectory(make_trajectory()))
        data[-4:] = np.float32(7.0).tobytes()
        with pytest.raises(DatasetIOError):
            decode_trajectory(bytes(data))

    def test_invalid_trajectories_refused(self, tmp_path):
        one_step = make_trajectory(steps=1)
        with pytest.raises(ContractViolation):
            write_trajectory(one_step, tmp_path / "short.cpnt")
        failed = make_trajectory()
        failed.success = False
        with pytest.raises(ContractViolation):
            write_trajectory(failed, tmp_path / "failed.cpnt")
        mismatched = make_trajectory()
        mismatched.actions = mismatched.actions[:-1]
        with pytest.raises(ContractViolation):
            write_trajectory(mismatched, tmp_path / "mismatch.cpnt")
        assert not list(tmp_path.iterdir())

    def test_writer_waits_for_shared_readers(self, tmp_path):
        import fcntl
        import threading
        import time

        path = write_trajectory(make_trajectory(steps=3), tmp_path / "t.cpnt")
        original_size = path.stat().st_size
        replacement = make_trajectory(steps=2, seed=7)
        with open(path, "rb") as reader:
            fcntl.flock(reader, fcntl.LOCK_SH)
            writer = threading.Thread(target=write_trajectory, args=(replacement, path))
            writer.start()
            time.sleep(0.2)
            assert path.stat().st_size == original_size
            assert writer.is_alive()
            fcntl.flock(reader, fcntl.LOCK_UN)
        writer.join(timeout=10)
        assert path.stat().st_size == expected_file_size(2)
        assert np.array_equal(read_trajectory(path).actions, replacement.actions)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetIOError):
            read_trajectory(tmp_path / "absent.cpnt")


class TestManifest:
    def test_counts_and_layout(self, store):
        data = json.loads(store.manifest_path.read_text())
        assert data["counts"] == {task: 2 for task in TASKS}
        assert data["seed"] == 5 and data["suite_hash"] == "abc"
        assert data["tasks"]["push"][1]["path"] == "push/push_0001.cpnt"
        assert data["tasks"]["push"][1]["steps"] == 3

    def test_atomic_write_leaves_no_temporaries(self, store):
        store.add(make_trajectory("reach", seed=9))
        store.save_manifest()
        assert sorted(p.name for p in store.root.iterdir() if p.is_file()) == [MANIFEST_NAME]

    def test_open_verifies_suite_hash(self, store):
        assert TrajectoryStore.open(store.root, suite_hash="abc").manifest.counts == store.manifest.counts
        with pytest.raises(DatasetIOError):
            TrajectoryStore.open(store.root, suite_hash="other")

    def test_open_detects_missing_files(self, store):
        (store.root / "lever" / "lever_0000.cpnt").unlink()
        with pytest.raises(DatasetIOError):
            TrajectoryStore.open(store.root)

    def test_open_detects_modified_files(self, store):
        path = store.root / "reach" / "reach_0001.cpnt"
        path.write_bytes(encode_trajectory(make_trajectory(steps=3, seed=99)))
        TrajectoryStore.open(store.root)
        with pytest.raises(DatasetIOError):
            TrajectoryStore.open(store.root, verify_hashes=True)

    def test_inconsistent_counts_rejected(self, store):
        data = store.manifest.to_dict()
        data["counts"]["reach"] = 7
        with pytest.raises(DatasetIOError):
            DatasetManifest.from_dict(data)

    def test_store_reads_with_task_and_seed(self, store):
        reopened = TrajectoryStore.open(store.root)
        traj = reopened.read("button", 1)
        assert traj.task_id == "button" and traj.seed == 1 and traj.steps == 3
        assert len(list(reopened.iter_task("button"))) == 2
        assert len(reopened.audit.reads) == 3


class TestLeaveOneOut:
    def test_split_excludes_holdout(self, store):
        split, test_task = leave_one_out_split(store.manifest, "lever")
        assert split.tasks == ["button", "push", "reach", "reach3d"]
        assert len(split) == 8
        assert test_task == "lever"
        assert not set(split.paths()) & set(store.manifest.paths("lever"))

    def test_holdout_returns_suite_spec(self, store, suite):
        _, test_task = leave_one_out_split(store.manifest, "push", suite)
        assert test_task is suite["push"]

    def test_unknown_holdout_rejected(self, store):
        with pytest.raises(ContractViolation):
            leave_one_out_split(store.manifest, "stack")

    def test_audit_proves_no_holdout_reads(self, store):
        split, _ = leave_one_out_split(store.manifest, "reach")
        audit = AccessAudit()
        trajectories = split.load(audit)
        assert len(trajectories) == 8
        assert {t.task_id for t in trajectories} == {"push", "button", "lever", "reach3d"}
        assert audit.touched(store.manifest.paths("reach")) == []
        assert len(audit.touched(split.paths())) == 8

    def test_load_limit_per_task(self, store):
        split, _ = leave_one_out_split(store.manifest, "reach")
        assert len(split.load(limit_per_task=1)) == 4
