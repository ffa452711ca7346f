import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentmorse.dataset import (DatasetError, Trajectory, TrajectoryDataset, box_sampler,
                                 collect, pendulum_success, split, subsample, window)
from latentmorse.systems import BistableSystem, make_system, propagate


@pytest.fixture(scope="module")
def pendulum():
    return make_system("pendulum")


@pytest.fixture(scope="module")
def small_pendulum_set(pendulum):
    return collect(pendulum, 24, 1000, 50, seed=5)


def test_window_examples():
    a, b, c = np.eye(3)
    pairs = window(Trajectory(0, [a, b, c], 1))
    assert len(pairs) == 2
    assert np.array_equal(pairs[0][0], a) and np.array_equal(pairs[0][1], b)
    assert np.array_equal(pairs[1][0], b) and np.array_equal(pairs[1][1], c)
    assert len(window(Trajectory(1, [a, b], 0))) == 1


def test_trajectory_invariants():
    with pytest.raises(DatasetError):
        Trajectory(0, [[0.0]], 1)
    with pytest.raises(DatasetError):
        Trajectory(0, [[0.0], [np.inf]], 1)
    with pytest.raises(DatasetError):
        Trajectory(0, [[0.0], [1.0]], -1)


def test_pendulum_success_examples():
    assert pendulum_success([0, 1, 0, 0]) == 1
    assert pendulum_success([0, -1, 0, 0]) == 0
    assert pendulum_success([0.05, 0.99875, 0.3, -0.015]) == 1
    assert pendulum_success([0.0, 1.0, 0.6, 0.0]) == 0


def test_pendulum_stride_and_pair_count(small_pendulum_set):
    ds = small_pendulum_set
    assert all(len(t.states) == 21 for t in ds.trajectories)
    assert ds.n_pairs == 24 * 20
    X, Y = ds.pairs()
    assert X.shape == Y.shape == (480, 4)


def test_pairs_resimulate(small_pendulum_set, pendulum):
    X, Y = small_pendulum_set.pairs()
    rng = np.random.default_rng(1)
    for i in rng.choice(len(X), 30, replace=False):
        img, ok = propagate(pendulum, X[i], 50)
        assert ok
        assert np.allclose(img, Y[i], atol=1e-9)


def test_labels_match_predicate(small_pendulum_set):
    for t in small_pendulum_set.trajectories:
        assert t.label == pendulum_success(t.states[-1])


def test_final_state_sets_partition(small_pendulum_set):
    ds = small_pendulum_set
    assert len(ds.success_finals()) + len(ds.failure_finals()) == len(ds.final_states())


def test_pendulum_default_pair_count():
    # 1024 trajectories at 20 pairs each
    ds = TrajectoryDataset([Trajectory(i, np.zeros((21, 4)), 0) for i in range(1024)])
    assert ds.n_pairs == 20480


def test_single_pair_dataset():
    ds = collect(BistableSystem(2), 1, 1, 1, seed=0)
    assert len(ds) == 1 and ds.n_pairs == 1


def test_bistable_positive_half_all_success():
    s = BistableSystem(12)
    lo, hi = s.lower.copy(), s.upper.copy()
    lo[0] = 1e-3
    ds = collect(s, 200, 10, 1, init_sampler=box_sampler(lo, hi), seed=2)
    assert set(ds.labels.tolist()) == {1}
    # rollout oracle: arctan keeps the sign of x1, so the final x1 is positive
    assert np.all(ds.final_states()[:, 0] > 0)


def test_collect_deterministic_across_workers(pendulum):
    a = collect(pendulum, 150, 200, 50, seed=9, workers=1)
    b = collect(pendulum, 150, 200, 50, seed=9, workers=4)
    assert a.to_csv() == b.to_csv()


def test_collect_rejects_bad_horizon():
    with pytest.raises(DatasetError):
        collect(BistableSystem(2), 3, 10, 3)
    with pytest.raises(DatasetError):
        collect(BistableSystem(2), 0, 10, 1)


def test_collect_gives_up_on_impossible_sampler():
    s = BistableSystem(2)
    outside = box_sampler([4.0, 0.0], [5.0, 1.0])
    with pytest.raises(DatasetError):
        collect(s, 2, 2, 1, init_sampler=outside)


def test_split_examples():
    ds = TrajectoryDataset([Trajectory(i, np.zeros((2, 1)), 0) for i in range(1000)])
    tr, te = split(ds, 0.8, seed=3)
    assert (len(tr), len(te)) == (800, 200)
    tr2, _ = split(ds, 0.8, seed=3)
    assert [t.id for t in tr.trajectories] == [t.id for t in tr2.trajectories]
    small = TrajectoryDataset(ds.trajectories[:5])
    assert tuple(map(len, split(small, 0.8))) == (4, 1)
    with pytest.raises(DatasetError):
        split(TrajectoryDataset(ds.trajectories[:1]), 0.8)
    with pytest.raises(DatasetError):
        split(ds, 1.0)


@given(st.integers(2, 300), st.floats(0.05, 0.95), st.integers(0, 10**6))
def test_split_is_partition(n, ratio, seed):
    ds = TrajectoryDataset([Trajectory(i, np.zeros((2, 1)), i % 2) for i in range(n)])
    tr, te = split(ds, ratio, seed)
    ids_tr = {t.id for t in tr.trajectories}
    ids_te = {t.id for t in te.trajectories}
    assert not ids_tr & ids_te and len(ids_tr | ids_te) == n
    assert abs(len(tr) - ratio * n) <= 1 or len(tr) in (1, n - 1)


def test_subsample():
    ds = TrajectoryDataset([Trajectory(i, np.zeros((2, 1)), 0) for i in range(100)])
    assert subsample(ds, 1.0) is ds
    assert len(subsample(ds, 0.1, seed=1)) == 10
    assert len(subsample(ds, 0.001)) == 1
    with pytest.raises(DatasetError):
        subsample(ds, 0.0)


def test_csv_roundtrip_bit_exact(small_pendulum_set, tmp_path):
    path = tmp_path / "train.csv"
    small_pendulum_set.save(path)
    back = TrajectoryDataset.load(path)
    assert back.tag == "train"
    assert len(back) == len(small_pendulum_set)
    for a, b in zip(small_pendulum_set.trajectories, back.trajectories):
        assert a.id == b.id and a.label == b.label
        assert np.array_equal(a.states, b.states)
    assert back.to_csv() == small_pendulum_set.to_csv()


@settings(max_examples=30)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=4,
                max_size=4))
def test_csv_roundtrip_any_float(vals):
    ds = TrajectoryDataset([Trajectory(0, np.array(vals).reshape(2, 2), 1)])
    back = TrajectoryDataset.from_csv(ds.to_csv())
    assert np.array_equal(back.trajectories[0].states, ds.trajectories[0].states)


def test_csv_header_and_order(small_pendulum_set):
    lines = small_pendulum_set.to_csv().splitlines()
    assert lines[0] == "traj_id,step,label,x_0,x_1,x_2,x_3"
    keys = [tuple(map(int, ln.split(",")[:2])) for ln in lines[1:]]
    assert keys == sorted(keys)


@pytest.mark.parametrize("text", [
    "",
    "id,step,label,x_0\n0,0,1,0.5\n",
    "traj_id,step,label,x_0\n0,0,1\n",
    "traj_id,step,label,x_0\n0,1,1,0.5\n",
    "traj_id,step,label,x_0\n0,0,1,0.5\n0,1,0,0.5\n",
    "traj_id,step,label,x_0\n0,0,1,abc\n",
])
def test_csv_malformed(text):
    with pytest.raises(DatasetError):
        TrajectoryDataset.from_csv(text)
