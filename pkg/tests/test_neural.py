import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentmorse.dataset import Trajectory, TrajectoryDataset
from latentmorse.neural import (Adam, AutoencoderModel, CheckpointError, Mlp, TrainConfig,
                                TrainingDiverged, checkpoint_dict, load_checkpoint, loss_batch,
                                model_from_dict, reconstruction_loss, save_checkpoint,
                                separation_loss, sigmoid, standardization, train, write_history)

REL_TOL = 1e-4
FD_STEP = 1e-5


def random_model(seed=0, n=4, d=2, hidden=(8, 8)):
    rng = np.random.default_rng(seed + 100)
    m = AutoencoderModel.init(n, d, hidden, seed=seed)
    # non-zero biases so every code path is exercised
    for p in m.params:
        if p.ndim == 1:
            p[:] = rng.normal(0, 0.3, p.shape)
    return m


def batch(seed=1, n=4, size=16):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(size, n)), rng.normal(size=(size, n))


def scalar_forward(net: Mlp, x):
    # straight-line evaluation, one unit at a time
    h = list(x)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out = []
        for j in range(w.shape[1]):
            a = b[j] + sum(h[k] * w[k, j] for k in range(w.shape[0]))
            if i < len(net.weights) - 1:
                out.append(max(a, 0.0))
            elif net.output_activation == "tanh":
                out.append(math.tanh(a))
            else:
                out.append(a)
        h = out
    return np.array(h)


def fd_check(params, grads, loss_fn, n, rng):
    """Worst relative error between analytic grads and central differences
    over ``n`` random scalar parameters."""
    sizes = np.array([p.size for p in params])
    worst = 0.0
    for _ in range(n):
        which = rng.choice(len(params), p=sizes / sizes.sum())
        idx = np.unravel_index(rng.integers(params[which].size), params[which].shape)
        old = params[which][idx]
        params[which][idx] = old + FD_STEP
        up = loss_fn()
        params[which][idx] = old - FD_STEP
        down = loss_fn()
        params[which][idx] = old
        fd = (up - down) / (2 * FD_STEP)
        g = grads[which][idx]
        # absolute floor for parameters whose gradient is ~0
        worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), 1e-6))
    return worst


# forward

def test_zero_network_gives_zero():
    net = Mlp([np.zeros((3, 4)), np.zeros((4, 2))], [np.zeros(4), np.zeros(2)], "tanh")
    assert np.array_equal(net.forward(np.ones((5, 3))), np.zeros((5, 2)))


def test_identity_layer():
    net = Mlp([np.eye(3)], [np.zeros(3)], "identity")
    x = np.array([[1.0, -2.0, 3.5]])
    assert np.array_equal(net.forward(x), x)


def test_forward_matches_scalar_evaluation():
    m = random_model(3)
    x = np.random.default_rng(4).normal(size=(6, 4))
    for net, inp in [(m.encoder, x), (m.decoder, x[:, :2]), (m.dynamics, x[:, :2])]:
        vec = net.forward(inp)
        for row, out in zip(inp, vec):
            assert np.allclose(out, scalar_forward(net, row), atol=1e-12)


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        random_model().encoder.forward(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        Mlp([np.zeros((3, 4)), np.zeros((5, 2))], [np.zeros(4), np.zeros(2)])
    with pytest.raises(ValueError):
        AutoencoderModel.init(2, 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_encoder_and_dynamics_range(seed):
    m = random_model(seed % 7)
    x = np.random.default_rng(seed).normal(0, 50, size=(64, 4))
    assert np.all(np.abs(m.encode(x)) <= 1.0)
    assert np.all(np.abs(m.latent_step(np.random.default_rng(seed).normal(0, 50, (64, 2)))) <= 1.0)


def test_sigmoid_stable_and_half_at_zero():
    assert sigmoid(0.0) == 0.5
    v = sigmoid(np.array([-800.0, 800.0]))
    assert np.all(np.isfinite(v)) and v[0] == 0.0 and v[1] == 1.0


# losses

def test_losses_match_direct_formulas():
    m = random_model(2)
    x, y = batch(3)
    cfg = TrainConfig(use_l4=True, lambdas=(0.7, 1.3, 2.0, 0.3), c=10.0)
    L1, L2, L3, L4, total = loss_batch(m, x, y, cfg, finals_s=x[:8], finals_f=y[:8])
    xn, yn = m.normalize(x), m.normalize(y)
    ref1 = np.mean([np.sum((scalar_forward(m.decoder, scalar_forward(m.encoder, r)) - r) ** 2)
                    for r in xn])
    ref2 = np.mean([np.sum((scalar_forward(m.decoder, scalar_forward(m.encoder, r)) - r) ** 2)
                    for r in yn])
    ref3 = np.mean([np.sum((scalar_forward(m.dynamics, scalar_forward(m.encoder, a))
                            - scalar_forward(m.encoder, b)) ** 2) for a, b in zip(xn, yn)])
    d = [np.linalg.norm(scalar_forward(m.encoder, a) - scalar_forward(m.encoder, b))
         for a, b in zip(xn[:8], yn[:8])]
    ref4 = np.mean([1.0 / (1.0 + math.exp(10.0 * v)) for v in d])
    assert abs(L1 - ref1) < 1e-12 and abs(L2 - ref2) < 1e-12 and abs(L3 - ref3) < 1e-12
    assert abs(L4 - ref4) < 1e-12
    assert abs(total - (0.7 * L1 + 1.3 * L2 + 2.0 * L3)) < 1e-12


def test_identical_encodings_give_half():
    m = random_model()
    x = np.random.default_rng(0).normal(size=(5, 4))
    L4, _ = separation_loss(m, x, x, 0.3, 10.0)
    assert L4 == 0.5


def test_l4_is_nan_when_disabled():
    m = random_model()
    x, y = batch()
    assert math.isnan(loss_batch(m, x, y, TrainConfig())[3])


@pytest.mark.parametrize("term", [0, 1, 2])
def test_reconstruction_gradients_fd(term):
    m = random_model(10 + term)
    x, y = batch(20 + term)
    lam = [0.0, 0.0, 0.0]
    lam[term] = 1.0
    (_, _, _, _), grads = reconstruction_loss(m, x, y, lam)
    loss = lambda: reconstruction_loss(m, x, y, lam, need_grad=False)[0][3]
    assert fd_check(m.params, grads, loss, 120, np.random.default_rng(term)) < REL_TOL


def test_separation_gradient_fd():
    m = random_model(5)
    xs, xf = batch(6)
    c = 2.0  # small scale keeps the sigmoid away from saturation
    _, grads = separation_loss(m, xs, xf, 1.0, c)
    loss = lambda: separation_loss(m, xs, xf, 1.0, c, need_grad=False)[0]
    n_enc = len(m.encoder.params)
    # only encoder parameters influence L4
    assert all(not g.any() for g in grads[n_enc:])
    worst = fd_check(m.encoder.params, grads[:n_enc], loss, 120, np.random.default_rng(9))
    assert worst < REL_TOL


def test_total_gradient_is_weighted_sum():
    m = random_model(1)
    x, y = batch(2)
    lam = (0.5, 2.0, 3.0)
    _, g_all = reconstruction_loss(m, x, y, lam)
    parts = [reconstruction_loss(m, x, y, tuple(lam[i] if j == i else 0.0 for j in range(3)))[1]
             for i in range(3)]
    for k, g in enumerate(g_all):
        assert np.allclose(g, parts[0][k] + parts[1][k] + parts[2][k], atol=1e-13)


def test_zero_l3_weight_leaves_dynamics_untouched():
    m = random_model(1)
    x, y = batch(2)
    _, grads = reconstruction_loss(m, x, y, (1.0, 1.0, 0.0))
    n_ed = len(m.encoder.params) + len(m.decoder.params)
    assert all(not g.any() for g in grads[n_ed:])


def test_zero_loss_gives_zero_l1_gradient():
    # at x = 0 the one-unit networks reconstruct exactly
    enc = Mlp([np.array([[1.0]])], [np.zeros(1)], "tanh")
    dec = Mlp([np.array([[1.0]])], [np.zeros(1)], "identity")
    dyn = Mlp([np.array([[1.0]])], [np.zeros(1)], "tanh")
    m = AutoencoderModel(enc, dec, dyn, np.zeros(1), np.ones(1))
    x = np.zeros((3, 1))
    (L1, _, _, _), grads = reconstruction_loss(m, x, x, (1.0, 0.0, 0.0))
    assert L1 == 0.0 and all(not g.any() for g in grads)


# training

def toy_dataset(n_traj=40, seed=0):
    rng = np.random.default_rng(seed)
    trajs = []
    for i in range(n_traj):
        x = rng.uniform(-1, 1, 3)
        states = [x]
        for _ in range(5):
            x = np.array([np.arctan(2 * x[0]), 0.5 * x[1], 0.5 * x[2]])
            states.append(x)
        trajs.append(Trajectory(i, np.array(states), int(x[0] > 0)))
    return TrajectoryDataset(trajs)


def test_zero_epochs_returns_initialization():
    ds = toy_dataset()
    m, hist = train(ds, TrainConfig(latent_dim=2, hidden=(8,), epochs=0, seed=4))
    mean, scale = standardization(ds.all_states())
    ref = AutoencoderModel.init(3, 2, (8,), seed=4, mean=mean, scale=scale)
    assert hist == []
    assert all(np.array_equal(a, b) for a, b in zip(m.params, ref.params))


def test_training_is_deterministic_and_learns():
    ds = toy_dataset()
    cfg = TrainConfig(latent_dim=2, hidden=(16, 16), epochs=60, batch_size=32, seed=1,
                      use_l4=True)
    a, ha = train(ds, cfg)
    b, hb = train(ds, cfg)
    assert json.dumps(checkpoint_dict(a)) == json.dumps(checkpoint_dict(b))
    assert ha[-1].total < ha[0].total
    assert all(np.isfinite(h.L4) for h in ha)


def test_divergence_reported():
    ds = toy_dataset()
    cfg = TrainConfig(latent_dim=2, hidden=(8,), epochs=5, lr=1e6, seed=0)
    with pytest.raises(TrainingDiverged):
        train(ds, cfg)


def test_global_normalization_shares_scale():
    X = np.array([[0.0, 0.0], [2.0, 0.5], [4.0, 1.0]])
    _, s_axis = standardization(X, "axis")
    _, s_glob = standardization(X, "global")
    assert s_axis[0] != s_axis[1] and s_glob[0] == s_glob[1]


def test_adam_first_step_moves_by_lr():
    p = np.array([1.0, -2.0])
    opt = Adam([p], lr=0.1)
    opt.step([np.array([3.0, -0.5])])
    assert np.allclose(p, [0.9, -1.9])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambdas=(1, 1, -1, 0))
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="step")


def test_cosine_schedule_endpoints():
    cfg = TrainConfig(lr=0.01, lr_schedule="cosine", lr_floor=0.1)
    assert cfg.lr_at(0.0) == pytest.approx(0.01)
    assert cfg.lr_at(0.5) == pytest.approx(0.01 * (0.1 + 0.9 * 0.5))
    assert cfg.lr_at(1.0) == pytest.approx(0.001)
    rates = [cfg.lr_at(f) for f in np.linspace(0, 1, 11)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert TrainConfig(lr=0.01).lr_at(0.9) == 0.01


def test_cosine_schedule_changes_training_only_after_first_epoch():
    ds = toy_dataset()
    base = dict(latent_dim=2, hidden=(8,), batch_size=400, seed=2)
    a, _ = train(ds, TrainConfig(epochs=1, **base))
    b, _ = train(ds, TrainConfig(epochs=1, lr_schedule="cosine", **base))
    assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))
    c, _ = train(ds, TrainConfig(epochs=3, **base))
    d, _ = train(ds, TrainConfig(epochs=3, lr_schedule="cosine", **base))
    assert not all(np.array_equal(x, y) for x, y in zip(c.params, d.params))


def test_history_csv(tmp_path):
    _, hist = train(toy_dataset(), TrainConfig(latent_dim=2, hidden=(8,), epochs=3))
    write_history(hist, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,L1,L2,L3,L4,total" and len(lines) == 4


# checkpoints

def test_checkpoint_roundtrip(tmp_path):
    m = random_model(7)
    path = tmp_path / "model.json"
    save_checkpoint(m, path)
    back = load_checkpoint(path, expected_latent_dim=2)
    x = np.random.default_rng(0).normal(size=(100, 4))
    assert np.array_equal(back.encode(x), m.encode(x))
    z = m.encode(x)
    assert np.array_equal(back.decode(z), m.decode(z))
    assert np.array_equal(back.latent_step(z), m.latent_step(z))


def test_truncated_checkpoint(tmp_path):
    path = tmp_path / "model.json"
    save_checkpoint(random_model(), path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_latent_dim_mismatch(tmp_path):
    path = tmp_path / "model.json"
    save_checkpoint(random_model(), path)
    with pytest.raises(CheckpointError, match="latent_dim"):
        load_checkpoint(path, expected_latent_dim=1)


@pytest.mark.parametrize("field", ["format", "version", "networks", "normalization", "seed"])
def test_missing_field_named(field):
    d = checkpoint_dict(random_model())
    del d[field]
    with pytest.raises(CheckpointError, match=field):
        model_from_dict(d)


def test_bad_network_shape_named():
    d = checkpoint_dict(random_model())
    d["networks"]["decoder"]["weights"][0] = [[1.0]]
    with pytest.raises(CheckpointError, match="decoder"):
        model_from_dict(d)
