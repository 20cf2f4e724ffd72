import numpy as np
import pytest

from chandenoise.autodiff import Tensor
from chandenoise.network import ResidualDenoiser, conv2d, residual_loss
from chandenoise.optim import AdamState, adam_step, sgd_step


def test_zero_theta_is_identity_denoiser():
    model = ResidualDenoiser(width=8, seed=0)
    model.set_theta(np.zeros(model.n_params))
    x = np.random.default_rng(0).standard_normal((3, 2, 12, 7)).astype(np.float32)
    assert np.all(model.forward(Tensor(x)).data == 0.0)
    np.testing.assert_array_equal(model.denoise(x), x)


def test_forward_deterministic():
    model = ResidualDenoiser(width=8, seed=1)
    x = np.random.default_rng(1).standard_normal((2, 2, 10, 8)).astype(np.float32)
    np.testing.assert_array_equal(model.forward(Tensor(x)).data,
                                  model.forward(Tensor(x)).data)


def test_output_shape_matches_input_paper_window():
    # the reference window size: 58 subcarrier lattice points x 8 symbols
    model = ResidualDenoiser(width=4, seed=0)
    x = np.zeros((1, 2, 58, 8), dtype=np.float32)
    assert model.forward(Tensor(x)).data.shape == (1, 2, 58, 8)


def test_too_small_input_rejected():
    model = ResidualDenoiser(width=4, seed=0)
    with pytest.raises(ValueError):
        model.forward(Tensor(np.zeros((1, 2, 2, 2), dtype=np.float32)))


def test_loss_zero_when_clean_and_zero_theta():
    model = ResidualDenoiser(width=4, seed=0)
    model.set_theta(np.zeros(model.n_params))
    m = np.random.default_rng(0).standard_normal((4, 2, 8, 8)).astype(np.float32)
    assert residual_loss(model, m, m).item() == 0.0


def test_loss_reduces_to_noise_energy_at_zero_theta():
    model = ResidualDenoiser(width=4, seed=0)
    model.set_theta(np.zeros(model.n_params))
    rng = np.random.default_rng(1)
    clean = rng.standard_normal((5, 2, 8, 8)).astype(np.float32)
    noisy = clean + rng.standard_normal((5, 2, 8, 8)).astype(np.float32)
    expected = np.sum((noisy - clean) ** 2) / 5
    assert residual_loss(model, noisy, clean).item() == pytest.approx(expected, rel=1e-6)


def test_perfect_predictor_reaches_zero_loss():
    """1x1-kernel net built in closed form to output a constant residual."""
    model = ResidualDenoiser(width=3, depth=2, kernel_size=1, dtype=np.float64, seed=0)
    noise = np.array([0.25, -0.75])  # constant residual per channel
    # layer 1: zero weights, positive bias c -> relu passes c
    model.weights[0].data[:] = 0.0
    model.biases[0].data[:] = 1.0
    # layer 2: zero weights, bias = target residual
    model.weights[1].data[:] = 0.0
    model.biases[1].data[:] = noise
    rng = np.random.default_rng(2)
    clean = rng.standard_normal((3, 2, 6, 6))
    noisy = clean + noise[None, :, None, None]
    assert residual_loss(model, noisy, clean).item() == pytest.approx(0.0, abs=1e-20)


def test_loss_shape_mismatch():
    model = ResidualDenoiser(width=4, seed=0)
    with pytest.raises(ValueError):
        residual_loss(model, np.zeros((1, 2, 8, 8)), np.zeros((1, 2, 8, 7)))


def fd_grad_check(seed, width=4, depth=2, spatial=(5, 4), h=1e-4):
    """Central-difference oracle for the full conv-net gradient."""
    rng = np.random.default_rng(seed)
    model = ResidualDenoiser(width=width, depth=depth, dtype=np.float64, seed=seed)
    noisy = rng.standard_normal((2, 2) + spatial)
    clean = noisy - 0.3 * rng.standard_normal((2, 2) + spatial)

    model.zero_grad()
    residual_loss(model, noisy, clean).backward()
    analytic = model.grad_theta()

    theta = model.get_theta()
    fd = np.zeros_like(theta)
    for i in range(theta.size):
        bump = np.zeros_like(theta)
        bump[i] = h
        model.set_theta(theta + bump)
        fp = residual_loss(model, noisy, clean).item()
        model.set_theta(theta - bump)
        fm = residual_loss(model, noisy, clean).item()
        fd[i] = (fp - fm) / (2 * h)
    model.set_theta(theta)
    denom = max(np.linalg.norm(fd), 1e-12)
    return np.linalg.norm(analytic - fd) / denom


def test_gradient_matches_finite_differences_small_net():
    assert fd_grad_check(seed=0) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_gradient_property_random_nets(seed):
    assert fd_grad_check(seed=seed, width=3, spatial=(4, 4)) < 1e-4


def test_conv2d_matches_direct_convolution():
    """Independent dense-loop oracle for the im2col convolution."""
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((2, 4, 6, 5))
    for bi in range(2):
        for co in range(4):
            for i in range(6):
                for j in range(5):
                    patch = xp[bi, :, i:i + 3, j:j + 3]
                    expected[bi, co, i, j] = np.sum(patch * w[co]) + b[co]
    np.testing.assert_allclose(out, expected, rtol=1e-10)


def test_adam_zero_grad_is_identity():
    state = AdamState.init(4)
    theta = np.ones(4)
    new = adam_step(state, theta, np.zeros(4), lr=0.1)
    np.testing.assert_allclose(new, theta)


def test_adam_first_step_closed_form():
    state = AdamState.init(3)
    g = np.array([0.5, -2.0, 1e-12])
    theta = np.zeros(3)
    new = adam_step(state, theta, g, lr=0.1)
    expected = -0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(new, expected, rtol=1e-6)


def test_adam_descends_quadratic_bowl():
    state = AdamState.init(6)
    theta = np.random.default_rng(0).standard_normal(6)
    norms = [np.linalg.norm(theta)]
    for _ in range(200):
        theta = adam_step(state, theta, 2 * theta, lr=1e-2)
        norms.append(np.linalg.norm(theta))
    # monotone during the descent phase (before hitting the update-size floor)
    warm = norms[10:120]
    assert all(b <= a + 1e-12 for a, b in zip(warm, warm[1:]))
    assert norms[-1] < 1e-3 * norms[0]


def test_sgd_identities():
    theta = np.array([1.0, -2.0])
    np.testing.assert_array_equal(sgd_step(theta, np.ones(2), lr=0.0), theta)
    np.testing.assert_array_equal(sgd_step(theta, np.zeros(2), lr=0.5), theta)
    # one step on f(theta) = theta^2 / 2 from 1.0 with lr 0.1
    assert sgd_step(np.array([1.0]), np.array([1.0]), lr=0.1)[0] == pytest.approx(0.9)


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    model = ResidualDenoiser(width=8, seed=3)
    x = np.random.default_rng(0).standard_normal((2, 2, 9, 7)).astype(np.float32)
    before = model.forward(Tensor(x)).data.copy()
    path = tmp_path / "model.dnnn"
    model.save(path, metadata={"train_preset": "exp-300ns"})
    loaded, meta = ResidualDenoiser.load(path)
    assert meta["train_preset"] == "exp-300ns"
    after = loaded.forward(Tensor(x)).data
    np.testing.assert_array_equal(before, after)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.dnnn"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        ResidualDenoiser.load(path)


def test_training_sanity_toy_denoising():
    """200 ADAM steps on 64 synthetic samples cut the loss by >= 50%."""
    rng = np.random.default_rng(11)
    n, h, w = 64, 8, 8
    base = np.cumsum(rng.standard_normal((n, 2, h, w)), axis=2).astype(np.float32)
    base /= np.maximum(base.std(axis=(1, 2, 3), keepdims=True), 1e-6)
    noisy = base + 0.5 * rng.standard_normal((n, 2, h, w)).astype(np.float32)

    model = ResidualDenoiser(width=8, seed=5)
    theta = model.get_theta()
    state = AdamState.init(theta.size)
    initial = residual_loss(model, noisy, base).item()
    for _ in range(200):
        model.zero_grad()
        loss = residual_loss(model, noisy, base)
        loss.backward()
        theta = adam_step(state, theta, model.grad_theta(), lr=1e-2)
        model.set_theta(theta)
    final = residual_loss(model, noisy, base).item()
    assert final <= 0.5 * initial


def test_clone_is_independent():
    model = ResidualDenoiser(width=4, seed=0)
    twin = model.clone()
    twin.set_theta(np.zeros(twin.n_params))
    assert np.any(model.get_theta() != 0.0)
    np.testing.assert_array_equal(twin.get_theta(), np.zeros(twin.n_params))
