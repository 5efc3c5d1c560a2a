import math

import numpy as np
import pytest
import torch
from PIL import Image

from carnet import Enhancer, decompose, haar_squeeze, reconstruct
from carnet._validation import DimensionError, NumericError
from carnet.inn import (
    CouplingBlock,
    LatentPrior,
    bicubic_downsample,
    block_backward,
    block_forward,
    coupling_forward,
    coupling_inverse,
    loss_backward,
    loss_forward,
)


def randomize(module, scale=0.1, seed=0):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * scale)
    return module


def test_coupling_scalar_emulation():
    u1, u2 = torch.tensor(2.0), torch.tensor(3.0)
    first = lambda u: (torch.tensor(0.1), torch.tensor(0.5))  # noqa: E731
    second = lambda v: (torch.tensor(-0.2), torch.tensor(1.0))  # noqa: E731
    v1, v2 = coupling_forward(u1, u2, first, second, lambda s: s)
    assert math.isclose(float(v1), 2 * math.exp(0.1) + 0.5, rel_tol=1e-6)
    assert math.isclose(float(v2), 3 * math.exp(-0.2) + 1, rel_tol=1e-6)
    b1, b2 = coupling_inverse(v1, v2, first, second, lambda s: s)
    assert math.isclose(float(b1), 2.0, rel_tol=1e-6) and math.isclose(float(b2), 3.0, rel_tol=1e-6)


def test_fresh_block_is_identity(uniform_probs):
    block = CouplingBlock()
    u = torch.randn(2, 12, 8, 8)
    assert torch.equal(block_forward(u, uniform_probs(2), block), u)
    assert torch.equal(block_backward(u, uniform_probs(2), block), u)


def test_block_round_trips_random_init():
    block = randomize(CouplingBlock(), 0.05)
    probs = torch.softmax(torch.randn(3, 3), 1)
    u = torch.randn(3, 12, 8, 8)
    assert (block_backward(block_forward(u, probs, block), probs, block) - u).abs().max() < 1e-5
    assert (block_forward(block_backward(u, probs, block), probs, block) - u).abs().max() < 1e-5


def test_log_scale_bounded():
    block = CouplingBlock(s_max=2.0)
    s = block.log_scale(torch.tensor([-1e6, -3.0, 0.0, 3.0, 1e6]))
    assert torch.all(torch.exp(s) >= math.exp(-2.0) - 1e-6)
    assert torch.all(torch.exp(s) <= math.exp(2.0) + 1e-6)


def test_non_finite_subnet_names_block():
    block = CouplingBlock(index=4)
    with torch.no_grad():
        block.d12.layers[-1].bias.fill_(float("nan"))
    with pytest.raises(NumericError, match="block 4"):
        block(torch.zeros(1, 12, 4, 4), torch.full((1, 3), 1 / 3))


def test_zero_subnets_decompose_is_haar(rng, uniform_probs):
    model = Enhancer(num_blocks=3)
    y = torch.from_numpy(rng.random((2, 3, 16, 16))).float()
    x_lr, x_hf = decompose(y, uniform_probs(2), model)
    lat = haar_squeeze(y)
    assert torch.equal(x_lr, lat[:, :3]) and torch.equal(x_hf, lat[:, 3:])
    up = reconstruct(x_lr, torch.zeros_like(x_hf), uniform_probs(2), model, clamp=False)
    blocky = x_lr.repeat_interleave(2, -1).repeat_interleave(2, -2)
    assert torch.allclose(up, blocky, atol=1e-7)


def test_shapes_and_round_trip(uniform_probs):
    model = randomize(Enhancer(num_blocks=2), 0.05)
    y = torch.rand(2, 3, 64, 64)
    probs = torch.softmax(torch.randn(2, 3), 1)
    x_lr, x_hf = decompose(y, probs, model)
    assert x_lr.shape == (2, 3, 32, 32) and x_hf.shape == (2, 9, 32, 32)
    back = reconstruct(x_lr, x_hf, probs, model, clamp=False)
    assert (back - y).abs().max() < 1e-4


def test_reconstruct_shape_mismatch(uniform_probs):
    model = Enhancer(num_blocks=1)
    with pytest.raises(DimensionError):
        model.reconstruct(torch.zeros(1, 3, 4, 4), torch.zeros(1, 9, 4, 5), uniform_probs(1))
    with pytest.raises(DimensionError):
        model.reconstruct(torch.zeros(1, 3, 4, 4), torch.zeros(1, 8, 4, 4), uniform_probs(1))


def test_latent_prior_determinism():
    like = torch.empty(2, 9, 4, 4)
    a = LatentPrior(seed=5).sample(like)
    b = LatentPrior(seed=5).sample(like)
    assert torch.equal(a, b)
    assert torch.all(LatentPrior(mode="zeros").sample(like) == 0)


def test_reconstruct_deterministic_given_seed(uniform_probs):
    model = randomize(Enhancer(num_blocks=2), 0.05)
    x_lr = torch.rand(1, 3, 8, 8)
    outs = [
        reconstruct(x_lr, LatentPrior(seed=3).sample(torch.empty(1, 9, 8, 8)), uniform_probs(1), model)
        for _ in range(2)
    ]
    assert torch.equal(outs[0], outs[1])


def test_hf_log_scale_init_keeps_invertibility():
    model = Enhancer(num_blocks=2, hf_log_scale=1.5)
    y = torch.rand(1, 3, 16, 16)
    probs = torch.full((1, 3), 1 / 3)
    x_lr, x_hf = model.decompose(y, probs)
    # low-pass channels untouched, detail channels amplified by exp(1.5) per block
    assert torch.allclose(x_lr, haar_squeeze(y)[:, :3], atol=1e-6)
    assert torch.allclose(x_hf, haar_squeeze(y)[:, 3:] * math.exp(3.0), atol=1e-5)
    assert (model.reconstruct(x_lr, x_hf, probs) - y).abs().max() < 1e-5


def test_selection_consistency_one_hot():
    """One-hot pi selects kernel set j exactly: compare against a single-kernel network."""
    torch.manual_seed(0)
    dyn = randomize(Enhancer(num_blocks=2, num_patterns=3), 0.1, seed=1)
    static = Enhancer(num_blocks=2, num_patterns=1)
    y = torch.rand(2, 3, 16, 16)
    for j in range(3):
        sd = {}
        for name, t in dyn.state_dict().items():
            sd[name] = t[j : j + 1].clone()
        static.load_state_dict(sd)
        one_hot = torch.zeros(2, 3)
        one_hot[:, j] = 1
        a = dyn.decompose(y, one_hot)
        b = static.decompose(y, torch.ones(2, 1))
        for u, v in zip(a, b):
            assert (u - v).abs().max() < 1e-6


def pil_bicubic_half(img):
    out = np.empty((img.shape[0], img.shape[1] // 2, img.shape[2] // 2))
    for c in range(img.shape[0]):
        im = Image.fromarray(img[c].astype(np.float32), mode="F")
        out[c] = np.asarray(im.resize((img.shape[2] // 2, img.shape[1] // 2), Image.BICUBIC))
    return out


def test_bicubic_matches_pil(rng):
    img = rng.random((3, 16, 12))
    ours = bicubic_downsample(torch.from_numpy(img)[None].float())[0].numpy()
    np.testing.assert_allclose(ours, pil_bicubic_half(img), atol=1e-5)


def test_loss_forward_cases(rng):
    z = torch.from_numpy(rng.random((2, 3, 8, 8))).float()
    zl = bicubic_downsample(z)
    assert float(loss_forward(zl, z)) == 0.0
    assert math.isclose(float(loss_forward(zl + 0.1, z)), 0.1, rel_tol=1e-5)
    pred = torch.from_numpy(rng.random((2, 3, 4, 4))).float()
    a, b = pred.numpy(), zl.numpy()
    total = 0.0
    for idx in np.ndindex(a.shape):
        total += abs(float(a[idx]) - float(b[idx]))
    assert math.isclose(float(loss_forward(pred, z)), total / a.size, rel_tol=1e-5)


def test_loss_backward_cases(rng):
    z = torch.from_numpy(rng.random((2, 3, 8, 8)))
    assert float(loss_backward(z, z)) == 0.0
    assert math.isclose(float(loss_backward(z - 0.1, z)), 0.1, rel_tol=1e-9)
    u = torch.from_numpy(rng.random((2, 3, 8, 8)))
    naive = sum(abs(float(u[i]) - float(z[i])) for i in np.ndindex(*u.shape)) / u.numel()
    assert math.isclose(float(loss_backward(u, z)), naive, rel_tol=1e-9)


def test_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        loss_backward(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 6))
    with pytest.raises(DimensionError):
        loss_forward(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 6, 6))


def test_loss_backward_gradient_matches_finite_differences(rng):
    model = randomize(Enhancer(num_blocks=2, hidden=8), 0.05).double()
    y = torch.from_numpy(rng.random((1, 3, 8, 8))).requires_grad_(True)
    z = torch.from_numpy(rng.random((1, 3, 8, 8)))
    probs = torch.full((1, 3), 1 / 3, dtype=torch.float64)
    v = torch.from_numpy(rng.normal(size=(1, 9, 4, 4)))

    def f(inp):
        x_lr, _ = model.decompose(inp, probs)
        return loss_backward(model.reconstruct(x_lr, v, probs), z)

    (g,) = torch.autograd.grad(f(y), y)
    h = 1e-3
    for flat in rng.choice(y.numel(), 10, replace=False):
        idx = np.unravel_index(flat, y.shape)
        e = torch.zeros_like(y)
        e[idx] = h
        with torch.no_grad():
            fd = (f(y + e) - f(y - e)) / (2 * h)
        assert abs(float(fd) - float(g[idx])) <= 1e-3 * max(abs(float(fd)), 1e-4)
