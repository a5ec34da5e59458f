import numpy as np
import pytest
import torch

from textcrystal.core.exceptions import NumericError
from textcrystal.services.batching import collate, pair_index
from textcrystal.services.denoiser import (
    compute_gradients,
    fourier_features,
    gram_features,
    init_denoiser,
    time_embedding,
)

from conftest import random_crystal, random_rotation

T = 10


@pytest.fixture
def model(tiny_denoiser):
    return init_denoiser(tiny_denoiser, T, seed=3).double().eval()


@pytest.fixture
def batch(rng, tiny_denoiser):
    crystals = [random_crystal(rng, 4, labels=rng.integers(0, 100, 4)),
                random_crystal(rng, 3, labels=rng.integers(0, 100, 3))]
    text = rng.standard_normal((2, tiny_denoiser.text_input_dim))
    return collate(crystals, text, dtype=torch.float64)


def _run(model, batch, t=(4, 7)):
    return model.forward_batch(batch, torch.tensor(t))


def test_output_shapes(model, batch, tiny_denoiser):
    out = _run(model, batch)
    assert out.eps_hat_L.shape == (2, 3, 3)
    assert out.a0_logits.shape == (7, tiny_denoiser.k_classes)
    assert out.eps_hat_X.shape == (7, 3)


def test_permutation_equivariance(model, batch):
    base = _run(model, batch)
    perm = torch.tensor([2, 0, 3, 1, 6, 4, 5])
    permuted = batch.with_(atom_types=batch.atom_types[perm], frac_coords=batch.frac_coords[perm])
    out = _run(model, permuted)
    torch.testing.assert_close(out.eps_hat_L, base.eps_hat_L, atol=1e-10, rtol=1e-10)
    torch.testing.assert_close(out.a0_logits, base.a0_logits[perm], atol=1e-10, rtol=1e-10)
    torch.testing.assert_close(out.eps_hat_X, base.eps_hat_X[perm], atol=1e-10, rtol=1e-10)


def test_rotation_equivariance(model, batch, rng):
    base = _run(model, batch)
    Q = torch.as_tensor(random_rotation(rng))
    out = _run(model, batch.with_(lattices=batch.lattices @ Q.T))
    torch.testing.assert_close(out.eps_hat_L, base.eps_hat_L @ Q.T, atol=1e-9, rtol=1e-9)
    torch.testing.assert_close(out.a0_logits, base.a0_logits, atol=1e-9, rtol=1e-9)
    torch.testing.assert_close(out.eps_hat_X, base.eps_hat_X, atol=1e-9, rtol=1e-9)


def test_periodic_shift_invariance(model, batch):
    base = _run(model, batch)
    shift = torch.tensor([0.31, -0.72, 0.55], dtype=torch.float64)
    shifted = batch.frac_coords + shift
    shifted = shifted - torch.floor(shifted)
    out = _run(model, batch.with_(frac_coords=shifted))
    torch.testing.assert_close(out.eps_hat_L, base.eps_hat_L, atol=1e-9, rtol=1e-9)
    torch.testing.assert_close(out.a0_logits, base.a0_logits, atol=1e-9, rtol=1e-9)
    torch.testing.assert_close(out.eps_hat_X, base.eps_hat_X, atol=1e-9, rtol=1e-9)


def test_crystals_do_not_interact(model, batch):
    base = _run(model, batch)
    moved = batch.frac_coords.clone()
    moved[4:] = torch.rand(3, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    out = _run(model, batch.with_(frac_coords=moved))
    torch.testing.assert_close(out.eps_hat_X[:4], base.eps_hat_X[:4])
    torch.testing.assert_close(out.eps_hat_L[0], base.eps_hat_L[0])


def test_text_conditioning_and_null_token(model, batch):
    base = _run(model, batch)
    other = batch.with_(text=batch.text + 1.0)
    assert not torch.allclose(_run(model, other).eps_hat_X, base.eps_hat_X)
    drop = torch.tensor([True, True])
    a = model.forward_batch(batch, torch.tensor([4, 7]), drop_text=drop)
    b = model.forward_batch(other, torch.tensor([4, 7]), drop_text=drop)
    torch.testing.assert_close(a.eps_hat_X, b.eps_hat_X)


def test_init_is_seed_deterministic(tiny_denoiser):
    a = init_denoiser(tiny_denoiser, T, seed=5)
    b = init_denoiser(tiny_denoiser, T, seed=5)
    c = init_denoiser(tiny_denoiser, T, seed=6)
    for (name, p), (_, q), (_, r) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(p, q), name
    assert any(not torch.equal(p, r) for p, r in zip(a.parameters(), c.parameters()))
    assert set(a.parameter_groups()) >= {"atom_embedding", "text_projection", "layers", "lattice_head"}


def test_gradients_match_finite_differences(model, batch):
    def loss_fn(m):
        out = m.forward_batch(batch, torch.tensor([4, 7]))
        return (out.eps_hat_L ** 2).sum() + (out.eps_hat_X ** 2).sum() + out.a0_logits[:, :5].pow(2).sum()

    grads = compute_gradients(model, loss_fn)
    params = dict(model.named_parameters())
    h = 1e-6
    for name in ["lattice_head.0.weight", "layers.0.edge_mlp.0.weight", "text_projection.0.bias"]:
        p = params[name]
        flat = p.data.view(-1)
        for idx in (0, flat.numel() // 2):
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + h
                up = loss_fn(model).item()
                flat[idx] = orig - h
                down = loss_fn(model).item()
                flat[idx] = orig
            fd = (up - down) / (2 * h)
            assert grads[name].view(-1)[idx].item() == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_non_finite_input_raises(model, batch):
    bad = batch.frac_coords.clone()
    bad[0, 0] = float("nan")
    with pytest.raises(NumericError):
        _run(model, batch.with_(frac_coords=bad))
    with pytest.raises(NumericError):
        _run(model, batch, t=(4, T + 1))


def test_time_embedding_values():
    emb = time_embedding(torch.tensor([0, 3]), 8)
    assert emb.shape == (2, 8)
    np.testing.assert_allclose(emb[0].numpy(), [0, 0, 0, 0, 1, 1, 1, 1])
    assert emb[1, 0].item() == pytest.approx(np.sin(3.0))
    assert emb[1, 4].item() == pytest.approx(np.cos(3.0))


def test_fourier_features_are_periodic():
    d = torch.tensor([0.1, -0.3], dtype=torch.float64)
    feats = fourier_features(d, 4)
    assert feats.shape == (2, 8)
    torch.testing.assert_close(fourier_features(d + 2.0, 4), feats, atol=1e-12, rtol=0)
    assert feats[0, 0].item() == pytest.approx(np.sin(2 * np.pi * 0.1))
    assert feats[0, 4].item() == pytest.approx(np.cos(2 * np.pi * 0.1))


def test_gram_features_invariances(rng):
    L = torch.as_tensor(random_crystal(rng).lattice).unsqueeze(0)
    Q = torch.as_tensor(random_rotation(rng))
    base = gram_features(L)
    assert base.shape == (1, 6)
    torch.testing.assert_close(gram_features(L @ Q.T), base)
    torch.testing.assert_close(gram_features(2.0 * L), base)
    assert not torch.allclose(gram_features(2.0 * L, normalize=False), gram_features(L, normalize=False))


def test_pair_index_stays_within_crystals():
    pairs = pair_index(torch.tensor([2, 3]))
    assert pairs.shape == (2, 4 + 9)
    crystal = torch.tensor([0, 0, 1, 1, 1])
    assert torch.equal(crystal[pairs[0]], crystal[pairs[1]])
    assert int((pairs[0] == pairs[1]).sum()) == 5


def test_single_atom_crystal_sees_its_lattice(model, rng, tiny_denoiser):
    atom = random_crystal(rng, 1, labels=np.array([7]))
    sheared = atom.with_(lattice=np.array([[1.0, 0.3, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) @ atom.lattice)
    text = rng.standard_normal((1, tiny_denoiser.text_input_dim))
    base = _run(model, collate([atom], text, dtype=torch.float64), t=(4,))
    other = _run(model, collate([sheared], text, dtype=torch.float64), t=(4,))
    assert not torch.allclose(base.a0_logits, other.a0_logits)
