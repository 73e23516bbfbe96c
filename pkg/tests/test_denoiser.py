import math

import numpy as np
import pytest
import torch

from attnedit.denoiser import (AttentionRecord, DenoiserConfig, NonFiniteError, ToyVideoDenoiser,
                               analytic_gaussian_denoiser, denoise, load_checkpoint,
                               save_checkpoint, train_toy_denoiser)
from attnedit.scheduler import default_schedule, diffuse_forward
from attnedit.text import (MAX_TOKENS, TokenSequence, UnknownTokenError, Vocabulary, embed_tokens)

SMALL = DenoiserConfig(width=8, embed_dim=16, attn_dim=8, time_dim=16)


def small_model(seed=0, cfg=SMALL):
    torch.manual_seed(seed)
    return ToyVideoDenoiser(cfg)


# --------------------------------------------------------------------------- tokens

def test_vocabulary_roundtrip(tmp_path):
    v = Vocabulary()
    seq = v.encode(["a", "red", "circle", "and", "a", "blue", "square"])
    assert v.decode(seq) == ["a", "red", "circle", "and", "a", "blue", "square"]
    v.save(tmp_path / "vocab.json")
    assert Vocabulary.load(tmp_path / "vocab.json").encode(["red"]) == v.encode(["red"])
    with pytest.raises(UnknownTokenError):
        v.encode(["purple"])


def test_token_sequence_length_limits():
    with pytest.raises(ValueError):
        TokenSequence(())
    with pytest.raises(ValueError):
        TokenSequence(tuple(range(MAX_TOKENS + 1)))


def test_embedding_properties():
    seq = TokenSequence((3, 5, 3, 9))
    e1, e2 = embed_tokens(seq, 32), embed_tokens(seq, 32)
    assert torch.equal(e1, e2)
    np.testing.assert_allclose(e1.norm(dim=1), 1.0, atol=1e-6)
    assert torch.equal(e1[0], e1[2])
    other = embed_tokens(TokenSequence((3, 5, 4, 9)), 32)
    assert torch.equal(other[[0, 1, 3]], e1[[0, 1, 3]]) and not torch.equal(other[2], e1[2])
    with pytest.raises(UnknownTokenError):
        embed_tokens(TokenSequence((70,)), 32, vocab_size=64)


# --------------------------------------------------------------------------- forward pass

def test_zero_query_gives_uniform_attention():
    m = small_model()
    with torch.no_grad():
        m.attn.to_q.weight.zero_()
    emb = m.embed(TokenSequence((1, 2, 3, 4, 5)))
    _, rec = denoise(torch.randn(2, 3, 16, 16), 50, emb, m)
    torch.testing.assert_close(rec.maps, torch.full_like(rec.maps, 0.2), atol=1e-7, rtol=0)


def test_single_token_attention_is_one():
    m = small_model()
    _, rec = denoise(torch.randn(2, 3, 16, 16), 10, m.embed(TokenSequence((4,))), m)
    assert torch.equal(rec.maps, torch.ones_like(rec.maps))


def test_shapes_and_normalization():
    m = small_model()
    x = torch.randn(3, 3, 32, 16)
    eps, rec = denoise(x, 100, m.embed(TokenSequence((1, 2, 3))), m)
    assert eps.shape == x.shape
    assert isinstance(rec, AttentionRecord) and rec.t == 100
    assert rec.maps.shape == (3, 3, 8, 4)
    assert ((rec.maps > 0) & (rec.maps < 1)).all()
    torch.testing.assert_close(rec.maps.sum(1), torch.ones(3, 8, 4), atol=1e-5, rtol=0)


def test_shape_errors():
    m = small_model()
    emb = m.embed(TokenSequence((1, 2)))
    with pytest.raises(ValueError):
        denoise(torch.randn(2, 4, 16, 16), 1, emb, m)
    with pytest.raises(ValueError):
        denoise(torch.randn(2, 3, 18, 16), 1, emb, m)
    with pytest.raises(ValueError):
        denoise(torch.randn(2, 3, 16, 16), 1, torch.randn(2, 5), m)


def test_non_finite_is_reported():
    m = small_model()
    x = torch.randn(1, 3, 16, 16)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteError):
        denoise(x, 5, m.embed(TokenSequence((1, 2))), m)


def test_token_permutation_equivariance():
    m = small_model().double()
    seq = TokenSequence((2, 7, 11, 5))
    perm = [2, 0, 3, 1]
    x = torch.randn(2, 3, 16, 16, dtype=torch.float64)
    eps_a, rec_a = denoise(x, 60, m.embed(seq), m)
    eps_b, rec_b = denoise(x, 60, m.embed(TokenSequence(tuple(seq.ids[p] for p in perm))), m)
    torch.testing.assert_close(rec_b.maps, rec_a.maps[:, perm], atol=1e-12, rtol=0)
    torch.testing.assert_close(eps_b, eps_a, atol=1e-12, rtol=0)


def test_attention_differentiable_fd():
    m = small_model(3).double()
    with torch.no_grad():
        m.attn.to_q.weight.mul_(8.0)
    emb = m.embed(TokenSequence((1, 4, 9)))
    x = torch.randn(2, 3, 16, 16, dtype=torch.float64, requires_grad=True)

    def f(z):
        _, rec = denoise(z, 30, emb, m)
        return (rec.maps[:, 1] * torch.linspace(0, 1, 16, dtype=torch.float64)[:4].reshape(1, 4, 1)).mean()

    (g,) = torch.autograd.grad(f(x), x)
    assert torch.isfinite(g).all()
    d = torch.randn_like(x)
    h = 1e-3
    with torch.no_grad():
        fd = (f(x + h * d) - f(x - h * d)) / (2 * h)
    ad = (g * d).sum()
    assert abs(float(fd - ad)) <= 1e-3 * max(abs(float(fd)), abs(float(ad)))


# --------------------------------------------------------------------------- analytic oracle

def test_analytic_point_mass_limit():
    s = default_schedule()
    m = torch.tensor([0.3, -0.2], dtype=torch.float64)
    den = analytic_gaussian_denoiser(m, torch.full((2,), 1e-12), s)
    x = torch.tensor([0.5, 1.5], dtype=torch.float64)
    a = s.abar(70)
    torch.testing.assert_close(den.eps(x, 70), (x - math.sqrt(a) * m) / math.sqrt(1 - a))


def test_analytic_standard_normal():
    s = default_schedule()
    den = analytic_gaussian_denoiser(torch.zeros(3), torch.ones(3), s)
    x = torch.randn(3, dtype=torch.float64)
    a = s.abar(120)
    torch.testing.assert_close(den.eps(x, 120), math.sqrt(1 - a) * x)


def test_analytic_matches_mc_regression():
    # E[eps | x_t] is linear in x_t for Gaussian data; least squares on samples recovers it
    s = default_schedule()
    mean, var = np.array([0.4, -0.3]), np.array([0.5, 2.0])
    den = analytic_gaussian_denoiser(mean, var, s)
    rng = np.random.default_rng(0)
    t, n = 60, 200_000
    a = s.abar(t)
    x0 = mean + np.sqrt(var) * rng.standard_normal((n, 2))
    eps = rng.standard_normal((n, 2))
    xt = np.sqrt(a) * x0 + np.sqrt(1 - a) * eps
    for d in range(2):
        A = np.stack([xt[:, d], np.ones(n)], axis=1)
        coef, *_ = np.linalg.lstsq(A, eps[:, d], rcond=None)
        probe = np.array([-1.0, 0.0, 1.0])
        pred_mc = coef[0] * probe + coef[1]
        x = torch.zeros(3, 2, dtype=torch.float64)
        x[:, d] = torch.from_numpy(probe)
        pred = den.eps(x, t)[:, d].numpy()
        np.testing.assert_allclose(pred, pred_mc, atol=0.01)


def test_analytic_marginal_mc():
    s = default_schedule()
    mean, var = np.array([0.5, -1.0, 0.0, 2.0]), np.array([0.2, 1.0, 3.0, 0.5])
    rng = np.random.default_rng(1)
    n, t = 10_000, 90
    a = s.abar(t)
    x0 = mean + np.sqrt(var) * rng.standard_normal((n, 4))
    xt = diffuse_forward(torch.from_numpy(x0), t, torch.from_numpy(rng.standard_normal((n, 4))), s).sample.numpy()
    mvar = a * var + 1 - a
    assert np.all(np.abs(xt.mean(0) - np.sqrt(a) * mean) < 3 * np.sqrt(mvar / n))
    # variance of the sample variance is 2 sigma^4 / (n - 1) for Gaussians
    assert np.all(np.abs(xt.var(0, ddof=1) - mvar) < 3 * mvar * np.sqrt(2 / (n - 1)))


def test_analytic_rejects_bad_variance():
    with pytest.raises(ValueError):
        analytic_gaussian_denoiser(torch.zeros(2), torch.tensor([1.0, 0.0]), default_schedule())


def test_analytic_uniform_record():
    den = analytic_gaussian_denoiser(torch.zeros(2), torch.ones(2), default_schedule())
    _, rec = denoise(torch.zeros(2), 10, torch.zeros(4, 8), den)
    assert torch.equal(rec.maps, torch.full((1, 4, 1, 1), 0.25, dtype=torch.float64))


# --------------------------------------------------------------------------- training

def _tiny_dataset(n=4, frames=2, size=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [(torch.rand(frames, 3, size, size, generator=g), TokenSequence((1 + i % 3, 4)))
            for i in range(n)]


def test_epochs_zero_returns_init():
    ds = _tiny_dataset()
    m0 = train_toy_denoiser(ds, default_schedule(), 0, seed=5, config=SMALL)
    ref = train_toy_denoiser(ds, default_schedule(), 0, seed=5, config=SMALL)
    for (k, a), (_, b) in zip(m0.state_dict().items(), ref.state_dict().items()):
        assert torch.equal(a, b), k
    assert m0.loss_history == []


def test_training_is_deterministic():
    ds = _tiny_dataset()
    torch.set_num_threads(1)
    a = train_toy_denoiser(ds, default_schedule(), 2, seed=1, config=SMALL, batch_size=2)
    b = train_toy_denoiser(ds, default_schedule(), 2, seed=1, config=SMALL, batch_size=2)
    for (k, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(p, q), k
    assert a.loss_history == b.loss_history and len(a.loss_history) == 2


def test_training_input_errors():
    with pytest.raises(ValueError):
        train_toy_denoiser([], default_schedule(), 1, seed=0)
    mixed = _tiny_dataset(2) + _tiny_dataset(1, size=8)
    with pytest.raises(ValueError):
        train_toy_denoiser(mixed, default_schedule(), 1, seed=0)
    with pytest.raises(ValueError):
        train_toy_denoiser(_tiny_dataset(), default_schedule(), 1, seed=0, weighting="other")


def test_checkpoint_roundtrip(tmp_path):
    m = small_model(2)
    save_checkpoint(m, tmp_path / "ck")
    import json
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert manifest["dtype"] == "float32" and manifest["byteorder"] == "little"
    total = sum(4 * int(np.prod(t["shape"])) for t in manifest["tensors"].values())
    assert (tmp_path / "ck" / "weights.bin").stat().st_size == total
    r = load_checkpoint(tmp_path / "ck")
    assert r.config == m.config
    for (k, a), (_, b) in zip(m.state_dict().items(), r.state_dict().items()):
        assert torch.equal(a, b), k
