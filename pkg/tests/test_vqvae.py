from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fdcheck import check_params
from tivode import tensor as T
from tivode.errors import DimensionError
from tivode.vqvae import (VQVAE, Codebook, VqConfig, ema_update, from_sites, nearest_codes, quantize, selected_codes,
                          to_sites, usage_entropy, vq_loss)

SMALL = VqConfig(codebook_size=8, code_dim=4, widths=(4, 8), groups=2)


def codebook_with(vectors, **kw) -> Codebook:
    vectors = np.asarray(vectors, dtype=np.float64)
    cfg = replace(SMALL, codebook_size=len(vectors), code_dim=vectors.shape[1], **kw)
    cb = Codebook(cfg, np.random.default_rng(0))
    cb.set_vectors(vectors)
    return cb


def grid_of(sites, h=1, w=None):
    """(M, N) rows -> (1, N, h, w) grid."""
    sites = np.asarray(sites, dtype=np.float64)
    w = w or len(sites) // h
    return from_sites(sites, (1, sites.shape[1], h, w))


# ---- encoder / decoder


def test_encoder_shape_and_determinism():
    vq = VQVAE(VqConfig(), seed=0)
    x = np.random.default_rng(0).uniform(size=(2, 1, 32, 32))
    z = vq.encode(x).data
    assert z.shape == (2, 32, 8, 8)
    x[1] = x[0]
    z = vq.encode(x).data
    assert np.array_equal(z[0], z[1])
    with pytest.raises(DimensionError):
        vq.encode(np.zeros((1, 1, 30, 32)))


def test_decoder_output_in_unit_range():
    vq = VQVAE(SMALL, seed=1)
    z = np.random.default_rng(1).normal(0, 50.0, size=(2, 4, 2, 2))
    out = vq.decode(z).data
    assert out.shape == (2, 1, 8, 8)
    assert out.min() >= 0.0 and out.max() <= 1.0
    with pytest.raises(DimensionError):
        vq.decode(np.zeros((1, 3, 2, 2)))


def test_encoder_weight_gradients():
    vq = VQVAE(SMALL, seed=2)
    x = np.random.default_rng(2).uniform(size=(2, 1, 8, 8))
    err = check_params(lambda: T.sum_(vq.encode(x)), vq.encoder.parameters())
    assert err < 1e-4


def test_decoder_weight_gradients():
    vq = VQVAE(SMALL, seed=3)
    z = np.random.default_rng(3).normal(size=(2, 4, 2, 2))
    R = np.random.default_rng(4).normal(size=(2, 1, 8, 8))
    err = check_params(lambda: T.sum_(vq.decode(z) * R), vq.decoder.parameters())
    assert err < 1e-4


# ---- quantization


def test_quantize_hand_examples():
    cb = codebook_with([[0.0, 0.0], [1.0, 1.0]])
    z_q, idx = quantize(grid_of([[0.1, 0.2], [0.5, 0.5], [0.9, 0.6]]), cb)
    assert idx.ravel().tolist() == [0, 0, 1]  # the middle site is equidistant: lowest index wins
    assert np.array_equal(to_sites(z_q.data), [[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    with pytest.raises(DimensionError):
        quantize(np.zeros((1, 3, 1, 1)), cb)


def test_nearest_matches_brute_force_oracle():
    rng = np.random.default_rng(5)
    vecs = rng.normal(size=(64, 32))
    sites = rng.normal(size=(1000, 32))
    sites[:20] = vecs[rng.integers(0, 64, 20)]  # exact hits
    oracle = np.array([min(range(64), key=lambda k: (float(((s - vecs[k]) ** 2).sum()), k)) for s in sites])
    assert np.array_equal(nearest_codes(sites, vecs), oracle)


def test_nearest_ties_choose_lowest_index():
    vecs = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [-1.0, 0.0]])
    sites = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.5], [3.0, 0.0]])
    assert nearest_codes(sites, vecs).tolist() == [0, 0, 0, 0]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_quantize_is_idempotent_on_code_vectors(seed):
    rng = np.random.default_rng(seed)
    vecs = rng.normal(size=(16, 5))
    vecs = np.unique(vecs, axis=0)
    cb = codebook_with(vecs)
    z_q, idx = quantize(grid_of(vecs), cb)
    assert idx.ravel().tolist() == list(range(len(vecs)))
    assert np.array_equal(to_sites(z_q.data), vecs)


def test_zq_equals_selected_vectors_exactly():
    rng = np.random.default_rng(6)
    cb = codebook_with(rng.normal(size=(8, 3)))
    z = rng.normal(size=(2, 3, 4, 4))
    z_q, idx = quantize(z, cb)
    assert np.array_equal(z_q.data, np.transpose(cb.vectors.data[idx], (0, 3, 1, 2)))
    assert np.array_equal(selected_codes(cb, idx).data, z_q.data)


def test_straight_through_jacobian_is_identity():
    rng = np.random.default_rng(7)
    cb = codebook_with(rng.normal(size=(8, 3)))
    z_e = T.Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
    z_q, _ = quantize(z_e, cb)
    for _ in range(3):
        v = rng.normal(size=z_e.shape)
        z_e.grad = None
        T.backward(T.sum_(z_q * v))
        assert np.array_equal(z_e.grad, v)


def test_straight_through_composite_gradient():
    """d loss(z_q)/d z_e equals d loss/d z_q, the latter checked by finite differences."""
    rng = np.random.default_rng(8)
    cb = codebook_with(rng.normal(size=(8, 3)))
    z_e = T.Tensor(rng.normal(size=(1, 3, 2, 2)), requires_grad=True)
    W = rng.normal(size=(3, 5))
    z_q, _ = quantize(z_e, cb)
    T.backward(T.sum_(T.tanh(T.matmul(T.transpose(z_q, (0, 2, 3, 1)), W))))
    zq = z_q.data.copy()
    num = np.zeros_like(zq)
    for i in np.ndindex(zq.shape):
        for sgn in (1, -1):
            p = zq.copy()
            p[i] += sgn * 1e-5
            num[i] += sgn * np.tanh(p.transpose(0, 2, 3, 1) @ W).sum() / 2e-5
    assert np.allclose(z_e.grad, num, rtol=1e-6, atol=1e-9)


# ---- loss


def test_vq_loss_terms():
    x = np.random.default_rng(9).uniform(size=(1, 1, 4, 4))
    z = np.zeros((1, 2, 1, 1))
    out = vq_loss(x, x, z, z, beta=0.25)
    assert out.total.item() == out.recon.item() == out.align.item() == out.commit.item() == 0.0
    z_e = grid_of([[0.5, 0.0]])
    e = grid_of([[0.0, 0.0]])
    assert vq_loss(x, x, z_e, e, beta=0.25).commit.item() == pytest.approx(0.03125, abs=1e-15)
    assert vq_loss(x, x, z_e, e, beta=0.0).commit.item() == 0.0
    # align enters the total only for the gradient-trained codebook
    assert vq_loss(x, x, z_e, e, 0.25, ema=True).total.item() == pytest.approx(0.03125)
    assert vq_loss(x, x, z_e, e, 0.25, ema=False).total.item() == pytest.approx(0.03125 + 0.125)


def test_commit_gradient_reaches_encoder_only():
    z_e = T.Tensor(grid_of([[0.5, 0.0]]), requires_grad=True)
    e = T.Tensor(grid_of([[0.0, 0.0]]), requires_grad=True)
    out = vq_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)), z_e, e, beta=0.25, ema=True)
    T.backward(out.total)
    assert np.allclose(to_sites(z_e.grad), [[0.25 * 0.5, 0.0]])  # d/dz beta*mean((z-e)^2)
    assert e.grad is None


# ---- EMA / EM codebook


def _cluster_data(rng, n=400):
    centers = np.array([[2.0, 0.0], [-1.0, 1.5]])
    lab = rng.integers(0, 2, n)
    return centers[lab] + rng.normal(0, 0.3, size=(n, 2)), centers


def test_ema_decay_zero_is_kmeans_m_step():
    rng = np.random.default_rng(10)
    sites = rng.normal(size=(500, 3))
    cb = codebook_with(rng.normal(size=(6, 3)), decay=0.0)
    idx = nearest_codes(sites, cb.vectors.data)
    ema_update(cb, sites, idx)
    for k in np.unique(idx):
        assert np.max(np.abs(cb.vectors.data[k] - sites[idx == k].mean(axis=0))) <= 1e-12


def test_ema_converges_to_cluster_means():
    rng = np.random.default_rng(11)
    data, _ = _cluster_data(rng, 2000)
    cb = codebook_with([[1.0, 0.0], [0.0, 1.0]], decay=0.9)
    for _ in range(300):
        idx = nearest_codes(data, cb.vectors.data)
        ema_update(cb, data, idx)
    idx = nearest_codes(data, cb.vectors.data)
    for k in range(2):
        assert np.max(np.abs(cb.vectors.data[k] - data[idx == k].mean(axis=0))) < 1e-3


def test_ema_invariant_and_unassigned_code_keeps_value():
    rng = np.random.default_rng(12)
    cb = codebook_with([[0.0, 0.0], [1.0, 1.0], [50.0, 50.0]], decay=0.95)
    far = cb.vectors.data[2].copy()
    for _ in range(5):
        sites = rng.normal(0.5, 0.5, size=(40, 2))
        ema_update(cb, sites, nearest_codes(sites, cb.vectors.data))
        assert np.array_equal(cb.vectors.data, cb.ema_sums / np.maximum(cb.ema_counts, cb.eps_count)[:, None])
        assert np.all(cb.ema_counts >= 0)
    assert np.allclose(cb.vectors.data[2], far, rtol=1e-12)


def test_dead_code_reseeded_from_batch():
    rng = np.random.default_rng(13)
    cb = codebook_with([[0.0, 0.0], [1e3, 1e3]], decay=0.5, dead_patience=3, dead_threshold=1e-1)
    sites = rng.normal(size=(30, 2))
    for step in range(12):
        ema_update(cb, sites, nearest_codes(sites, cb.vectors.data), np.random.default_rng(step))
        if not np.allclose(cb.vectors.data[1], [1e3, 1e3], rtol=0.5):
            break
    assert any(np.array_equal(cb.vectors.data[1], s) for s in sites)
    assert cb.ema_counts[1] == 1.0


def test_usage_entropy():
    assert usage_entropy(np.zeros(10, dtype=int), 4) == 0.0
    assert usage_entropy(np.arange(4), 4) == pytest.approx(np.log(4))


def test_forward_output_contract():
    vq = VQVAE(SMALL, seed=4)
    x = np.random.default_rng(14).uniform(size=(3, 1, 8, 8))
    out = vq(x)
    assert out.z_e.shape == out.z_q.shape == (3, 4, 2, 2)
    assert out.indices.shape == (3, 2, 2)
    assert np.array_equal(out.z_q.data, np.transpose(vq.codebook.vectors.data[out.indices], (0, 3, 1, 2)))
    assert out.x_hat.shape == x.shape
    assert vq.reconstruct(x).shape == x.shape


def test_state_dict_roundtrip():
    a = VQVAE(SMALL, seed=5)
    b = VQVAE(SMALL, seed=6)
    b.load_state_dict(a.state_dict())
    x = np.random.default_rng(15).uniform(size=(2, 1, 8, 8))
    assert np.array_equal(a.reconstruct(x), b.reconstruct(x))
