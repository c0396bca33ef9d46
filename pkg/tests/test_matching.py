import numpy as np
import pytest

from sacreg.gradcheck import grad_check
from sacreg.matching import (
    ConvFlowHead,
    compose,
    flow_from_scores,
    match_flow,
    relative_grid,
    similarity_scores,
    upsample_flow,
)
from sacreg.ops import warp
from sacreg.tensor import ContractError, Tensor


def test_relative_grid():
    G = relative_grid(3)
    assert G.shape == (27, 3)
    assert np.all(G.sum(axis=0) == 0) and G[13].tolist() == [0, 0, 0]


def test_constant_moving_features_uniform_scores(rng):
    Ff = Tensor(rng.normal(size=(4, 3, 3, 3)))
    Fm = Tensor(np.ones((4, 3, 3, 3)) * rng.normal(size=(4, 1, 1, 1)))
    s = similarity_scores(Ff, Fm).data
    np.testing.assert_allclose(s, 1 / 27, rtol=1e-5)


def test_scores_rows_sum_to_one(rng):
    s = similarity_scores(Tensor(rng.normal(size=(3, 4, 4, 4))), Tensor(rng.normal(size=(3, 4, 4, 4)))).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


def test_scores_shape_mismatch():
    with pytest.raises(ContractError):
        similarity_scores(Tensor(np.zeros((2, 3, 3, 3))), Tensor(np.zeros((2, 3, 3, 4))))


def test_shifted_features_argmax(rng, f64):
    Ff = rng.normal(size=(32, 8, 8, 8)) * 3
    Fm = np.roll(Ff, 1, axis=1)  # F_m(v + e_d) = F_f(v): the match of v sits at offset (+1, 0, 0)
    s = similarity_scores(Tensor(Ff), Tensor(Fm)).data.reshape(8, 8, 8, 27)
    G = relative_grid(3)
    # exhaustive inner-product oracle at interior voxels
    for d in range(1, 6):
        for h in range(1, 7):
            for w in range(1, 7):
                dots = [Ff[:, d, h, w] @ Fm[:, d + o[0], h + o[1], w + o[2]] for o in G]
                assert int(np.argmax(dots)) == int(np.argmax(s[d, h, w]))
                assert G[int(np.argmax(s[d, h, w]))].tolist() == [1, 0, 0]


def test_uniform_scores_zero_flow():
    flow = flow_from_scores(Tensor(np.full((8, 27), 1 / 27)), relative_grid(3), (2, 2, 2)).data
    assert np.abs(flow).max() < 1e-6


def test_one_hot_score_gives_offset():
    s = np.zeros((8, 27))
    s[:, 13] = 1.0
    s[5] = 0.0
    s[5, 13 + 3] = 1.0  # offset (0, 1, 0)
    flow = flow_from_scores(Tensor(s), relative_grid(3), (2, 2, 2)).data
    assert flow[:, 1, 0, 1].tolist() == [0.0, 1.0, 0.0]
    assert np.abs(np.delete(flow.reshape(3, 8), 5, axis=1)).max() == 0


def test_flow_from_scores_oracle(rng, f64):
    s = rng.random((12, 27))
    s /= s.sum(1, keepdims=True)
    G = relative_grid(3)
    flow = flow_from_scores(Tensor(s), G, (2, 3, 2)).data
    for m in range(12):
        expect = sum(s[m, j] * G[j] for j in range(27))
        np.testing.assert_allclose(flow.reshape(3, 12)[:, m], expect, rtol=1e-12)
    assert np.abs(flow).max() <= 1.0


def test_match_flow_gradients(rng, f64):
    Ff = Tensor(rng.normal(size=(2, 3, 3, 4)), requires_grad=True)
    Fm = Tensor(rng.normal(size=(2, 3, 3, 4)), requires_grad=True)
    wt = rng.normal(size=(3, 3, 3, 4))
    assert grad_check(lambda a, b: (match_flow(a, b) * wt).sum(), [Ff, Fm]) < 1e-6


def test_upsample_constant_and_zero():
    c = np.array([0.5, -1.0, 2.0]).reshape(3, 1, 1, 1) * np.ones((3, 2, 3, 2))
    up = upsample_flow(Tensor(c)).data
    assert up.shape == (3, 4, 6, 4)
    np.testing.assert_allclose(up, 2 * c[:, :1, :1, :1] * np.ones((3, 4, 6, 4)), rtol=1e-6)
    assert np.all(upsample_flow(Tensor(np.zeros((3, 2, 2, 2)))).data == 0)


def test_upsample_linear_ramp(f64):
    n = 4
    ramp = np.zeros((3, n, n, n))
    ramp[0] = 0.5 * np.arange(n)[:, None, None]
    up = upsample_flow(Tensor(ramp)).data
    # fine voxel centre j sits at coarse coordinate (j + 0.5) / 2 - 0.5; away from the clamped ends
    j = np.arange(1, 2 * n - 1)
    coarse = (j + 0.5) / 2 - 0.5
    np.testing.assert_allclose(up[0, 1:-1, 0, 0], 2 * 0.5 * coarse, atol=1e-12)
    assert np.allclose(np.diff(up[0, 1:-1, 0, 0]), 0.5)


def test_compose_trivial_cases(rng):
    a = Tensor(rng.normal(size=(3, 4, 4, 4)))
    zero = Tensor(np.zeros((3, 4, 4, 4)))
    assert np.array_equal(compose(a, zero).data, a.data)
    assert np.array_equal(compose(zero, a).data, a.data)


def test_compose_translations(f64):
    t1, t2 = np.array([1.0, 0.0, -1.0]), np.array([0.5, 1.0, 0.0])
    f1 = Tensor(t1.reshape(3, 1, 1, 1) * np.ones((3, 8, 8, 8)))
    f2 = Tensor(t2.reshape(3, 1, 1, 1) * np.ones((3, 8, 8, 8)))
    out = compose(f1, f2).data
    np.testing.assert_allclose(out[:, 2:-2, 2:-2, 2:-2], (t1 + t2).reshape(3, 1, 1, 1) * np.ones((3, 4, 4, 4)))


def test_compose_is_sequential_warp(rng, f64):
    """Warping by the composed field equals warping by phi_hat then by delta."""
    g = np.meshgrid(*[np.arange(10.0)] * 3, indexing="ij")
    img = Tensor((np.sin(g[0] / 3) + np.cos(g[1] / 4) * np.sin(g[2] / 5))[None])
    lin = np.stack(np.meshgrid(*[np.linspace(-0.3, 0.3, 10)] * 3, indexing="ij"))
    phi_hat = Tensor(lin * 1.0)
    delta = Tensor(lin[::-1] * 0.5)
    once = warp(img, compose(phi_hat, delta)).data
    twice = warp(warp(img, phi_hat), delta).data
    assert np.abs(once - twice)[:, 2:-2, 2:-2, 2:-2].max() < 0.02


def test_compose_shape_mismatch():
    with pytest.raises(ContractError):
        compose(Tensor(np.zeros((3, 2, 2, 2))), Tensor(np.zeros((3, 2, 2, 3))))


def test_head_starts_at_zero_and_reaches_both_streams(rng):
    head = ConvFlowHead(rng, 2, hidden=4)
    Ff = Tensor(rng.normal(size=(2, 4, 4, 4)), requires_grad=True)
    Fm = Tensor(rng.normal(size=(2, 4, 4, 4)), requires_grad=True)
    out = head(Ff, Fm)
    assert out.shape == (3, 4, 4, 4) and np.all(out.data == 0)
    head.conv2_weight.data[...] = rng.normal(size=head.conv2_weight.shape)
    (head(Ff, Fm) ** 2).sum().backward()
    assert np.linalg.norm(Ff.grad) > 0 and np.linalg.norm(Fm.grad) > 0


def test_shift_recovery():
    """One-voxel translate of a high-contrast field is recovered by the matching step."""
    rng = np.random.default_rng(0)
    F = rng.normal(size=(16, 12, 12, 12)) * 4
    Fm = np.roll(F, 1, axis=2)  # F_m(v + e_h) = F_f(v)
    flow = match_flow(Tensor(F), Tensor(Fm)).data
    interior = flow[:, 1:-1, 1:-1, 1:-1]
    err = np.sqrt(((interior - np.array([0, 1, 0]).reshape(3, 1, 1, 1)) ** 2).sum(0))
    assert err.mean() < 0.1


@pytest.mark.parametrize("scale", [1.0, 50.0, 1e4])
def test_flow_bound_is_exact_in_float32(scale):
    rng = np.random.default_rng(int(scale))
    Ff = Tensor((rng.normal(size=(8, 6, 6, 6)) * scale).astype(np.float32))
    Fm = Tensor((rng.normal(size=(8, 6, 6, 6)) * scale).astype(np.float32))
    flow = match_flow(Ff, Fm).data
    assert flow.dtype == np.float32
    assert np.abs(flow).max() <= 1.0
