import numpy as np
import pytest

from vidlane.attention import AttentionWeights
from vidlane.bootstrap import (IDEmbedKernel, apply_mask_cue, bootstrap_second_frame, first_frame_detect,
                               id_embedding, rasterize_lanes)
from vidlane.geometry import Lane, segment_dist2
from vidlane.numerics import ContractError, DimensionError, Tensor, grad_check, mul, sum_
from vidlane.tca import (BranchConfig, TCAWeights, TemporalState, accumulative_branch, adjacent_branch,
                         aggregate, current_branch, empty_state, step, temporal_update, tokens, untokens)

from test_attention import loop_attention


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def weights(c=8, heads=4, seed=0):
    return TCAWeights.init(c, heads, rng(seed))


def state(grid=(2, 3), c=8, seed=1, q_zero=False):
    r = rng(seed)
    n = grid[0] * grid[1]
    q = np.zeros((n, c)) if q_zero else r.normal(size=(n, c))
    return TemporalState(Tensor(r.normal(size=(n, c))), Tensor(r.normal(size=(n, c))), Tensor(q), 1, grid)


def test_tokens_row_major():
    f = np.arange(2 * 3 * 2, dtype=float).reshape(2, 3, 2)
    t = tokens(Tensor(f)).data
    assert np.array_equal(t[1 * 3 + 2], f[1, 2])
    assert np.array_equal(untokens(Tensor(t), (2, 3)).data, f)


def test_current_branch_zero_attention_is_passthrough():
    w = weights()
    w.current = AttentionWeights.zeros(8, 4)
    F = rng(2).normal(size=(2, 3, 8))
    f_t, q_t = current_branch(Tensor(F), w)
    np.testing.assert_array_equal(f_t.data, F)
    np.testing.assert_allclose(q_t.data, F.reshape(6, 8) @ w.phi.data, rtol=1e-15)


def test_current_branch_pipeline_shapes():
    w = TCAWeights.init(64, 4, rng())
    f_t, q_t = current_branch(Tensor(rng(1).normal(size=(24, 40, 64))), w)
    assert f_t.shape == (24, 40, 64) and q_t.shape == (960, 64)


def test_adjacent_zero_values_without_bias_is_zero():
    w = weights()
    w.adjacent.bo = None
    s = state()
    s.v_prev = Tensor(np.zeros_like(s.v_prev.data))
    assert not adjacent_branch(Tensor(rng(3).normal(size=(6, 8))), s, w).data.any()


def test_adjacent_matches_loop_oracle():
    w = weights(seed=4)
    s = state(grid=(2, 2), seed=5)
    q = rng(6).normal(size=(4, 8))
    out = adjacent_branch(Tensor(q), s, w).data.reshape(4, 8)
    np.testing.assert_allclose(out, loop_attention(q, s.k_prev.data, s.v_prev.data, w.adjacent), atol=1e-12)


def test_accumulative_first_application_is_uniform_mean():
    w = weights()
    w.accumulative = AttentionWeights.identity(8, 4)
    s = state(q_zero=True)
    f_ac, q_next = accumulative_branch(s, w)
    expect = s.v_prev.data.mean(axis=0)
    np.testing.assert_allclose(f_ac.data.reshape(6, 8), np.tile(expect, (6, 1)), atol=1e-15)
    np.testing.assert_array_equal(q_next.data, tokens(f_ac).data)


def test_accumulative_matches_loop_oracle():
    w = weights(seed=7)
    s = state(grid=(1, 3), seed=8)
    _, out = accumulative_branch(s, w)
    ref = loop_attention(s.q_acc.data, s.k_prev.data, s.v_prev.data, w.accumulative)
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_aggregate_sum_and_zero_parts():
    r = rng(9)
    a, b, c = (Tensor(r.normal(size=(2, 3, 4))) for _ in range(3))
    np.testing.assert_array_equal(aggregate(a, None, None).data, a.data)
    z = Tensor(np.zeros((2, 3, 4)))
    np.testing.assert_array_equal(aggregate(a, z, z).data, a.data)
    ref = np.empty((2, 3, 4))
    for idx in np.ndindex(ref.shape):
        ref[idx] = a.data[idx] + b.data[idx] + c.data[idx]
    np.testing.assert_array_equal(aggregate(a, b, c).data, ref)
    np.testing.assert_allclose(aggregate(a, b, c).data, aggregate(a, c, b).data, atol=1e-15)
    with pytest.raises(DimensionError):
        aggregate(a, Tensor(np.zeros((2, 3, 5))), None)


def test_temporal_update_identity():
    w = weights()
    F = Tensor(rng(10).normal(size=(2, 3, 8)))
    k, v = temporal_update(F, w)
    assert np.array_equal(v.data, tokens(F).data)
    w.phi = Tensor(np.eye(8))
    k, v = temporal_update(F, w)
    np.testing.assert_array_equal(k.data, v.data)


def test_step_constant_state_and_v_identity():
    w = weights()
    s = state()
    sizes = [s.nbytes]
    for t in range(5):
        F_hat, s = step(Tensor(rng(20 + t).normal(size=(2, 3, 8))), s, w, BranchConfig())
        assert np.array_equal(s.v_prev.data, tokens(F_hat).data)
        sizes.append(s.nbytes)
    assert len(set(sizes)) == 1
    assert s.frame_index == 6


def test_step_deterministic():
    w, s, F = weights(), state(), Tensor(rng(11).normal(size=(2, 3, 8)))
    a, sa = step(F, s, w)
    b, sb = step(F, s, w)
    assert np.array_equal(a.data, b.data) and np.array_equal(sa.q_acc.data, sb.q_acc.data)


def test_two_zero_weight_steps_hand_oracle():
    """All attention weights zero (no biases) and phi = I: every branch outputs 0
    except through the residual, so F_hat = F_t and the state is tokens(F_t)."""
    c = 8
    w = TCAWeights(AttentionWeights.zeros(c, 4), AttentionWeights.zeros(c, 4), AttentionWeights.zeros(c, 4),
                   Tensor(np.eye(c)), Tensor(np.eye(c)))
    s = state()
    F1, F2 = (Tensor(rng(12 + i).normal(size=(2, 3, c))) for i in range(2))
    out1, s = step(F1, s, w)
    out2, s = step(F2, s, w)
    np.testing.assert_array_equal(out1.data, F1.data)
    np.testing.assert_array_equal(out2.data, F2.data)
    np.testing.assert_array_equal(s.k_prev.data, tokens(F2).data)

    # with identity value/output projections the branches add value averages
    ident = AttentionWeights(Tensor(np.zeros((c, c))), Tensor(np.zeros((c, c))), Tensor(np.eye(c)),
                             Tensor(np.eye(c)), None, 4)
    w2 = TCAWeights(AttentionWeights.zeros(c, 4), ident, ident, Tensor(np.eye(c)), Tensor(np.eye(c)))
    s0 = state()
    out, s1 = step(F1, s0, w2)
    mean_v = s0.v_prev.data.mean(axis=0)
    np.testing.assert_allclose(out.data.reshape(6, c), tokens(F1).data + 2 * mean_v, atol=1e-14)
    out, _ = step(F2, s1, w2)
    mean_v1 = s1.v_prev.data.mean(axis=0)
    np.testing.assert_allclose(out.data.reshape(6, c), tokens(F2).data + 2 * mean_v1, atol=1e-14)


def test_disabled_accumulative_keeps_query():
    w, s = weights(), state()
    _, s2 = step(Tensor(rng(13).normal(size=(2, 3, 8))), s, w, BranchConfig(accumulative=False))
    np.testing.assert_array_equal(s2.q_acc.data, s.q_acc.data)


def test_unpopulated_state_rejected():
    with pytest.raises(ContractError):
        step(Tensor(np.zeros((2, 3, 8))), empty_state((2, 3), 8), weights())


def test_state_shape_mismatch():
    with pytest.raises(DimensionError):
        TemporalState(Tensor(np.zeros((6, 8))), Tensor(np.zeros((6, 8))), Tensor(np.zeros((5, 8))), 1, (2, 3))


def test_step_gradient_through_branch():
    r = rng(14)
    w = weights(seed=15)
    F = Tensor(r.normal(size=(2, 2, 8)), requires_grad=True)
    R = r.normal(size=(2, 2, 8))
    res = grad_check(lambda: sum_(mul(current_branch(F, w)[0], R)), [F, *w.current.parameters().values()])
    assert res.max_rel_error < 1e-6


def test_full_step_gradient_check_passes():
    from vidlane.check import gradient_suite

    full = [r for r in gradient_suite() if "full" in r.name]
    assert full[0].passed, full[0]


# ---------------------------------------------------------------- bootstrap

def brute_thin_raster(lane, h, w):
    """Pixels whose centre is within 0.5 of a segment between rounded points (a distance-field view)."""
    ipts = np.floor(lane.points + 0.5)
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = np.full((h, w), np.inf)
    for a, b in zip(ipts[:-1], ipts[1:]):
        d2 = np.minimum(d2, segment_dist2(xx.astype(float), yy.astype(float), a[0], a[1], b[0], b[1]))
    return d2 <= 0.25


def test_rasterize_vertical_lane():
    h, w = 12, 16
    m = rasterize_lanes([Lane([[10, 0], [10, h - 1]])], h, w)
    assert m.sum() == h and np.all(m[:, 10] == 1)


def test_rasterize_empty():
    assert not rasterize_lanes([], 8, 8).any()


def test_rasterize_diagonal_equals_distance_field():
    lane = Lane([[2, 1], [17, 16]])
    np.testing.assert_array_equal(rasterize_lanes([lane], 20, 20).astype(bool), brute_thin_raster(lane, 20, 20))


def test_id_embedding_zero_and_constant():
    k = IDEmbedKernel(Tensor(np.ones((3, 3, 1, 4)) / 9), Tensor(np.zeros(4)))
    assert not id_embedding(np.zeros((16, 16), np.uint8), k, (4, 4)).data.any()
    E = id_embedding(np.ones((16, 16), np.uint8), k, (4, 4)).data
    np.testing.assert_allclose(E[1:-1, 1:-1], 1.0, atol=1e-15)
    assert E[0, 0, 0] < 1.0


def test_id_embedding_sliding_window_oracle():
    r = rng(16)
    mask = (r.random((16, 24)) < 0.2).astype(np.uint8)
    k = IDEmbedKernel.init(3, r)
    k.bias.data[:] = r.normal(size=3)
    pooled = mask.reshape(4, 4, 6, 4).mean(axis=(1, 3))
    padded = np.pad(pooled, 1)
    ref = np.zeros((4, 6, 3))
    for i in range(4):
        for j in range(6):
            for c in range(3):
                ref[i, j, c] = np.sum(padded[i:i + 3, j:j + 3] * k.kernel.data[:, :, 0, c]) + k.bias.data[c]
    np.testing.assert_allclose(id_embedding(mask, k, (4, 6)).data, ref, atol=1e-14)


def test_id_embedding_uneven_grid():
    with pytest.raises(DimensionError):
        id_embedding(np.zeros((16, 24), np.uint8), IDEmbedKernel.init(3, rng()), (4, 4))


def test_bootstrap_identity_and_compositional_oracle():
    r = rng(17)
    w = weights(seed=18)
    f2 = Tensor(r.normal(size=(2, 3, 8)))
    w.phi_v = Tensor(np.eye(8))
    s = bootstrap_second_frame(f2, Tensor(np.zeros((2, 3, 8))), w)
    np.testing.assert_array_equal(s.v_prev.data, tokens(f2).data)
    assert not s.q_acc.data.any() and s.frame_index == 1

    w = weights(seed=19)
    E = Tensor(r.normal(size=(2, 3, 8)))
    s = bootstrap_second_frame(f2, E, w)
    ref = np.zeros((6, 8))
    ft, et = f2.data.reshape(6, 8), E.data.reshape(6, 8)
    for i in range(6):
        for j in range(8):
            ref[i, j] = sum((ft[i, t] + et[i, t]) * w.phi_v.data[t, j] for t in range(8))
    np.testing.assert_allclose(s.v_prev.data, ref, atol=1e-13)
    np.testing.assert_allclose(s.k_prev.data, ft @ w.phi.data, atol=1e-14)


def test_bootstrap_shape_mismatch():
    with pytest.raises(DimensionError):
        bootstrap_second_frame(Tensor(np.zeros((2, 3, 8))), Tensor(np.zeros((2, 2, 8))), weights())


def test_mask_cue_keeps_key_and_query():
    w, s = weights(), state()
    E = Tensor(rng(20).normal(size=(2, 3, 8)))
    s2 = apply_mask_cue(s, E, w)
    assert s2.k_prev is s.k_prev and s2.q_acc is s.q_acc
    np.testing.assert_allclose(s2.v_prev.data, (s.v_prev.data + E.data.reshape(6, 8)) @ w.phi_v.data)


def test_first_frame_passthrough():
    F1 = Tensor(rng(21).normal(size=(2, 3, 8)))
    lanes, F_hat = first_frame_detect(F1, lambda f: ["lane"])
    assert F_hat is F1 and lanes == ["lane"]
