import math

import numpy as np
import pytest

from vsrkit import autodiff as ad
from vsrkit.autodiff import Tensor, backward, finite_difference_check, grad_of
from vsrkit.linguistics import build_mapping_matrix, build_window_mask, \
    default_inventory
from vsrkit.losses import (
    CtcError,
    CtcNoValidPathError,
    LossConfig,
    align_loss,
    attention_ce_loss,
    ctc_loss,
    hybrid_loss,
    local_distribution,
    positive_distribution,
    positive_mask,
    similarity_matrix,
    total_loss,
)
from vsrkit.verify import align_loss_dense, ctc_path_enumeration

INV = default_inventory()


# ----------------------------------------------------------------------
# ctc


def test_ctc_single_frame_uniform():
    loss = ctc_loss(Tensor(np.zeros((1, 3))), [2])
    assert float(loss.data) == pytest.approx(math.log(3), abs=1e-12)


def test_ctc_two_frames_three_paths():
    # paths (a,a), (blank,a), (a,blank) out of 4 -> p = 3/4
    loss = ctc_loss(Tensor(np.zeros((2, 2))), [1])
    assert float(loss.data) == pytest.approx(-math.log(0.75), abs=1e-12)


def test_ctc_infeasible_target_raises_distinct_error():
    with pytest.raises(CtcNoValidPathError):
        ctc_loss(Tensor(np.zeros((1, 3))), [1, 2])
    with pytest.raises(CtcNoValidPathError):
        ctc_loss(Tensor(np.zeros((2, 3))), [1, 1])  # repeat needs a blank


def test_ctc_rejects_blank_in_target():
    with pytest.raises(CtcError, match="blank"):
        ctc_loss(Tensor(np.zeros((3, 3))), [1, 0])


def test_ctc_rejects_out_of_range_token():
    with pytest.raises(CtcError, match="out of range"):
        ctc_loss(Tensor(np.zeros((3, 3))), [5])


def test_ctc_empty_target_is_all_blank_path():
    logits = np.log(np.array([[0.7, 0.3], [0.6, 0.4]]))
    loss = ctc_loss(Tensor(logits), [])
    assert float(loss.data) == pytest.approx(-math.log(0.7 * 0.6), abs=1e-12)


def test_ctc_exhaustive_grid_matches_enumeration():
    rng = np.random.default_rng(42)
    for T in range(1, 7):
        for K in range(2, 5):
            for L in range(1, 4):
                if L > T:
                    continue
                for _ in range(5):
                    target = rng.integers(1, K, size=L)
                    logits = rng.normal(size=(T, K))
                    brute = ctc_path_enumeration(logits, target)
                    try:
                        loss = float(ctc_loss(Tensor(logits), target).data)
                    except CtcNoValidPathError:
                        assert brute == 0.0
                        continue
                    assert math.exp(-loss) == pytest.approx(brute, abs=1e-10)


def test_ctc_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        T = int(rng.integers(2, 6))
        K = int(rng.integers(2, 5))
        L = int(rng.integers(1, min(T, 3) + 1))
        target = rng.integers(1, K, size=L)
        x = rng.normal(size=(T, K))
        try:
            worst = max(worst, finite_difference_check(
                lambda t: ctc_loss(t, target), Tensor(x)))
        except CtcNoValidPathError:
            continue
    assert worst < 1e-4


def test_ctc_fault_injection_hook_breaks_the_oracle():
    from vsrkit import losses as losses_mod
    logits = np.random.default_rng(3).normal(size=(4, 3))
    good = float(ctc_loss(Tensor(logits), [1, 2]).data)
    losses_mod._fault_inject_extended_labels = True
    try:
        bad = float(ctc_loss(Tensor(logits), [1, 2]).data)
    finally:
        losses_mod._fault_inject_extended_labels = False
    assert abs(math.exp(-bad) - ctc_path_enumeration(logits, [1, 2])) > 1e-6
    assert bad != good


# ----------------------------------------------------------------------
# attention cross-entropy


def test_attention_ce_uniform():
    loss = attention_ce_loss(Tensor(np.zeros((1, 4))), [2])
    assert float(loss.data) == pytest.approx(math.log(4), abs=1e-12)


def test_attention_ce_concentrated_limit():
    logits = np.zeros((2, 4))
    logits[0, 1] = logits[1, 3] = 60.0
    loss = attention_ce_loss(Tensor(logits), [1, 3])
    assert float(loss.data) < 1e-12


def test_attention_ce_matches_direct_computation():
    rng = np.random.default_rng(11)
    logits = rng.normal(size=(3, 5))
    target = [4, 0, 2]
    expected = 0.0
    for i, t in enumerate(target):
        row = logits[i]
        expected -= row[t] - math.log(np.exp(row - row.max()).sum()) - row.max()
    expected /= 3
    loss = attention_ce_loss(Tensor(logits), target)
    assert float(loss.data) == pytest.approx(expected, abs=1e-10)


def test_attention_ce_length_mismatch():
    with pytest.raises(ValueError):
        attention_ce_loss(Tensor(np.zeros((2, 3))), [1])


def test_attention_ce_gradient():
    rng = np.random.default_rng(12)
    for _ in range(20):
        L, K = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        target = rng.integers(0, K, size=L)
        err = finite_difference_check(
            lambda t: attention_ce_loss(t, target),
            Tensor(rng.normal(size=(L, K))))
        assert err < 1e-4


# ----------------------------------------------------------------------
# hybrid and total


def test_hybrid_endpoints_and_midpoint():
    assert float(hybrid_loss(Tensor(2.0), Tensor(4.0), 1.0).data) == 2.0
    assert float(hybrid_loss(Tensor(2.0), Tensor(4.0), 0.0).data) == 4.0
    assert float(hybrid_loss(Tensor(2.0), Tensor(4.0), 0.5).data) == 3.0


def test_hybrid_rejects_bad_alpha():
    with pytest.raises(ValueError):
        hybrid_loss(Tensor(1.0), Tensor(1.0), 1.5)


def test_total_loss_lambda_zero_reduces_to_hybrid():
    cfg = LossConfig(alpha=0.5, lambda1=0.0, lambda2=0.0)
    bundle = total_loss(Tensor(4.0), Tensor(2.0), cfg,
                        phoneme_ctc=Tensor(9.0), viseme_ctc=Tensor(9.0),
                        align=Tensor(9.0))
    assert float(bundle.total.data) == float(bundle.char_hybrid.data) == 3.0


def test_total_loss_arithmetic():
    cfg = LossConfig(alpha=1.0, lambda1=1.0, lambda2=0.0)
    bundle = total_loss(Tensor(0.0), Tensor(1.0), cfg, align=Tensor(0.5))
    assert float(bundle.total.data) == pytest.approx(1.5, abs=0)


def test_total_loss_matches_hand_recombination():
    rng = np.random.default_rng(5)
    for _ in range(20):
        cfg = LossConfig(alpha=float(rng.uniform(0, 1)),
                         lambda1=float(rng.uniform(0, 2)),
                         lambda2=float(rng.uniform(0, 2)))
        c, a, p, v, al = rng.uniform(0, 3, size=5)
        bundle = total_loss(Tensor(c), Tensor(a), cfg, phoneme_ctc=Tensor(p),
                            viseme_ctc=Tensor(v), align=Tensor(al))
        hybrid = cfg.alpha * a + (1 - cfg.alpha) * c
        want = hybrid + cfg.lambda1 * al + cfg.lambda2 * (p + v)
        assert float(bundle.total.data) == pytest.approx(want, abs=1e-12)


def test_total_loss_affine_in_components():
    cfg = LossConfig(alpha=0.25, lambda1=0.5, lambda2=2.0)

    def total(c, a, p, v, al):
        return float(total_loss(Tensor(c), Tensor(a), cfg,
                                phoneme_ctc=Tensor(p), viseme_ctc=Tensor(v),
                                align=Tensor(al)).total.data)

    base = total(0, 0, 0, 0, 0)
    assert base == 0.0
    # evaluating at unit vectors recovers the documented coefficients
    assert total(1, 0, 0, 0, 0) == pytest.approx(0.75)
    assert total(0, 1, 0, 0, 0) == pytest.approx(0.25)
    assert total(0, 0, 1, 0, 0) == pytest.approx(2.0)
    assert total(0, 0, 0, 1, 0) == pytest.approx(2.0)
    assert total(0, 0, 0, 0, 1) == pytest.approx(0.5)


def test_total_loss_requires_branch_pair():
    cfg = LossConfig()
    with pytest.raises(ValueError):
        total_loss(Tensor(1.0), Tensor(1.0), cfg, phoneme_ctc=Tensor(1.0))


# ----------------------------------------------------------------------
# similarity / masks / distributions


def test_similarity_identity_on_unit_rows():
    V = np.eye(3)
    S = similarity_matrix(Tensor(V), Tensor(V))
    assert np.allclose(np.diag(S.data), 1.0)


def test_similarity_orthogonal_rows():
    V = np.array([[1.0, 0.0]])
    P = np.array([[0.0, 1.0]])
    assert similarity_matrix(Tensor(V), Tensor(P)).data[0, 0] == \
        pytest.approx(0.0, abs=1e-12)


def test_similarity_known_value():
    V = np.array([[1.0, 0.0]])
    P = np.array([[1.0, 1.0]])
    got = similarity_matrix(Tensor(V), Tensor(P)).data[0, 0]
    assert got == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_similarity_shape_mismatch():
    with pytest.raises(ValueError):
        similarity_matrix(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))


def test_positive_mask_is_elementwise_product():
    M = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(positive_mask(M, np.ones((2, 2))), M)
    assert np.array_equal(positive_mask(np.ones((2, 2)), np.eye(2)), np.eye(2))
    with pytest.raises(ValueError):
        positive_mask(np.ones((2, 2)), np.ones((3, 3)))


def test_local_distribution_uniform_within_window():
    S = np.zeros((5, 5))
    W = build_window_mask(5, 3)
    q = local_distribution(Tensor(S), W, tau=0.5).data
    row = q[2]
    assert np.allclose(row[[1, 2, 3]], 1 / 3)
    assert row[0] == row[4] == 0.0


def test_local_distribution_low_temperature_concentrates():
    rng = np.random.default_rng(0)
    S = rng.normal(size=(6, 6))
    W = build_window_mask(6, 5)
    q = local_distribution(Tensor(S), W, tau=1e-3).data
    for i in range(6):
        in_window = np.flatnonzero(W[i])
        top = in_window[np.argmax(S[i, in_window])]
        assert q[i, top] == pytest.approx(1.0, abs=1e-6)


def test_local_distribution_rows_sum_to_one_and_match_direct():
    rng = np.random.default_rng(3)
    S = rng.normal(size=(5, 5))
    W = build_window_mask(5, 3)
    tau = 0.1
    q = local_distribution(Tensor(S), W, tau).data
    assert np.allclose(q.sum(axis=1), 1.0, atol=1e-12)
    for i in range(5):
        idx = np.flatnonzero(W[i])
        e = np.exp(S[i, idx] / tau - (S[i, idx] / tau).max())
        assert np.allclose(q[i, idx], e / e.sum(), atol=1e-12)


def test_local_distribution_rejects_bad_tau():
    with pytest.raises(ValueError):
        local_distribution(Tensor(np.zeros((2, 2))), np.ones((2, 2)), 0.0)


def test_positive_distribution_cases():
    P, active = positive_distribution(np.array([[1.0, 1.0, 0.0],
                                                [0.0, 0.0, 0.0]]))
    assert np.allclose(P[0], [0.5, 0.5, 0.0])
    assert np.array_equal(P[1], np.zeros(3))
    assert active.tolist() == [True, False]
    Pi, act = positive_distribution(np.eye(4))
    assert np.array_equal(Pi, np.eye(4))
    assert act.all()


# ----------------------------------------------------------------------
# alignment loss


def _random_instance(rng, B=2, T=6, C=8, w=3):
    cfg = LossConfig(window_w=w, tau=float(rng.uniform(0.05, 1.0)))
    V = rng.normal(size=(B, T, C))
    P = rng.normal(size=(B, T, C))
    vis = rng.integers(0, INV.num_visemes, size=(B, T))
    pho = rng.integers(0, INV.num_phonemes, size=(B, T))
    return cfg, V, P, vis, pho


def test_align_loss_zero_when_local_distribution_equals_positives():
    # one positive per row at the diagonal, features aligned so q puts all
    # its (low temperature) mass on the diagonal too
    T, C = 4, 4
    V = np.eye(T, C) * 5
    P = np.eye(T, C) * 5
    vis = np.full((1, T), 2)
    pho = np.full((1, T), 0)
    p_idx = INV.phonemes_of_viseme(2)[0]
    pho[:] = 0
    for i in range(T):
        pho[0, i] = p_idx if i % 2 == 0 else INV.phonemes_of_viseme(4)[0]
        vis[0, i] = 2 if i % 2 == 0 else 4
    cfg = LossConfig(window_w=1, tau=1.0)  # window 1: only the diagonal
    loss = float(align_loss(Tensor(V[None]), Tensor(P[None]), vis, pho,
                            INV, cfg).data)
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_align_loss_no_active_rows_is_zero():
    rng = np.random.default_rng(2)
    cfg, V, P, _, pho = _random_instance(rng)
    vis = np.zeros((2, 6), dtype=int)  # all blank: no positives anywhere
    loss = float(align_loss(Tensor(V), Tensor(P), vis, pho, INV, cfg).data)
    assert loss == 0.0


def test_align_loss_matches_dense_oracle():
    rng = np.random.default_rng(123)
    p2v = list(INV.phoneme_to_viseme)
    for _ in range(30):
        B = int(rng.integers(1, 4))
        T = int(rng.integers(2, 9))
        C = int(rng.integers(2, 9))
        w = int(rng.choice([1, 3, 5]))
        cfg, V, P, vis, pho = _random_instance(rng, B, T, C, w)
        lengths = rng.integers(1, T + 1, size=B).tolist()
        got = float(align_loss(Tensor(V), Tensor(P), vis, pho, INV, cfg,
                               lengths=lengths).data)
        want = align_loss_dense(V, P, vis, pho, p2v, cfg, lengths=lengths)
        assert got == pytest.approx(want, abs=1e-10)


def test_align_loss_is_nonnegative():
    rng = np.random.default_rng(77)
    for _ in range(30):
        cfg, V, P, vis, pho = _random_instance(rng)
        loss = float(align_loss(Tensor(V), Tensor(P), vis, pho, INV, cfg).data)
        assert loss >= 0.0


def test_align_loss_row_scale_invariance():
    rng = np.random.default_rng(8)
    cfg, V, P, vis, pho = _random_instance(rng)
    base = float(align_loss(Tensor(V), Tensor(P), vis, pho, INV, cfg).data)
    V2 = V.copy()
    V2[0, 3] *= 7.3
    P2 = P.copy()
    P2[1, 2] *= 0.02
    scaled = float(align_loss(Tensor(V2), Tensor(P2), vis, pho, INV, cfg).data)
    assert abs(base - scaled) < 1e-10


def test_align_loss_permutation_invariant_with_full_window():
    rng = np.random.default_rng(9)
    B, T, C = 1, 5, 6
    cfg = LossConfig(window_w=2 * T - 1, tau=0.3)
    V = rng.normal(size=(B, T, C))
    P = rng.normal(size=(B, T, C))
    vis = rng.integers(0, INV.num_visemes, size=(B, T))
    pho = rng.integers(0, INV.num_phonemes, size=(B, T))
    base = float(align_loss(Tensor(V), Tensor(P), vis, pho, INV, cfg).data)
    sigma = rng.permutation(T)
    perm = float(align_loss(Tensor(V[:, sigma]), Tensor(P[:, sigma]),
                            vis[:, sigma], pho[:, sigma], INV, cfg).data)
    assert base == pytest.approx(perm, abs=1e-10)


def test_align_loss_temperature_monotonicity_on_argmax_positive():
    # every row's unique in-window positive sits at the similarity argmax
    # (the diagonal), so sharpening the local distribution can only reduce
    # the divergence
    T, C = 6, 6
    V = np.eye(T, C)[None] * 3.0
    P = np.eye(T, C)[None] * 3.0
    cycle = [2, 4, 5]  # 3-cycle of viseme classes: within a +-1 window the
    vis = np.array([[cycle[i % 3] for i in range(T)]])  # only match is j = i
    pho = np.array([[INV.phonemes_of_viseme(cycle[i % 3])[0]
                     for i in range(T)]])
    losses = []
    for tau in (1.0, 0.5, 0.1):
        cfg = LossConfig(window_w=3, tau=tau)
        losses.append(float(align_loss(Tensor(V), Tensor(P), vis, pho,
                                       INV, cfg).data))
    assert losses[0] > losses[1] > losses[2]


def test_align_loss_gradient_reaches_both_feature_sets():
    rng = np.random.default_rng(10)
    cfg, V, P, _, _ = _random_instance(rng)
    # classes chosen so every row has at least one in-window positive
    vis = np.full((2, 6), 2)
    pho = np.full((2, 6), INV.phonemes_of_viseme(2)[0])
    tv, tp = Tensor(V), Tensor(P)
    loss = align_loss(tv, tp, vis, pho, INV, cfg)
    assert float(loss.data) > 0
    backward(loss)
    assert np.abs(grad_of(tv)).max() > 0
    assert np.abs(grad_of(tp)).max() > 0


def test_align_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(13)
    for _ in range(10):
        cfg, V, P, vis, pho = _random_instance(rng, B=1, T=5, C=4)
        err = finite_difference_check(
            lambda t: align_loss(t, Tensor(P), vis, pho, INV, cfg),
            Tensor(V))
        assert err < 1e-4


def test_align_loss_shape_validation():
    cfg = LossConfig()
    with pytest.raises(ValueError):
        align_loss(Tensor(np.ones((1, 2, 3))), Tensor(np.ones((1, 2, 4))),
                   np.ones((1, 2)), np.ones((1, 2)), INV, cfg)


def test_pipeline_masks_compose():
    # mapping matrix from the earlier example through the mask product
    p = INV.phoneme_index("p")
    t = INV.phoneme_index("t")
    M = build_mapping_matrix([2, 4], [p, t], INV)
    P_mask = positive_mask(M, np.ones((2, 2)))
    assert np.array_equal(P_mask, np.eye(2))
