import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lease.codebook import Codebook, NeighborTable, build_neighbor_table, normalize, random_codebook
from lease.errors import DataError, NumericError
from lease.objectives import CodebookTargets, LossReport, contrast_loss, recon_loss, total_loss

from oracles import naive_contrast_loss, naive_recon_loss


def test_recon_two_position_example():
    logits = torch.tensor([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]], dtype=torch.float64)
    loss = recon_loss(logits, [0, 2], [True, True], 0.0)
    e = math.e
    want = (-math.log(e / (e + 2)) - math.log(1 / (e + 2))) / 2
    assert loss.item() == pytest.approx(want, rel=1e-12)
    assert loss.item() == pytest.approx(1.0514, abs=1e-4)


def test_recon_near_one_hot():
    logits = torch.zeros(4, 6, dtype=torch.float64)
    t = torch.tensor([1, 5, 0, 2])
    logits[torch.arange(4), t] = 1e4
    assert recon_loss(logits, t, [True] * 4, 0.0).item() < 1e-6


@pytest.mark.parametrize("ls", [0.0, 0.1])
def test_recon_uniform_logits_is_log_v(ls):
    v = 37
    loss = recon_loss(torch.zeros(2, 8, v, dtype=torch.float64), torch.randint(0, v, (2, 8)),
                      torch.ones(2, 8, dtype=torch.bool), ls)
    assert loss.item() == pytest.approx(math.log(v), rel=1e-12)


def test_recon_unmasked_positions_ignored():
    logits = torch.randn(1, 4, 5, dtype=torch.float64)
    mask = torch.tensor([[True, False, True, False]])
    a = recon_loss(logits, torch.tensor([[0, 1, 2, 3]]), mask)
    logits2 = logits.clone()
    logits2[0, 1] = 100.0
    b = recon_loss(logits2, torch.tensor([[0, 4, 2, 0]]), mask)
    assert a.item() == b.item()


def test_recon_errors():
    with pytest.raises(DataError, match="masked"):
        recon_loss(torch.zeros(1, 2, 3), torch.zeros(1, 2), torch.zeros(1, 2, dtype=torch.bool))
    with pytest.raises(DataError):
        recon_loss(torch.zeros(2, 3), [0, 0], [True, True], label_smoothing=1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.0, 0.1, 0.5]))
def test_recon_matches_naive_loops(seed, ls):
    rng = np.random.default_rng(seed)
    ss, v = int(rng.integers(2, 10)), int(rng.integers(2, 12))
    logits = rng.normal(0, 3, (ss, v))
    t = rng.integers(0, v, ss)
    m = rng.random(ss) < 0.6
    m[rng.integers(ss)] = True
    got = recon_loss(torch.from_numpy(logits), t, m, ls).item()
    want = naive_recon_loss(logits.tolist(), t.tolist(), m.tolist(), ls)
    assert got == pytest.approx(want, rel=1e-10)
    if ls == 0.0:
        assert got >= 0


def _two_centroid_targets():
    cb = Codebook(np.eye(2), normalized=True)
    return CodebookTargets(cb, build_neighbor_table(cb, 1), 0.1, dtype=torch.float64)


def test_contrast_two_centroid_example():
    loss, n_u = contrast_loss(torch.tensor([[1.0, 0.0]], dtype=torch.float64), [0], _two_centroid_targets(), 0.1)
    w = torch.softmax(torch.tensor([10.0, 0.0], dtype=torch.float64), 0)
    lp = torch.log_softmax(torch.tensor([10.0, 0.0], dtype=torch.float64), 0)
    assert loss.item() == pytest.approx(-(w * lp).sum().item(), rel=1e-12)
    # closed form: w = (1, e^-10) / (1 + e^-10), loss = w_1 * 10 + ln(1 + e^-10)
    assert loss.item() == pytest.approx(4.994e-4, rel=1e-3)
    assert n_u == 1


def test_contrast_orthogonal_query_is_log_k():
    cb = Codebook(np.eye(8)[:6], normalized=True)
    targets = CodebookTargets(cb, build_neighbor_table(cb, 3), 0.1, dtype=torch.float64)
    z = torch.zeros(2, 8, dtype=torch.float64)
    z[0, 6] = z[1, 7] = 1.0
    loss, _ = contrast_loss(z, [0, 4], targets, 0.1)
    assert loss.item() == pytest.approx(math.log(6), rel=1e-12)


def test_contrast_duplicated_codebook_is_log_k():
    cb = normalize(Codebook(np.ones((5, 3))))
    targets = CodebookTargets(cb, build_neighbor_table(cb, 2), 0.1, dtype=torch.float64)
    z = torch.nn.functional.normalize(torch.randn(4, 3, dtype=torch.float64), dim=-1)
    loss, _ = contrast_loss(z, [0, 1, 2, 3], targets, 0.1)
    assert loss.item() == pytest.approx(math.log(5), rel=1e-6)


def test_contrast_no_unmasked_tokens():
    loss, n_u = contrast_loss(torch.randn(1, 3, 2), torch.zeros(1, 3), _two_centroid_targets(), 0.1,
                              torch.zeros(1, 3, dtype=torch.bool))
    assert n_u == 0 and loss.item() == 0.0


def test_contrast_no_overflow_at_extreme_alpha():
    loss, _ = contrast_loss(torch.tensor([[1.0, 0.0]]), [1], _two_centroid_targets(), 1e-3)
    assert torch.isfinite(loss)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_contrast_matches_naive_and_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    K, D, n = int(rng.integers(3, 20)), int(rng.integers(2, 6)), int(rng.integers(1, 8))
    cb = random_codebook(K, D, seed)
    k_sel = int(rng.integers(1, K))
    cent = cb.centroids.astype(np.float64)
    table = build_neighbor_table(Codebook(cent, normalized=True), k_sel)
    targets = CodebookTargets(Codebook(cent, normalized=True), table, 0.1, dtype=torch.float64)
    z = rng.standard_normal((n, D))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    anchors = rng.integers(0, K, n)
    got, _ = contrast_loss(torch.from_numpy(z), anchors, targets, 0.1)
    want = naive_contrast_loss(z.tolist(), anchors.tolist(), cent.tolist(), k_sel, 0.1, 0.1)
    assert got.item() == pytest.approx(want, rel=1e-10)
    assert got.item() >= 0
    perm = rng.permutation(n)
    again, _ = contrast_loss(torch.from_numpy(z[perm]), anchors[perm], targets, 0.1)
    assert again.item() == pytest.approx(got.item(), rel=1e-12)


def test_total_loss():
    assert total_loss(1.0, 2.0, 0.1) == pytest.approx(1.2)
    assert total_loss(1.5, 7.0, 0.0) == 1.5
    with pytest.raises(DataError):
        total_loss(1.0, 1.0, -0.1)


def test_loss_report_rejects_non_finite():
    LossReport(1.0, 2.0, 1.2, 3, 4)
    with pytest.raises(NumericError):
        LossReport(float("nan"), 2.0, 1.2, 3, 4)


def test_targets_require_normalized_codebook():
    cb = Codebook(np.eye(3))
    with pytest.raises(DataError):
        CodebookTargets(cb, NeighborTable(np.array([[1], [0], [0]]), np.zeros((3, 1))))
