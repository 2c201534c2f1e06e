import numpy as np
import pytest

from oracles import ConstantEncoder, OneHotEncoder, marker_dataset

from hcl.augment import AugConfig
from hcl.evalbench import (
    HALF_HALF,
    SEMANTIC_ONLY,
    DimSweepReport,
    IoUBinReport,
    Projection,
    RandomEncoder,
    contrastive_test,
    dim_sweep,
    encode_protocol,
    fit_pca,
    iou_binned_accuracy,
    jacobi_eigh,
    project,
    reconstruction_error,
    score_protocol,
)
from hcl.evalbench.analyses import aggregate_iou_bins, bin_index, branch_dims
from hcl.evalbench.pca import covariance
from hcl.evalbench.protocol import sequential_reference

CROP = AugConfig(out_size=8).crop_only()


# ---------------------------------------------------------------------------
# PCA


@pytest.mark.parametrize("seed", range(5))
def test_jacobi_matches_numpy(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((9, 9))
    A = A + A.T
    vals, vecs = jacobi_eigh(A)
    np.testing.assert_allclose(vals, np.sort(np.linalg.eigvalsh(A))[::-1], atol=1e-9)
    assert np.all(np.diff(vals) <= 0)
    np.testing.assert_allclose(vecs.T @ vecs, np.eye(9), atol=1e-10)
    np.testing.assert_allclose(A @ vecs, vecs * vals, atol=1e-8)


def test_jacobi_diagonal_and_errors():
    vals, vecs = jacobi_eigh(np.diag([1.0, 3.0, 2.0]))
    assert vals.tolist() == [3.0, 2.0, 1.0]
    with pytest.raises(ValueError):
        jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_jacobi_resolves_small_coupling_under_large_diagonal():
    # off-diagonal mass far below ||A||_F must still be rotated away
    A = np.diag([1e3, 2e3, 3e3])
    A[0, 1] = A[1, 0] = 1e-6
    vals, vecs = jacobi_eigh(A)
    np.testing.assert_allclose(A @ vecs, vecs * vals, rtol=0, atol=1e-12)


def test_pca_eigen_residual_against_explicit_covariance():
    X = np.random.default_rng(0).standard_normal((50, 8)) @ np.diag([3, 2, 1.5, 1, 0.5, 0.3, 0.2, 0.1])
    proj = fit_pca(X, 8)
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / (len(X) - 1)
    np.testing.assert_allclose(covariance(X), C, atol=1e-12)
    for lam, v in zip(proj.explained_variance, proj.components):
        assert np.abs(C @ v - lam * v).max() < 1e-8
    assert np.abs(proj.components @ proj.components.T - np.eye(8)).max() < 1e-8


def test_reconstruction_error_non_increasing():
    X = np.random.default_rng(1).standard_normal((40, 10))
    errs = [reconstruction_error(fit_pca(X, d), X) for d in range(1, 11)]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-20


def test_projection_renormalises():
    X = np.random.default_rng(2).standard_normal((30, 6))
    proj = fit_pca(X, 3)
    z = project(proj, X, renormalize=True)
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1, atol=1e-12)
    assert project(proj, X).shape == (30, 3)
    with pytest.raises(ValueError):
        fit_pca(X, 7)
    with pytest.raises(ValueError):
        fit_pca(X[:1], 1)


# ---------------------------------------------------------------------------
# retrieval protocol


@pytest.mark.parametrize("n", [2, 5, 17, 32])
def test_one_hot_encoder_is_perfect(n):
    ds = marker_dataset(n)
    for K in range(1, n):
        res = contrastive_test(OneHotEncoder(n), ds, K, CROP, seed=n)
        assert res.accuracy == 1.0


def test_constant_encoder_never_hits():
    # the positive loses ties
    ds = marker_dataset(20)
    assert contrastive_test(ConstantEncoder(4), ds, 5, CROP).accuracy == 0.0


def test_random_encoder_is_at_chance():
    n, K = 3000, 4
    ds = marker_dataset(n)
    res = contrastive_test(RandomEncoder(16, seed=1), ds, K, CROP)
    p = 1 / (K + 1)
    assert abs(res.accuracy - p) < 3 * np.sqrt(p * (1 - p) / n)


@pytest.mark.parametrize("seed", range(4))
def test_vectorised_scoring_matches_sequential_replay(seed):
    rng = np.random.default_rng(seed)
    ds = marker_dataset(60)
    emb = encode_protocol(RandomEncoder(3, seed=seed), ds, int(rng.integers(1, 59)), CROP, seed=seed)
    assert np.array_equal(score_protocol(emb, chunk=7).hits, sequential_reference(emb))


def test_protocol_traverses_each_image_once():
    ds = marker_dataset(30)
    res = contrastive_test(OneHotEncoder(30), ds, 10, CROP)
    assert sorted(res.ids.tolist()) == list(range(30))
    assert res.total == 30 and np.all((res.ious >= 0) & (res.ious <= 1))


def test_protocol_rejects_oversized_gallery():
    with pytest.raises(ValueError):
        contrastive_test(OneHotEncoder(5), marker_dataset(5), 5, CROP)


def test_projection_dims_must_match_branches():
    emb = encode_protocol(RandomEncoder(6), marker_dataset(20), 5, CROP)
    with pytest.raises(ValueError):
        score_protocol(emb, Projection((2, 2)))
    assert 0 <= score_protocol(emb, Projection((3,))).accuracy <= 1


# ---------------------------------------------------------------------------
# analyses


def test_bin_index_edges():
    assert bin_index(np.array([0.0, 0.099, 0.1, 0.95, 1.0]), 10).tolist() == [0, 0, 1, 9, 9]


def test_aggregate_bins_marks_empty_bins():
    counts, accs = aggregate_iou_bins(np.array([0.05, 0.07, 0.95]), np.array([True, False, True]), 10)
    assert counts[0] == 2 and counts[9] == 1 and sum(counts) == 3
    assert accs[0] == 0.5 and accs[9] == 1.0 and accs[5] is None


def test_spearman_skips_empty_bins():
    rep = IoUBinReport([0.0, 0.25, 0.5, 0.75, 1.0], [3, 0, 4, 5], [0.1, None, 0.5, 0.7])
    assert rep.spearman() == pytest.approx(1.0)
    assert rep.total == 12


def test_iou_report_round_trip_and_coverage():
    ds = marker_dataset(40)
    rep = iou_binned_accuracy(OneHotEncoder(40), ds, 10, bins=5, aug_cfg=AugConfig(out_size=8), seed=3)
    assert rep.total == 40
    assert all(a in (None, 1.0) for a in rep.accuracy)
    assert rep.config["aug.brightness"] == 0.0  # jitter forced off
    back = IoUBinReport.from_json(rep.to_json())
    assert back == rep
    with pytest.raises(ValueError):
        iou_binned_accuracy(OneHotEncoder(40), ds, 10, bins=1)


def test_branch_dims():
    assert branch_dims(8, SEMANTIC_ONLY) == (8,)
    assert branch_dims(8, HALF_HALF) == (4, 4)
    with pytest.raises(ValueError):
        branch_dims(7, HALF_HALF)
    with pytest.raises(ValueError):
        branch_dims(8, "other")


class _TwoBranch:
    def __init__(self, n):
        self.inner = OneHotEncoder(n)

    def __call__(self, images):
        (z,) = self.inner(images)
        return [z, z[:, ::-1].copy()]


def test_dim_sweep_modes_and_report():
    ds = marker_dataset(40)
    rep = dim_sweep(_TwoBranch(40), ds, (4, 8), HALF_HALF, 10, CROP, seed=1)
    assert [r.branch_dims for r in rep.rows] == [[2, 2], [4, 4]]
    sem = dim_sweep(_TwoBranch(40), ds, (4, 8), SEMANTIC_ONLY, 10, CROP, seed=1)
    assert [r.branch_dims for r in sem.rows] == [[4], [8]]
    assert DimSweepReport.from_json(rep.to_json()) == rep
    assert rep.accuracy_at(8) == rep.rows[1].accuracy
    with pytest.raises(ValueError):
        dim_sweep(OneHotEncoder(40), ds, (4,), HALF_HALF, 10, CROP)
