import csv

import numpy as np
import pytest

from edip.dip import noise_input
from edip.spectral import (
    LinearSurrogate,
    RankDeficientError,
    RsvdConfig,
    SpectralReport,
    UNetForwardMap,
    block_histogram,
    block_masses,
    explicit_jacobian,
    householder_qr,
    jacobi_svd,
    jvp,
    relative_epsilon,
    rsvd,
    vjp,
    write_histogram_csv,
)
from edip.unet import DECODER, ENCODER, UNetConfig, init_params

TINY = UNetConfig(scales=2, channels=6, skip_channels=2, groups=2)


def surrogate_with_gap(rng, m=20, p=35):
    """Random 20x35 matrix with a geometric, well-separated spectrum."""
    u, _ = np.linalg.qr(rng.standard_normal((m, m)))
    v, _ = np.linalg.qr(rng.standard_normal((p, m)))
    s = 2.0 ** -np.arange(m, dtype=float)
    return u @ np.diag(s) @ v.T


@pytest.fixture(scope="module")
def tiny_map(op16):
    return UNetForwardMap(init_params(TINY, 0), noise_input(16, 0), op16)


# -- dense kernels -----------------------------------------------------------------

@pytest.mark.parametrize("shape", [(8, 3), (40, 15), (6, 6)])
def test_householder_qr_is_orthonormal_and_reconstructs(rng, shape):
    a = rng.standard_normal(shape)
    q, r = householder_qr(a)
    assert q.shape == shape and r.shape == (shape[1], shape[1])
    assert np.max(np.abs(q.T @ q - np.eye(shape[1]))) < 1e-12
    assert np.allclose(q @ r, a, atol=1e-12)
    assert np.allclose(r, np.triu(r))


def test_householder_qr_flags_rank_deficiency(rng):
    a = rng.standard_normal((10, 4))
    a[:, 2] = 0.0
    with pytest.raises(RankDeficientError):
        householder_qr(a)
    a = rng.standard_normal((10, 4))
    a[:, 3] = a[:, 0]
    with pytest.raises(RankDeficientError):
        householder_qr(a)


def test_householder_qr_rejects_wide_input(rng):
    with pytest.raises(ValueError):
        householder_qr(rng.standard_normal((3, 5)))


def test_jacobi_svd_matches_numpy(rng):
    b = rng.standard_normal((7, 50))
    u, s, vt = jacobi_svd(b)
    ref = np.linalg.svd(b, compute_uv=False)
    assert np.allclose(s, ref, rtol=1e-12)
    assert np.allclose((u * s) @ vt, b, atol=1e-12)
    assert np.allclose(vt @ vt.T, np.eye(7), atol=1e-12)
    assert np.allclose(u.T @ u, np.eye(7), atol=1e-12)


def test_jacobi_svd_handles_zero_row(rng):
    b = rng.standard_normal((4, 12))
    b[2] = 0.0
    _, s, vt = jacobi_svd(b)
    assert s[-1] == 0.0
    assert np.all(np.isfinite(vt))


# -- products ----------------------------------------------------------------------

def test_relative_epsilon_scaling():
    theta = np.array([3.0, 4.0])
    assert relative_epsilon(theta, np.array([0.0, 2.0]), 1e-6) == pytest.approx(3e-6)
    with pytest.raises(ValueError):
        relative_epsilon(theta, np.zeros(2))


def test_linear_surrogate_jvp_is_exact(rng):
    M = rng.standard_normal((12, 9))
    A = rng.standard_normal((5, 12))
    fmap = LinearSurrogate(M, A, theta=rng.standard_normal(9))
    w = rng.standard_normal(9)
    assert np.allclose(jvp(fmap, w), A @ M @ w, rtol=1e-8, atol=1e-10)


def test_linear_surrogate_vjp_is_transpose(rng):
    M = rng.standard_normal((12, 9))
    A = rng.standard_normal((5, 12))
    fmap = LinearSurrogate(M, A)
    q = rng.standard_normal(5)
    assert np.allclose(vjp(fmap, q), M.T @ A.T @ q, rtol=1e-14)
    assert np.array_equal(vjp(fmap, np.zeros(5)), np.zeros(9))


def test_jvp_rejects_bad_epsilon(rng):
    fmap = LinearSurrogate(rng.standard_normal((3, 3)))
    with pytest.raises(ValueError):
        jvp(fmap, np.ones(3), epsilon=0.0)


def test_unet_map_vjp_of_zero_is_zero(tiny_map):
    assert not np.any(vjp(tiny_map, np.zeros(tiny_map.num_measurements)))


def test_unet_map_vjp_shape_check(tiny_map):
    with pytest.raises(ValueError):
        vjp(tiny_map, np.zeros(3))


def test_unet_map_adjoint_consistency(tiny_map):
    r = np.random.default_rng(5)
    for _ in range(3):
        w = r.standard_normal(tiny_map.num_params)
        q = r.standard_normal(tiny_map.num_measurements)
        lhs = float(jvp(tiny_map, w) @ q)
        rhs = float(w @ vjp(tiny_map, q))
        assert abs(lhs - rhs) / abs(rhs) < 1e-4


def test_unet_map_does_not_mutate_params(tiny_map):
    before = tiny_map.theta.copy()
    jvp(tiny_map, np.ones(tiny_map.num_params))
    vjp(tiny_map, np.ones(tiny_map.num_measurements))
    assert np.array_equal(tiny_map.theta, before)
    assert np.array_equal(tiny_map.params.flat(), before)


def test_explicit_jacobian_bias_column_against_central_difference(tiny_map):
    """The last decoder block is the output bias: a constant image shift."""
    J = explicit_jacobian(tiny_map)
    last = list(tiny_map.blocks)[-1]
    col = tiny_map.blocks[last].stop - 1
    e = np.zeros(tiny_map.num_params)
    e[col] = 1.0
    fd = jvp(tiny_map, e)
    assert np.linalg.norm(fd - J[:, col]) / np.linalg.norm(J[:, col]) < 1e-4


# -- rsvd --------------------------------------------------------------------------

def test_rsvd_config_validation():
    with pytest.raises(ValueError):
        RsvdConfig(rank=0)
    with pytest.raises(ValueError):
        RsvdConfig(fd_scale=0.0)
    with pytest.raises(ValueError):
        RsvdConfig(power_iterations=-1)
    assert RsvdConfig(rank=10, oversampling=5).num_probes == 15


def test_rsvd_rejects_too_many_probes(rng):
    fmap = LinearSurrogate(rng.standard_normal((6, 8)))
    with pytest.raises(ValueError):
        rsvd(fmap, RsvdConfig(rank=4, oversampling=3))


def test_rsvd_recovers_linear_surrogate_spectrum(rng):
    M = surrogate_with_gap(rng)
    rep = rsvd(LinearSurrogate(M), RsvdConfig(rank=15, oversampling=5))
    ref = np.linalg.svd(M, compute_uv=False)[:15]
    assert np.max(np.abs(rep.singular_values - ref) / ref) < 1e-6
    assert rep.q_orthogonality < 1e-12


def test_rsvd_probe_seed_invariance(rng):
    M = surrogate_with_gap(rng)
    # 20 probes span the whole range, so only rounding differs between seeds
    a = rsvd(LinearSurrogate(M), RsvdConfig(rank=15, oversampling=5, probe_seed=0))
    b = rsvd(LinearSurrogate(M), RsvdConfig(rank=15, oversampling=5, probe_seed=99))
    assert np.allclose(a.singular_values, b.singular_values, rtol=1e-6)


def test_rsvd_deterministic_given_seed(rng):
    fmap = LinearSurrogate(rng.standard_normal((20, 35)))
    a = rsvd(fmap, RsvdConfig(rank=5, oversampling=3, probe_seed=7))
    b = rsvd(fmap, RsvdConfig(rank=5, oversampling=3, probe_seed=7))
    assert np.array_equal(a.singular_values, b.singular_values)
    assert np.array_equal(a.right_singular_vectors, b.right_singular_vectors)


def test_rsvd_report_structure(tiny_map):
    rep = rsvd(tiny_map, RsvdConfig(rank=12, oversampling=4), checkpoint_tag="mid")
    s = rep.singular_values
    assert s.shape == (12,) and np.all(s >= 0) and np.all(np.diff(s) <= 0)
    assert rep.right_singular_vectors.shape == (12, tiny_map.num_params)
    assert np.allclose(np.linalg.norm(rep.right_singular_vectors, axis=1), 1.0, atol=1e-10)
    assert np.allclose(rep.block_mass.sum(axis=1), 1.0, atol=1e-12)
    assert rep.block_names == list(tiny_map.blocks)
    assert set(rep.block_tags) == {ENCODER, DECODER}
    assert np.all((rep.hoyer_per_vector >= 0) & (rep.hoyer_per_vector <= 1))
    assert rep.checkpoint_tag == "mid"


def test_rsvd_with_power_iteration_matches_explicit_jacobian(tiny_map):
    J = explicit_jacobian(tiny_map)
    ref = np.linalg.svd(J, compute_uv=False)[:20]
    rep = rsvd(tiny_map, RsvdConfig(rank=50, oversampling=5, power_iterations=1))
    assert np.max(np.abs(rep.singular_values[:20] - ref) / ref) < 1e-2


# -- block statistics and export ---------------------------------------------------

def test_block_masses_decoder_support():
    blocks = {"enc": slice(0, 3), "dec": slice(3, 5)}
    v = np.array([[0, 0, 0, 0.6, 0.8], [1, 0, 0, 0, 0]], dtype=float)
    mass = block_masses(v, blocks)
    assert np.allclose(mass, [[0, 1], [1, 0]])


def _report():
    mass = np.array([[0.25, 0.75], [0.5, 0.5], [1.0, 0.0]])
    return SpectralReport(
        singular_values=np.array([3.0, 2.0, 1.0]), right_singular_vectors=np.eye(3, 4),
        block_names=["a", "b"], block_tags=[ENCODER, DECODER], block_mass=mass,
        hoyer_per_vector=np.array([1.0, 0.5, 0.0]))


def test_block_histogram_groups():
    lead, trail = block_histogram(_report(), leading=2, trailing=1)
    assert lead.vector_indices == [0, 1] and trail.vector_indices == [2]
    assert lead.mean_mass == pytest.approx({"a": 0.375, "b": 0.625})
    assert lead.tag_mass == pytest.approx({ENCODER: 0.375, DECODER: 0.625})
    assert lead.mean_hoyer == pytest.approx(0.75)
    assert trail.mean_hoyer == 0.0
    assert len(block_histogram(_report(), leading=2, trailing=0)) == 1


def test_csv_exports(tmp_path):
    rep = _report()
    rep.write_sigma_csv(tmp_path / "sigma.csv")
    rep.write_block_mass_csv(tmp_path / "mass.csv")
    write_histogram_csv(tmp_path / "hist.csv", block_histogram(rep, 2, 1))
    with open(tmp_path / "sigma.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["index", "sigma"] and [float(r[1]) for r in rows[1:]] == [3.0, 2.0, 1.0]
    with open(tmp_path / "mass.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and rows[1] == {"vector_index": "0", "block": "b", "mass": "0.75"}
    with open(tmp_path / "hist.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["group", "block", "mean_mass"]
    assert ["leading", "mean_hoyer", "0.75"] in rows
