import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from texmorph.errors import DegenerateRowError, InvalidInputError
from texmorph.tensor import (
    DenseGrid,
    Rng,
    SparseVoxelLatent,
    as_features,
    cosine_similarity_matrix,
    decode_tensors,
    encode_tensor,
    grid_positions,
    lerp,
    linear_index,
    psd_sqrt,
    read_tensor,
    read_tensors,
    seeded_gaussian,
    write_tensor,
)


def test_cosine_orthonormal_rows_give_identity():
    a = np.eye(4, dtype=np.float32)[:3]
    np.testing.assert_allclose(cosine_similarity_matrix(a, a), np.eye(3), atol=1e-12)


def test_cosine_is_scale_invariant(rng):
    a = rng.normal(size=(5, 4)).astype(np.float32)
    np.testing.assert_allclose(cosine_similarity_matrix(a, 3 * a), cosine_similarity_matrix(a, a), atol=1e-7)


def test_cosine_matches_double_loop(rng):
    a = rng.normal(size=(5, 4)).astype(np.float32)
    b = rng.normal(size=(7, 4)).astype(np.float32)
    got = cosine_similarity_matrix(a, b)
    for j in range(5):
        for k in range(7):
            dot = sum(float(a[j, c]) * float(b[k, c]) for c in range(4))
            na = sum(float(x) ** 2 for x in a[j]) ** 0.5
            nb = sum(float(x) ** 2 for x in b[k]) ** 0.5
            assert abs(got[j, k] - dot / (na * nb)) < 1e-6
    assert got.min() >= -1 and got.max() <= 1


def test_cosine_unit_diagonal(rng):
    a = rng.normal(size=(9, 6))
    np.testing.assert_allclose(np.diag(cosine_similarity_matrix(a, a)), 1.0, atol=1e-6)


def test_cosine_degenerate_row_named():
    a = np.ones((3, 2))
    b = np.ones((4, 2))
    b[2] = 0
    with pytest.raises(DegenerateRowError) as exc:
        cosine_similarity_matrix(a, b)
    assert exc.value.row == 2
    assert "2" in str(exc.value)


def test_cosine_channel_mismatch():
    with pytest.raises(InvalidInputError):
        cosine_similarity_matrix(np.ones((2, 3)), np.ones((2, 4)))


def test_psd_sqrt_identity_and_diagonal():
    np.testing.assert_allclose(psd_sqrt(np.eye(3)), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(psd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-12)


def test_psd_sqrt_reconstructs(rng):
    a = rng.normal(size=(6, 6))
    s = a.T @ a
    r = psd_sqrt(s)
    assert np.max(np.abs(r @ r - s)) < 1e-5 * (1 + np.abs(s).max())
    np.testing.assert_allclose(r, r.T, atol=1e-12)
    assert np.linalg.eigvalsh(r).min() > -1e-10


def test_psd_sqrt_idempotent_under_squaring(rng):
    a = rng.normal(size=(5, 5))
    r = psd_sqrt(a @ a.T)
    np.testing.assert_allclose(psd_sqrt(r @ r), r, atol=1e-4)


def test_psd_sqrt_clamps_tiny_negative():
    s = np.diag([1.0, -1e-9])
    np.testing.assert_allclose(psd_sqrt(s), np.diag([1.0, 0.0]), atol=1e-12)


def test_psd_sqrt_rejects_asymmetric():
    with pytest.raises(InvalidInputError):
        psd_sqrt(np.array([[1.0, 0.1], [0.0, 1.0]]))


def test_seeded_gaussian_deterministic_and_keyed():
    r = Rng(7, "noise", frame=1, step=2)
    a = seeded_gaussian(r, (3, 4))
    assert a.dtype == np.float32
    assert np.array_equal(a, seeded_gaussian(Rng(7, "noise", frame=1, step=2), (3, 4)))
    for other in (r.key(frame=2), r.key(step=3), r.key(purpose="other"), Rng(8, "noise", 1, 2)):
        assert not np.array_equal(a, seeded_gaussian(other, (3, 4)))


def test_seeded_gaussian_statistics():
    x = seeded_gaussian(Rng(0, "stats"), 10_000).astype(np.float64)
    assert -0.05 <= x.mean() <= 0.05
    assert 0.9 <= x.var() <= 1.1


def test_seeded_gaussian_rejects_bad_shape():
    with pytest.raises(InvalidInputError):
        seeded_gaussian(Rng(0), (0, 3))


def test_rng_large_seed_is_accepted():
    a = seeded_gaussian(Rng(2**63 + 5, "x"), 4)
    b = seeded_gaussian(Rng(5, "x"), 4)
    assert not np.array_equal(a, b)


def test_dense_grid_linearisation():
    g = DenseGrid(np.arange(2 * 2 * 2 * 1, dtype=np.float32).reshape(2, 2, 2, 1))
    pos = grid_positions(2)
    assert np.array_equal(g.tokens()[:, 0], linear_index(pos, 2).astype(np.float32))
    assert g.resolution == 2 and g.channels == 1


def test_dense_grid_rejects_non_cube():
    with pytest.raises(InvalidInputError):
        DenseGrid(np.zeros((2, 3, 2, 1)))


def test_sparse_latent_sorting_and_validation():
    pos = np.array([[1, 0, 0], [0, 1, 1], [0, 0, 3]])
    feats = np.arange(6, dtype=np.float32).reshape(3, 2)
    s = SparseVoxelLatent.from_unsorted(pos, feats, 4)
    assert s.positions.tolist() == [[0, 0, 3], [0, 1, 1], [1, 0, 0]]
    assert s.features[:, 0].tolist() == [4, 2, 0]
    with pytest.raises(InvalidInputError):
        SparseVoxelLatent(pos, feats, 4)
    with pytest.raises(InvalidInputError):
        SparseVoxelLatent.from_unsorted(np.array([[0, 0, 0], [0, 0, 0]]), np.zeros((2, 1)), 4)
    with pytest.raises(InvalidInputError):
        SparseVoxelLatent(np.array([[0, 0, 4]]), np.zeros((1, 1), np.float32), 4)


def test_as_features_rejects_nan():
    with pytest.raises(InvalidInputError):
        as_features([[np.nan, 1.0]])
    with pytest.raises(InvalidInputError):
        as_features([1.0, 2.0])


def test_lerp_endpoints_exact_and_equal_inputs():
    a = np.array([0.1, 0.7], np.float32)
    b = np.array([0.3, -2.0], np.float32)
    assert np.array_equal(lerp(a, b, 0.0), a)
    assert np.array_equal(lerp(a, b, 1.0), b)
    assert np.array_equal(lerp(a, a, 0.37), a)
    with pytest.raises(InvalidInputError):
        lerp(a, np.zeros(3), 0.5)


def test_i3dt_layout_matches_format():
    arr = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
    buf = encode_tensor(arr)
    expected = b"I3DT" + struct.pack("<IBB", 1, 0, 2) + struct.pack("<QQ", 1, 3) + struct.pack("<3f", 1, 2, 3)
    assert buf == expected


def test_i3dt_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        decode_tensors(b"XXXX" + bytes(10))
    with pytest.raises(InvalidInputError):
        decode_tensors(encode_tensor(np.zeros(4, np.float32))[:-1])
    with pytest.raises(InvalidInputError):
        encode_tensor(np.zeros(2, np.float64))


def test_i3dt_files(tmp_path):
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    b = np.array([5, -1], dtype=np.int64)
    write_tensor(tmp_path / "x.i3dt", a, b)
    got = read_tensors(tmp_path / "x.i3dt")
    assert np.array_equal(got[0], a) and np.array_equal(got[1], b)
    write_tensor(tmp_path / "y.i3dt", a)
    assert np.array_equal(read_tensor(tmp_path / "y.i3dt"), a)
    with pytest.raises(InvalidInputError):
        read_tensor(tmp_path / "x.i3dt")


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=4),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_i3dt_round_trip(arr):
    (back,) = decode_tensors(encode_tensor(arr))
    assert back.shape == arr.shape and back.dtype == np.float32
    assert back.tobytes() == arr.tobytes()
