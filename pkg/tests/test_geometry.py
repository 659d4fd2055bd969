import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from s2no.geometry import (
    GeometryError, MeshSpec, SpectralBasis, build_adjacency, coarsen_voxels,
    compute_eigenbasis, cotangent_laplacian, downsample_basis, eigen_residuals,
    fix_signs, generalized_eigenpairs, generate_mesh, graph_laplacian, load_basis,
    load_mesh, mesh_laplacian, mid_surface, normalized_adjacency, pair_layers,
    point_mass, save_basis, save_mesh, shared_point_indices,
)


def test_path_graph_spectrum_exact():
    A, _ = graph_laplacian(np.array([[0, 1], [1, 2]]), 3)
    lam, vecs, _ = generalized_eigenpairs(A, np.ones(3), 3)
    np.testing.assert_allclose(lam, [0.0, 1.0, 3.0], atol=1e-12)
    # unit mass: plain orthonormality
    np.testing.assert_allclose(vecs.T @ vecs, np.eye(3), atol=1e-12)


def test_unit_square_first_eigenvalue_near_pi_squared():
    mesh = generate_mesh(MeshSpec(dims=(1.0, 1.0), resolution=(65, 65), voxels=(2, 2)))
    basis = compute_eigenbasis(mesh, 4)
    assert basis.eigenvalues[0] == pytest.approx(0.0, abs=1e-8)
    assert abs(basis.eigenvalues[1] - np.pi**2) / np.pi**2 < 0.05
    # near-degenerate pair; diagonal triangulation splits it slightly
    assert abs(basis.eigenvalues[1] - basis.eigenvalues[2]) < 1e-3 * np.pi**2


def test_basis_mass_orthonormal_and_residuals(small_plate):
    basis = compute_eigenbasis(small_plate, 20)
    assert np.abs(basis.gram() - np.eye(20)).max() < 1e-10
    A, mass, kind = mesh_laplacian(small_plate)
    assert kind == "cotangent"
    ms = mid_surface(small_plate)
    res = eigen_residuals(A, mass, basis.eigenvalues, basis.eigenvectors[ms.bottom])
    assert res.max() < 1e-8
    assert np.all(np.diff(basis.eigenvalues) >= -1e-12)


def test_lifted_basis_identical_on_paired_layers(small_plate):
    basis = compute_eigenbasis(small_plate, 8)
    bottom, top = pair_layers(small_plate)
    np.testing.assert_array_equal(basis.eigenvectors[bottom], basis.eigenvectors[top])


def test_spectral_round_trip(small_plate, rng):
    basis = compute_eigenbasis(small_plate, 12)
    v = basis.eigenvectors @ rng.normal(size=(12, 3))
    back = basis.eigenvectors @ (basis.encoder @ v)
    np.testing.assert_allclose(back, v, atol=1e-10)


def test_cotangent_laplacian_constant_in_kernel():
    xy = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    A, mass = cotangent_laplacian(xy, tris)
    np.testing.assert_allclose(A @ np.ones(4), 0.0, atol=1e-14)
    assert mass.sum() == pytest.approx(1.0)
    assert abs(A - A.T).max() < 1e-14


def test_adjacency_two_nodes():
    A = normalized_adjacency(np.array([[0, 1]]), 2).toarray()
    np.testing.assert_allclose(A, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)


def test_adjacency_interior_rows_sum_to_one(small_plate):
    A = build_adjacency(small_plate)
    assert abs(A - A.T).max() < 1e-15
    deg = np.diff(A.indptr)
    rows = A.sum(axis=1).A.ravel()
    # rows whose neighbours all share the row's own degree are exactly one
    for i in range(small_plate.n):
        nbrs = A.indices[A.indptr[i]:A.indptr[i + 1]]
        if np.all(deg[nbrs] == deg[i]):
            assert rows[i] == pytest.approx(1.0, abs=1e-14)


def test_sign_convention():
    v = np.array([[0.0, 1e-9], [-2.0, -3.0], [1.0, 4.0]])
    out = fix_signs(v)
    assert out[1, 0] > 0 and out[1, 1] > 0


def test_mesh_is_deterministic_and_validated():
    spec = MeshSpec()
    a, b = generate_mesh(spec), generate_mesh(spec)
    assert a.fingerprint() == b.fingerprint()
    assert a.n == 2 * 33 * 17 and a.n_voxels == 256
    assert np.all(a.points[a.fixed_point_ids, 0] == 0.0)
    with pytest.raises(GeometryError):
        generate_mesh(MeshSpec(resolution=(3, 3), voxels=(16, 8)))


def test_annulus_mesh_pairs_layers():
    mesh = generate_mesh(MeshSpec(kind="annulus", dims=(10.0, 3.0), resolution=(4, 24),
                                  voxels=(2, 8)))
    assert mesh.is_connected()
    bottom, top = pair_layers(mesh)
    np.testing.assert_allclose(mesh.points[bottom, :2], mesh.points[top, :2], atol=1e-12)
    basis = compute_eigenbasis(mesh, 6)
    assert np.abs(basis.gram() - np.eye(6)).max() < 1e-10


def test_k_too_large_rejected(small_plate):
    with pytest.raises(GeometryError):
        compute_eigenbasis(small_plate, small_plate.n)


def test_downsample_preserves_span_coefficients():
    fine = generate_mesh(MeshSpec(dims=(8.0, 4.0), resolution=(17, 9), voxels=(4, 2)))
    coarse = generate_mesh(MeshSpec(dims=(8.0, 4.0), resolution=(9, 5), voxels=(4, 2)))
    bf = compute_eigenbasis(fine, 10)
    idx = shared_point_indices(coarse, fine)
    bc = downsample_basis(bf, idx, mass=point_mass(coarse))
    np.testing.assert_array_equal(bc.eigenvalues, bf.eigenvalues)
    c = np.arange(10, dtype=float)
    np.testing.assert_allclose(bc.encoder @ (bc.eigenvectors @ c), c, atol=1e-9)
    with pytest.raises(GeometryError):
        downsample_basis(bf, np.array([0, 0]))


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([1, 2, 4]))
def test_coarsening_partitions_voxels(factor):
    mesh = generate_mesh(MeshSpec(dims=(8.0, 4.0), resolution=(9, 5), voxels=(8, 4)))
    c = coarsen_voxels(mesh, factor)
    ids = np.sort(np.concatenate(c.groups))
    np.testing.assert_array_equal(ids, np.arange(mesh.n_voxels))
    assert c.n_coarse == mesh.n_voxels // factor**2
    omega = np.arange(c.n_coarse)
    np.testing.assert_array_equal(c.broadcast(omega)[c.groups[1]], 1)


def test_basis_and_mesh_files_round_trip(tmp_path, small_plate):
    basis = compute_eigenbasis(small_plate, 6)
    save_basis(tmp_path / "b.eig", basis, provenance={"seed": 3})
    back = load_basis(tmp_path / "b.eig")
    np.testing.assert_array_equal(back.eigenvectors, basis.eigenvectors)
    np.testing.assert_array_equal(back.eigenvalues, basis.eigenvalues)
    np.testing.assert_array_equal(back.mass, basis.mass)
    save_mesh(tmp_path / "m.json", small_plate)
    assert load_mesh(tmp_path / "m.json").fingerprint() == small_plate.fingerprint()


def test_truncated_basis_file_rejected(tmp_path, small_plate):
    basis = compute_eigenbasis(small_plate, 6)
    p = tmp_path / "b.eig"
    save_basis(p, basis)
    p.write_bytes(p.read_bytes()[:40])
    with pytest.raises(Exception):
        load_basis(p)


def test_spectral_basis_rejects_bad_mass():
    with pytest.raises(GeometryError):
        SpectralBasis(np.zeros(1), np.ones((2, 1)), np.array([1.0, 0.0]))


def test_graph_laplacian_isolated_vertex():
    with pytest.raises(GeometryError):
        graph_laplacian(np.array([[0, 1]]), 3)
