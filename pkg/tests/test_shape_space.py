"""PCA construction, projection, sampling, persistence."""

import numpy as np
import pytest

from blisskit.mesh import MeshError, TriMesh
from blisskit.primitives import icosphere
from blisskit.shape_space import (
    RegistrySets,
    Registration,
    ShapeSpace,
    fit_pca,
    load_space,
    sample_space,
    save_space,
)


@pytest.fixture(scope="module")
def base():
    return icosphere(1)  # 42 vertices


def linear_family(base, n_modes, n_shapes, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    n = base.n_vertices
    modes, _ = np.linalg.qr(rng.standard_normal((3 * n, n_modes)))
    scales = np.linspace(1.0, 0.3, n_modes) * 0.05
    coeffs = rng.standard_normal((n_shapes, n_modes)) * scales
    shapes = []
    for c in coeffs:
        flat = base.vertices.reshape(-1) + modes @ c
        if noise:
            flat = flat + noise * rng.standard_normal(flat.shape)
        shapes.append(TriMesh(flat.reshape(-1, 3), base.faces, validate=False))
    return shapes, modes, coeffs


def test_two_shapes_k1(base):
    a = TriMesh(base.vertices, base.faces)
    b = TriMesh(base.vertices + np.array([0.1, 0.0, 0.0]), base.faces, validate=False)
    space = fit_pca([a, b], k=1)
    mid = 0.5 * (a.vertices + b.vertices)
    assert np.abs(space.mean_vertices() - mid).max() < 1e-12
    diff = (b.vertices - a.vertices).reshape(-1)
    direction = diff / np.linalg.norm(diff)
    assert np.linalg.norm(space.basis[0]) == pytest.approx(1.0)
    assert min(np.abs(space.basis[0] - direction).max(),
               np.abs(space.basis[0] + direction).max()) < 1e-12


def test_exact_family_reconstruction(base):
    shapes, _, _ = linear_family(base, n_modes=5, n_shapes=30, seed=1)
    space = fit_pca(shapes, k=5)
    for mesh in shapes:
        alpha = space.project(mesh.vertices)
        rec = space.reconstruct(alpha)
        assert np.abs(rec - mesh.vertices).max() < 1e-8


def test_insufficient_shapes_error(base):
    shapes, _, _ = linear_family(base, n_modes=3, n_shapes=5, seed=2)
    with pytest.raises(MeshError, match="at least 6"):
        fit_pca(shapes, k=5)


def test_projection_properties(base):
    shapes, _, _ = linear_family(base, n_modes=6, n_shapes=25, seed=3, noise=1e-3)
    space = fit_pca(shapes, k=4)
    assert np.abs(space.basis @ space.basis.T - np.eye(4)).max() < 1e-8
    assert np.abs(space.project(space.mean_vertices())).max() < 1e-12
    x = space.mean + 2.0 * space.basis[2]
    alpha = space.project(x.reshape(-1, 3))
    expected = np.zeros(4)
    expected[2] = 2.0
    assert np.abs(alpha - expected).max() < 1e-12
    rng = np.random.default_rng(4)
    x = rng.standard_normal(space.mean.shape)
    residual = x - space.mean - space.project(x) @ space.basis
    assert np.abs(space.basis @ residual).max() < 1e-9
    # idempotence
    assert np.abs(space.project(space.reconstruct(alpha)) - alpha).max() < 1e-9


def test_mode_std_non_increasing(base):
    shapes, _, _ = linear_family(base, n_modes=6, n_shapes=30, seed=5, noise=1e-4)
    space = fit_pca(shapes, k=6)
    assert (np.diff(space.mode_std) <= 1e-15).all()


def test_deterministic_sign_convention(base):
    shapes, _, _ = linear_family(base, n_modes=4, n_shapes=20, seed=6)
    s1 = fit_pca(shapes, k=4)
    s2 = fit_pca(list(shapes), k=4)
    assert np.array_equal(s1.basis, s2.basis)
    peak = np.abs(s1.basis).argmax(axis=1)
    assert (s1.basis[np.arange(4), peak] > 0).all()


def test_sampling_modes(base):
    shapes, _, _ = linear_family(base, n_modes=5, n_shapes=40, seed=7)
    space = fit_pca(shapes, k=5)
    one = sample_space(space, "farthest", 1, seed=0)
    assert np.abs(one[0] - space.mean_vertices()).max() == 0.0

    rnd = sample_space(space, "random", 12, seed=1)
    assert rnd.shape == (12, base.n_vertices, 3)
    alphas = np.stack([space.project(s) for s in rnd])
    assert (np.abs(alphas) <= 3.0 * space.mode_std + 1e-9).all()

    # mode sweep is monotone along the basis direction (linearity)
    sweep = [space.reconstruct(np.eye(5)[0] * t * space.mode_std[0])
             for t in np.linspace(-3, 3, 7)]
    deltas = [np.linalg.norm((b - a).reshape(-1)) for a, b in zip(sweep, sweep[1:])]
    assert np.abs(np.diff(deltas)).max() < 1e-9


def test_farthest_beats_random_spread(base):
    shapes, _, _ = linear_family(base, n_modes=5, n_shapes=40, seed=8)
    space = fit_pca(shapes, k=5)
    far = sample_space(space, "farthest", 10, seed=2)
    rnd = sample_space(space, "random", 10, seed=2)

    def min_pairwise(samples):
        flat = samples.reshape(len(samples), -1, 3)
        best = np.inf
        for i in range(len(flat)):
            for j in range(i + 1, len(flat)):
                best = min(best, float(np.linalg.norm(flat[i] - flat[j], axis=1).mean()))
        return best

    assert min_pairwise(far) >= min_pairwise(rnd)


def test_refit_monotonicity_in_span(base):
    shapes, _, _ = linear_family(base, n_modes=5, n_shapes=24, seed=9, noise=1e-3)
    space = fit_pca(shapes, k=3)

    def explained(space_, meshes):
        total = res = 0.0
        flat_mean = np.stack([m.vertices.reshape(-1) for m in meshes]).mean(axis=0)
        for m in meshes:
            x = m.vertices.reshape(-1)
            r = x - space_.mean - space_.project(m.vertices) @ space_.basis
            res += float(r @ r)
            total += float((x - flat_mean) @ (x - flat_mean))
        return 1.0 - res / total

    before = explained(space, shapes)
    extra = [TriMesh(space.reconstruct(space.mode_std * c), base.faces, validate=False)
             for c in np.random.default_rng(10).standard_normal((8, 3))]
    refit = fit_pca(shapes + extra, k=3)
    after = explained(refit, shapes)
    assert after >= before - 1e-9


def test_space_round_trip(tmp_path, base):
    shapes, _, _ = linear_family(base, n_modes=4, n_shapes=15, seed=11)
    space = fit_pca(shapes, k=4, provenance=[f"s{i}" for i in range(15)])
    save_space(space, tmp_path / "space.bin")
    back = load_space(tmp_path / "space.bin")
    assert np.array_equal(back.mean, space.mean)
    assert np.array_equal(back.basis, space.basis)
    assert np.array_equal(back.mode_std, space.mode_std)
    assert back.provenance == space.provenance


def test_registry_sets_disjoint(base):
    reg = Registration("a", base)
    with pytest.raises(MeshError, match="disjoint"):
        RegistrySets({"a": reg}, {"a": reg}, {}, {})
