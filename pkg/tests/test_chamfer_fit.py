"""Chamfer oracles, frozen-gradient checks, scan-fitting self-consistency."""

import numpy as np
import pytest

from blisskit.fitting import (
    NnIndex,
    baseline_freeform,
    chamfer,
    fit_scan,
    frozen_objective,
    landmark_init,
    posed_surface_chamfer,
    _pack,
)
from blisskit.mesh import ScanCloud, SurfaceSampler
from blisskit.rig import Pose, rodrigues, skin
from blisskit.shape_space import fit_pca
from blisskit.synthlab import FamilyConfig, make_family
from scipy.spatial import cKDTree


@pytest.fixture(scope="module")
def family():
    return make_family(FamilyConfig(n_vertices=162, seed=12))


@pytest.fixture(scope="module")
def space(family):
    # space fitted on exact family samples: spans the strongest modes
    rng = np.random.default_rng(13)
    meshes = [
        family.bundle.mesh.with_vertices(family.canonical_shape(family.sample_alpha(rng)))
        for _ in range(40)
    ]
    return fit_pca(meshes, k=11)


def sample_posed_scan(family, canonical, pose, density, seed, noise=0.0):
    posed = skin(family.bundle, canonical, pose)
    sampler = SurfaceSampler(posed, family.bundle.mesh.faces, density, seed=seed)
    pts = sampler.positions(posed)
    if noise:
        pts = pts + noise * np.random.default_rng(seed + 1).standard_normal(pts.shape)
    return ScanCloud(pts, provenance="synthetic")


def test_chamfer_identical_and_singletons():
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((50, 3))
    assert chamfer(pts, pts) == 0.0
    assert chamfer(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]])) == pytest.approx(2.0)


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((50, 3))
    b = rng.standard_normal((60, 3))
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    expected = d2.min(axis=1).mean() + d2.min(axis=0).mean()
    assert abs(chamfer(a, b) - expected) < 1e-12
    assert chamfer(a, b) == chamfer(b, a)


def test_nn_index_exact():
    rng = np.random.default_rng(2)
    pts = rng.standard_normal((800, 3))
    queries = rng.standard_normal((100, 3))
    d2, idx = NnIndex(pts).query(queries)
    brute = ((queries[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    assert np.array_equal(idx, brute.argmin(axis=1))
    assert np.abs(d2 - brute.min(axis=1)).max() < 1e-12


def test_frozen_gradient_matches_fd(family, space):
    bundle = family.bundle
    rng = np.random.default_rng(3)
    scan = sample_posed_scan(
        family, family.canonical_shape(family.sample_alpha(rng)),
        family.sample_pose(rng), density=600, seed=4,
    )
    sampler = SurfaceSampler(bundle.mesh.vertices, bundle.mesh.faces, 500, seed=5)
    x = _pack(0.5 * space.mode_std * rng.standard_normal(space.k),
              family.sample_pose(rng))

    posed, _, _ = (lambda a, t, tr: (skin(bundle, space.reconstruct(a), Pose(t, tr)), 0, 0))(
        *(x[: space.k], x[space.k : -3].reshape(-1, 3), x[-3:])
    )
    samples = sampler.positions(posed)
    _, corr_fwd = cKDTree(scan.points).query(samples)
    _, corr_bwd = cKDTree(samples).query(scan.points)
    args = (space, bundle, scan.points, sampler, corr_fwd, corr_bwd, True)

    _, grad = frozen_objective(x, *args)
    h = 1e-6
    fd = np.zeros_like(grad)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd[i] = (frozen_objective(xp, *args)[0] - frozen_objective(xm, *args)[0]) / (2 * h)
    assert np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12) < 1e-4


def test_fit_recovers_in_span_shape(family, space):
    # dense noise-free scan of an in-span shape: the sampling floor of the
    # chamfer at density n is 2*area/(pi*n) ~ 4.3e-6 m^2, so < 1e-5 proves the
    # fit sits within ~2.4e-6 m^2 of the true surface
    rng = np.random.default_rng(6)
    alpha_gt = 0.8 * space.mode_std * rng.standard_normal(space.k)
    pose_gt = family.sample_pose(rng)
    scan = sample_posed_scan(family, space.reconstruct(alpha_gt), pose_gt,
                             density=150000, seed=7)
    fit = fit_scan(space, family.bundle, scan, init_pose=family.nominal_pose())
    assert fit.converged
    assert fit.posed_chamfer < 1e-5
    # coefficients close to the generator relative to the mode scales (the
    # remainder is pose/shape trade-off, not surface error)
    assert np.linalg.norm(fit.alpha - alpha_gt) < 0.5 * np.linalg.norm(space.mode_std)
    canonical_err = np.linalg.norm(fit.canonical - space.reconstruct(alpha_gt), axis=1)
    assert canonical_err.mean() < 4e-3
    # X_o reproducible from (space, alpha) exactly
    assert np.abs(fit.canonical - space.reconstruct(fit.alpha)).max() < 1e-12


def test_fit_mean_shape_gives_zero_alpha(family, space):
    pose_gt = family.nominal_pose()
    scan = sample_posed_scan(family, space.mean_vertices(), pose_gt,
                             density=40000, seed=8)
    fit = fit_scan(space, family.bundle, scan, init_pose=family.nominal_pose())
    assert (np.abs(fit.alpha) < 0.05 * space.mode_std).all()


def test_fit_rigid_equivariance(family, space):
    rng = np.random.default_rng(9)
    alpha_gt = 0.5 * space.mode_std * rng.standard_normal(space.k)
    pose_gt = family.nominal_pose()
    scan = sample_posed_scan(family, space.reconstruct(alpha_gt), pose_gt,
                             density=4000, seed=10)

    fit_a = fit_scan(space, family.bundle, scan, init_pose=family.nominal_pose())

    shift = np.array([0.4, -0.1, 0.25])
    moved = ScanCloud(scan.points + shift, provenance="synthetic")
    init_b = Pose(family.mean_pose_theta.copy(), shift)
    fit_b = fit_scan(space, family.bundle, moved, init_pose=init_b)
    assert abs(fit_a.posed_chamfer - fit_b.posed_chamfer) < 1e-6


def test_fit_monotone_best_so_far(family, space):
    # the accept-best rule: the recorded best chamfer never increases
    scan = sample_posed_scan(family, space.reconstruct(0.5 * space.mode_std),
                             family.nominal_pose(), density=2000, seed=12)
    fit = fit_scan(space, family.bundle, scan, init_pose=family.nominal_pose(),
                   max_outer=30)
    history = np.array(fit.chamfer_history)
    assert len(history) >= 2
    assert (np.diff(history) <= 0.0).all()


def test_landmark_init_recovers_rigid_motion(family):
    bundle = family.bundle
    rot = rodrigues(np.array([0.2, 0.6, -0.3]))
    shift = np.array([0.3, 0.1, -0.2])
    root_j = bundle.rest_joints()[bundle.root]
    ids = [0, 10, 25, 50, 75, 100, 125, 150, 161]
    target = (bundle.mesh.vertices[ids] - root_j) @ rot.T + root_j + shift
    landmarks = [
        {"vertex_id": i, "position": p.tolist()} for i, p in zip(ids, target)
    ]
    pose = landmark_init(bundle, landmarks, Pose.identity(bundle.n_joints))
    posed = skin(bundle, bundle.mesh.vertices, pose)
    expected = (bundle.mesh.vertices - root_j) @ rot.T + root_j + shift
    assert np.abs(posed[ids] - target).max() < 1e-8
    assert np.abs(posed - expected).max() < 1e-8


def test_landmark_file_round_trip(tmp_path, family):
    import json

    landmarks = [{"vertex_id": 3, "position": [0.1, 0.2, 0.3]},
                 {"vertex_id": 40, "position": [0.0, 0.1, 0.0]},
                 {"vertex_id": 80, "position": [-0.1, 0.0, 0.2]}]
    path = tmp_path / "landmarks.json"
    path.write_text(json.dumps(landmarks))
    pose = landmark_init(family.bundle, path, Pose.identity(family.bundle.n_joints))
    assert np.isfinite(pose.theta).all() and np.isfinite(pose.trans).all()


def test_baseline_huge_weight_pins_to_init(family, space):
    rng = np.random.default_rng(14)
    alpha = 0.5 * space.mode_std * rng.standard_normal(space.k)
    pose = family.nominal_pose()
    scan = sample_posed_scan(family, family.canonical_shape(family.sample_alpha(rng)),
                             pose, density=1500, seed=15)
    x_o = space.reconstruct(alpha)
    out = baseline_freeform(x_o, pose, scan, family.bundle,
                            regularizer="small-displacement", weight=1e6,
                            iterations=50)
    assert np.abs(out - x_o).max() < 1e-4


def test_baseline_unregularized_improves_chamfer(family, space):
    rng = np.random.default_rng(16)
    alpha_gt = family.sample_alpha(rng)
    pose = family.nominal_pose()
    gt_canonical = family.canonical_shape(alpha_gt)
    scan = sample_posed_scan(family, gt_canonical, pose, density=4000, seed=17)
    x_o = space.reconstruct(space.project(gt_canonical))
    before = posed_surface_chamfer(family.bundle, x_o, pose, scan.points)
    out = baseline_freeform(x_o, pose, scan, family.bundle, weight=0.0,
                            iterations=120)
    after = posed_surface_chamfer(family.bundle, out, pose, scan.points)
    assert after < before


def test_baseline_edge_preserving_keeps_lengths(family, space):
    rng = np.random.default_rng(18)
    pose = family.nominal_pose()
    gt_canonical = family.canonical_shape(family.sample_alpha(rng))
    scan = sample_posed_scan(family, gt_canonical, pose, density=3000, seed=19)
    x_o = space.mean_vertices()
    edges = family.bundle.mesh.edges()

    def edge_rms(x):
        lens = np.linalg.norm(x[edges[:, 0]] - x[edges[:, 1]], axis=1)
        rest = np.linalg.norm(x_o[edges[:, 0]] - x_o[edges[:, 1]], axis=1)
        return float(np.sqrt(((lens - rest) ** 2).mean()))

    out_soft = baseline_freeform(x_o, pose, scan, family.bundle,
                                 regularizer="small-displacement", weight=0.01,
                                 iterations=80)
    out_edge = baseline_freeform(x_o, pose, scan, family.bundle,
                                 regularizer="edge-preserving", weight=10.0,
                                 iterations=80)
    assert edge_rms(out_edge) < edge_rms(out_soft)
