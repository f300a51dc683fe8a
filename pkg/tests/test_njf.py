"""Deformer checks: identity init, invariances, gradients, trainability."""

import numpy as np
import pytest

from blisskit.mesh import SurfaceSampler, TriMesh, build_diff_ops, compute_jacobians, laplacian_eigenbasis
from blisskit.njf import (
    NjfConfig,
    NjfModel,
    TrainingPair,
    extract_features,
    load_njf,
    pair_losses,
    predict_deformation,
    predict_jacobians,
    save_njf,
    train_njf,
)
from blisskit.rig import skin
from blisskit.synthlab import FamilyConfig, make_family


@pytest.fixture(scope="module")
def family():
    return make_family(FamilyConfig(n_vertices=162, seed=12))


@pytest.fixture(scope="module")
def ops(family):
    return build_diff_ops(family.bundle.mesh)


def shape_pair(family, ops, seed, smooth_hi=8, amp=0.008):
    """X_o inside the linear span plus a smooth out-of-span residual target."""
    rng = np.random.default_rng(seed)
    alpha = rng.standard_normal(family.n_modes).clip(-3, 3) * family.mode_scales
    mesh = family.bundle.mesh
    lin = (mesh.vertices.reshape(-1) + alpha @ family.modes).reshape(-1, 3)
    x_o = mesh.with_vertices(lin)
    _, phi = laplacian_eigenbasis(mesh, 10, ops=ops)
    field = phi[:, 1:smooth_hi] @ rng.standard_normal((smooth_hi - 1, 3))
    field *= amp / np.abs(field).max()
    target = lin + field
    posed = skin(family.bundle, target, family.nominal_pose())
    scan = SurfaceSampler(posed, mesh.faces, 800, seed=seed + 1).positions(posed)
    return x_o, scan, target


def test_identity_initialization(family, ops):
    x_o, scan, _ = shape_pair(family, ops, seed=0)
    model = NjfModel.init(NjfConfig(seed=1))
    x_prime = predict_deformation(model, x_o, scan, ops)
    assert np.abs(x_prime - x_o.vertices).max() < 1e-6


def test_scan_permutation_invariance(family, ops):
    x_o, scan, _ = shape_pair(family, ops, seed=2)
    model = NjfModel.init(NjfConfig(seed=3))
    # give the zero head nonzero weights so the scan path matters
    rng = np.random.default_rng(4)
    model.params["mlp_w4"] = 1e-3 * rng.standard_normal(model.params["mlp_w4"].shape)

    perm = np.random.default_rng(5).permutation(len(scan))
    a = predict_deformation(model, x_o, scan, ops)
    b = predict_deformation(model, x_o, scan[perm], ops)
    assert np.abs(a - b).max() < 1e-6

    fa = extract_features(x_o, scan, model, ops=ops)
    fb = extract_features(x_o, scan[perm], model, ops=ops)
    # nearest-point features refer to identical coordinates
    assert np.abs(fa.scan_pts[fa.nearest_scan_point] - fb.scan_pts[fb.nearest_scan_point]).max() < 1e-12


def test_duplicate_triangles_share_features(family, ops):
    x_o, scan, _ = shape_pair(family, ops, seed=6)
    model = NjfModel.init(NjfConfig(seed=7))
    feats = extract_features(x_o, scan, model, ops=ops)
    # feature rows are a function of the triangle alone: rebuild and compare
    feats2 = extract_features(x_o, scan, model, ops=ops)
    assert np.array_equal(feats.descriptors, feats2.descriptors)
    assert np.array_equal(feats.nearest_scan_point, feats2.nearest_scan_point)


def test_nearest_assignment_matches_brute_force(family, ops):
    rng = np.random.default_rng(8)
    x_o, _, _ = shape_pair(family, ops, seed=9)
    scan = rng.standard_normal((500, 3))
    model = NjfModel.init(NjfConfig(seed=10))
    feats = extract_features(x_o, scan, model, ops=ops)
    centroids = x_o.vertices[x_o.faces].mean(axis=1)
    d2 = ((centroids[:, None, :] - scan[None, :, :]) ** 2).sum(axis=2)
    brute = d2.argmin(axis=1)
    assert np.array_equal(feats.nearest_scan_point, brute)


def test_full_parameter_gradient_vs_fd():
    # 2-triangle toy mesh, 5-point scan, random parameter point
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    template = TriMesh(verts, faces)
    ops = build_diff_ops(template)
    rng = np.random.default_rng(11)
    x_o = template.with_vertices(verts + 0.05 * rng.standard_normal(verts.shape))
    scan = rng.standard_normal((5, 3))
    target = x_o.vertices + 0.02 * rng.standard_normal(verts.shape)

    model = NjfModel.init(NjfConfig(seed=12))
    for k in model.params:
        model.params[k] = model.params[k] + 0.05 * rng.standard_normal(model.params[k].shape)

    feats = extract_features(x_o, scan, model, ops=ops)
    jac_gt = compute_jacobians(ops, ops.mesh, target).matrices

    def loss_of(params):
        saved = model.params
        model.params = params
        lv, lj, _ = pair_losses(model, feats, ops, x_o, target, jac_gt, want_grads=False)
        model.params = saved
        return 10.0 * lv + lj

    _, _, grads = pair_losses(model, feats, ops, x_o, target, jac_gt)
    lv, lj, _ = pair_losses(model, feats, ops, x_o, target, jac_gt, want_grads=False)

    h = 1e-6
    # directional checks over the full parameter vector
    for trial in range(3):
        direction = {
            k: rng.standard_normal(v.shape) for k, v in model.params.items()
        }
        plus = {k: model.params[k] + h * direction[k] for k in model.params}
        minus = {k: model.params[k] - h * direction[k] for k in model.params}
        fd = (loss_of(plus) - loss_of(minus)) / (2 * h)
        an = sum(float((grads[k] * direction[k]).sum()) for k in grads)
        assert abs(fd - an) / max(abs(fd), 1e-12) < 1e-3

    # per-coordinate spot check across every parameter tensor
    fd_list, an_list = [], []
    for k in sorted(model.params):
        flat = model.params[k].ravel()
        idx = rng.choice(flat.size, size=min(40, flat.size), replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            lp = loss_of(model.params)
            flat[i] = old - h
            lm = loss_of(model.params)
            flat[i] = old
            fd_list.append((lp - lm) / (2 * h))
            an_list.append(grads[k].ravel()[i])
    fd_arr, an_arr = np.array(fd_list), np.array(an_list)
    assert np.linalg.norm(fd_arr - an_arr) / max(np.linalg.norm(fd_arr), 1e-12) < 1e-3


def test_training_restores_identity_after_head_perturbation(family, ops):
    # targets equal the sources: training must drive the output back to X_o
    pairs = []
    for seed in (20, 21):
        x_o, scan, _ = shape_pair(family, ops, seed=seed)
        pairs.append(TrainingPair(x_o, scan, x_o.vertices.copy()))
    model = NjfModel.init(NjfConfig(seed=22, learning_rate=1e-3, epochs=200))
    rng = np.random.default_rng(23)
    model.params["mlp_w4"] = 2e-3 * rng.standard_normal(model.params["mlp_w4"].shape)

    before = max(
        np.abs(predict_deformation(model, p.source, p.scan, ops) - p.target).max()
        for p in pairs
    )
    train_njf(model, pairs, ops)
    after = max(
        np.abs(predict_deformation(model, p.source, p.scan, ops) - p.target).max()
        for p in pairs
    )
    assert before > 1e-3  # the perturbation did break identity
    assert after < 1e-3


def test_overfit_single_pair(family, ops):
    x_o, scan, target = shape_pair(family, ops, seed=30)
    pair = TrainingPair(x_o, scan, target)
    model = NjfModel.init(NjfConfig(seed=31, learning_rate=3e-3, epochs=500))
    curve = train_njf(model, [pair], ops)
    assert curve[-1][3] < 0.01 * curve[0][3]


def test_training_determinism(family, ops):
    x_o, scan, target = shape_pair(family, ops, seed=40)
    pair = TrainingPair(x_o, scan, target)

    def run():
        model = NjfModel.init(NjfConfig(seed=41, learning_rate=1e-3, epochs=30))
        train_njf(model, [pair], ops)
        return model.flat_params()

    assert np.array_equal(run(), run())


def test_conditioning_on_scan(family, ops):
    # one trained model, same X_o, two different scans -> different outputs
    x_o, scan_a, target_a = shape_pair(family, ops, seed=50)
    _, scan_b, target_b = shape_pair(family, ops, seed=60)
    pairs = [TrainingPair(x_o, scan_a, target_a),
             TrainingPair(x_o, scan_b, target_b)]
    model = NjfModel.init(NjfConfig(seed=51, learning_rate=1e-3, epochs=150))
    train_njf(model, pairs, ops)
    out_a = predict_deformation(model, x_o, scan_a, ops)
    out_b = predict_deformation(model, x_o, scan_b, ops)
    assert np.abs(out_a - out_b).max() > 1e-4


def test_checkpoint_round_trip(tmp_path, family, ops):
    x_o, scan, target = shape_pair(family, ops, seed=70)
    model = NjfModel.init(NjfConfig(seed=71, learning_rate=1e-3, epochs=10))
    train_njf(model, [TrainingPair(x_o, scan, target)], ops)
    save_njf(model, tmp_path / "njf.bin")
    back = load_njf(tmp_path / "njf.bin")
    assert back.config == model.config
    assert np.array_equal(back.flat_params(), model.flat_params())
    a = predict_deformation(model, x_o, scan, ops)
    b = predict_deformation(back, x_o, scan, ops)
    assert np.array_equal(a, b)


def test_topology_mismatch_rejected(family, ops):
    from blisskit.mesh import MeshError

    x_o, scan, target = shape_pair(family, ops, seed=80)
    bad = TrainingPair(x_o, scan, target[:-1])
    model = NjfModel.init(NjfConfig(seed=81))
    with pytest.raises(MeshError, match="topology"):
        train_njf(model, [bad], ops, epochs=1)


def test_loss_curve_csv(tmp_path, family, ops):
    x_o, scan, target = shape_pair(family, ops, seed=90)
    model = NjfModel.init(NjfConfig(seed=91, learning_rate=1e-3, epochs=5))
    train_njf(model, [TrainingPair(x_o, scan, target)], ops,
              loss_curve_path=tmp_path / "curve.csv")
    lines = (tmp_path / "curve.csv").read_text().strip().splitlines()
    assert lines[0] == "epoch,L_vertex,L_Jacobian,L_total"
    assert len(lines) == 6


def test_predicted_jacobians_shape(family, ops):
    x_o, scan, _ = shape_pair(family, ops, seed=95)
    model = NjfModel.init(NjfConfig(seed=96))
    feats = extract_features(x_o, scan, model, ops=ops)
    jac = predict_jacobians(model, feats)
    assert jac.matrices.shape == (x_o.n_faces, 3, 3)
    assert jac.as_nine_vectors().shape == (x_o.n_faces, 9)
