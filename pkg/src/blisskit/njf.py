"""Learned per-triangle Jacobian deformer with a differentiable Poisson layer.

The model deforms a shape-space projection toward the detail of a raw scan:
two permutation-invariant point encoders summarize the scan and the source
triangles, a per-triangle MLP predicts a 9-vector Jacobian residual, and a
Poisson solve integrates the resulting field into vertex positions. Gradients
flow through the solve via its exact adjoint, so the whole network trains with
plain reverse mode in numpy. The final layer starts at zero, which makes the
untrained model the identity map on its input shape.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import io as kio
from .mesh import (
    DiffOps,
    JacobianField,
    MeshError,
    TriMesh,
    compute_jacobians,
    poisson_solve,
    poisson_solve_adjoint,
    scan_points,
    wave_kernel_signature,
)

CHECKPOINT_MAGIC = b"BLNJ"

N_WKS = 50
POINT_FEAT = 64     # per-point feature width (first encoder layer)
GLOBAL_FEAT = 128   # global code width (max-pooled second layer)
HIDDEN = 128        # MLP hidden width
SRC_DESC = 3 + 3 + N_WKS          # centroid, normal, per-triangle WKS
MLP_IN = SRC_DESC + 9 + GLOBAL_FEAT + POINT_FEAT + GLOBAL_FEAT


@dataclass
class NjfConfig:
    seed: int = 0
    learning_rate: float = 1e-4
    epochs: int = 500
    n_wks_eig: int = 128


@dataclass
class NjfModel:
    """Parameter container: two point encoders + the per-triangle MLP.

    Encoders are shared per-point MLPs (in -> 64 -> 128) max-pooled into a
    128-wide global code; the scan encoder also exposes its 64-wide per-point
    features for nearest-point lookup. The head is a 4-layer MLP
    (385 -> 128 -> 128 -> 128 -> 9) with ReLU hidden activations.
    """

    params: dict = field(default_factory=dict)
    config: NjfConfig = field(default_factory=NjfConfig)

    @classmethod
    def init(cls, config: Optional[NjfConfig] = None) -> "NjfModel":
        config = config or NjfConfig()
        rng = np.random.default_rng(config.seed)

        def dense(n_in, n_out, zero=False):
            if zero:
                return np.zeros((n_in, n_out)), np.zeros(n_out)
            scale = 1.0 / np.sqrt(n_in)
            return rng.normal(0.0, scale, size=(n_in, n_out)), np.zeros(n_out)

        p = {}
        p["scan_w1"], p["scan_b1"] = dense(3, POINT_FEAT)
        p["scan_w2"], p["scan_b2"] = dense(POINT_FEAT, GLOBAL_FEAT)
        p["src_w1"], p["src_b1"] = dense(SRC_DESC, POINT_FEAT)
        p["src_w2"], p["src_b2"] = dense(POINT_FEAT, GLOBAL_FEAT)
        p["mlp_w1"], p["mlp_b1"] = dense(MLP_IN, HIDDEN)
        p["mlp_w2"], p["mlp_b2"] = dense(HIDDEN, HIDDEN)
        p["mlp_w3"], p["mlp_b3"] = dense(HIDDEN, HIDDEN)
        # zero head: the predicted residual vanishes, so the untrained model
        # reproduces the source Jacobians exactly (identity deformation)
        p["mlp_w4"], p["mlp_b4"] = dense(HIDDEN, 9, zero=True)
        return cls(params=p, config=config)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])

    def set_flat_params(self, flat: np.ndarray) -> None:
        off = 0
        for k in sorted(self.params):
            size = self.params[k].size
            self.params[k] = flat[off : off + size].reshape(self.params[k].shape).copy()
            off += size


@dataclass
class TriangleFeatures:
    """Per-triangle conditioning of the deformer for one (source, scan) pair.

    Raw inputs only; encoder activations depend on the current weights and are
    recomputed by the forward pass.
    """

    descriptors: np.ndarray       # (F, 56) centroid | normal | mean corner WKS
    source_jacobians: np.ndarray  # (F, 3, 3) w.r.t. the template rest mesh
    scan_pts: np.ndarray          # (M, 3)
    nearest_scan_point: np.ndarray  # (F,) index of scan point nearest each centroid

    @property
    def n_faces(self) -> int:
        return len(self.descriptors)


def extract_features(source: TriMesh, scan, model: NjfModel,
                     ops: Optional[DiffOps] = None) -> TriangleFeatures:
    """Assemble the raw per-triangle inputs for one deformation query.

    The scan is summarized by the points nearest each source triangle centroid
    (the encoders add the learned global codes at forward time). Source
    descriptors are centroid, normal and the corner-averaged WKS; the source
    Jacobians are taken w.r.t. the template mesh the ops were built on.
    """
    pts = scan_points(scan)
    centroids = source.vertices[source.faces].mean(axis=1)
    normals = source.face_normals()
    wks = wave_kernel_signature(source, n_signatures=N_WKS, n_eig=model.config.n_wks_eig)
    wks_tri = wks[source.faces].mean(axis=1)
    descriptors = np.hstack([centroids, normals, wks_tri])

    if ops is not None:
        src_jac = compute_jacobians(ops, ops.mesh, source.vertices).matrices
    else:
        src_jac = np.broadcast_to(np.eye(3), (source.n_faces, 3, 3)).copy()
    _, nn_idx = cKDTree(pts).query(centroids)
    return TriangleFeatures(descriptors, src_jac, pts, nn_idx)


def _relu(x):
    return np.maximum(x, 0.0)


def _forward(params: dict, feats: TriangleFeatures, want_cache: bool = False):
    """Per-triangle MLP output (F, 9) plus the activation cache for backward."""
    h1_scan = _relu(feats.scan_pts @ params["scan_w1"] + params["scan_b1"])
    h2_scan = h1_scan @ params["scan_w2"] + params["scan_b2"]
    scan_argmax = h2_scan.argmax(axis=0)
    g_scan = h2_scan[scan_argmax, np.arange(GLOBAL_FEAT)]

    h1_src = _relu(feats.descriptors @ params["src_w1"] + params["src_b1"])
    h2_src = h1_src @ params["src_w2"] + params["src_b2"]
    src_argmax = h2_src.argmax(axis=0)
    g_src = h2_src[src_argmax, np.arange(GLOBAL_FEAT)]

    nf = feats.n_faces
    x = np.hstack([
        feats.descriptors,
        feats.source_jacobians.reshape(nf, 9),
        np.broadcast_to(g_scan, (nf, GLOBAL_FEAT)),
        h1_scan[feats.nearest_scan_point],
        np.broadcast_to(g_src, (nf, GLOBAL_FEAT)),
    ])
    z1 = _relu(x @ params["mlp_w1"] + params["mlp_b1"])
    z2 = _relu(z1 @ params["mlp_w2"] + params["mlp_b2"])
    z3 = _relu(z2 @ params["mlp_w3"] + params["mlp_b3"])
    out = z3 @ params["mlp_w4"] + params["mlp_b4"]
    if not want_cache:
        return out, None
    cache = dict(h1_scan=h1_scan, scan_argmax=scan_argmax, h1_src=h1_src,
                 src_argmax=src_argmax, x=x, z1=z1, z2=z2, z3=z3)
    return out, cache


def _backward(params: dict, feats: TriangleFeatures, cache: dict,
              g_out: np.ndarray) -> dict:
    """Gradients of every parameter given dLoss/d(mlp output)."""
    g = {}
    z3, z2, z1, x = cache["z3"], cache["z2"], cache["z1"], cache["x"]
    g["mlp_w4"] = z3.T @ g_out
    g["mlp_b4"] = g_out.sum(axis=0)
    gz3 = (g_out @ params["mlp_w4"].T) * (z3 > 0)
    g["mlp_w3"] = z2.T @ gz3
    g["mlp_b3"] = gz3.sum(axis=0)
    gz2 = (gz3 @ params["mlp_w3"].T) * (z2 > 0)
    g["mlp_w2"] = z1.T @ gz2
    g["mlp_b2"] = gz2.sum(axis=0)
    gz1 = (gz2 @ params["mlp_w2"].T) * (z1 > 0)
    g["mlp_w1"] = x.T @ gz1
    g["mlp_b1"] = gz1.sum(axis=0)
    gx = gz1 @ params["mlp_w1"].T

    nf = feats.n_faces
    o = SRC_DESC + 9
    g_gscan = gx[:, o : o + GLOBAL_FEAT].sum(axis=0)
    o += GLOBAL_FEAT
    g_perpoint = gx[:, o : o + POINT_FEAT]
    o += POINT_FEAT
    g_gsrc = gx[:, o : o + GLOBAL_FEAT].sum(axis=0)

    # scan encoder: global code routes to the argmax points, per-point
    # features scatter through the nearest-neighbor gather
    h1_scan, scan_argmax = cache["h1_scan"], cache["scan_argmax"]
    gh2_scan = np.zeros((len(feats.scan_pts), GLOBAL_FEAT))
    gh2_scan[scan_argmax, np.arange(GLOBAL_FEAT)] = g_gscan
    g["scan_w2"] = h1_scan.T @ gh2_scan
    g["scan_b2"] = gh2_scan.sum(axis=0)
    gh1_scan = gh2_scan @ params["scan_w2"].T
    np.add.at(gh1_scan, feats.nearest_scan_point, g_perpoint)
    gh1_scan *= h1_scan > 0
    g["scan_w1"] = feats.scan_pts.T @ gh1_scan
    g["scan_b1"] = gh1_scan.sum(axis=0)

    h1_src, src_argmax = cache["h1_src"], cache["src_argmax"]
    gh2_src = np.zeros((nf, GLOBAL_FEAT))
    gh2_src[src_argmax, np.arange(GLOBAL_FEAT)] = g_gsrc
    g["src_w2"] = h1_src.T @ gh2_src
    g["src_b2"] = gh2_src.sum(axis=0)
    gh1_src = (gh2_src @ params["src_w2"].T) * (h1_src > 0)
    g["src_w1"] = feats.descriptors.T @ gh1_src
    g["src_b1"] = gh1_src.sum(axis=0)
    return g


def predict_jacobians(model: NjfModel, feats: TriangleFeatures) -> JacobianField:
    """Predicted per-triangle Jacobians: source Jacobians + learned residual."""
    out, _ = _forward(model.params, feats)
    return JacobianField(feats.source_jacobians + out.reshape(-1, 3, 3))


def predict_deformation(model: NjfModel, source: TriMesh, scan, ops: DiffOps,
                        feats: Optional[TriangleFeatures] = None) -> np.ndarray:
    """Deformed vertices: Poisson-integrate the predicted Jacobian field.

    The solve is anchored at the source's pin-vertex position, so an untrained
    (zero-head) model returns the source vertices.
    """
    if ops.n_faces != source.n_faces:
        raise MeshError("ops and source disagree on topology")
    if feats is None:
        feats = extract_features(source, scan, model, ops=ops)
    jac = predict_jacobians(model, feats)
    return poisson_solve(ops, jac, anchor=source.vertices[ops.pin])


@dataclass
class TrainingPair:
    """One supervised deformation example: project, scan condition, target."""

    source: TriMesh       # X_o, the shape-space projection
    scan: object          # ScanCloud or raw points, the conditioning scan
    target: np.ndarray    # (N, 3) registered ground-truth vertices


def pair_losses(model: NjfModel, feats: TriangleFeatures, ops: DiffOps,
                source: TriMesh, target: np.ndarray, jac_gt: np.ndarray,
                want_grads: bool = True):
    """L_vertex, L_jacobian and (optionally) parameter gradients for one pair.

    Total objective is 10 * L_vertex + L_jacobian with both terms means over
    vertices / triangles. The vertex term back-propagates through the Poisson
    layer via its adjoint.
    """
    out, cache = _forward(model.params, feats, want_cache=want_grads)
    jac_pred = feats.source_jacobians + out.reshape(-1, 3, 3)
    pred = poisson_solve(ops, JacobianField(jac_pred), anchor=source.vertices[ops.pin])

    n, f = len(target), feats.n_faces
    diff_v = pred - target
    diff_j = jac_pred - jac_gt
    loss_v = float((diff_v**2).sum() / n)
    loss_j = float((diff_j**2).sum() / f)
    if not want_grads:
        return loss_v, loss_j, None

    g_vertices = (2.0 * 10.0 / n) * diff_v
    g_jac = poisson_solve_adjoint(ops, g_vertices).matrices + (2.0 / f) * diff_j
    grads = _backward(model.params, feats, cache, g_jac.reshape(f, 9))
    return loss_v, loss_j, grads


def train_njf(
    model: NjfModel,
    pairs: Sequence[TrainingPair],
    ops: DiffOps,
    epochs: Optional[int] = None,
    learning_rate: Optional[float] = None,
    loss_curve_path=None,
    features: Optional[list] = None,
) -> list:
    """Train in place with Adam, one pair per step; returns the loss curve.

    Pairs are visited in a seed-shuffled order each epoch. Ground-truth
    Jacobians are the template->target deformation gradients, the same frame
    the Poisson layer integrates, so both loss terms share one optimum.
    Targets are pin-aligned first: the solve anchors the prediction at the
    source's pin vertex, so a constant target offset is unreachable by any
    Jacobian field and would otherwise floor the loss (Jacobians are
    translation-invariant, so the ground-truth field is unchanged).
    Raises on NaN loss, reporting the epoch.
    """
    epochs = model.config.epochs if epochs is None else epochs
    lr = model.config.learning_rate if learning_rate is None else learning_rate
    for pair in pairs:
        if pair.target.shape != pair.source.vertices.shape:
            raise MeshError("training pair target does not match template topology")
    targets = [
        p.target - p.target[ops.pin] + p.source.vertices[ops.pin] for p in pairs
    ]

    if features is None:
        features = [extract_features(p.source, p.scan, model, ops=ops) for p in pairs]
    jac_gt = [compute_jacobians(ops, ops.mesh, t).matrices for t in targets]

    rng = np.random.default_rng(model.config.seed)
    adam_m = {k: np.zeros_like(v) for k, v in model.params.items()}
    adam_v = {k: np.zeros_like(v) for k, v in model.params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-12
    warmup = 50  # steps of linear learning-rate ramp
    step = 0

    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        ep_v = ep_j = 0.0
        for idx in order:
            pair = pairs[idx]
            loss_v, loss_j, grads = pair_losses(
                model, features[idx], ops, pair.source, targets[idx], jac_gt[idx]
            )
            if not np.isfinite(loss_v + loss_j):
                raise MeshError(f"NaN training loss at epoch {epoch}")
            ep_v += loss_v
            ep_j += loss_j
            step += 1
            lr_t = lr * min(1.0, step / warmup)
            for k, gk in grads.items():
                adam_m[k] = beta1 * adam_m[k] + (1 - beta1) * gk
                adam_v[k] = beta2 * adam_v[k] + (1 - beta2) * gk**2
                m_hat = adam_m[k] / (1 - beta1**step)
                v_hat = adam_v[k] / (1 - beta2**step)
                model.params[k] = model.params[k] - lr_t * m_hat / (np.sqrt(v_hat) + eps)
        ep_v /= len(pairs)
        ep_j /= len(pairs)
        curve.append((epoch, ep_v, ep_j, 10.0 * ep_v + ep_j))

    if loss_curve_path is not None:
        with Path(loss_curve_path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "L_vertex", "L_Jacobian", "L_total"])
            writer.writerows(curve)
    return curve


def save_njf(model: NjfModel, path) -> None:
    arrays = dict(model.params)
    arrays["__config"] = np.array([
        float(model.config.seed),
        model.config.learning_rate,
        float(model.config.epochs),
        float(model.config.n_wks_eig),
    ])
    kio.save_arrays(path, CHECKPOINT_MAGIC, arrays)


def load_njf(path) -> NjfModel:
    arrays = kio.load_arrays(path, CHECKPOINT_MAGIC)
    cfg_arr = arrays.pop("__config")
    config = NjfConfig(
        seed=int(cfg_arr[0]),
        learning_rate=float(cfg_arr[1]),
        epochs=int(cfg_arr[2]),
        n_wks_eig=int(cfg_arr[3]),
    )
    return NjfModel(params=arrays, config=config)
