"""Rigged template: skeleton, skinning weights, and linear blend skinning.

A TemplateBundle holds a canonical (T-pose) mesh plus the machinery needed to
pose it: a kinematic tree, a joint regressor that derives rest joints from any
canonical vertex set, per-vertex skinning weights, and an optional linear
pose-corrective basis that maps pose parameters to vertex offsets before
skinning. The pipeline never inverts skinning; canonical shapes are produced
directly in T-pose.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as kio
from .mesh import MeshError, TriMesh

WEIGHTS_MAGIC = b"BLSW"
CORRECTIVE_MAGIC = b"BLBP"


@dataclass
class Pose:
    """Per-joint axis-angle rotations plus a root translation.

    theta: (K, 3) radians, each row wrapped so its norm is <= pi.
    trans: (3,) meters.
    """

    theta: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=np.float64)
        self.trans = np.array(self.trans, dtype=np.float64).reshape(3)
        if self.theta.ndim != 2 or self.theta.shape[1] != 3:
            raise MeshError(f"theta must be (K, 3), got {self.theta.shape}")
        if not (np.isfinite(self.theta).all() and np.isfinite(self.trans).all()):
            raise MeshError("non-finite pose parameters")
        angles = np.linalg.norm(self.theta, axis=1)
        for k in np.nonzero(angles > np.pi)[0]:
            a = angles[k]
            wrapped = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
            self.theta[k] *= wrapped / a

    @classmethod
    def identity(cls, n_joints: int) -> "Pose":
        return cls(np.zeros((n_joints, 3)), np.zeros(3))

    @property
    def n_joints(self) -> int:
        return len(self.theta)

    def flat(self) -> np.ndarray:
        """(3K,) view of the joint angles, used by pose correctives."""
        return self.theta.reshape(-1)


class TemplateBundle:
    """Canonical mesh + skeleton + skinning weights + joint regressor.

    skin_weights: (N, K), rows sum to 1, nonnegative.
    joint_regressor: (K, N), rows sum to 1, nonnegative; rest joints are
    joint_regressor @ vertices.
    pose_corrective: optional (3N, 3K) linear map from flattened joint angles
    to vertex offsets added before skinning (zero map if None).
    """

    def __init__(self, mesh: TriMesh, parents, skin_weights, joint_regressor,
                 pose_corrective: Optional[np.ndarray] = None):
        self.mesh = mesh
        self.parents = np.asarray(parents, dtype=np.int64)
        self.skin_weights = np.asarray(skin_weights, dtype=np.float64)
        self.joint_regressor = np.asarray(joint_regressor, dtype=np.float64)
        self.pose_corrective = (
            None if pose_corrective is None else np.asarray(pose_corrective, dtype=np.float64)
        )
        self._validate()
        self._order = self._topological_order()

    def _validate(self) -> None:
        n, k = self.mesh.n_vertices, len(self.parents)
        if k < 2:
            raise MeshError(f"need at least 2 joints, got {k}")
        if self.skin_weights.shape != (n, k):
            raise MeshError(f"skin weights must be ({n}, {k}), got {self.skin_weights.shape}")
        if self.joint_regressor.shape != (k, n):
            raise MeshError(f"regressor must be ({k}, {n}), got {self.joint_regressor.shape}")
        for name, mat in (("skin weights", self.skin_weights), ("regressor", self.joint_regressor)):
            if mat.min() < -1e-12:
                raise MeshError(f"{name} must be nonnegative")
            if np.abs(mat.sum(axis=1) - 1.0).max() > 1e-8:
                raise MeshError(f"{name} rows must sum to 1")
        roots = np.nonzero(self.parents < 0)[0]
        if len(roots) != 1:
            raise MeshError(f"exactly one root joint required, found {len(roots)}")
        if self.pose_corrective is not None and self.pose_corrective.shape != (3 * n, 3 * k):
            raise MeshError(
                f"pose corrective must be ({3 * n}, {3 * k}), got {self.pose_corrective.shape}"
            )

    def _topological_order(self) -> np.ndarray:
        k = len(self.parents)
        order = []
        visited = np.zeros(k, dtype=bool)
        frontier = [int(np.nonzero(self.parents < 0)[0][0])]
        while frontier:
            j = frontier.pop(0)
            if visited[j]:
                raise MeshError("joint parents contain a cycle")
            visited[j] = True
            order.append(j)
            frontier.extend(int(c) for c in np.nonzero(self.parents == j)[0])
        if not visited.all():
            raise MeshError("joint tree is disconnected")
        return np.array(order, dtype=np.int64)

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def root(self) -> int:
        return int(self._order[0])

    def rest_joints(self, canonical_vertices: Optional[np.ndarray] = None) -> np.ndarray:
        v = self.mesh.vertices if canonical_vertices is None else canonical_vertices
        return self.joint_regressor @ v

    def corrective_offsets(self, pose: Pose) -> np.ndarray:
        """(N, 3) vertex offsets of the pose corrective (zeros when absent)."""
        if self.pose_corrective is None:
            return np.zeros_like(self.mesh.vertices)
        return (self.pose_corrective @ pose.flat()).reshape(-1, 3)


def rodrigues(theta: np.ndarray) -> np.ndarray:
    """Axis-angle (3,) to rotation matrix."""
    theta = np.asarray(theta, dtype=np.float64).reshape(3)
    angle = np.linalg.norm(theta)
    if angle < 1e-12:
        return np.eye(3) + _skew(theta)
    axis = theta / angle
    k = _skew(axis)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rodrigues_jacobian(theta: np.ndarray) -> np.ndarray:
    """d(rodrigues)/d(theta), shape (3, 3, 3): [c] is dR/dtheta_c.

    Uses the closed form of Gallego & Yezzi; at the origin the limit
    dR/dtheta_c = skew(e_c) is exact.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(3)
    angle2 = float(theta @ theta)
    rot = rodrigues(theta)
    out = np.empty((3, 3, 3))
    if angle2 < 1e-16:
        for c in range(3):
            out[c] = _skew(np.eye(3)[c])
        return out
    for c in range(3):
        e_c = np.eye(3)[c]
        term = theta[c] * _skew(theta) + _skew(np.cross(theta, (np.eye(3) - rot) @ e_c))
        out[c] = (term / angle2) @ rot
    return out


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]], dtype=np.float64)


def _world_transforms(bundle: TemplateBundle, joints: np.ndarray, pose: Pose):
    """World rotations (K,3,3) and posed joint positions (K,3) down the tree."""
    k = bundle.n_joints
    rot_w = np.empty((k, 3, 3))
    pos_w = np.empty((k, 3))
    local = np.stack([rodrigues(pose.theta[j]) for j in range(k)])
    for j in bundle._order:
        p = bundle.parents[j]
        if p < 0:
            rot_w[j] = local[j]
            pos_w[j] = joints[j]
        else:
            rot_w[j] = rot_w[p] @ local[j]
            pos_w[j] = pos_w[p] + rot_w[p] @ (joints[j] - joints[p])
    return rot_w, pos_w


def skin(bundle: TemplateBundle, canonical_vertices: np.ndarray, pose: Pose) -> np.ndarray:
    """Linear blend skinning: pose canonical vertices with per-joint transforms.

    Joints come from the regressor applied to the canonical vertices; each
    vertex blends the rigid per-joint maps x -> R_w (x - j) + g with its
    skinning weights, then the root translation is added.
    """
    c = np.asarray(canonical_vertices, dtype=np.float64)
    if c.shape != bundle.mesh.vertices.shape:
        raise MeshError(f"canonical vertices must be {bundle.mesh.vertices.shape}, got {c.shape}")
    if pose.n_joints != bundle.n_joints:
        raise MeshError(f"pose has {pose.n_joints} joints, bundle {bundle.n_joints}")
    joints = bundle.rest_joints(c)
    rot_w, pos_w = _world_transforms(bundle, joints, pose)
    out = np.zeros_like(c)
    for j in range(bundle.n_joints):
        w = bundle.skin_weights[:, j]
        if not w.any():
            continue
        out += w[:, None] * ((c - joints[j]) @ rot_w[j].T + pos_w[j])
    return out + pose.trans


class SkinJacobian:
    """Derivatives of skinned vertices w.r.t. pose angles, translation and
    canonical vertices, evaluated at one (canonical, pose) configuration.

    d_theta has shape (N, 3, K, 3); the translation derivative is an identity
    block per vertex; canonical derivatives are exposed as jvp/vjp since the
    (3N x 3N) matrix is sparse but large.
    """

    def __init__(self, bundle: TemplateBundle, canonical_vertices: np.ndarray, pose: Pose):
        self.bundle = bundle
        self.c = np.asarray(canonical_vertices, dtype=np.float64)
        self.pose = pose
        self.joints = bundle.rest_joints(self.c)
        self.rot_w, self.pos_w = _world_transforms(bundle, self.joints, pose)
        self._local = np.stack([rodrigues(pose.theta[j]) for j in range(bundle.n_joints)])
        self._dlocal = np.stack(
            [rodrigues_jacobian(pose.theta[j]) for j in range(bundle.n_joints)]
        )  # (K, 3, 3, 3)
        self._children = [
            np.nonzero(bundle.parents == j)[0] for j in range(bundle.n_joints)
        ]

    @property
    def d_theta(self) -> np.ndarray:
        """(N, 3, K, 3): d(skinned vertex)/d(theta[k, c])."""
        if not hasattr(self, "_d_theta"):
            self._d_theta = self._compute_d_theta()
        return self._d_theta

    def _compute_d_theta(self) -> np.ndarray:
        bundle, c = self.bundle, self.c
        n, k = len(c), bundle.n_joints
        out = np.zeros((n, 3, k, 3))
        for m in range(k):
            for comp in range(3):
                d_rot = np.zeros((k, 3, 3))
                d_pos = np.zeros((k, 3))
                for j in bundle._order:
                    p = bundle.parents[j]
                    if p < 0:
                        d_rot[j] = self._dlocal[j][comp] if j == m else 0.0
                        continue
                    d_parent = d_rot[p]
                    d_rot[j] = d_parent @ self._local[j]
                    if j == m:
                        d_rot[j] = d_rot[j] + self.rot_w[p] @ self._dlocal[j][comp]
                    d_pos[j] = d_pos[p] + d_parent @ (self.joints[j] - self.joints[p])
                for j in range(k):
                    w = bundle.skin_weights[:, j]
                    if not w.any() or (not d_rot[j].any() and not d_pos[j].any()):
                        continue
                    out[:, :, m, comp] += w[:, None] * (
                        (c - self.joints[j]) @ d_rot[j].T + d_pos[j]
                    )
        return out

    def vjp_theta(self, grad_posed: np.ndarray) -> np.ndarray:
        """(K, 3) pullback of a (N, 3) posed-vertex gradient onto theta."""
        return np.einsum("nd,ndkc->kc", grad_posed, self.d_theta)

    def vjp_trans(self, grad_posed: np.ndarray) -> np.ndarray:
        return grad_posed.sum(axis=0)

    def jvp_canonical(self, d_canonical: np.ndarray) -> np.ndarray:
        """Directional derivative of the posed vertices for fixed pose."""
        dc = np.asarray(d_canonical, dtype=np.float64)
        dj = self.bundle.joint_regressor @ dc
        d_pos = np.zeros((self.bundle.n_joints, 3))
        for j in self.bundle._order:
            p = self.bundle.parents[j]
            if p < 0:
                d_pos[j] = dj[j]
            else:
                d_pos[j] = d_pos[p] + self.rot_w[p] @ (dj[j] - dj[p])
        out = np.zeros_like(dc)
        for j in range(self.bundle.n_joints):
            w = self.bundle.skin_weights[:, j]
            if not w.any():
                continue
            out += w[:, None] * ((dc - dj[j]) @ self.rot_w[j].T + d_pos[j])
        return out

    def vjp_canonical(self, grad_posed: np.ndarray) -> np.ndarray:
        """(N, 3) pullback of a posed-vertex gradient onto canonical vertices.

        Splits into the blockwise rotation term and the joint-regressor chain,
        with the posed-joint recursion back-propagated leaf to root.
        """
        y = np.asarray(grad_posed, dtype=np.float64)
        bundle = self.bundle
        out = np.zeros_like(self.c)
        sum_wy = np.empty((bundle.n_joints, 3))
        for j in range(bundle.n_joints):
            w = bundle.skin_weights[:, j]
            out += (w[:, None] * y) @ self.rot_w[j]
            sum_wy[j] = w @ y
        # adjoint of the posed-joint recursion
        g_bar = sum_wy.copy()
        j_bar = np.einsum("kab,ka->kb", self.rot_w, -sum_wy)  # direct -R_w j term
        for j in self.bundle._order[::-1]:
            p = bundle.parents[j]
            if p < 0:
                j_bar[j] += g_bar[j]
            else:
                g_bar[p] += g_bar[j]
                step = self.rot_w[p].T @ g_bar[j]
                j_bar[j] += step
                j_bar[p] -= step
        return out + self.bundle.joint_regressor.T @ j_bar


def skin_jacobian(bundle: TemplateBundle, canonical_vertices: np.ndarray, pose: Pose) -> SkinJacobian:
    """Analytic derivative bundle for skin(); see SkinJacobian."""
    return SkinJacobian(bundle, canonical_vertices, pose)


def synthesize_canonical(space, alpha: np.ndarray, bundle: TemplateBundle, pose: Pose) -> np.ndarray:
    """Canonical-pose vertices: mean + basis combination + pose corrective."""
    base = space.reconstruct(alpha)
    return base + bundle.corrective_offsets(pose)


# --- bundle directory serialization ------------------------------------------

def save_bundle(bundle: TemplateBundle, directory) -> None:
    """Write mesh.obj, skeleton.json, weights.bin, regressor.bin[, corrective.bin]."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    kio.save_mesh(bundle.mesh, directory / "mesh.obj")
    skeleton = {
        "parents": bundle.parents.tolist(),
        "joints": bundle.rest_joints().tolist(),
    }
    (directory / "skeleton.json").write_text(json.dumps(skeleton, indent=1))
    kio.save_matrix(directory / "weights.bin", WEIGHTS_MAGIC, bundle.skin_weights)
    kio.save_matrix(directory / "regressor.bin", WEIGHTS_MAGIC, bundle.joint_regressor)
    if bundle.pose_corrective is not None:
        kio.save_matrix(directory / "corrective.bin", CORRECTIVE_MAGIC, bundle.pose_corrective)


def load_bundle(directory) -> TemplateBundle:
    directory = Path(directory)
    mesh = kio.load_mesh(directory / "mesh.obj")
    skeleton = json.loads((directory / "skeleton.json").read_text())
    weights = kio.load_matrix(directory / "weights.bin", WEIGHTS_MAGIC)
    regressor = kio.load_matrix(directory / "regressor.bin", WEIGHTS_MAGIC)
    corrective = None
    if (directory / "corrective.bin").exists():
        corrective = kio.load_matrix(directory / "corrective.bin", CORRECTIVE_MAGIC)
    return TemplateBundle(mesh, skeleton["parents"], weights, regressor, corrective)
