"""Synthetic ground-truth shape family, scan synthesis, and evaluation metrics.

The family stands in for a real scan corpus: a capsule-limbed humanoid-ish
template with a 16-joint rig, a set of orthonormal smooth displacement modes
(the linear ground truth), and a few nonlinear bump modes outside the linear
span. The bumps, together with more ground-truth modes than the pipeline's
PCA keeps, create the expressivity gap the learned deformer is meant to close.
Scans are area-weighted surface samples of posed shapes with optional noise
and geodesic holes; every scan ships with its T-pose registration for
evaluation only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from . import io as kio
from .mesh import MeshError, ScanCloud, TriMesh, face_areas, laplacian_eigenbasis
from .primitives import fibonacci_sphere, icosphere
from .rig import Pose, TemplateBundle, load_bundle, save_bundle, skin
from .shape_space import ShapeSpace, sample_space

FAMILY_MAGIC = b"BLFM"


@dataclass
class FamilyConfig:
    n_vertices: int = 1002         # fibonacci template: 2*n - 4 = 2000 faces
    n_modes: int = 15              # ground-truth linear modes
    mode_scale_max: float = 0.05   # m, std of the strongest mode
    mode_scale_min: float = 0.004  # m, std of the weakest mode
    n_bumps: int = 3               # nonlinear detail modes outside the span
    bump_scale: float = 0.012      # m
    pose_jitter: float = 0.06      # rad, per-joint std around the A-pose
    trans_jitter: float = 0.01     # m, root translation std
    seed: int = 0


@dataclass
class SyntheticFamily:
    """Oracle generator for registrations and scans."""

    bundle: TemplateBundle
    modes: np.ndarray        # (m_gt, 3N) orthonormal rows
    mode_scales: np.ndarray  # (m_gt,) std in meters
    bump_fields: np.ndarray  # (n_bumps, 3N) orthonormal, orthogonal to modes
    bump_weights: np.ndarray  # (n_bumps, m_gt) mixing vectors for the nonlinearity
    bump_phases: np.ndarray  # (n_bumps,) offsets breaking odd symmetry
    bump_scale: float
    mean_pose_theta: np.ndarray  # (K, 3) nominal A-pose
    pose_jitter: float
    trans_jitter: float
    seed: int = 0

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    def canonical_shape(self, alpha: np.ndarray) -> np.ndarray:
        """T-pose ground-truth vertices for mode coefficients alpha.

        Linear part plus bounded nonlinear bumps: the bump activation is a
        tanh of a mixed, standardized coefficient vector, which no linear
        basis can represent exactly.
        """
        alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
        if alpha.size != self.n_modes:
            raise MeshError(f"alpha must have {self.n_modes} entries")
        flat = self.bundle.mesh.vertices.reshape(-1) + alpha @ self.modes
        z = alpha / self.mode_scales
        for b in range(len(self.bump_fields)):
            arg = self.bump_weights[b] @ z / np.sqrt(self.n_modes) + self.bump_phases[b]
            act = np.tanh(arg) - np.tanh(self.bump_phases[b])  # zero at the mean shape
            flat = flat + (self.bump_scale * act) * self.bump_fields[b]
        return flat.reshape(-1, 3)

    def sample_alpha(self, rng: np.random.Generator) -> np.ndarray:
        return np.clip(rng.standard_normal(self.n_modes), -3.0, 3.0) * self.mode_scales

    def sample_pose(self, rng: np.random.Generator) -> Pose:
        theta = self.mean_pose_theta + self.pose_jitter * rng.standard_normal(
            self.mean_pose_theta.shape
        )
        trans = self.trans_jitter * rng.standard_normal(3)
        return Pose(theta, trans)

    def nominal_pose(self) -> Pose:
        return Pose(self.mean_pose_theta.copy(), np.zeros(3))


# --- template construction ----------------------------------------------------

_LIMBS = {
    # name: (direction, angular half-width cos, length in m)
    "head": ((0.0, 0.0, 1.0), 0.86, 0.22),
    "arm_l": ((1.0, 0.0, 0.35), 0.92, 0.52),
    "arm_r": ((-1.0, 0.0, 0.35), 0.92, 0.52),
    "leg_l": ((0.30, 0.0, -1.0), 0.90, 0.62),
    "leg_r": ((-0.30, 0.0, -1.0), 0.90, 0.62),
}

_JOINT_SPECS = [
    # name, parent, (limb, fraction along its axis) or explicit torso point
    ("root", -1, ("torso", (0.0, 0.0, -0.02))),
    ("spine", 0, ("torso", (0.0, 0.0, 0.10))),
    ("chest", 1, ("torso", (0.0, 0.0, 0.22))),
    ("head", 2, ("head", 0.55)),
    ("shoulder_l", 2, ("arm_l", 0.25)),
    ("elbow_l", 4, ("arm_l", 0.60)),
    ("wrist_l", 5, ("arm_l", 0.92)),
    ("shoulder_r", 2, ("arm_r", 0.25)),
    ("elbow_r", 7, ("arm_r", 0.60)),
    ("wrist_r", 8, ("arm_r", 0.92)),
    ("hip_l", 0, ("leg_l", 0.18)),
    ("knee_l", 10, ("leg_l", 0.58)),
    ("ankle_l", 11, ("leg_l", 0.95)),
    ("hip_r", 0, ("leg_r", 0.18)),
    ("knee_r", 13, ("leg_r", 0.58)),
    ("ankle_r", 14, ("leg_r", 0.95)),
]


def _blob_template(n_vertices: int) -> TriMesh:
    """Humanoid-ish closed surface: ellipsoid torso with capsule-like limbs."""
    if n_vertices in (42, 162, 642, 2562):
        base = icosphere({42: 1, 162: 2, 642: 3, 2562: 4}[n_vertices])
    else:
        base = fibonacci_sphere(n_vertices)
    v = base.vertices.copy()
    dirs = v / np.linalg.norm(v, axis=1, keepdims=True)
    out = v * np.array([0.16, 0.115, 0.30])  # torso ellipsoid
    for direction, cos_width, length in _LIMBS.values():
        d = np.asarray(direction, dtype=np.float64)
        d /= np.linalg.norm(d)
        t = (dirs @ d - cos_width) / (1.0 - cos_width)
        bump = np.clip(t, 0.0, 1.0) ** 2
        out = out + (length * bump)[:, None] * d
    return TriMesh(out, base.faces)


def _limb_point(limb, frac) -> np.ndarray:
    if limb == "torso":
        return np.asarray(frac, dtype=np.float64)
    direction, cos_width, length = _LIMBS[limb]
    d = np.asarray(direction, dtype=np.float64)
    d /= np.linalg.norm(d)
    return d * (0.12 + length * float(frac))  # from just inside the torso outward


def _build_rig(mesh: TriMesh) -> TemplateBundle:
    """Joint regressor from nearest vertices, skin weights from bone distance."""
    joints = np.stack([_limb_point(spec[2][0], spec[2][1]) for spec in _JOINT_SPECS])
    parents = np.array([spec[1] for spec in _JOINT_SPECS], dtype=np.int64)
    n, k = mesh.n_vertices, len(joints)

    tree = cKDTree(mesh.vertices)
    regressor = np.zeros((k, n))
    n_near = min(12, n)
    for j in range(k):
        dist, idx = tree.query(joints[j], k=n_near)
        w = np.exp(-(dist**2) / (2 * 0.04**2)) + 1e-9
        regressor[j, idx] = w / w.sum()
    rest = regressor @ mesh.vertices

    # bones: joint j owns the segment from itself to the mean of its children
    # (leaves extend along their own parent direction)
    weights = np.zeros((n, k))
    tau = 0.085
    for j in range(k):
        children = np.nonzero(parents == j)[0]
        if len(children):
            tip = rest[children].mean(axis=0)
        else:
            axis = rest[j] - rest[parents[j]]
            tip = rest[j] + axis * 0.8
        weights[:, j] = np.exp(-(_point_segment_dist(mesh.vertices, rest[j], tip) ** 2) / tau**2)
    # keep the 4 strongest joints per vertex for locality
    order = np.argsort(weights, axis=1)
    for row, cut in zip(weights, order[:, :-4]):
        row[cut] = 0.0
    weights /= weights.sum(axis=1, keepdims=True)

    corrective = np.zeros((3 * n, 3 * k))
    return TemplateBundle(mesh, parents, weights, regressor, corrective)


def _point_segment_dist(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = max(float(ab @ ab), 1e-12)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def _a_pose(parents_len: int) -> np.ndarray:
    theta = np.zeros((parents_len, 3))
    names = [spec[0] for spec in _JOINT_SPECS]
    theta[names.index("shoulder_l")] = (0.0, 0.55, 0.0)   # lower left arm
    theta[names.index("shoulder_r")] = (0.0, -0.55, 0.0)  # lower right arm
    theta[names.index("elbow_l")] = (0.0, 0.12, 0.0)
    theta[names.index("elbow_r")] = (0.0, -0.12, 0.0)
    return theta


def make_family(config: Optional[FamilyConfig] = None, template: Optional[TriMesh] = None) -> SyntheticFamily:
    """Build the oracle: rigged blob template + orthonormal smooth modes.

    Modes are random mixtures of low-frequency Laplacian eigenfields,
    orthonormalized together with the bump fields so the nonlinear detail is
    provably outside the linear span.
    """
    config = config or FamilyConfig()
    rng = np.random.default_rng(config.seed)
    mesh = template if template is not None else _blob_template(config.n_vertices)
    bundle = _build_rig(mesh)
    n = mesh.n_vertices

    n_eig = min(24, n - 1)
    _, phi = laplacian_eigenbasis(mesh, n_eig=n_eig)
    phi = phi[:, 1:]  # drop the constant mode

    total = config.n_modes + config.n_bumps
    fields = np.zeros((total, 3 * n))
    coeff = rng.standard_normal((total, phi.shape[1], 3))
    for i in range(total):
        fields[i] = (phi @ coeff[i]).reshape(-1)
    # orthonormalize: modes first, bump fields forced orthogonal to them
    q, _ = np.linalg.qr(fields.T)
    fields = q.T[:total]

    scales = np.geomspace(config.mode_scale_max, config.mode_scale_min, config.n_modes)
    bump_weights = rng.standard_normal((config.n_bumps, config.n_modes))
    bump_phases = rng.uniform(-0.8, 0.8, config.n_bumps)

    family = SyntheticFamily(
        bundle=bundle,
        modes=fields[: config.n_modes],
        mode_scales=scales,
        bump_fields=fields[config.n_modes :],
        bump_weights=bump_weights,
        bump_phases=bump_phases,
        bump_scale=config.bump_scale,
        mean_pose_theta=_a_pose(bundle.n_joints),
        pose_jitter=config.pose_jitter,
        trans_jitter=config.trans_jitter,
        seed=config.seed,
    )
    _check_family(family)
    return family


def _check_family(family: SyntheticFamily) -> None:
    gram = family.modes @ family.modes.T
    if np.abs(gram - np.eye(family.n_modes)).max() > 1e-10:
        raise MeshError("ground-truth modes are not orthonormal")
    cross = family.bump_fields @ family.modes.T
    if np.abs(cross).max() > 1e-10:
        raise MeshError("bump fields leak into the linear span")
    mesh = family.bundle.mesh
    rest_normals = mesh.face_normals()
    for sign in (-3.0, 3.0):
        extreme = family.canonical_shape(sign * family.mode_scales)
        flipped = np.einsum(
            "ij,ij->i", mesh.face_normals(vertices=extreme), rest_normals
        )
        if (flipped <= 0.0).any():
            raise MeshError("family modes flip faces at +-3 sigma")


def make_scan(
    family: SyntheticFamily,
    alpha: np.ndarray,
    pose: Pose,
    density: int = 3000,
    noise_std: float = 0.002,
    hole_spec: Optional[Sequence[tuple[int, float]]] = None,
    seed: int = 0,
) -> tuple[ScanCloud, TriMesh]:
    """Synthesize one scan and its ground-truth T-pose registration.

    Area-weighted surface samples of the posed shape, isotropic Gaussian noise
    (meters), and optional holes given as (center vertex id, geodesic radius)
    patches. Rejects hole specs that would remove more than half the points.
    """
    if density < 500:
        raise MeshError("scan density must be >= 500 points")
    rng = np.random.default_rng(seed)
    canonical = family.canonical_shape(alpha)
    posed = skin(family.bundle, canonical, pose)
    mesh = family.bundle.mesh

    areas = face_areas(posed, mesh.faces)
    probs = areas / areas.sum()
    face_idx = rng.choice(len(probs), size=density, p=probs)
    r1, r2 = rng.random(density), rng.random(density)
    s1 = np.sqrt(r1)
    bary = np.stack([1 - s1, s1 * (1 - r2), s1 * r2], axis=1)
    tri = posed[mesh.faces[face_idx]]
    pts = np.einsum("fc,fcd->fd", bary, tri)
    normals = mesh.face_normals(vertices=posed)[face_idx]

    if hole_spec:
        geo = _geodesic_distances(mesh, [c for c, _ in hole_spec])
        keep = np.ones(density, dtype=bool)
        for row, (_, radius) in zip(geo, hole_spec):
            vertex_inside = row < radius
            keep &= ~vertex_inside[mesh.faces[face_idx]].any(axis=1)
        if keep.sum() < 0.5 * density:
            raise MeshError("hole spec removes more than 50% of the scan")
        pts, normals, face_idx = pts[keep], normals[keep], face_idx[keep]

    pts = pts + noise_std * rng.standard_normal(pts.shape)
    cloud = ScanCloud(pts, normals=normals, provenance="synthetic")
    registration = TriMesh(canonical, mesh.faces, validate=False)
    return cloud, registration


def _geodesic_distances(mesh: TriMesh, sources: Sequence[int]) -> np.ndarray:
    e = mesh.edges()
    w = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    n = mesh.n_vertices
    graph = sp.coo_matrix((w, (e[:, 0], e[:, 1])), shape=(n, n))
    return dijkstra(graph, directed=False, indices=list(sources))


# --- metrics -------------------------------------------------------------------

def v2v(pred: TriMesh, gt: TriMesh) -> float:
    """Mean vertex-to-vertex distance (meters) over corresponding vertices."""
    if pred.vertices.shape != gt.vertices.shape or not np.array_equal(pred.faces, gt.faces):
        raise MeshError("v2v requires identical topology")
    return float(np.linalg.norm(pred.vertices - gt.vertices, axis=1).mean())


def v2p(pred: TriMesh, gt: TriMesh) -> float:
    """Mean unsigned vertex-to-plane distance at the closest surface points."""
    q, face_idx, bary = closest_points(gt, pred.vertices)
    vn = gt.vertex_normals()
    normal = np.einsum("fc,fcd->fd", bary, vn[gt.faces[face_idx]])
    normal /= np.maximum(np.linalg.norm(normal, axis=1, keepdims=True), 1e-300)
    return float(np.abs(np.einsum("ij,ij->i", normal, pred.vertices - q)).mean())


def closest_points(mesh: TriMesh, queries: np.ndarray):
    """Exact closest points on a triangle mesh for a batch of queries.

    Candidate triangles are pruned with a vertex kd-tree: any triangle owning
    the closest point has a vertex within (nearest-vertex distance + longest
    edge), so the pruned search is still exact. Returns (points, face indices,
    barycentric coordinates).
    """
    queries = np.asarray(queries, dtype=np.float64)
    tri = mesh.vertices[mesh.faces]
    edge_max = float(
        np.linalg.norm(
            np.stack([tri[:, 0] - tri[:, 1], tri[:, 1] - tri[:, 2], tri[:, 2] - tri[:, 0]]),
            axis=2,
        ).max()
    )
    referenced = np.unique(mesh.faces)
    tree = cKDTree(mesh.vertices[referenced])
    d_vert, _ = tree.query(queries)

    incident = [[] for _ in range(mesh.n_vertices)]
    for f, (a, b, c) in enumerate(mesh.faces):
        incident[a].append(f)
        incident[b].append(f)
        incident[c].append(f)

    out_q = np.empty_like(queries)
    out_f = np.empty(len(queries), dtype=np.int64)
    out_b = np.empty((len(queries), 3))
    for i, (p, dv) in enumerate(zip(queries, d_vert)):
        near = tree.query_ball_point(p, dv + edge_max + 1e-12)
        cand = sorted({f for v in near for f in incident[referenced[v]]})
        pts, bary = _point_triangle_closest(p, tri[cand])
        d2 = ((pts - p) ** 2).sum(axis=1)
        best = int(np.argmin(d2))
        out_q[i] = pts[best]
        out_f[i] = cand[best]
        out_b[i] = bary[best]
    return out_q, out_f, out_b


def _point_triangle_closest(p: np.ndarray, tri: np.ndarray):
    """Closest point of p on each triangle (Ericson's region walk), vectorized.

    Regions are tested in the canonical order with first-match-wins masks, so
    the result is exact for every non-degenerate triangle.
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    n = len(tri)
    bary = np.zeros((n, 3))
    done = np.zeros(n, dtype=bool)

    m = (d1 <= 0) & (d2 <= 0) & ~done  # vertex A
    bary[m] = (1.0, 0.0, 0.0)
    done |= m
    m = (d3 >= 0) & (d4 <= d3) & ~done  # vertex B
    bary[m] = (0.0, 1.0, 0.0)
    done |= m
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0) & ~done  # edge AB
    v = d1[m] / np.maximum(d1[m] - d3[m], 1e-300)
    bary[m, 0], bary[m, 1] = 1.0 - v, v
    done |= m
    m = (d6 >= 0) & (d5 <= d6) & ~done  # vertex C
    bary[m] = (0.0, 0.0, 1.0)
    done |= m
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0) & ~done  # edge AC
    w = d2[m] / np.maximum(d2[m] - d6[m], 1e-300)
    bary[m, 0], bary[m, 2] = 1.0 - w, w
    done |= m
    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0) & ~done  # edge BC
    w = (d4[m] - d3[m]) / np.maximum((d4[m] - d3[m]) + (d5[m] - d6[m]), 1e-300)
    bary[m, 1], bary[m, 2] = 1.0 - w, w
    done |= m
    m = ~done  # interior
    denom = np.maximum(va[m] + vb[m] + vc[m], 1e-300)
    v, w = vb[m] / denom, vc[m] / denom
    bary[m, 0], bary[m, 1], bary[m, 2] = 1.0 - v - w, v, w

    pts = bary[:, 0, None] * a + bary[:, 1, None] * b + bary[:, 2, None] * c
    return pts, bary


def diversity_table(spaces: Sequence[ShapeSpace], samples_per_space: int = 500,
                    seed: int = 0) -> np.ndarray:
    """Cross-space diversity/similarity matrix over farthest samples.

    Diagonal (i, i): mean distance of each sample to its nearest *other*
    sample in the same space (higher = more diverse). Off-diagonal (i, j):
    mean over samples of space i of the distance to the nearest sample of
    space j (lower = more similar spaces). Distances are mean vertex-to-vertex.
    """
    n0 = spaces[0].n_vertices
    for s in spaces:
        if s.n_vertices != n0:
            raise MeshError("diversity table requires shared topology")
    samples = [
        sample_space(s, "farthest", samples_per_space, seed=seed + i)
        for i, s in enumerate(spaces)
    ]
    m = len(spaces)
    table = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            table[i, j] = _mean_nearest(samples[i], samples[j], exclude_self=(i == j))
    return table


def _mean_nearest(a: np.ndarray, b: np.ndarray, exclude_self: bool) -> float:
    flat_a = a.reshape(len(a), -1, 3)
    flat_b = b.reshape(len(b), -1, 3)
    total = 0.0
    for i, pa in enumerate(flat_a):
        d = np.linalg.norm(flat_b - pa, axis=2).mean(axis=1)
        if exclude_self:
            d[i] = np.inf
        total += float(d.min())
    return total / len(flat_a)


@dataclass
class EvalReport:
    """Held-out evaluation: per-shape errors plus aggregates and histogram."""

    v2v_per_shape: list
    v2p_per_shape: list
    histogram_bins: list = field(default_factory=list)
    histogram_counts: list = field(default_factory=list)

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[TriMesh, TriMesh]], n_bins: int = 20,
                   with_v2p: bool = True) -> "EvalReport":
        vv = [v2v(p, g) for p, g in pairs]
        vp = [v2p(p, g) for p, g in pairs] if with_v2p else []
        edges = np.histogram_bin_edges(vv, bins=n_bins, range=(0.0, max(vv) or 1.0))
        counts, _ = np.histogram(vv, bins=edges)
        return cls(vv, vp, edges.tolist(), counts.tolist())

    @property
    def v2v_mean(self) -> float:
        return float(np.mean(self.v2v_per_shape))

    @property
    def v2v_median(self) -> float:
        return float(np.median(self.v2v_per_shape))

    def to_json(self) -> dict:
        out = {
            "v2v_per_shape": self.v2v_per_shape,
            "v2v_mean": self.v2v_mean,
            "v2v_median": self.v2v_median,
            "histogram_bins": self.histogram_bins,
            "histogram_counts": self.histogram_counts,
        }
        if self.v2p_per_shape:
            out["v2p_per_shape"] = self.v2p_per_shape
            out["v2p_mean"] = float(np.mean(self.v2p_per_shape))
            out["v2p_median"] = float(np.median(self.v2p_per_shape))
        return out


# --- family serialization ------------------------------------------------------

def save_family(family: SyntheticFamily, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_bundle(family.bundle, directory / "bundle")
    kio.save_arrays(
        directory / "modes.bin",
        FAMILY_MAGIC,
        {
            "modes": family.modes,
            "mode_scales": family.mode_scales,
            "bump_fields": family.bump_fields,
            "bump_weights": family.bump_weights,
            "bump_phases": family.bump_phases,
            "mean_pose_theta": family.mean_pose_theta,
        },
    )
    meta = {
        "bump_scale": family.bump_scale,
        "pose_jitter": family.pose_jitter,
        "trans_jitter": family.trans_jitter,
        "seed": family.seed,
    }
    (directory / "family.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_family(directory) -> SyntheticFamily:
    directory = Path(directory)
    bundle = load_bundle(directory / "bundle")
    arrays = kio.load_arrays(directory / "modes.bin", FAMILY_MAGIC)
    meta = json.loads((directory / "family.json").read_text())
    return SyntheticFamily(
        bundle=bundle,
        modes=arrays["modes"],
        mode_scales=arrays["mode_scales"],
        bump_fields=arrays["bump_fields"],
        bump_weights=arrays["bump_weights"],
        bump_phases=arrays["bump_phases"],
        bump_scale=float(meta["bump_scale"]),
        mean_pose_theta=arrays["mean_pose_theta"],
        pose_jitter=float(meta["pose_jitter"]),
        trans_jitter=float(meta["trans_jitter"]),
        seed=int(meta["seed"]),
    )
