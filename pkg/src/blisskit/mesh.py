"""Triangle meshes, scan clouds, and the differential operators on them.

The central objects are :class:`TriMesh` (fixed-topology triangle surface),
:class:`ScanCloud` (unstructured oriented points) and :class:`DiffOps`, which
bundles the per-triangle gradient operator, the cotangent Laplacian, triangle
area weights and a prefactorized pinned solver. Together these support
deformation-gradient (Jacobian) fields, the Poisson vertex solve that
integrates them, the exact adjoint of that solve, and Wave Kernel Signature
descriptors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

MIN_FACE_AREA = 1e-12  # m^2; below this a triangle counts as degenerate

# cot(175 deg) .. cot(5 deg): slivers get clamped into this range
_COT_MIN = 1.0 / np.tan(np.deg2rad(175.0))
_COT_MAX = 1.0 / np.tan(np.deg2rad(5.0))


class MeshError(ValueError):
    """Raised for invalid mesh/cloud construction or operator misuse."""


class TriMesh:
    """Indexed triangle surface with immutable topology.

    vertices: (N, 3) float64 positions in meters.
    faces: (F, 3) int64 vertex indices, consistently oriented.
    normals: optional (N, 3) per-vertex normals.
    """

    def __init__(self, vertices, faces, normals=None, validate: bool = True):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        self.normals = None if normals is None else np.asarray(normals, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError(f"vertices must be (N, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError(f"faces must be (F, 3), got {self.faces.shape}")
        if validate:
            self._validate()
        for arr in (self.vertices, self.faces):
            arr.setflags(write=False)

    def _validate(self) -> None:
        n = len(self.vertices)
        if not np.isfinite(self.vertices).all():
            raise MeshError("non-finite vertex coordinates")
        if self.faces.min(initial=0) < 0 or self.faces.max(initial=-1) >= n:
            raise MeshError(f"face indices must lie in [0, {n})")
        areas = face_areas(self.vertices, self.faces)
        bad = np.nonzero(areas <= MIN_FACE_AREA)[0]
        if bad.size:
            raise MeshError(f"degenerate face {bad[0]} (area {areas[bad[0]]:.3e} m^2)")
        # consistent orientation: no directed edge may appear twice
        edges = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        codes = edges[:, 0] * n + edges[:, 1]
        if len(np.unique(codes)) != len(codes):
            raise MeshError("inconsistent orientation: repeated directed edge")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriMesh":
        """Same topology, new vertex positions."""
        return TriMesh(vertices, self.faces, validate=False)

    def face_normals(self, vertices: Optional[np.ndarray] = None) -> np.ndarray:
        v = self.vertices if vertices is None else vertices
        tri = v[self.faces]
        nrm = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return nrm / np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-300)

    def vertex_normals(self, vertices: Optional[np.ndarray] = None) -> np.ndarray:
        """Area-weighted per-vertex normals (unit length)."""
        v = self.vertices if vertices is None else vertices
        tri = v[self.faces]
        fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])  # 2*area*normal
        out = np.zeros_like(v)
        for c in range(3):
            np.add.at(out, self.faces[:, c], fn)
        return out / np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-300)

    def edges(self) -> np.ndarray:
        """Unique undirected edges, (E, 2) with i < j."""
        e = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def is_connected(self) -> bool:
        e = self.edges()
        n = self.n_vertices
        adj = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        return connected_components(adj, directed=False, return_labels=False) == 1


class ScanCloud:
    """Unregistered raw scan: oriented point set without topology.

    points: (M, 3) float64, M >= 100; normals optional (M, 3).
    provenance marks where the cloud came from ("synthetic" / "imported").
    """

    MIN_POINTS = 100

    def __init__(self, points, normals=None, provenance: str = "imported"):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        self.normals = None if normals is None else np.asarray(normals, dtype=np.float64)
        self.provenance = provenance
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise MeshError(f"points must be (M, 3), got {self.points.shape}")
        if len(self.points) < self.MIN_POINTS:
            raise MeshError(f"scan needs >= {self.MIN_POINTS} points, got {len(self.points)}")
        if not np.isfinite(self.points).all():
            raise MeshError("non-finite scan coordinates")
        if self.normals is not None and self.normals.shape != self.points.shape:
            raise MeshError("normals shape must match points")
        self.points.setflags(write=False)

    def __len__(self) -> int:
        return len(self.points)


def scan_points(scan) -> np.ndarray:
    """Accept a ScanCloud or a raw (M, 3) array (handy for tiny test clouds)."""
    if isinstance(scan, ScanCloud):
        return scan.points
    pts = np.asarray(scan, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise MeshError(f"expected (M, 3) points, got {pts.shape}")
    return pts


@dataclass
class JacobianField:
    """Per-triangle 3x3 deformation gradients over a fixed topology."""

    matrices: np.ndarray  # (F, 3, 3)

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=np.float64)
        if self.matrices.ndim != 3 or self.matrices.shape[1:] != (3, 3):
            raise MeshError(f"jacobians must be (F, 3, 3), got {self.matrices.shape}")
        if not np.isfinite(self.matrices).all():
            raise MeshError("non-finite jacobian entries")

    def __len__(self) -> int:
        return len(self.matrices)

    def as_nine_vectors(self) -> np.ndarray:
        """Row-major (F, 9) view of the per-triangle matrices."""
        return self.matrices.reshape(len(self.matrices), 9)


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


class SurfaceSampler:
    """Fixed area-weighted barycentric samples of a triangulated surface.

    The sample positions are linear in the vertex positions, so objectives on
    the samples differentiate exactly through vjp(). Face choice and
    barycentric coordinates are drawn once (seeded) and stay fixed.
    """

    def __init__(self, vertices: np.ndarray, faces: np.ndarray, count: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        areas = face_areas(vertices, faces)
        self.faces = faces
        self.face_idx = rng.choice(len(faces), size=count, p=areas / areas.sum())
        r1, r2 = rng.random(count), rng.random(count)
        s1 = np.sqrt(r1)
        self.bary = np.stack([1.0 - s1, s1 * (1.0 - r2), s1 * r2], axis=1)

    def __len__(self) -> int:
        return len(self.face_idx)

    def positions(self, vertices: np.ndarray) -> np.ndarray:
        return np.einsum("sc,scd->sd", self.bary, vertices[self.faces[self.face_idx]])

    def vjp(self, grad_samples: np.ndarray, n_vertices: int) -> np.ndarray:
        """Pull a per-sample gradient back to the vertices."""
        out = np.zeros((n_vertices, 3))
        corners = self.faces[self.face_idx]
        for c in range(3):
            np.add.at(out, corners[:, c], self.bary[:, c, None] * grad_samples)
        return out


@dataclass
class DiffOps:
    """Differential operators of one mesh, reusable across solves.

    grad maps N vertex positions to F stacked per-triangle gradient blocks
    (3F x N sparse); laplacian is the cotangent Laplacian (symmetric, PSD,
    zero row sums); face_area holds triangle areas; pin is the vertex whose
    row/column is replaced by identity to remove the translation null space.
    The LU factorization of the pinned Laplacian is computed once and shared
    by every solve on this topology (read-only, thread-safe).
    """

    mesh: TriMesh
    grad: sp.csr_matrix
    laplacian: sp.csr_matrix
    face_area: np.ndarray
    vertex_area: np.ndarray
    pin: int
    _pin_col: np.ndarray = field(repr=False)
    _solver: object = field(repr=False)

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices

    @property
    def n_faces(self) -> int:
        return self.mesh.n_faces

    def solve_pinned(self, rhs: np.ndarray) -> np.ndarray:
        """Solve the pinned Laplacian system for one or more right-hand sides."""
        return self._solver.solve(rhs)


def _triangle_frames(vertices: np.ndarray, faces: np.ndarray):
    """Edge vectors, unit normals and areas per face."""
    tri = vertices[faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    nrm = np.cross(e1, e2)
    dbl = np.linalg.norm(nrm, axis=1)
    unit = nrm / np.maximum(dbl, 1e-300)[:, None]
    return e1, e2, unit, 0.5 * dbl


def build_diff_ops(mesh: TriMesh) -> DiffOps:
    """Assemble gradient, cotangent Laplacian, masses and the pinned solver.

    The pin is the lowest vertex index; its Laplacian row and column are
    replaced by identity so the factorization is nonsingular.
    """
    v, f = mesh.vertices, mesh.faces
    n, nf = len(v), len(f)

    areas = face_areas(v, f)
    bad = np.nonzero(areas <= MIN_FACE_AREA)[0]
    if bad.size:
        raise MeshError(f"degenerate face {bad[0]} (area {areas[bad[0]]:.3e} m^2)")

    e1, e2, normal, area = _triangle_frames(v, f)

    # Gradient of the linear hat functions: for corner i with opposite edge o_i,
    # grad(phi_i) = (normal x o_i) / (2 * area).
    tri = v[f]
    opp = np.stack([tri[:, 2] - tri[:, 1], tri[:, 0] - tri[:, 2], tri[:, 1] - tri[:, 0]], axis=1)
    gvec = np.cross(normal[:, None, :], opp) / (2.0 * area)[:, None, None]  # (F, 3 corners, 3)

    r_idx = []
    c_idx = []
    vals = []
    for corner in range(3):
        for d in range(3):
            r_idx.append(3 * np.arange(nf) + d)
            c_idx.append(f[:, corner])
            vals.append(gvec[:, corner, d])
    grad = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(r_idx), np.concatenate(c_idx))),
        shape=(3 * nf, n),
    ).tocsr()

    # Cotangent Laplacian with sliver clamping.
    lap = _cot_laplacian(v, f, n)

    vertex_area = np.zeros(n)
    for corner in range(3):
        np.add.at(vertex_area, f[:, corner], area / 3.0)

    pin = 0
    pin_col = np.asarray(lap[:, pin].todense()).ravel()
    lap_pin = lap.tolil(copy=True)
    lap_pin[pin, :] = 0.0
    lap_pin[:, pin] = 0.0
    lap_pin[pin, pin] = 1.0
    solver = splu(lap_pin.tocsc())

    return DiffOps(
        mesh=mesh,
        grad=grad,
        laplacian=lap,
        face_area=area,
        vertex_area=vertex_area,
        pin=pin,
        _pin_col=pin_col,
        _solver=solver,
    )


def _cot_laplacian(v: np.ndarray, f: np.ndarray, n: int) -> sp.csr_matrix:
    tri = v[f]
    cots = []
    for corner in range(3):
        a = tri[:, (corner + 1) % 3] - tri[:, corner]
        b = tri[:, (corner + 2) % 3] - tri[:, corner]
        cos = np.einsum("ij,ij->i", a, b)
        sin = np.linalg.norm(np.cross(a, b), axis=1)
        cots.append(np.clip(cos / np.maximum(sin, 1e-300), _COT_MIN, _COT_MAX))

    rows, cols, vals = [], [], []
    for corner in range(3):
        i = f[:, (corner + 1) % 3]
        j = f[:, (corner + 2) % 3]
        w = 0.5 * cots[corner]
        rows.extend([i, j, i, j])
        cols.extend([j, i, i, j])
        vals.extend([-w, -w, w, w])
    lap = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return lap.tocsr()


def compute_jacobians(ops: DiffOps, source: TriMesh, target_vertices: np.ndarray) -> JacobianField:
    """Deformation gradient of the map source -> target on every triangle.

    The 2D tangential gradient is completed with the source unit normal
    mapped to the target unit normal, so each Jacobian is a full 3x3 matrix:
    J e1 = e1', J e2 = e2', J n = n'.
    """
    target_vertices = np.asarray(target_vertices, dtype=np.float64)
    if target_vertices.shape != source.vertices.shape:
        raise MeshError(
            f"target vertices {target_vertices.shape} do not match source {source.vertices.shape}"
        )
    if source.n_faces != ops.n_faces:
        raise MeshError("ops and source disagree on face count")

    e1, e2, n_src, _ = _triangle_frames(source.vertices, source.faces)
    t1, t2, n_tgt, _ = _triangle_frames(target_vertices, source.faces)

    src = np.stack([e1, e2, n_src], axis=2)  # columns
    tgt = np.stack([t1, t2, n_tgt], axis=2)
    # J = tgt @ src^-1, solved as src^T X = tgt^T
    jac = np.linalg.solve(src.transpose(0, 2, 1), tgt.transpose(0, 2, 1)).transpose(0, 2, 1)
    return JacobianField(jac)


def poisson_solve(ops: DiffOps, jac: JacobianField, anchor: np.ndarray) -> np.ndarray:
    """Vertex positions whose gradients best match a prescribed Jacobian field.

    Minimizes sum_f area_f * ||grad_f(X) - J_f||_F^2 over vertex positions X,
    then places the pin vertex at `anchor`. Linear in `jac`, which is what
    makes training gradients through this layer exact.
    """
    if len(jac) != ops.n_faces:
        raise MeshError(f"jacobian count {len(jac)} != face count {ops.n_faces}")
    anchor = np.asarray(anchor, dtype=np.float64).reshape(3)

    # Gradient blocks store d(coord_i)/d(x_d) at [d, i]; prescribed J is [i, d].
    k = jac.matrices.transpose(0, 2, 1).reshape(3 * ops.n_faces, 3)
    area3 = np.repeat(ops.face_area, 3)
    rhs = ops.grad.T @ (area3[:, None] * k)

    rhs -= np.outer(ops._pin_col, anchor)
    rhs[ops.pin] = anchor
    return ops.solve_pinned(rhs)


def poisson_solve_adjoint(ops: DiffOps, grad_wrt_vertices: np.ndarray) -> JacobianField:
    """Pull a vertex-space gradient back through poisson_solve to the Jacobians.

    Given dLoss/dX for X = poisson_solve(ops, J, anchor), returns dLoss/dJ.
    This is the transpose of the forward linear chain: an adjoint solve with
    the pinned Laplacian followed by the area-weighted gradient operator.
    """
    g = np.asarray(grad_wrt_vertices, dtype=np.float64)
    if g.shape != (ops.n_vertices, 3):
        raise MeshError(f"vertex gradient must be ({ops.n_vertices}, 3), got {g.shape}")
    y = ops.solve_pinned(g)
    y[ops.pin] = 0.0  # the pin row of the rhs is the anchor, not a function of J
    k_grad = np.repeat(ops.face_area, 3)[:, None] * (ops.grad @ y)
    return JacobianField(k_grad.reshape(ops.n_faces, 3, 3).transpose(0, 2, 1))


def laplacian_eigenbasis(mesh: TriMesh, n_eig: int, ops: Optional[DiffOps] = None):
    """Lowest eigenpairs of L phi = lambda A phi with lumped vertex areas.

    Returns (eigenvalues, eigenvectors) with A-orthonormal columns; requires
    a connected mesh (the eigensolve is otherwise ambiguous).
    """
    if not mesh.is_connected():
        raise MeshError("mesh is disconnected; spectral descriptors undefined")
    if ops is None:
        ops = build_diff_ops(mesh)
    n = mesh.n_vertices
    n_eig = min(n_eig, n)

    if n <= 3000:
        import scipy.linalg as la

        lam, phi = la.eigh(
            ops.laplacian.toarray(),
            np.diag(ops.vertex_area),
            subset_by_index=[0, n_eig - 1],
        )
    else:
        from scipy.sparse.linalg import eigsh

        mass = sp.diags(ops.vertex_area)
        lam, phi = eigsh(ops.laplacian, k=n_eig, M=mass, sigma=-1e-2, which="LM")
        order = np.argsort(lam)
        lam, phi = lam[order], phi[:, order]
    return lam, phi


def wave_kernel_signature(
    mesh: TriMesh,
    n_signatures: int = 50,
    n_eig: int = 128,
    ops: Optional[DiffOps] = None,
) -> np.ndarray:
    """Per-vertex WKS descriptors, (N, n_signatures), rows normalized to sum 1.

    Energies are log-spaced between log(lambda_2) and log(lambda_max) of the
    lowest n_eig eigenpairs, with variance 7 * (range / n_signatures).
    """
    if n_signatures < 1:
        raise MeshError("n_signatures must be >= 1")
    n = mesh.n_vertices
    lam, phi = laplacian_eigenbasis(mesh, min(n_eig + 4, n), ops=ops)

    if n_eig < len(lam):
        # never split a degenerate cluster at the truncation boundary: a
        # partial cluster's eigenvector subspace is not rigid-motion stable
        cut = n_eig
        while cut > 2 and lam[cut] - lam[cut - 1] <= 1e-8 * abs(lam[cut]):
            cut -= 1
        lam, phi = lam[:cut], phi[:, :cut]

    # skip the constant mode (lambda ~ 0); guard against tiny negative noise
    keep = lam > max(1e-12, 1e-10 * abs(lam[-1]))
    lam, phi = lam[keep], phi[:, keep]
    if lam.size < 2:
        raise MeshError("not enough nonzero eigenvalues for WKS")

    log_lam = np.log(lam)
    e_min, e_max = log_lam[0], log_lam[-1]
    sigma = max(7.0 * (e_max - e_min) / n_signatures, 1e-12)
    energies = np.linspace(e_min, e_max, n_signatures)

    coef = np.exp(-((energies[None, :] - log_lam[:, None]) ** 2) / (2.0 * sigma**2))  # (K, S)
    wks = (phi**2) @ coef  # (N, S)
    return wks / wks.sum(axis=1, keepdims=True)
