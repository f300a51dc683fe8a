"""Linear (PCA) shape spaces over registered canonical meshes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import io as kio
from .mesh import MeshError, ScanCloud, TriMesh

SPACE_MAGIC = b"BLSS"


@dataclass
class ShapeSpace:
    """Mean shape + orthonormal deformation modes.

    mean: (3N,) flattened canonical mean, meters.
    basis: (k, 3N) orthonormal rows (the shape eigenvectors).
    mode_std: (k,) per-mode standard deviation of the training coefficients,
    non-increasing; doubles as the sampling scale.
    provenance: IDs of the registrations the space was fitted on.
    """

    mean: np.ndarray
    basis: np.ndarray
    mode_std: np.ndarray
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.basis = np.asarray(self.basis, dtype=np.float64)
        self.mode_std = np.asarray(self.mode_std, dtype=np.float64)
        if self.basis.ndim != 2 or self.basis.shape[1] != self.mean.size:
            raise MeshError(f"basis must be (k, {self.mean.size}), got {self.basis.shape}")
        if self.mode_std.shape != (len(self.basis),):
            raise MeshError("one mode_std entry per basis vector required")

    @property
    def k(self) -> int:
        return len(self.basis)

    @property
    def n_vertices(self) -> int:
        return self.mean.size // 3

    def mean_vertices(self) -> np.ndarray:
        return self.mean.reshape(-1, 3)

    def project(self, canonical_vertices: np.ndarray) -> np.ndarray:
        """Least-squares coefficients alpha = V (x - mean)."""
        x = np.asarray(canonical_vertices, dtype=np.float64).reshape(-1)
        if x.size != self.mean.size:
            raise MeshError(f"expected {self.n_vertices} vertices")
        return self.basis @ (x - self.mean)

    def reconstruct(self, alpha: np.ndarray) -> np.ndarray:
        """(N, 3) vertices of mean + sum_i alpha_i v_i."""
        alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
        if alpha.size != self.k:
            raise MeshError(f"alpha must have {self.k} entries, got {alpha.size}")
        return (self.mean + alpha @ self.basis).reshape(-1, 3)


def fit_pca(registrations: Sequence[TriMesh], k: int,
            provenance: Optional[Iterable] = None) -> ShapeSpace:
    """PCA via SVD of the centered data matrix.

    Requires at least k+1 registrations on shared topology. Basis signs follow
    a deterministic convention: the largest-magnitude entry of each mode is
    positive. mode_std is the per-mode sample std of the training coefficients.
    """
    meshes = list(registrations)
    if len(meshes) < k + 1:
        raise MeshError(f"PCA with k={k} needs at least {k + 1} registrations, got {len(meshes)}")
    shape0 = meshes[0].vertices.shape
    for m in meshes[1:]:
        if m.vertices.shape != shape0 or not np.array_equal(m.faces, meshes[0].faces):
            raise MeshError("registrations must share the template topology")

    data = np.stack([m.vertices.reshape(-1) for m in meshes])  # (n, 3N)
    mean = data.mean(axis=0)
    centered = data - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:k].copy()
    flip = basis[np.arange(k), np.abs(basis).argmax(axis=1)] < 0
    basis[flip] *= -1.0
    mode_std = svals[:k] / np.sqrt(len(meshes) - 1)
    prov = list(provenance) if provenance is not None else []
    return ShapeSpace(mean, basis, mode_std, prov)


def sample_space(space: ShapeSpace, mode: str, count: int, seed: int = 0,
                 oversample: int = 20) -> np.ndarray:
    """Draw shapes from the space; returns (count, N, 3) vertex arrays.

    random: alpha_i ~ N(0, mode_std_i^2), clipped at +-3 std.
    farthest: greedy farthest-point selection (mean vertex distance metric)
    from a `oversample * count` random pool, seeded with the mean shape.
    """
    if count < 1:
        raise MeshError("count must be >= 1")
    rng = np.random.default_rng(seed)
    if mode == "random":
        alphas = _random_coeffs(space, count, rng)
        return np.stack([space.reconstruct(a) for a in alphas])
    if mode != "farthest":
        raise MeshError(f"unknown sampling mode {mode!r} (random|farthest)")

    pool = _random_coeffs(space, count * oversample, rng)
    pool_verts = np.stack([space.reconstruct(a) for a in pool])
    picked = [space.mean_vertices()]
    # mean distance to the current selection, updated incrementally
    dmin = np.array([_v2v_flat(pv, picked[0]) for pv in pool_verts])
    for _ in range(count - 1):
        idx = int(np.argmax(dmin))
        picked.append(pool_verts[idx])
        dmin = np.minimum(dmin, np.linalg.norm(
            (pool_verts - pool_verts[idx]).reshape(len(pool_verts), -1, 3), axis=2).mean(axis=1))
    return np.stack(picked[:count])


def _random_coeffs(space: ShapeSpace, count: int, rng: np.random.Generator) -> np.ndarray:
    draws = rng.standard_normal((count, space.k))
    return np.clip(draws, -3.0, 3.0) * space.mode_std


def _v2v_flat(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b, axis=1).mean())


@dataclass
class Registration:
    """A scan brought onto the template topology, paired with its raw scan."""

    scan_id: str
    mesh: TriMesh
    scan: Optional[ScanCloud] = None
    source: str = "manual"  # manual | bootstrap-round-<r>


@dataclass
class RegistrySets:
    """Disjoint working sets of the bootstrap loop.

    r_pca / r_deform / r_eval hold registrations (r_eval doubles as held-out
    ground truth); unregistered maps scan id -> ScanCloud.
    """

    r_pca: dict
    r_deform: dict
    r_eval: dict
    unregistered: dict

    def __post_init__(self):
        ids: list[str] = []
        for group in (self.r_pca, self.r_deform, self.r_eval, self.unregistered):
            ids.extend(group.keys())
        if len(set(ids)) != len(ids):
            raise MeshError("registry sets must be pairwise disjoint by scan id")
        topo = None
        for group in (self.r_pca, self.r_deform, self.r_eval):
            for reg in group.values():
                if topo is None:
                    topo = reg.mesh.faces
                elif not np.array_equal(reg.mesh.faces, topo):
                    raise MeshError("registrations must share the template topology")


def save_space(space: ShapeSpace, bin_path, json_path=None) -> None:
    """space.bin: BLSS header then mean, basis rows, mode stds (float64)."""
    bin_path = Path(bin_path)
    payload = np.vstack([space.mean[None, :], space.basis, np.zeros((1, space.mean.size))])
    payload[-1, : space.k] = space.mode_std
    kio.save_matrix(bin_path, SPACE_MAGIC, payload)
    if json_path is None:
        json_path = bin_path.with_suffix(".json")
    meta = {"n_vertices": space.n_vertices, "k": space.k,
            "provenance": [str(p) for p in space.provenance]}
    Path(json_path).write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_space(bin_path, json_path=None) -> ShapeSpace:
    bin_path = Path(bin_path)
    payload = kio.load_matrix(bin_path, SPACE_MAGIC)
    k = payload.shape[0] - 2
    mean, basis, tail = payload[0], payload[1 : 1 + k], payload[-1]
    prov: list = []
    if json_path is None:
        json_path = bin_path.with_suffix(".json")
    if Path(json_path).exists():
        prov = json.loads(Path(json_path).read_text()).get("provenance", [])
    return ShapeSpace(mean, basis, tail[:k], prov)
