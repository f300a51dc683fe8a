"""Round trips and malformed-file errors for OBJ / PLY / XYZ / binary blobs."""

import numpy as np
import pytest

from blisskit.io import (
    ParseError,
    load_arrays,
    load_cloud,
    load_matrix,
    load_mesh,
    save_arrays,
    save_cloud,
    save_matrix,
    save_mesh,
)
from blisskit.mesh import ScanCloud
from blisskit.primitives import icosphere


def test_mesh_round_trip(tmp_path):
    mesh = icosphere(2, radius=0.87)
    path = tmp_path / "m.obj"
    save_mesh(mesh, path)
    back = load_mesh(path)
    assert np.abs(back.vertices - mesh.vertices).max() < 1e-6
    assert np.array_equal(back.faces, mesh.faces)


def test_obj_out_of_range_face_index(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n")
    with pytest.raises(ParseError, match=r"bad.obj:4: face index 4 out of range"):
        load_mesh(path)


def test_obj_bad_coordinate_names_line(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 zero\n")
    with pytest.raises(ParseError, match=r"bad.obj:1"):
        load_mesh(path)


def test_obj_slash_faces(tmp_path):
    path = tmp_path / "tex.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1 2/2 3/3\n")
    mesh = load_mesh(path)
    assert mesh.n_faces == 1


def test_cloud_ply_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((150, 3))
    nrm = rng.standard_normal((150, 3))
    cloud = ScanCloud(pts, normals=nrm, provenance="synthetic")
    path = tmp_path / "c.ply"
    save_cloud(cloud, path)
    back = load_cloud(path)
    assert np.abs(back.points - pts).max() < 1e-6
    assert np.abs(back.normals - nrm).max() < 1e-6
    assert back.provenance == "synthetic"


def test_cloud_xyz_three_columns(tmp_path):
    rng = np.random.default_rng(1)
    pts = rng.standard_normal((120, 3))
    path = tmp_path / "c.xyz"
    save_cloud(ScanCloud(pts), path)
    back = load_cloud(path)
    assert back.normals is None
    assert np.abs(back.points - pts).max() < 1e-6


def test_xyz_bad_column_count(tmp_path):
    path = tmp_path / "bad.xyz"
    path.write_text("0 0 0\n1 2\n")
    with pytest.raises(ParseError, match=r"bad.xyz:2"):
        load_cloud(path)


def test_ply_truncated_body(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 200\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n"
    )
    with pytest.raises(ParseError, match="expected 200 points"):
        load_cloud(path)


def test_matrix_round_trip_and_magic(tmp_path):
    rng = np.random.default_rng(2)
    mat = rng.standard_normal((7, 5))
    path = tmp_path / "w.bin"
    save_matrix(path, b"BLSW", mat)
    assert np.array_equal(load_matrix(path, b"BLSW"), mat)
    with pytest.raises(ParseError, match="bad magic"):
        load_matrix(path, b"XXXX")


def test_array_bundle_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    arrays = {"a": rng.standard_normal((3, 4, 2)), "b": rng.standard_normal(6)}
    path = tmp_path / "nj.bin"
    save_arrays(path, b"BLNJ", arrays)
    back = load_arrays(path, b"BLNJ")
    assert set(back) == {"a", "b"}
    assert np.array_equal(back["a"], arrays["a"])
    assert np.array_equal(back["b"], arrays["b"])
