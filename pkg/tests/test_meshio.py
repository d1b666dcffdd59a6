import numpy as np
import pytest

from licp.core3d import PointCloud
from licp.errors import ParseError, UnsupportedElement
from licp.meshio import load_obj, load_ply, save_obj, save_ply


class TestObj:
    def test_quad_becomes_two_triangles(self, tmp_path):
        p = tmp_path / "quad.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        mesh = load_obj(p)
        assert len(mesh) == 2
        assert len(mesh.vertices) == 4

    def test_negative_indices_and_slashes(self, tmp_path):
        p = tmp_path / "m.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3/1/1 -2/2/2 -1/3/3\n")
        mesh = load_obj(p)
        assert len(mesh) == 1

    def test_truncated_vertex(self, tmp_path):
        p = tmp_path / "bad.obj"
        p.write_text("v 0 0\n")
        with pytest.raises(ParseError) as e:
            load_obj(p)
        assert e.value.line == 1

    def test_bad_face_token(self, tmp_path):
        p = tmp_path / "bad.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 x\n")
        with pytest.raises(ParseError) as e:
            load_obj(p)
        assert e.value.line == 4

    def test_save_load_round_trip(self, tmp_path):
        from conftest import box_mesh
        mesh = box_mesh(size=(1.0, 2.0, 0.5))
        p = tmp_path / "box.obj"
        save_obj(p, [("box", mesh)])
        back = load_obj(p)
        assert np.allclose(back.vertices, mesh.vertices, atol=1e-6)
        assert np.array_equal(back.triangles, mesh.triangles)


class TestPly:
    def test_binary_round_trip(self, tmp_path, rng):
        cloud = PointCloud(
            rng.normal(size=(3, 3)),
            normals=np.tile([0.0, 0.0, 1.0], (3, 1)),
            colors=rng.random((3, 3)),
        )
        p = tmp_path / "c.ply"
        save_ply(cloud, p)
        back = load_ply(p)
        assert np.abs(back.points - cloud.points).max() < 1e-6
        assert np.abs(back.normals - cloud.normals).max() < 1e-6
        assert np.abs(back.colors - cloud.colors).max() <= 0.5 / 255 + 1e-9

    def test_ascii_read(self, tmp_path):
        p = tmp_path / "a.ply"
        p.write_bytes(
            b"ply\nformat ascii 1.0\nelement vertex 2\n"
            b"property float x\nproperty float y\nproperty float z\n"
            b"end_header\n0 0 0\n1 2 3\n")
        cloud = load_ply(p)
        assert np.allclose(cloud.points, [[0, 0, 0], [1, 2, 3]])
        assert cloud.normals is None

    def test_truncated_binary(self, tmp_path):
        p = tmp_path / "t.ply"
        p.write_bytes(
            b"ply\nformat binary_little_endian 1.0\nelement vertex 5\n"
            b"property float x\nproperty float y\nproperty float z\n"
            b"end_header\n" + b"\x00" * 10)
        with pytest.raises(ParseError):
            load_ply(p)

    def test_truncated_ascii_reports_line(self, tmp_path):
        p = tmp_path / "t.ply"
        p.write_bytes(
            b"ply\nformat ascii 1.0\nelement vertex 2\n"
            b"property float x\nproperty float y\nproperty float z\n"
            b"end_header\n0 0 0\n")
        with pytest.raises(ParseError) as e:
            load_ply(p)
        assert e.value.line is not None

    def test_unsupported_property(self, tmp_path):
        p = tmp_path / "u.ply"
        p.write_bytes(
            b"ply\nformat ascii 1.0\nelement vertex 1\n"
            b"property float x\nproperty float y\nproperty float z\n"
            b"property float intensity\nend_header\n0 0 0 1\n")
        with pytest.raises(UnsupportedElement):
            load_ply(p)

    def test_unsupported_format(self, tmp_path):
        p = tmp_path / "u.ply"
        p.write_bytes(b"ply\nformat binary_big_endian 1.0\nend_header\n")
        with pytest.raises(UnsupportedElement):
            load_ply(p)
