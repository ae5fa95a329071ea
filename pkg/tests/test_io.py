import numpy as np
import pytest

from mlwave import io as mio
from mlwave.errors import IoFailure
from mlwave.mesh import LandmarkSet, QuadGridShape, TargetScan


def test_obj_round_trip_is_exact(tmp_path, rng):
    s = QuadGridShape(rng.normal(size=(9, 17, 3)) * 100, 3)
    path = tmp_path / "s.obj"
    mio.write_obj(s, path)
    back = mio.read_obj(path)
    assert np.array_equal(back.positions, s.positions)
    assert back.geometry == s.geometry


def test_obj_layout(rng):
    s = QuadGridShape(rng.normal(size=(3, 3, 3)), 1)
    lines = mio.format_obj(s).splitlines()
    assert lines[0] == "# mlwave-grid rows=3 cols=3 levels=1"
    verts = [l for l in lines if l.startswith("v ")]
    faces = [l for l in lines if l.startswith("f ")]
    assert len(verts) == 9 and len(faces) == 4
    assert [float(v) for v in verts[5].split()[1:]] == s.vertices[5].tolist()
    assert faces[0] == "f 1 4 5 2"


def test_obj_without_levels_uses_the_default():
    text = "# mlwave-grid rows=3 cols=5\n" + "v 0 0 0\n" * 15
    s = mio.parse_obj(text)
    assert (s.rows, s.cols) == (3, 5)


def test_obj_errors():
    with pytest.raises(IoFailure, match="header"):
        mio.parse_obj("v 0 0 0\n")
    with pytest.raises(IoFailure, match="found 8"):
        mio.parse_obj("# mlwave-grid rows=3 cols=3\n" + "v 0 0 0\n" * 8)
    with pytest.raises(IoFailure, match=":2:"):
        mio.parse_obj("# mlwave-grid rows=3 cols=3\nv 0 x 0\n")
    with pytest.raises(IoFailure):
        mio.parse_obj("# mlwave-grid rows=3 cols=3\n" + "v 0 0\n" * 9)


def test_ply_round_trip_is_exact(tmp_path, rng):
    pts = rng.normal(size=(50, 3))
    nrm = rng.normal(size=(50, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    path = tmp_path / "s.ply"
    mio.write_ply(TargetScan(pts, nrm), path)
    p, n = mio.read_ply(path)
    assert np.array_equal(p, pts) and np.array_equal(n, nrm)
    scan = mio.read_scan(path)
    assert np.array_equal(scan.points, pts) and scan.landmarks is None


def test_ply_with_float_properties_and_extras(rng):
    dtype = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"),
                      ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")])
    rec = np.zeros(4, dtype=dtype)
    for name in ("x", "y", "z", "nx", "ny", "nz"):
        rec[name] = rng.normal(size=4)
    header = (
        "ply\nformat binary_little_endian 1.0\nelement vertex 4\n"
        "property float x\nproperty float y\nproperty float z\nproperty uchar red\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "element face 0\nproperty list uchar int vertex_indices\nend_header\n"
    )
    p, n = mio.parse_ply(header.encode() + rec.tobytes())
    assert np.array_equal(p[:, 1], rec["y"].astype(float))
    assert np.array_equal(n[:, 2], rec["nz"].astype(float))


def test_ply_errors():
    good = mio.format_ply(np.zeros((3, 3)), np.tile([0.0, 0.0, 1.0], (3, 1)))
    with pytest.raises(IoFailure, match="not a PLY"):
        mio.parse_ply(b"solid stl\n")
    with pytest.raises(IoFailure, match="binary_little_endian"):
        mio.parse_ply(good.replace(b"binary_little_endian", b"ascii"))
    with pytest.raises(IoFailure, match="truncated"):
        mio.parse_ply(good[:-1])
    with pytest.raises(IoFailure, match="lacks"):
        mio.parse_ply(good.replace(b"property double nz\n", b""))


def test_scan_normals_are_renormalized_and_must_be_nonzero(tmp_path):
    path = tmp_path / "s.ply"
    path.write_bytes(mio.format_ply(np.zeros((2, 3)), [[0.0, 0.0, 2.0], [3.0, 4.0, 0.0]]))
    assert np.allclose(mio.read_scan(path).normals, [[0, 0, 1], [0.6, 0.8, 0]])
    path.write_bytes(mio.format_ply(np.zeros((2, 3)), [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]]))
    with pytest.raises(IoFailure, match="normals"):
        mio.read_scan(path)


def test_landmarks_round_trip(tmp_path, rng):
    lm = LandmarkSet(np.array([3, 0, 17]), rng.normal(size=(3, 3)))
    path = tmp_path / "lm.txt"
    mio.write_landmarks(lm, path)
    back = mio.read_landmarks(path)
    assert np.array_equal(back.model_indices, lm.model_indices)
    assert np.array_equal(back.data_points, lm.data_points)
    ply = tmp_path / "s.ply"
    mio.write_ply(TargetScan(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]])), ply)
    assert np.array_equal(mio.read_scan(ply, path).landmarks.model_indices, [3, 0, 17])


def test_landmark_and_index_file_errors(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("# header\n1 2 3\n")
    with pytest.raises(IoFailure, match=":2:"):
        mio.read_landmarks(bad)
    bad.write_text("4\n-1\n")
    with pytest.raises(IoFailure, match="negative"):
        mio.read_indices(bad)
    bad.write_text("4 5\n")
    with pytest.raises(IoFailure):
        mio.read_indices(bad)


def test_index_files_skip_comments_and_blank_lines(tmp_path):
    path = tmp_path / "m.txt"
    path.write_text("# mask\n\n5\n7  # nose\n")
    assert mio.read_indices(path).tolist() == [5, 7]
    mio.write_indices([1, 2], path)
    assert mio.read_indices(path).tolist() == [1, 2]


def test_training_manifest(tmp_path):
    (tmp_path / "sub").mkdir()
    path = tmp_path / "manifest.txt"
    mio.write_training_manifest([("b", "x", "sub/b_x.obj"), ("a", "x", "/abs/a_x.obj"), ("b", "y", "b_y.obj")], path)
    ids, exprs, table = mio.read_training_manifest(path)
    assert ids == ["b", "a"] and exprs == ["x", "y"]
    assert table[("b", "x")] == tmp_path / "sub" / "b_x.obj"
    assert str(table[("a", "x")]) == "/abs/a_x.obj"
    path.write_text("a x one.obj\na x two.obj\n")
    with pytest.raises(IoFailure, match="duplicate"):
        mio.read_training_manifest(path)
    path.write_text("a x\n")
    with pytest.raises(IoFailure, match="expected"):
        mio.read_training_manifest(path)


def test_frame_manifest(tmp_path):
    path = tmp_path / "frames.txt"
    path.write_text("f0.ply f0.txt\nf1.ply\n")
    assert mio.read_frame_manifest(path) == [(tmp_path / "f0.ply", tmp_path / "f0.txt"), (tmp_path / "f1.ply", None)]
    path.write_text("a b c\n")
    with pytest.raises(IoFailure):
        mio.read_frame_manifest(path)


def test_missing_and_unwritable_paths(tmp_path):
    with pytest.raises(IoFailure):
        mio.read_obj(tmp_path / "absent.obj")
    with pytest.raises(IoFailure):
        mio.read_ply(tmp_path / "absent.ply")
    with pytest.raises(IoFailure):
        mio.write_text(tmp_path / "no" / "dir" / "x.txt", "x")


def test_dash_writes_to_standard_output(capsys):
    mio.write_text("-", "hello\n")
    assert capsys.readouterr().out == "hello\n"
