import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from plyfile import PlyData, PlyElement

from splatsim.errors import DataError, FormatError
from splatsim.scene_io import (PLY_PROPERTIES, Camera, GaussianScene, IdMask, load_cameras,
                               load_gaussian_ply, load_id_masks, matrix_to_quat, quat_to_matrix,
                               save_cameras, save_gaussian_ply, write_id_image)

from conftest import axis_camera, make_scene


def random_scene(rng, n, with_ids=False):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    # values representable in float32 so the round-trip can be bit-exact
    f32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)  # noqa: E731
    return GaussianScene(
        means=f32(rng.normal(size=(n, 3))),
        log_scales=f32(rng.normal(-3, 0.5, size=(n, 3))),
        rotations=f32(q),
        opacity_logits=f32(rng.normal(size=n)),
        sh=f32(rng.normal(size=(n, 16, 3))),
        object_ids=rng.integers(0, 5, n) if with_ids else None,
    )


def test_layout_has_62_properties():
    assert len(PLY_PROPERTIES) == 3 + 3 + 3 + 45 + 1 + 3 + 4 == 62


def test_single_unit_gaussian(tmp_path):
    scene = make_scene([[0.0, 0.0, 0.0]], scales=1.0, opacity=0.5)
    save_gaussian_ply(scene, tmp_path / "one.ply")
    loaded = load_gaussian_ply(tmp_path / "one.ply")
    assert len(loaded) == 1
    np.testing.assert_array_equal(loaded.scales, np.ones((1, 3)))
    np.testing.assert_array_equal(loaded.rotation_matrices()[0], np.eye(3))


@pytest.mark.parametrize("with_ids", [False, True])
def test_round_trip_bit_exact(tmp_path, rng, with_ids):
    scene = random_scene(rng, 10_000, with_ids)
    save_gaussian_ply(scene, tmp_path / "s.ply")
    back = load_gaussian_ply(tmp_path / "s.ply")
    for field in ("means", "log_scales", "rotations", "opacity_logits", "sh"):
        np.testing.assert_array_equal(getattr(back, field), getattr(scene, field))
    if with_ids:
        np.testing.assert_array_equal(back.object_ids, scene.object_ids)
    else:
        assert back.object_ids is None


def test_empty_scene_round_trip(tmp_path):
    save_gaussian_ply(GaussianScene.empty(), tmp_path / "e.ply")
    assert PlyData.read(str(tmp_path / "e.ply"))["vertex"].count == 0
    assert len(load_gaussian_ply(tmp_path / "e.ply")) == 0


def _write_raw_ply(path, drop=None, nan_at=None, quat=(1.0, 0.0, 0.0, 0.0)):
    props = [p for p in PLY_PROPERTIES if p != drop]
    arr = np.zeros(3, dtype=[(p, "f4") for p in props])
    for i, v in enumerate(quat):
        if f"rot_{i}" in props:
            arr[f"rot_{i}"] = v
    if nan_at is not None:
        arr["x"][nan_at] = np.nan
    PlyData([PlyElement.describe(arr, "vertex")], byte_order="<").write(str(path))


def test_missing_property_is_named(tmp_path):
    _write_raw_ply(tmp_path / "m.ply", drop="f_rest_7")
    with pytest.raises(FormatError, match="f_rest_7"):
        load_gaussian_ply(tmp_path / "m.ply")


def test_non_finite_reports_vertex(tmp_path):
    _write_raw_ply(tmp_path / "n.ply", nan_at=2)
    with pytest.raises(DataError, match="vertex 2"):
        load_gaussian_ply(tmp_path / "n.ply")


def test_ascii_ply_rejected(tmp_path):
    arr = np.zeros(1, dtype=[(p, "f4") for p in PLY_PROPERTIES])
    PlyData([PlyElement.describe(arr, "vertex")], text=True).write(str(tmp_path / "a.ply"))
    with pytest.raises(FormatError):
        load_gaussian_ply(tmp_path / "a.ply")


def test_quaternions_normalized_on_load(tmp_path):
    _write_raw_ply(tmp_path / "q.ply", quat=(2.0, 0.0, 2.0, 0.0))
    scene = load_gaussian_ply(tmp_path / "q.ply")
    np.testing.assert_allclose(np.linalg.norm(scene.rotations, axis=1), 1.0, atol=1e-6)


def test_write_failure_names_path(tmp_path):
    target = tmp_path / "missing_dir" / "x.ply"
    with pytest.raises(OSError, match="missing_dir"):
        save_gaussian_ply(make_scene([[0, 0, 1]]), target)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1))
def test_quaternion_matrix_round_trip(q):
    q = np.asarray(q) / np.linalg.norm(q)
    R = quat_to_matrix(q[None])[0]
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    q2 = matrix_to_quat(R[None])[0]
    # q and -q are the same rotation
    assert min(np.abs(q - q2).max(), np.abs(q + q2).max()) < 1e-9


# --- cameras ----------------------------------------------------------------


def test_identity_extrinsics_center_origin():
    np.testing.assert_array_equal(axis_camera().center, np.zeros(3))


def test_translation_only_center():
    E = np.eye(4)
    E[:3, 3] = (0, 0, -3)
    cam = Camera("c", 10, 10, 5, 5, 10, 10, E)
    np.testing.assert_allclose(cam.center, (0, 0, 3), atol=1e-12)


def test_look_at_center_consistent(rng):
    for _ in range(20):
        eye = rng.normal(size=3) * 4
        cam = Camera.look_at("c", eye, (0, 0, 0), (0, 0, 1), 100, 100, 64, 48)
        np.testing.assert_allclose(cam.center, eye, atol=1e-9)
        cam.validate()
        uv, z = cam.project(np.zeros((1, 3)))
        np.testing.assert_allclose(uv[0], (32, 24), atol=1e-9)
        assert z[0] == pytest.approx(np.linalg.norm(eye))


def test_camera_round_trip(tmp_path):
    cams = [Camera.look_at(f"v{i}", (3, i, 1), (0, 0, 0), (0, 0, 1), 50, 60, 40, 30, mask=f"v{i}.png")
            for i in range(3)]
    save_cameras(cams, tmp_path / "cams.json")
    back = load_cameras(tmp_path / "cams.json")
    assert [c.name for c in back] == ["v0", "v1", "v2"]
    for a, b in zip(cams, back):
        np.testing.assert_array_equal(a.world_to_camera, b.world_to_camera)
        assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height, a.mask) == (b.fx, b.fy, b.cx, b.cy, b.width,
                                                                       b.height, b.mask)


def _camera_doc(E, name="bad"):
    return {"cameras": [{"name": name, "fx": 1, "fy": 1, "cx": 1, "cy": 1, "width": 2, "height": 2,
                         "world_to_camera": np.asarray(E).tolist(), "mask": f"{name}.png"}]}


def test_non_orthonormal_rotation_names_view(tmp_path):
    E = np.eye(4)
    E[0, 0] = 1.01
    (tmp_path / "c.json").write_text(json.dumps(_camera_doc(E, "skewed")))
    with pytest.raises(DataError, match="skewed"):
        load_cameras(tmp_path / "c.json")


def test_reflection_rejected(tmp_path):
    E = np.diag([1.0, 1.0, -1.0, 1.0])
    (tmp_path / "c.json").write_text(json.dumps(_camera_doc(E, "mirror")))
    with pytest.raises(DataError, match="mirror"):
        load_cameras(tmp_path / "c.json")


def test_duplicated_view_names(tmp_path):
    doc = _camera_doc(np.eye(4), "a")
    doc["cameras"] *= 2
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="duplicated"):
        load_cameras(tmp_path / "c.json")


def test_missing_camera_field(tmp_path):
    doc = _camera_doc(np.eye(4), "a")
    del doc["cameras"][0]["fx"]
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="fx"):
        load_cameras(tmp_path / "c.json")


# --- masks ------------------------------------------------------------------


def _cams(n=3, w=8, h=6):
    return [axis_camera(w, h, name=f"v{i}", mask=f"v{i}.png") for i in range(n)]


def test_masks_load_in_camera_order(tmp_path):
    cams = _cams()
    for i, c in enumerate(cams):
        write_id_image(tmp_path / c.mask, np.full((6, 8), [0, 7, 300][i]))
    masks = load_id_masks(tmp_path, cams)
    assert not masks[0].ids.any()
    assert (masks[1].ids == 7).all()
    assert (masks[2].ids == 300).all()  # beyond 8 bits


def test_missing_mask_lists_views(tmp_path):
    cams = _cams()
    write_id_image(tmp_path / cams[0].mask, np.zeros((6, 8)))
    with pytest.raises(FormatError, match="v1, v2"):
        load_id_masks(tmp_path, cams)


def test_missing_mask_directory(tmp_path):
    with pytest.raises(FormatError, match="does not exist"):
        load_id_masks(tmp_path / "nope", _cams())


def test_mask_dimension_mismatch(tmp_path):
    cams = _cams(1)
    write_id_image(tmp_path / cams[0].mask, np.zeros((5, 8)))
    with pytest.raises(DataError, match="v0"):
        load_id_masks(tmp_path, cams)


def test_id_mask_is_read_only():
    m = IdMask(np.ones((2, 2), int))
    with pytest.raises(ValueError):
        m.ids[0, 0] = 3
