import json
import math

import numpy as np
import pytest

from slotcon.errors import DomainError, GenerationError, ParseError
from slotcon.geometry import GridSpec, Junction, Shape, entrance_and_sides
from slotcon.synthdata import (AugmentConfig, AugmentParams, Dataset, Scene, SceneConfig, augment, cell_targets,
                               compute_stats, generate_dataset, generate_scene, labels_from_json, labels_to_json,
                               load_dataset, make_views, save_dataset)

STILL = AugmentConfig(max_rotation=0.0, min_crop_area=1.0, max_blur_sigma=0.0, blur_probability=0.0,
                      erase_probability=0.0)


def test_empty_scene():
    scene = generate_scene(SceneConfig(slots_per_scene=(0, 0)), seed=3)
    assert scene.junctions == [] and scene.slots == []
    assert scene.image.shape == (128, 128, 1)
    targets = cell_targets(scene, GridSpec(128, 8))
    assert np.all(targets.identity == 1)
    assert len(targets.junction_cells) == 0


def test_generate_deterministic():
    cfg = SceneConfig()
    a, b = generate_scene(cfg, seed=11), generate_scene(cfg, seed=11)
    assert a.junctions == b.junctions
    assert a.slots == b.slots
    np.testing.assert_array_equal(a.image, b.image)
    assert generate_scene(cfg, seed=12).junctions != a.junctions


def test_row_layout():
    cfg = SceneConfig(slots_per_scene=(3, 3), slot_width=(20.0, 24.0), target_shape_imbalance=1e12)
    for seed in range(10):
        scene = generate_scene(cfg, seed=seed)
        assert len(scene.junctions) == 4
        assert len(scene.slots) == 3
        # rows ending out of view are T-shaped at both ends
        assert all(j.shape == Shape.T for j in scene.junctions)
        for k, slot in enumerate(scene.slots):
            assert slot.entrance == (scene.junctions[k], scene.junctions[k + 1])
            width = math.hypot(*np.subtract(slot.entrance[1].position, slot.entrance[0].position))
            assert 20.0 <= width <= 24.0 + 1e-9
        for j in scene.junctions:
            assert 8.0 - 1e-9 <= j.x <= 120.0 + 1e-9 and 8.0 - 1e-9 <= j.y <= 120.0 + 1e-9


def test_terminal_rows_are_l_shaped():
    cfg = SceneConfig(slots_per_scene=(3, 3), slot_width=(20.0, 24.0), target_shape_imbalance=0.01)
    scene = generate_scene(cfg, seed=5)
    shapes = [j.shape for j in scene.junctions]
    assert shapes == [Shape.L, Shape.T, Shape.T, Shape.L]


def test_row_does_not_fit():
    cfg = SceneConfig(slots_per_scene=(5, 5), slot_width=(56.0, 56.0))
    with pytest.raises(GenerationError):
        generate_scene(cfg, seed=0)


@pytest.mark.parametrize("x,y", [(128.0, 10.0), (10.0, -0.5)])
def test_scene_junctions_inside_image(x, y):
    with pytest.raises(DomainError, match="outside the 128 px image"):
        Scene("s", 128, [Junction(x, y, 0.0, Shape.L)], [])


def test_identity_augment():
    scene = generate_scene(SceneConfig(), seed=2)
    out = augment(scene, AugmentParams())
    assert out.junctions == scene.junctions
    assert out.slots == scene.slots
    np.testing.assert_array_equal(out.image, scene.image)


def test_rotation_moves_labels_with_pixels():
    image = np.zeros((128, 128, 1), dtype=np.float32)
    image[64, 74, 0] = 1.0
    junction = Junction(74.5, 64.5, 0.0, Shape.T)
    scene = Scene("r", 128, [junction], [], image)
    out = augment(scene, AugmentParams(rotation=math.pi / 2))
    (moved, ) = out.junctions
    assert moved.position == pytest.approx((63.5, 74.5), abs=1e-9)
    assert moved.angle == pytest.approx(math.pi / 2)
    assert out.image[74, 63, 0] == pytest.approx(1.0, abs=1e-5)
    assert out.image[64, 74, 0] == pytest.approx(0.0, abs=1e-5)


def test_crop_drops_junctions_and_their_slots():
    near = Junction(5.0, 5.0, math.pi / 2, Shape.L)
    mid = Junction(60.0, 60.0, math.pi / 2, Shape.T)
    far = Junction(100.0, 60.0, math.pi / 2, Shape.T)
    slots = [entrance_and_sides(near, mid, 30.0), entrance_and_sides(mid, far, 30.0)]
    scene = Scene("c", 128, [near, mid, far], slots)
    out = augment(scene, AugmentParams(crop_origin=(32.0, 32.0), crop_scale=0.75))
    assert len(out.junctions) == 2
    assert len(out.slots) == 1
    (slot, ) = out.slots
    assert slot.depth == pytest.approx(40.0)
    assert slot.entrance[0].position == pytest.approx(((60.0 - 32.0) / 0.75, (60.0 - 32.0) / 0.75))


def test_crop_scale_is_floored():
    params = AugmentParams(crop_scale=0.1, crop_origin=(500.0, -3.0)).clamped(128)
    assert params.crop_scale == pytest.approx(math.sqrt(0.5))
    assert params.crop_origin == pytest.approx((128 * (1 - math.sqrt(0.5)), 0.0))


def test_views_deterministic():
    scene = generate_scene(SceneConfig(), seed=4)
    a, b = make_views(scene, 99, cell_size=16.0), make_views(scene, 99, cell_size=16.0)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
        assert x.junctions == y.junctions


def test_still_views_equal_scene():
    scene = generate_scene(SceneConfig(), seed=4)
    for view in make_views(scene, 7, STILL, cell_size=16.0):
        np.testing.assert_array_equal(view.image, scene.image)
        assert view.junctions == scene.junctions


def test_labels_round_trip():
    dataset = generate_dataset(SceneConfig(), 5, seed=1, grid=GridSpec(128, 8))
    back = labels_from_json(json.dumps(labels_to_json(dataset)))
    assert back.grid == dataset.grid
    for a, b in zip(dataset.scenes, back.scenes):
        assert a.scene_id == b.scene_id
        assert a.junctions == b.junctions
        assert a.slots == b.slots


def _doc(**junction):
    j = {"x": 10.0, "y": 10.0, "angle": 0.5, "shape": "T"}
    j.update(junction)
    return {"grid": {"image_size": 128, "G": 8},
            "scenes": [{"id": "a", "junctions": [j, {"x": 50, "y": 10, "angle": 0.5, "shape": "L"}],
                        "slots": [{"j1": 0, "j2": 1, "depth": 40}]}]}


@pytest.mark.parametrize("junction,location", [
    ({"angle": 7.0}, "scenes[0].junctions[0].angle"),
    ({"shape": "X"}, "scenes[0].junctions[0].shape"),
    ({"x": 128.0}, "scenes[0].junctions[0]"),
    ({"y": "1"}, "scenes[0].junctions[0].y"),
])
def test_labels_rejected(junction, location):
    with pytest.raises(ParseError) as info:
        labels_from_json(json.dumps(_doc(**junction)), "labels.json")
    assert info.value.location == location


def test_labels_bad_slot_reference():
    doc = _doc()
    doc["scenes"][0]["slots"][0]["j2"] = 5
    with pytest.raises(ParseError, match="out of range"):
        labels_from_json(json.dumps(doc))


def test_labels_not_json():
    with pytest.raises(ParseError) as info:
        labels_from_json("{", "broken.json")
    assert info.value.source == "broken.json"


def test_dataset_files(tmp_path):
    dataset = generate_dataset(SceneConfig(), 3, seed=8, grid=GridSpec(128, 8), prefix="t")
    written = save_dataset(dataset, tmp_path)
    assert len(written) == 4
    back = load_dataset(tmp_path)
    assert [s.scene_id for s in back.scenes] == ["t-00000", "t-00001", "t-00002"]
    for a, b in zip(dataset.scenes, back.scenes):
        np.testing.assert_array_equal(a.image, b.image)


def test_generate_dataset_workers():
    grid = GridSpec(128, 8)
    serial = generate_dataset(SceneConfig(), 6, seed=3, grid=grid)
    threaded = generate_dataset(SceneConfig(), 6, seed=3, grid=grid, workers=3)
    for a, b in zip(serial.scenes, threaded.scenes):
        assert a.junctions == b.junctions
        np.testing.assert_array_equal(a.image, b.image)


def test_empty_dataset():
    dataset = generate_dataset(SceneConfig(), 0, seed=0, grid=GridSpec(128, 8))
    assert dataset.scenes == []
    with pytest.raises(DomainError):
        compute_stats(dataset, dataset.grid)


def test_stats():
    grid = GridSpec(128, 8)
    scenes = [Scene("a", 128, [Junction(10.0, 10.0, 0.0, Shape.L)], []), Scene("b", 128, [], [])]
    stats = compute_stats(Dataset(grid, scenes), grid)
    assert stats.id_counts == {"J": 1, "B": 127}
    assert stats.rho_id == pytest.approx(127.0)
    assert stats.rho_sh == math.inf
    q_id, q_sh = stats.frequencies()
    assert q_id == pytest.approx((1 / 128, 127 / 128))
    assert q_sh == pytest.approx((1.0, 0.0))
