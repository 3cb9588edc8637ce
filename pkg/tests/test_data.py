import json

import numpy as np
import pytest

from shadowpairs.data import (
    AnnotationError,
    Detection,
    ImageSample,
    ShadowObjectInstance,
    load_annotations,
    load_detections,
    save_annotations,
    save_detections,
    write_image,
)
from shadowpairs.masks import mask_centroid, rle_encode
from shadowpairs.synthetic import SceneConfig, generate_dataset, generate_synthetic_scene


def _write_minimal(tmp_path, anns):
    write_image(tmp_path / "a.png", np.zeros((4, 4, 3)))
    doc = {"images": [{"id": 1, "file_name": "a.png", "height": 4, "width": 4}], "annotations": anns}
    path = tmp_path / "ann.json"
    path.write_text(json.dumps(doc))
    return path


def _ann(i, cat, assoc, mask):
    return {"id": i, "image_id": 1, "category": cat, "segmentation": rle_encode(mask), "association_id": assoc}


def test_load_minimal_pair(tmp_path):
    ob = np.zeros((4, 4), bool)
    ob[0, 0] = True
    sh = np.zeros((4, 4), bool)
    sh[3, 3] = True
    path = _write_minimal(tmp_path, [_ann(1, "object", 7, ob), _ann(2, "shadow", 7, sh)])
    (sample,) = load_annotations(path)
    assert len(sample.instances) == 1
    inst = sample.instances[0]
    assert inst.pair_id == 7
    assert np.array_equal(inst.object_mask, ob) and np.array_equal(inst.shadow_mask, sh)


def test_unpaired_object_names_id(tmp_path):
    ob = np.ones((4, 4), bool)
    path = _write_minimal(tmp_path, [_ann(1, "object", 3, ob)])
    with pytest.raises(AnnotationError, match="association id 3"):
        load_annotations(path)


def test_duplicate_partner_rejected(tmp_path):
    ob = np.ones((4, 4), bool)
    anns = [_ann(1, "object", 3, ob), _ann(2, "shadow", 3, ob), _ann(3, "shadow", 3, ob)]
    with pytest.raises(AnnotationError, match="more than one shadow"):
        load_annotations(_write_minimal(tmp_path, anns))


def test_schema_violation_names_key(tmp_path):
    ob = np.ones((4, 4), bool)
    bad = _ann(1, "object", 3, ob)
    del bad["association_id"]
    with pytest.raises(AnnotationError, match="association_id"):
        load_annotations(_write_minimal(tmp_path, [bad]))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_annotations(tmp_path / "nope.json")


def test_generated_round_trip(tmp_path):
    samples = generate_dataset(seed=1, n=4)
    path = save_annotations(samples, tmp_path)
    loaded = load_annotations(path)
    assert len(loaded) == 4
    for a, b in zip(samples, loaded):
        assert a.image.shape == b.image.shape
        assert np.array_equal(a.image, b.image)  # generator output is 8-bit quantized
        assert [i.pair_id for i in a.instances] == [i.pair_id for i in b.instances]
        for ia, ib in zip(a.instances, b.instances):
            assert np.array_equal(ia.object_mask, ib.object_mask)
            assert np.array_equal(ia.shadow_mask, ib.shadow_mask)


def test_instance_invariants():
    m = np.ones((3, 3), bool)
    with pytest.raises(ValueError):
        ShadowObjectInstance(np.zeros((3, 3), bool), m, 1)
    with pytest.raises(ValueError):
        ShadowObjectInstance(m, np.ones((3, 4), bool), 1)
    with pytest.raises(ValueError):
        ImageSample(np.zeros((3, 3, 3)), [ShadowObjectInstance(m, m, 1), ShadowObjectInstance(m, m, 1)])


def test_detection_export_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    dets = [
        Detection(0.9, rng.random((8, 8)), rng.random((8, 8)), (0.25, 0.75)),
        Detection(0.4, rng.random((8, 8)), rng.random((8, 8))),
    ]
    dets = [d for d in dets if (d.object_mask >= 0.5).any() and (d.shadow_mask >= 0.5).any()]
    images = [{"id": 0, "file_name": "x.png", "height": 8, "width": 8}]
    path = tmp_path / "dets.json"
    save_detections(path, images, [dets])
    imgs, loaded = load_detections(path)
    assert imgs == images
    assert [d.score for d in loaded[0]] == [d.score for d in dets]
    for a, b in zip(dets, loaded[0]):
        assert np.array_equal(a.object_mask >= 0.5, b.object_mask)
        assert np.array_equal(a.shadow_mask >= 0.5, b.shadow_mask)
    assert loaded[0][0].predicted_shadow_center == (0.25, 0.75)


# ----------------------------------------------------------------- generator


def test_generator_deterministic():
    a = generate_synthetic_scene(0)
    b = generate_synthetic_scene(0)
    assert np.array_equal(a.image, b.image)
    for ia, ib in zip(a.instances, b.instances):
        assert np.array_equal(ia.object_mask, ib.object_mask)
        assert np.array_equal(ia.shadow_mask, ib.shadow_mask)


def test_generator_pair_range():
    cfg = SceneConfig(pair_range=(1, 1))
    for seed in range(5):
        assert len(generate_synthetic_scene(seed, cfg).instances) == 1


@pytest.mark.parametrize("cfg", [SceneConfig(height=0), SceneConfig(pair_range=(3, 2)), SceneConfig(pair_range=(0, 0))])
def test_generator_rejects_degenerate(cfg):
    with pytest.raises(ValueError):
        generate_synthetic_scene(0, cfg)


@pytest.mark.parametrize("seed", range(12))
def test_shadow_lies_along_light(seed):
    # Recover the scene's light direction by replaying the generator's first draw.
    cfg = SceneConfig()
    angle = np.random.default_rng(seed).uniform(*cfg.light_angle_range)
    light = np.array([np.cos(angle), np.sin(angle)])
    sample = generate_synthetic_scene(seed, cfg)
    h, w = sample.height, sample.width
    for inst in sample.instances:
        co = np.array(mask_centroid(inst.object_mask)) * (w, h)
        cs = np.array(mask_centroid(inst.shadow_mask)) * (w, h)
        assert np.dot(cs - co, light) > 0


@pytest.mark.parametrize("seed", range(8))
def test_generated_masks_are_disjoint_per_pair_and_nonempty(seed):
    sample = generate_synthetic_scene(seed)
    objects = np.zeros((sample.height, sample.width), bool)
    for inst in sample.instances:
        assert inst.object_mask.any() and inst.shadow_mask.any()
        objects |= inst.object_mask
    for inst in sample.instances:
        # shadows never cover visible object pixels
        assert not (inst.shadow_mask & objects).any()
