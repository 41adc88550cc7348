from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis.extra.numpy import arrays
from hypothesis import strategies as st
from PIL import Image

from panfuse.coco_io import (
    Category,
    DatasetManifest,
    ImageInfo,
    PanopticImage,
    SegmentInfo,
    dump_json,
    instance_records,
    load_manifest,
    load_panoptic_dataset,
    merged_thing_id,
    panoptic_to_semantic_gt,
    read_instance_results,
    read_panoptic_png,
    semantic_categories,
    validate_panoptic,
    write_panoptic_dataset,
    write_panoptic_png,
)
from panfuse.errors import EncodingError, FormatError, ValidationError
from panfuse.mask import BBox, LabelMap, rle_encode

from conftest import CAR, GRASS, MERGED, PERSON, SKY, box, random_panoptic

FIXTURE = Path(__file__).parent / "fixtures" / "panoptic_val_mini.json"


def png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


class TestPanopticPng:
    @pytest.mark.parametrize("seg_id", [0, 255, 256, 300, 2**24 - 1])
    def test_id_roundtrip(self, seg_id):
        id_map = np.full((3, 2), seg_id, dtype=np.int64)
        assert np.array_equal(read_panoptic_png(write_panoptic_png(id_map)), id_map)

    def test_black_is_void(self):
        assert read_panoptic_png(png_bytes(np.zeros((1, 1, 3), np.uint8)))[0, 0] == 0

    def test_formula(self):
        rgb = np.array([[[44, 1, 0], [0, 0, 1]]], dtype=np.uint8)
        assert read_panoptic_png(png_bytes(rgb)).tolist() == [[300, 65536]]

    @given(arrays(np.int64, (5, 7), elements=st.integers(0, 2**24 - 1)))
    def test_random_roundtrip(self, id_map):
        assert np.array_equal(read_panoptic_png(write_panoptic_png(id_map)), id_map)

    def test_overflow(self):
        with pytest.raises(EncodingError):
            write_panoptic_png(np.array([[2**24]]))

    def test_grayscale_rejected(self):
        with pytest.raises(FormatError):
            read_panoptic_png(png_bytes(np.zeros((2, 2), np.uint8)))

    def test_sixteen_bit_rejected(self):
        with pytest.raises(FormatError):
            read_panoptic_png(png_bytes(np.zeros((2, 2), np.uint16)))

    def test_not_png(self):
        with pytest.raises(FormatError):
            read_panoptic_png(b"definitely not an image")


class TestMergedThing:
    def test_one_past_max_stuff(self, cats):
        assert merged_thing_id(cats) == MERGED
        assert [c.id for c in semantic_categories(cats)] == [GRASS, SKY, MERGED]

    def test_collision(self, cats):
        with pytest.raises(ValidationError):
            merged_thing_id(cats + [Category(MERGED, "toaster", True)])


class TestSemanticGt:
    def test_all_stuff(self, cats):
        pan = PanopticImage.from_id_map(np.full((4, 4), 5), {5: GRASS})
        assert panoptic_to_semantic_gt(pan, cats) == LabelMap(np.full((4, 4), GRASS))

    def test_person_on_grass(self, cats):
        id_map = np.full((4, 4), 2)
        id_map[1:3, 1:3] = 1
        pan = PanopticImage.from_id_map(id_map, {1: PERSON, 2: GRASS})
        expected = np.where(id_map == 1, MERGED, GRASS)
        assert np.array_equal(panoptic_to_semantic_gt(pan, cats).labels, expected)

    def test_all_void(self, cats):
        pan = PanopticImage.from_id_map(np.zeros((3, 3), np.int64), {})
        assert (panoptic_to_semantic_gt(pan, cats).labels == 0).all()

    def test_unknown_category(self, cats):
        pan = PanopticImage.from_id_map(np.ones((2, 2)), {1: 99})
        with pytest.raises(ValidationError):
            panoptic_to_semantic_gt(pan, cats)

    def test_idempotent_and_closed(self, cats):
        rng = np.random.default_rng(1)
        allowed = {GRASS, SKY, MERGED, 0}
        for _ in range(50):
            pan = random_panoptic(rng, 12, 12, 4)
            once = panoptic_to_semantic_gt(pan, cats)
            assert set(np.unique(once.labels).tolist()) <= allowed
            # re-read the label map as one segment per label
            ids = once.labels.copy()
            again = PanopticImage.from_id_map(
                ids, {v: (v if v != MERGED else PERSON) for v in np.unique(ids).tolist() if v}
            )
            assert panoptic_to_semantic_gt(again, cats) == once


class TestValidate:
    def consistent(self):
        id_map = np.zeros((4, 4), np.int64)
        id_map[:2, :2] = 7
        id_map[2:, :] = 9
        return PanopticImage.from_id_map(id_map, {7: PERSON, 9: GRASS})

    def test_consistent(self, cats):
        assert validate_panoptic(self.consistent(), cats).ok

    def test_absent_from_raster(self):
        pan = self.consistent()
        extra = SegmentInfo(42, PERSON, 1, BBox(0, 0, 1, 1))
        bad = PanopticImage(4, 4, pan.id_map, pan.segments + (extra,))
        report = validate_panoptic(bad)
        assert [sid for sid, _ in report.violations] == [42]

    def test_area_off_by_one(self):
        pan = self.consistent()
        s = pan.segments[0]
        wrong = SegmentInfo(s.id, s.category_id, s.area + 1, s.bbox)
        bad = PanopticImage(4, 4, pan.id_map, (wrong,) + pan.segments[1:])
        report = validate_panoptic(bad)
        assert len(report.violations) == 1
        assert report.violations[0][0] == s.id

    def test_missing_from_table_and_duplicates(self):
        pan = self.consistent()
        bad = PanopticImage(4, 4, pan.id_map, (pan.segments[0], pan.segments[0]))
        sids = sorted(sid for sid, _ in validate_panoptic(bad).violations)
        assert sids == [7, 9]


class TestInstanceResults:
    images = [ImageInfo(1, "a.jpg", 2, 2), ImageInfo(2, "b.jpg", 3, 3)]

    def record(self, **kw):
        rec = {
            "image_id": 1,
            "category_id": PERSON,
            "score": 0.9,
            "bbox": [0, 0, 2, 2],
            "segmentation": {"size": [2, 2], "counts": [0, 4]},
        }
        rec.update(kw)
        return rec

    def test_empty(self, cats):
        assert read_instance_results([], self.images, cats) == {}

    def test_full_mask(self, cats):
        out = read_instance_results([self.record()], self.images, cats)
        assert list(out) == [1]
        assert out[1][0].area == 4
        assert out[1][0].score == 0.9

    def test_bad_score(self, cats):
        with pytest.raises(ValidationError):
            read_instance_results([self.record(score=1.5)], self.images, cats)

    def test_unknown_category(self, cats):
        with pytest.raises(ValidationError):
            read_instance_results([self.record(category_id=77)], self.images, cats)

    def test_size_mismatch(self, cats):
        with pytest.raises(ValidationError):
            read_instance_results([self.record(image_id=2)], self.images, cats)

    def test_roundtrip_through_file(self, cats, tmp_path):
        rng = np.random.default_rng(4)
        per_image = {1: [], 2: []}
        for image_id, size in ((1, 2), (2, 3)):
            for _ in range(3):
                grid = rng.random((size, size)) < 0.5
                grid[0, 0] = True
                per_image[image_id].append(
                    read_instance_results(
                        [self.record(image_id=image_id, bbox=None, segmentation=rle_encode(grid).to_coco())],
                        self.images,
                        cats,
                    )[image_id][0]
                )
        path = tmp_path / "inst.json"
        dump_json(instance_records(per_image), path)
        back = read_instance_results(path, self.images, cats)
        assert back == per_image


def write_fixture_pngs(png_dir: Path) -> None:
    png_dir.mkdir(parents=True, exist_ok=True)
    a = np.full((4, 6), 4000000)
    a[:2, :2] = 300
    (png_dir / "000000000139.png").write_bytes(write_panoptic_png(a))
    b = np.full((4, 6), 255)
    b[1:3, 2:5] = 1
    (png_dir / "000000000285.png").write_bytes(write_panoptic_png(b))


class TestManifest:
    def test_fixture_json_roundtrip(self, tmp_path):
        original = json.loads(FIXTURE.read_text())
        manifest = load_manifest(FIXTURE)
        assert json.loads(json.dumps(manifest.to_json())) == original
        out = tmp_path / "again.json"
        dump_json(manifest.to_json(), out)
        assert json.loads(out.read_text()) == original

    def test_fixture_rasters_agree(self, tmp_path):
        write_fixture_pngs(tmp_path / "pngs")
        manifest, images = load_panoptic_dataset(FIXTURE, tmp_path / "pngs")
        for pan in images.values():
            assert validate_panoptic(pan, manifest.categories).ok
        assert images[285].segment(1).iscrowd

    def test_dataset_write_read(self, cats, tmp_path):
        rng = np.random.default_rng(5)
        infos = [ImageInfo(i, f"img_{i}.jpg", 9, 7) for i in (3, 8)]
        pans = {i.id: random_panoptic(rng, 7, 9, 4, crowd_prob=0.3) for i in infos}
        write_panoptic_dataset(tmp_path / "pan.json", cats, infos, pans, extra={"info": {"v": 1}})
        manifest, back = load_panoptic_dataset(tmp_path / "pan.json")
        assert back == pans
        assert manifest.extra == {"info": {"v": 1}}

    def test_missing_png_reported(self, cats, tmp_path):
        infos = [ImageInfo(1, "x.jpg", 2, 2)]
        pan = PanopticImage.from_id_map(np.ones((2, 2)), {1: GRASS})
        write_panoptic_dataset(tmp_path / "pan.json", cats, infos, {1: pan})
        (tmp_path / "pan" / "x.png").unlink()
        with pytest.raises(FormatError, match="x.png"):
            load_panoptic_dataset(tmp_path / "pan.json")

    def test_duplicate_image_ids(self, cats):
        with pytest.raises(ValidationError):
            DatasetManifest(cats, [ImageInfo(1, "a", 1, 1), ImageInfo(1, "b", 1, 1)])

    def test_void_category_rejected(self):
        with pytest.raises(ValidationError):
            DatasetManifest([Category(0, "void", False)], [])


def test_from_id_map_geometry():
    id_map = np.zeros((6, 6), np.int64)
    id_map[box(6, 6, 1, 2, 3, 2)] = 4
    pan = PanopticImage.from_id_map(id_map, {4: CAR})
    (seg,) = pan.segments
    assert seg.area == 6
    assert seg.bbox == BBox(2, 1, 2, 3)
