from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panfuse.coco_io import validate_panoptic
from panfuse.errors import DimensionMismatch, ValidationError
from panfuse.fusion import FusionImageError, FusionParams, FusionStats, fuse, fuse_batch, fuse_with_stats, paint_order
from panfuse.mask import LabelMap, ScoredInstance, rle_encode

from conftest import CAR, GRASS, MERGED, MICRO_CATEGORIES, PERSON, SKY, box, instance


def oracle_fuse(instances, semantic, params, stuff_ids):
    """Pixel-by-pixel replay of the greedy rules.

    Returns ``{(kind, key): set of pixels}`` where kind is "thing" (key = input
    index) or "stuff" (key = category id).
    """
    h, w = semantic.shape
    owner = {}
    kept = [i for i, inst in enumerate(instances) if inst.score >= params.score_threshold]
    kept.sort(key=lambda i: (-instances[i].score, -instances[i].area, i))
    segments = {}
    for i in kept:
        grid = instances[i].mask.to_array()
        pixels = {(y, x) for y in range(h) for x in range(w) if grid[y, x]}
        free = {p for p in pixels if p not in owner}
        taken = len(pixels) - len(free)
        if not free or taken / len(pixels) > params.overlap_threshold:
            continue
        for p in free:
            owner[p] = i
        segments[("thing", i)] = free
    for cat in stuff_ids:
        pixels = {(y, x) for y in range(h) for x in range(w) if (y, x) not in owner and semantic[y, x] == cat}
        if pixels and len(pixels) >= params.stuff_area_min:
            segments[("stuff", cat)] = pixels
    return segments


def as_pixel_sets(pan):
    out = {}
    for seg in pan.segments:
        ys, xs = np.nonzero(pan.id_map == seg.id)
        out[seg.id] = (seg.category_id, set(zip(ys.tolist(), xs.tolist())))
    return out


def random_case(rng, h=10, w=12):
    sem = rng.choice([GRASS, SKY, MERGED, 0], size=(h, w), p=[0.4, 0.3, 0.2, 0.1])
    instances = []
    for _ in range(int(rng.integers(0, 7))):
        bh, bw = rng.integers(1, h + 1), rng.integers(1, w + 1)
        y0, x0 = rng.integers(0, h - bh + 1), rng.integers(0, w - bw + 1)
        grid = box(h, w, y0, x0, bh, bw)
        grid &= rng.random((h, w)) < 0.9
        if not grid.any():
            continue
        score = float(rng.choice([0.3, 0.5, 0.7, 0.9, 1.0]))
        instances.append(instance(grid, int(rng.choice([PERSON, CAR])), score))
    params = FusionParams(
        score_threshold=float(rng.choice([0.0, 0.5, 0.8])),
        overlap_threshold=float(rng.choice([0.0, 0.3, 0.5, 1.0])),
        stuff_area_min=int(rng.choice([0, 5, 30])),
    )
    return instances, LabelMap(sem), params


class TestExamples:
    def test_all_grass(self, cats):
        pan = fuse([], LabelMap(np.full((4, 5), GRASS)), FusionParams(stuff_area_min=0), cats)
        assert [(s.category_id, s.area) for s in pan.segments] == [(GRASS, 20)]

    def test_person_on_grass(self, cats):
        grid = box(8, 8, 2, 2, 3, 4)
        sem = np.full((8, 8), GRASS)
        sem[grid] = MERGED
        params = FusionParams(stuff_area_min=0)
        pan = fuse([instance(grid, PERSON, 0.9)], LabelMap(sem), params, cats)
        got = as_pixel_sets(pan)
        expected = oracle_fuse([instance(grid, PERSON, 0.9)], sem, params, [GRASS, SKY])
        assert sorted((c, len(px)) for c, px in got.values()) == [(PERSON, 12), (GRASS, 52)]
        assert {frozenset(px) for _, px in got.values()} == {frozenset(px) for px in expected.values()}

    def test_person_wins_over_semantic(self, cats):
        grid = box(8, 8, 0, 0, 4, 4)
        pan = fuse([instance(grid, PERSON, 0.9)], LabelMap(np.full((8, 8), SKY)), FusionParams(stuff_area_min=0), cats)
        person = [s for s in pan.segments if s.category_id == PERSON][0]
        assert (pan.id_map[grid] == person.id).all()

    def test_duplicate_mask_dropped(self, cats):
        grid = box(6, 6, 1, 1, 3, 3)
        a, b = instance(grid, PERSON, 0.9), instance(grid, CAR, 0.8)
        pan, stats = fuse_with_stats([b, a], LabelMap(np.zeros((6, 6), int)), FusionParams(stuff_area_min=0), cats)
        assert [s.category_id for s in pan.segments] == [PERSON]
        assert stats.dropped_overlap == 1

    def test_low_score_dropped(self, cats):
        pan, stats = fuse_with_stats(
            [instance(box(4, 4, 0, 0, 2, 2), PERSON, 0.49)], LabelMap(np.zeros((4, 4), int)), FusionParams(), cats
        )
        assert pan.segments == ()
        assert stats.dropped_low_score == 1

    def test_small_stuff_dropped_and_merged_void(self, cats):
        sem = np.full((10, 10), GRASS)
        sem[:2, :2] = SKY
        sem[5:, 5:] = MERGED
        pan, stats = fuse_with_stats([], LabelMap(sem), FusionParams(stuff_area_min=5), cats)
        assert [(s.category_id, s.area) for s in pan.segments] == [(GRASS, 71)]
        assert stats.dropped_stuff == 1
        assert stats.void_pixels == 29

    def test_disconnected_stuff_is_one_segment(self, cats):
        sem = np.full((4, 6), SKY)
        sem[:, 0] = GRASS
        sem[:, 5] = GRASS
        pan = fuse([], LabelMap(sem), FusionParams(stuff_area_min=0), cats)
        assert sorted(s.category_id for s in pan.segments) == [GRASS, SKY]

    def test_tie_break_area_then_index(self, cats):
        small = instance(box(6, 6, 0, 0, 2, 2), PERSON, 0.7)
        large = instance(box(6, 6, 0, 0, 3, 3), CAR, 0.7)
        pan = fuse([small, large], LabelMap(np.zeros((6, 6), int)), FusionParams(stuff_area_min=0), cats)
        assert [s.category_id for s in pan.segments] == [CAR]
        twin_a, twin_b = instance(box(6, 6, 0, 0, 2, 2), PERSON, 0.7), instance(box(6, 6, 0, 0, 2, 2), CAR, 0.7)
        pan = fuse([twin_a, twin_b], LabelMap(np.zeros((6, 6), int)), FusionParams(stuff_area_min=0), cats)
        assert [s.category_id for s in pan.segments] == [PERSON]

    def test_stuff_instance_rejected(self, cats):
        with pytest.raises(ValidationError):
            fuse([instance(np.ones((2, 2), bool), GRASS)], LabelMap(np.zeros((2, 2), int)), FusionParams(), cats)

    def test_dimension_mismatch(self, cats):
        with pytest.raises(DimensionMismatch):
            fuse([instance(np.ones((2, 2), bool))], LabelMap(np.zeros((3, 3), int)), FusionParams(), cats)

    @pytest.mark.parametrize("kw", [{"score_threshold": 1.5}, {"overlap_threshold": -0.1}, {"stuff_area_min": -1}])
    def test_params_validated(self, kw):
        with pytest.raises(ValidationError):
            FusionParams(**kw)


class TestProperties:
    def test_matches_dense_oracle(self, cats):
        rng = np.random.default_rng(11)
        for _ in range(300):
            instances, sem, params = random_case(rng)
            pan = fuse(instances, sem, params, cats)
            got = {frozenset(px): c for c, px in as_pixel_sets(pan).values()}
            expected = oracle_fuse(instances, sem.labels, params, [GRASS, SKY])
            want = {
                frozenset(px): (instances[key].category_id if kind == "thing" else key)
                for (kind, key), px in expected.items()
            }
            assert got == want

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_valid_and_total(self, seed):
        rng = np.random.default_rng(seed)
        instances, sem, params = random_case(rng)
        pan = fuse(instances, sem, params, MICRO_CATEGORIES)
        assert validate_panoptic(pan).ok
        assert sum(s.area for s in pan.segments) + int((pan.id_map == 0).sum()) == pan.width * pan.height

    def test_permissive_params_drop_nothing(self, cats):
        rng = np.random.default_rng(12)
        params = FusionParams(score_threshold=0.0, overlap_threshold=1.0, stuff_area_min=0)
        for _ in range(200):
            instances, sem, _ = random_case(rng)
            pan, stats = fuse_with_stats(instances, sem, params, cats)
            # only an instance left with no free pixel can vanish
            covered = 0
            claimed = np.zeros(sem.labels.shape, bool)
            for inst in sorted(instances, key=lambda i: (-i.score, -i.area)):
                grid = inst.mask.to_array()
                if not (grid & ~claimed).any():
                    covered += 1
                claimed |= grid
            assert stats.dropped_low_score == 0
            assert stats.dropped_overlap == covered
            assert stats.dropped_stuff == 0

    def test_no_pixel_stolen(self, cats):
        # fusing only the first k instances in paint order must agree with the
        # full run on every thing pixel: later instances never take pixels back
        rng = np.random.default_rng(13)
        for _ in range(100):
            instances, sem, params = random_case(rng)
            full = fuse(instances, sem, params, cats)
            order = paint_order(instances)
            for k in range(len(order) + 1):
                part = fuse([instances[i] for i in order[:k]], sem, params, cats)
                things = {s.id for s in part.segments if s.category_id in (PERSON, CAR)}
                m = np.isin(part.id_map, list(things))
                assert np.array_equal(full.id_map[m], part.id_map[m])


class TestBatch:
    def inputs(self, n=12, seed=0):
        rng = np.random.default_rng(seed)
        return [(i, *random_case(rng)[:2]) for i in range(n)]

    def test_empty(self, cats):
        res = fuse_batch([], FusionParams(), cats)
        assert res.panoptic == {}
        assert res.stats == FusionStats()

    def test_single_image_stats(self, cats):
        grid = box(6, 6, 1, 1, 3, 3)
        items = [instance(grid, PERSON, 0.9), instance(grid, CAR, 0.8)]
        params = FusionParams(stuff_area_min=0)
        res = fuse_batch([(5, items, LabelMap(np.zeros((6, 6), int)))], params, cats)
        _, single = fuse_with_stats(items, LabelMap(np.zeros((6, 6), int)), params, cats)
        assert res.stats == single
        assert res.per_image[5] == single

    def test_worker_count_independent(self, cats):
        data = self.inputs(20)
        params = FusionParams(score_threshold=0.4, stuff_area_min=3)
        ref = fuse_batch(data, params, cats, parallelism=1)
        for workers in (2, 8):
            res = fuse_batch(data, params, cats, parallelism=workers)
            assert res.panoptic == ref.panoptic
            assert res.stats == ref.stats
            assert list(res.panoptic) == list(ref.panoptic)

    def test_stats_sum(self, cats):
        data = self.inputs(10, seed=3)
        res = fuse_batch(data, FusionParams(), cats)
        total = FusionStats()
        for s in res.per_image.values():
            total += s
        assert total == res.stats
        assert res.stats.images == 10

    def test_error_carries_image_id(self, cats):
        bad = (42, [ScoredInstance(GRASS, 0.9, rle_encode(np.ones((2, 2), bool)))], LabelMap(np.zeros((2, 2), int)))
        with pytest.raises(FusionImageError) as err:
            fuse_batch([bad], FusionParams(), cats)
        assert err.value.image_id == 42
