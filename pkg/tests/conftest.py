from __future__ import annotations

import numpy as np
import pytest

from panfuse.coco_io import Category, PanopticImage
from panfuse.mask import ScoredInstance, rle_encode

# two things, two stuff; merged-thing becomes 12
MICRO_CATEGORIES = (
    Category(1, "person", True, (220, 20, 60)),
    Category(2, "car", True, (0, 0, 142)),
    Category(10, "grass", False, (152, 251, 152)),
    Category(11, "sky", False, (70, 130, 180)),
)
PERSON, CAR, GRASS, SKY = 1, 2, 10, 11
MERGED = 12


@pytest.fixture
def cats():
    return list(MICRO_CATEGORIES)


def box(h, w, y0, x0, bh, bw) -> np.ndarray:
    grid = np.zeros((h, w), dtype=bool)
    grid[y0 : y0 + bh, x0 : x0 + bw] = True
    return grid


def instance(grid, category_id=PERSON, score=0.9) -> ScoredInstance:
    return ScoredInstance(category_id, score, rle_encode(grid))


def random_panoptic(rng: np.random.Generator, h: int, w: int, n_segments: int, crowd_prob: float = 0.0) -> PanopticImage:
    """Random boxes painted over a VOID canvas; later boxes overwrite earlier ones."""
    id_map = np.zeros((h, w), dtype=np.int64)
    category_of = {}
    for seg_id in range(1, n_segments + 1):
        bh, bw = rng.integers(1, h + 1), rng.integers(1, w + 1)
        y0, x0 = rng.integers(0, h - bh + 1), rng.integers(0, w - bw + 1)
        id_map[y0 : y0 + bh, x0 : x0 + bw] = seg_id
        category_of[seg_id] = int(rng.choice([PERSON, CAR, GRASS, SKY]))
    present = set(np.unique(id_map).tolist()) - {0}
    category_of = {k: v for k, v in category_of.items() if k in present}
    crowd = {k for k, c in category_of.items() if c in (PERSON, CAR) and rng.random() < crowd_prob}
    return PanopticImage.from_id_map(id_map, category_of, crowd)


def perturb_panoptic(rng: np.random.Generator, gt: PanopticImage, n_extra: int) -> PanopticImage:
    """Prediction derived from ``gt``: shifted segments plus random extra boxes."""
    h, w = gt.height, gt.width
    id_map = np.zeros((h, w), dtype=np.int64)
    category_of = {}
    for seg in gt.segments:
        dy, dx = rng.integers(-2, 3, size=2)
        m = np.roll(gt.id_map == seg.id, (int(dy), int(dx)), axis=(0, 1))
        id_map[m] = seg.id
        category_of[seg.id] = seg.category_id if rng.random() > 0.2 else int(rng.choice([PERSON, CAR, GRASS, SKY]))
    nxt = max(category_of, default=0) + 1
    for _ in range(n_extra):
        bh, bw = rng.integers(1, h // 2 + 1), rng.integers(1, w // 2 + 1)
        y0, x0 = rng.integers(0, h - bh + 1), rng.integers(0, w - bw + 1)
        id_map[y0 : y0 + bh, x0 : x0 + bw] = nxt
        category_of[nxt] = int(rng.choice([PERSON, CAR, GRASS, SKY]))
        nxt += 1
    present = set(np.unique(id_map).tolist()) - {0}
    return PanopticImage.from_id_map(id_map, {k: v for k, v in category_of.items() if k in present})


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
