"""Merge predictions of category-specialized expert models.

Each expert owns a disjoint set of thing categories; one expert may be marked
``rest`` and owns every thing category nobody else claims. A prediction
survives only if its category belongs to the expert that produced it. Scores
pass through unchanged and no NMS is applied across experts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .coco_io import ValidationReport, as_category_index
from .errors import ValidationError
from .mask import ScoredInstance


@dataclass(frozen=True)
class Expert:
    name: str
    categories: frozenset
    rest: bool = False


@dataclass(frozen=True)
class ExpertRouting:
    experts: tuple

    @classmethod
    def build(cls, owned: Mapping[str, Iterable[int]], categories, rest: str | None = None) -> "ExpertRouting":
        """Routing from explicit ownership; ``rest`` receives the uncovered thing categories."""
        experts = [Expert(name, frozenset(int(c) for c in cats)) for name, cats in owned.items()]
        if rest is not None:
            if rest in owned:
                raise ValidationError(f"expert {rest!r} is both explicit and rest")
            claimed = set().union(*(e.categories for e in experts)) if experts else set()
            things = {c.id for c in as_category_index(categories).values() if c.isthing}
            experts.append(Expert(rest, frozenset(things - claimed), rest=True))
        return cls(tuple(experts))

    @classmethod
    def single(cls, name: str, categories) -> "ExpertRouting":
        return cls.build({}, categories, rest=name)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.experts]

    def owned_by(self, name: str) -> frozenset:
        for e in self.experts:
            if e.name == name:
                return e.categories
        raise KeyError(name)

    def owner_of(self, category_id: int) -> str | None:
        for e in self.experts:
            if category_id in e.categories:
                return e.name
        return None


def validate_routing(routing: ExpertRouting, categories) -> ValidationReport:
    index = as_category_index(categories)
    report = ValidationReport()
    names = routing.names
    for dup in sorted({n for n in names if names.count(n) > 1}):
        report.add(None, f"expert {dup!r} listed more than once")
    if sum(e.rest for e in routing.experts) > 1:
        report.add(None, "more than one expert marked rest")
    owner: dict[int, str] = {}
    for e in routing.experts:
        for cat_id in sorted(e.categories):
            cat = index.get(cat_id)
            if cat is None:
                report.add(None, f"expert {e.name!r} owns unknown category {cat_id}")
            elif not cat.isthing:
                report.add(None, f"expert {e.name!r} owns stuff category {cat_id} ({cat.name})")
            if cat_id in owner:
                report.add(None, f"category {cat_id} owned by both {owner[cat_id]!r} and {e.name!r}")
            else:
                owner[cat_id] = e.name
    for cat in sorted(index.values(), key=lambda c: c.id):
        if cat.isthing and cat.id not in owner:
            report.add(None, f"thing category {cat.id} ({cat.name}) is not owned by any expert")
    return report


def route_expert_predictions(
    per_expert: Mapping[str, Sequence[ScoredInstance]], routing: ExpertRouting
) -> list[tuple[str, ScoredInstance]]:
    """Like :func:`merge_expert_predictions` but keeps the producing expert."""
    known = set(routing.names)
    unknown = sorted(set(per_expert) - known)
    if unknown:
        raise ValidationError(f"predictions from experts missing in routing: {unknown}")
    seen: dict[int, str] = {}
    for e in routing.experts:
        for cat_id in e.categories:
            if cat_id in seen:
                raise ValidationError(f"category {cat_id} owned by both {seen[cat_id]!r} and {e.name!r}")
            seen[cat_id] = e.name
    out = []
    for name in sorted(per_expert):
        owned = routing.owned_by(name)
        out.extend((name, inst) for inst in per_expert[name] if inst.category_id in owned)
    return out


def merge_expert_predictions(
    per_expert: Mapping[str, Sequence[ScoredInstance]], routing: ExpertRouting
) -> list[ScoredInstance]:
    """Keep each expert's predictions on its own categories.

    Output is ordered by expert name, then by the expert's input order, so the
    result does not depend on how ``per_expert`` was enumerated.
    """
    return [inst for _, inst in route_expert_predictions(per_expert, routing)]
