"""Hand-construction helpers for subject records and small datasets."""
from __future__ import annotations

from typing import Optional, Sequence

from trialmi.core import DEFAULT_GRID, SubjectRecord, TrialDataset, VisitGrid

_COUNTER = [0]


def make_subject(outcomes: Sequence[Optional[float]], *, arm: int = 0, baseline: float = 8.0,
                 disc: Optional[float] = None, withdraw: Optional[float] = None,
                 withdraw_type: Optional[int] = None, subject_id: Optional[str] = None,
                 grid: VisitGrid = DEFAULT_GRID) -> SubjectRecord:
    if subject_id is None:
        _COUNTER[0] += 1
        subject_id = f"T{_COUNTER[0]:05d}"
    outcomes = tuple(outcomes)
    assert len(outcomes) == grid.n_visits
    if withdraw is not None and withdraw_type is None:
        withdraw_type = 1
    return SubjectRecord(id=subject_id, arm=arm, baseline=baseline, outcomes=outcomes,
                         missing=tuple(o is None for o in outcomes), disc_time=disc,
                         withdraw_time=withdraw, withdraw_type=withdraw_type)


def make_dataset(subjects: Sequence[SubjectRecord], grid: VisitGrid = DEFAULT_GRID) -> TrialDataset:
    return TrialDataset(grid=grid, subjects=tuple(subjects), provenance="hand-built")


def completer(value: float, **kw) -> SubjectRecord:
    """A subject observed at every visit with endpoint `value`."""
    base = kw.pop("trajectory", None)
    grid = kw.get("grid", DEFAULT_GRID)
    if base is None:
        base = [value * t / grid.duration for t in grid.times[:-1]] + [value]
    return make_subject(base, **kw)
