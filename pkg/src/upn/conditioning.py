"""Frame-wise personalisation control.

``make_condition`` fuses the speaker embedding with the per-frame flag: the
flag is appended to the embedding when set, and the whole vector is zeroed
when it is not. ``sample_schedule`` draws training flag sequences and
``select_targets`` picks the matching training target per frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MIN_RUN = 200

ALL_ONES, ALL_ZEROS, SWITCHING = "personalized", "non-personalized", "switching"


@dataclass(frozen=True)
class FlagSchedule:
    q: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        q = np.asarray(self.q)
        if q.ndim != 1 or not np.all((q == 0) | (q == 1)):
            raise ValueError("schedule values must be a 1-D sequence of 0/1")
        object.__setattr__(self, "q", q.astype(np.int8))

    @property
    def n_frames(self) -> int:
        return self.q.shape[0]

    def __len__(self):
        return self.n_frames

    @property
    def switches(self) -> np.ndarray:
        return np.flatnonzero(np.diff(self.q)) + 1

    def run_lengths(self) -> np.ndarray:
        edges = np.concatenate([[0], self.switches, [self.n_frames]])
        return np.diff(edges)

    def is_valid(self, min_run: int = MIN_RUN, max_switches: int = 2) -> bool:
        runs = self.run_lengths()
        return len(runs) - 1 <= max_switches and bool(np.all(runs >= min_run))

    @classmethod
    def constant(cls, n_frames: int, value: int) -> "FlagSchedule":
        return cls(np.full(n_frames, value, dtype=np.int8),
                   ALL_ONES if value else ALL_ZEROS)


def make_condition(z, q_t) -> np.ndarray:
    """Condition vector(s) of length D + 1.

    ``q_t`` may be a scalar or a per-frame array; the result then has shape
    (n_frames, D + 1). Frames with ``q_t == 0`` get the all-zero vector.
    """
    z = np.asarray(z, dtype=np.float64)
    q = np.asarray(q_t)
    if q.ndim == 0:
        if int(q) not in (0, 1):
            raise ValueError("flag must be 0 or 1")
        if q == 0:
            return np.zeros(z.shape[0] + 1)
        return np.concatenate([z, [1.0]])
    if not np.all((q == 0) | (q == 1)):
        raise ValueError("flags must be 0 or 1")
    row = np.concatenate([z, [1.0]])
    return np.where(q[:, None] == 1, row[None, :], 0.0)


def _composition(rng, total: int, parts: int) -> np.ndarray:
    """Uniform draw of ``parts`` non-negative integers summing to ``total``."""
    bars = np.sort(rng.choice(total + parts - 1, size=parts - 1, replace=False))
    edges = np.concatenate([[-1], bars, [total + parts - 1]])
    return np.diff(edges) - 1


def sample_schedule(n_frames: int, min_run: int = MIN_RUN, rng_seed=None) -> FlagSchedule:
    """Draw a training flag schedule.

    With equal probability the schedule is all ones, all zeros, or switching.
    A switching schedule has one or two switches (fair coin where both are
    feasible), run lengths drawn uniformly over all layouts with every run at
    least ``min_run`` frames, and a fair-coin starting value. If no switch fits,
    the switching option degenerates to a constant schedule.
    """
    if n_frames < min_run:
        raise ValueError(f"n_frames={n_frames} is shorter than min_run={min_run}")
    rng = np.random.default_rng(rng_seed)
    option = rng.integers(3)
    if option == 0:
        return FlagSchedule.constant(n_frames, 1)
    if option == 1:
        return FlagSchedule.constant(n_frames, 0)

    feasible = [k for k in (1, 2) if n_frames >= (k + 1) * min_run]
    start = int(rng.integers(2))
    if not feasible:
        return FlagSchedule(np.full(n_frames, start, dtype=np.int8), SWITCHING)
    n_switch = feasible[int(rng.integers(len(feasible)))]
    slack = n_frames - (n_switch + 1) * min_run
    runs = _composition(rng, slack, n_switch + 1) + min_run
    values = (start + np.arange(n_switch + 1)) % 2
    q = np.repeat(values, runs).astype(np.int8)
    return FlagSchedule(q, SWITCHING)


def select_targets(personalized, non_personalized, schedule):
    """Per-frame choice between two aligned target streams.

    Arrays are indexed by frame along axis 0; frame ``t`` takes the
    personalised row when ``q_t == 1``.
    """
    q = schedule.q if isinstance(schedule, FlagSchedule) else np.asarray(schedule)
    p = np.asarray(personalized)
    n = np.asarray(non_personalized)
    if p.shape != n.shape or p.shape[0] != q.shape[0]:
        raise ValueError("targets and schedule must have equal lengths")
    mask = (q == 1).reshape((-1,) + (1,) * (p.ndim - 1))
    return np.where(mask, p, n)


# ---------------------------------------------------------------------------
# schedule files: "start_frame<TAB>q" per line

def write_schedule_file(path, schedule: FlagSchedule) -> None:
    q = schedule.q
    starts = np.concatenate([[0], schedule.switches])
    lines = [f"{int(s)}\t{int(q[s])}" for s in starts]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_schedule_file(path, n_frames: int) -> FlagSchedule:
    """Expand a schedule file to ``n_frames`` flags.

    Entries past the end of the audio are dropped with a warning.
    """
    entries = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            start_s, q_s = line.split("\t")
            start, q = int(start_s), int(q_s)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected 'start_frame<TAB>q', got {raw!r}") from None
        if q not in (0, 1):
            raise ValueError(f"{path}:{lineno}: flag must be 0 or 1")
        if entries and start <= entries[-1][0]:
            raise ValueError(f"{path}:{lineno}: start frames must increase")
        entries.append((start, q))
    if not entries or entries[0][0] != 0:
        raise ValueError(f"{path}: first entry must start at frame 0")
    if entries[-1][0] >= n_frames:
        log.warning("schedule %s extends beyond the audio (%d frames); truncating", path, n_frames)
    q = np.zeros(n_frames, dtype=np.int8)
    for i, (start, val) in enumerate(entries):
        stop = entries[i + 1][0] if i + 1 < len(entries) else n_frames
        q[start:min(stop, n_frames)] = val
    return FlagSchedule(q)
