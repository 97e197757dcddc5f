"""Two-player TrueSkill rating, comparison scheduling, and listening-test stats.

Ratings start at mu=25, sigma=8.333 and are updated per comparison with the
closed-form two-player update (Gaussian truncation corrections v/w). Draw
probability between two rated players follows the canonical match-quality
form: the likelihood of a draw normalized so that two perfectly known,
equally skilled players score 1. The module also builds the per-assessor
comparison schedule (pairs x classes x stimulus kinds x repetitions),
selects high-energy audio segments, and reduces judgment logs to
interaction statistics and win matrices.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr, ndtri

from .audio import SAMPLE_RATE, AudioBuffer
from .dataset import CLASS_ORDER, SourceClass

STIMULUS_KINDS = ("extraction", "residual")


class RatingError(Exception):
    pass


class NumericalError(RatingError):
    pass


class TooFewModels(RatingError):
    pass


class SongTooShort(RatingError):
    pass


class EmptyInput(RatingError):
    pass


@dataclass(frozen=True)
class Rating:
    """Skill estimate: mean mu in (0, 50), uncertainty sigma > 0."""

    mu: float = 25.0
    sigma: float = 25.0 / 3.0

    def __post_init__(self):
        if not (0.0 < self.mu < 50.0):
            raise RatingError(f"mu {self.mu} outside (0, 50)")
        if self.sigma <= 0.0:
            raise RatingError(f"sigma {self.sigma} must be positive")


@dataclass(frozen=True)
class TrueSkillParams:
    """Update parameters; the initial mu/sigma are fixed by `Rating`.

    beta is the per-performance noise, tau the dynamics inflation added
    before each match, draw_probability the prior probability of a draw
    (it defines the draw margin used by the update equations).
    """

    beta: float = 25.0 / 6.0
    tau: float = 25.0 / 300.0
    draw_probability: float = 0.10

    def draw_margin(self) -> float:
        return float(ndtri((self.draw_probability + 1.0) / 2.0)) * math.sqrt(2.0) * self.beta


DEFAULT_PARAMS = TrueSkillParams()

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / _SQRT_2PI


def _v_win(t: float, eps: float) -> float:
    x = t - eps
    denom = float(ndtr(x))
    if denom < 1e-300:
        return -x
    return _pdf(x) / denom


def _w_win(t: float, eps: float) -> float:
    v = _v_win(t, eps)
    return v * (v + t - eps)


def _v_draw(t: float, eps: float) -> float:
    abs_t = abs(t)
    a, b = eps - abs_t, -eps - abs_t
    denom = float(ndtr(a) - ndtr(b))
    if denom < 1e-300:
        v = a if a < 0 else 0.0
    else:
        v = (_pdf(b) - _pdf(a)) / denom
    return -v if t < 0 else v


def _w_draw(t: float, eps: float) -> float:
    abs_t = abs(t)
    a, b = eps - abs_t, -eps - abs_t
    denom = float(ndtr(a) - ndtr(b))
    if denom < 1e-300:
        raise NumericalError("draw update is numerically degenerate")
    v = _v_draw(abs_t, eps)
    return v * v + (a * _pdf(a) - b * _pdf(b)) / denom


def trueskill_update(
    r_winner: Rating,
    r_loser: Rating,
    draw: bool = False,
    params: TrueSkillParams = DEFAULT_PARAMS,
) -> tuple[Rating, Rating]:
    """Closed-form two-player update; returns (winner, loser) ratings.

    Both sigmas are inflated by tau before the match. On a win the winner's
    mu increases and the loser's decreases; on a draw the mus move toward
    each other. Raises NumericalError when the update degenerates.
    """
    var_w = r_winner.sigma**2 + params.tau**2
    var_l = r_loser.sigma**2 + params.tau**2
    c2 = var_w + var_l + 2.0 * params.beta**2
    c = math.sqrt(c2)
    t = (r_winner.mu - r_loser.mu) / c
    eps = params.draw_margin() / c
    if draw:
        v, w = _v_draw(t, eps), _w_draw(t, eps)
    else:
        v, w = _v_win(t, eps), _w_win(t, eps)
    if not (math.isfinite(v) and math.isfinite(w)) or w >= 1.0 + 1e-12:
        raise NumericalError(f"update failed: v={v}, w={w}")
    new_mu_w = r_winner.mu + (var_w / c) * v
    new_mu_l = r_loser.mu - (var_l / c) * v
    shrink_w = 1.0 - (var_w / c2) * w
    shrink_l = 1.0 - (var_l / c2) * w
    if shrink_w <= 0.0 or shrink_l <= 0.0:
        raise NumericalError("variance shrink factor is non-positive")
    return (
        Rating(new_mu_w, math.sqrt(var_w * shrink_w)),
        Rating(new_mu_l, math.sqrt(var_l * shrink_l)),
    )


def draw_probability(
    r1: Rating, r2: Rating, params: TrueSkillParams = DEFAULT_PARAMS
) -> float:
    """Probability of a draw between two rated players.

    Computed as the draw likelihood under the performance-difference
    Gaussian normalized by its value for two perfectly known, equally
    skilled players (the canonical match-quality form): maximal for
    identical ratings, decaying with the mu gap and with uncertainty.
    """
    denom = 2.0 * params.beta**2 + r1.sigma**2 + r2.sigma**2
    scale = math.sqrt(2.0 * params.beta**2 / denom)
    return scale * math.exp(-((r1.mu - r2.mu) ** 2) / (2.0 * denom))


def rank(ratings: dict[str, Rating]) -> list[tuple[str, Rating]]:
    """Descending by mu, ties broken lexicographically by model id."""
    if not ratings:
        raise EmptyInput("no ratings to rank")
    return sorted(ratings.items(), key=lambda kv: (-kv[1].mu, kv[0]))


def rank_table(ratings: dict[str, Rating]) -> str:
    lines = [f"{'Rank':>4}  {'Model':<24} {'mu':>8} {'sigma':>8}"]
    for i, (model, rating) in enumerate(rank(ratings), start=1):
        lines.append(f"{i:>4}  {model:<24} {rating.mu:>8.3f} {rating.sigma:>8.3f}")
    return "\n".join(lines)


# --- Comparison scheduling -----------------------------------------------------


@dataclass(frozen=True)
class ScheduledComparison:
    """One plan cell: a model pair judged on one class and stimulus kind."""

    model_a: str
    model_b: str
    source: SourceClass
    stimulus_kind: str
    song_id: str | None = None
    segment_id: str | None = None


@dataclass
class SchedulePlan:
    """Per-assessor comparison plan covering every cell `per_cell` times."""

    cells: list[ScheduledComparison]
    models: list[str]
    per_cell: int

    def __len__(self) -> int:
        return len(self.cells)


def schedule_comparisons(
    models: list[str],
    per_cell: int = 3,
    seed: int = 0,
    segment_pool: list[tuple[str, str]] | None = None,
) -> SchedulePlan:
    """Build a shuffled plan of pairs x 4 classes x 2 stimulus kinds x per_cell.

    Three models at per_cell=3 yield 3*3*4*2 = 72 comparisons. Cell order is
    shuffled per seed; segments (song_id, segment_id) are assigned
    round-robin over the shuffled order when a pool is provided.
    """
    unique = sorted(set(models))
    if len(unique) < 2:
        raise TooFewModels(f"need at least 2 models, got {len(unique)}")
    if per_cell < 1:
        raise RatingError("per_cell must be >= 1")
    cells = [
        ScheduledComparison(a, b, source, kind)
        for i, a in enumerate(unique)
        for b in unique[i + 1 :]
        for source in CLASS_ORDER
        for kind in STIMULUS_KINDS
        for _ in range(per_cell)
    ]
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    order = rng.permutation(len(cells))
    shuffled = [cells[i] for i in order]
    if segment_pool:
        shuffled = [
            ScheduledComparison(
                cell.model_a,
                cell.model_b,
                cell.source,
                cell.stimulus_kind,
                song_id=segment_pool[i % len(segment_pool)][0],
                segment_id=segment_pool[i % len(segment_pool)][1],
            )
            for i, cell in enumerate(shuffled)
        ]
    return SchedulePlan(cells=shuffled, models=unique, per_cell=per_cell)


# --- Segment selection ----------------------------------------------------------


def select_segments(
    song: AudioBuffer,
    n: int,
    segment_seconds: float = 7.0,
    min_gap_seconds: float = 1.0,
    hop_seconds: float = 0.25,
) -> list[tuple[int, int]]:
    """Top-n non-overlapping windows by energy, greedy with min-gap spacing.

    Candidate starts lie on a `hop_seconds` grid; ties favor the earliest
    start. Returns (start, end) sample bounds sorted by start time.
    """
    seg = int(round(segment_seconds * SAMPLE_RATE))
    gap = int(round(min_gap_seconds * SAMPLE_RATE))
    hop = max(1, int(round(hop_seconds * SAMPLE_RATE)))
    if n < 1:
        raise RatingError("n must be >= 1")
    if len(song) < n * seg:
        raise SongTooShort(
            f"song of {len(song)} samples cannot hold {n} segments of {seg}"
        )
    starts = np.arange(0, len(song) - seg + 1, hop)
    sumsq = np.concatenate([[0.0], np.cumsum(np.sum(song.samples**2, axis=0))])
    energies = sumsq[starts + seg] - sumsq[starts]
    order = np.argsort(-energies, kind="stable")
    chosen: list[int] = []
    for idx in order:
        s = int(starts[idx])
        if all(s + seg + gap <= c or c + seg + gap <= s for c in chosen):
            chosen.append(s)
            if len(chosen) == n:
                break
    if len(chosen) < n:
        raise SongTooShort(
            f"could not place {n} segments with {min_gap_seconds}s gaps"
        )
    return [(s, s + seg) for s in sorted(chosen)]


# --- Judgment records and statistics ---------------------------------------------


@dataclass
class ComparisonRecord:
    """One logged AB judgment.

    `comparison_id` identifies the served comparison for idempotent
    submission; `category` is the assessor's panel category.
    """

    assessor: str
    category: str
    model_a: str
    model_b: str
    song_id: str
    segment_id: str
    source: str
    stimulus_kind: str
    choice: str
    elapsed_seconds: float
    switch_count: int
    timestamp: float = 0.0
    comparison_id: str = ""

    def __post_init__(self):
        if self.model_a == self.model_b:
            raise RatingError("a comparison needs two distinct models")
        if self.choice not in ("a", "b"):
            raise RatingError(f"choice must be 'a' or 'b', got {self.choice!r}")
        if self.elapsed_seconds < 0:
            raise RatingError("elapsed_seconds must be >= 0")
        if self.switch_count < 0:
            raise RatingError("switch_count must be >= 0")

    @property
    def winner(self) -> str:
        return self.model_a if self.choice == "a" else self.model_b

    @property
    def loser(self) -> str:
        return self.model_b if self.choice == "a" else self.model_a

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ComparisonRecord":
        return cls(**doc)


def append_record(path: str | Path, record: ComparisonRecord) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
        fh.flush()


def load_records(path: str | Path) -> list[ComparisonRecord]:
    path = Path(path)
    if not path.exists():
        return []
    return [
        ComparisonRecord.from_json(json.loads(line))
        for line in path.read_text().splitlines()
        if line.strip()
    ]


def replay_ratings(
    records: list[ComparisonRecord],
    params: TrueSkillParams = DEFAULT_PARAMS,
    models: list[str] | None = None,
) -> dict[str, Rating]:
    """Fold a judgment log into ratings from the standard initial values."""
    ratings: dict[str, Rating] = {m: Rating() for m in models or []}
    for record in records:
        for model in (record.model_a, record.model_b):
            ratings.setdefault(model, Rating())
        new_w, new_l = trueskill_update(
            ratings[record.winner], ratings[record.loser], draw=False, params=params
        )
        ratings[record.winner] = new_w
        ratings[record.loser] = new_l
    return ratings


def _win_matrices(
    records: list[ComparisonRecord], models: list[str]
) -> dict[str, list[list[float]]]:
    index = {m: i for i, m in enumerate(models)}
    wins = np.zeros((len(models), len(models)))
    for r in records:
        wins[index[r.winner], index[r.loser]] += 1
    totals = wins.sum(axis=1, keepdims=True)
    normalized = np.divide(wins, totals, out=np.zeros_like(wins), where=totals > 0)
    return {"absolute": wins.tolist(), "normalized": normalized.tolist()}


def assessor_stats(records: list[ComparisonRecord]) -> dict:
    """Interaction statistics and win matrices from a judgment log.

    Means and standard deviations are population statistics (the direct
    'mean +/- std' report). Win matrices count row-model wins over
    column models, absolute and row-normalized, overall and per assessor
    category.
    """
    if not records:
        raise EmptyInput("no comparison records")
    elapsed = np.array([r.elapsed_seconds for r in records], dtype=np.float64)
    switches = np.array([r.switch_count for r in records], dtype=np.float64)
    models = sorted({m for r in records for m in (r.model_a, r.model_b)})
    categories = sorted({r.category for r in records})
    stats = {
        "n_comparisons": len(records),
        "elapsed_seconds": {
            "mean": float(elapsed.mean()),
            "std": float(elapsed.std()),
        },
        "switch_count": {
            "mean": float(switches.mean()),
            "std": float(switches.std()),
        },
        "models": models,
        "win_matrix": _win_matrices(records, models),
        "by_category": {
            category: _win_matrices(
                [r for r in records if r.category == category], models
            )
            for category in categories
        },
    }
    return stats
