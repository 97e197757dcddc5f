"""Global signal-to-distortion ratio, its SiSEC median variant, and leaderboards.

The challenge metric for one source is 10*log10 of target energy over
residual-error energy, summed over time and both channels, with no epsilon
in the denominator: a perfect estimate scores +inf, which aggregation
either saturates at +100 dB (default) or skips, per a documented policy.
A song's score is the arithmetic mean of its four per-source scores, and a
dataset's score averages over songs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .audio import SAMPLE_RATE, AudioBuffer
from .dataset import CLASS_ORDER, SourceClass


class EvaluatorError(Exception):
    pass


class LengthMismatch(EvaluatorError):
    pass


class SilentTarget(EvaluatorError):
    pass


class EmptyInput(EvaluatorError):
    pass


class TooFewSongs(EvaluatorError):
    pass


#: Value substituted for +inf per-source scores under the saturate policy.
SATURATION_DB = 100.0


def _finite(value: float, infinity_policy: str) -> float | None:
    if math.isfinite(value):
        return value
    if infinity_policy == "saturate":
        return math.copysign(SATURATION_DB, value)
    if infinity_policy == "skip":
        return None
    raise EvaluatorError(f"unknown infinity policy {infinity_policy!r}")


def sdr_source(
    target: AudioBuffer,
    estimate: AudioBuffer,
    silent_target: str = "skip",
) -> float | None:
    """Per-source SDR in dB; +inf for a perfect estimate.

    A silent target either returns None (policy 'skip': hidden-test
    campaigns commonly exclude sources that are silent in the reference) or
    raises SilentTarget (policy 'error').
    """
    if len(target) != len(estimate):
        raise LengthMismatch(
            f"target has {len(target)} samples, estimate {len(estimate)}"
        )
    signal = float(np.sum(target.samples**2))
    if signal == 0.0:
        if silent_target == "skip":
            return None
        if silent_target == "error":
            raise SilentTarget("target is all zero")
        raise EvaluatorError(f"unknown silent-target policy {silent_target!r}")
    noise = float(np.sum((target.samples - estimate.samples) ** 2))
    if noise == 0.0:
        return math.inf
    return 10.0 * math.log10(signal / noise)


@dataclass
class SdrReport:
    """Per-source SDR values in dB plus their mean.

    per_source may hold +inf (perfect estimate) or None (skipped silent
    target); `mean` applies the infinity policy and averages the remaining
    values. Aggregated reports carry an explicit mean (the mean over songs
    of per-song means), which coincides with the per-source average whenever
    no source was skipped.
    """

    per_source: dict[SourceClass, float | None]
    infinity_policy: str = "saturate"
    mean_override: float | None = None

    @property
    def mean(self) -> float:
        if self.mean_override is not None:
            return self.mean_override
        values = [
            _finite(v, self.infinity_policy)
            for v in self.per_source.values()
            if v is not None
        ]
        values = [v for v in values if v is not None]
        if not values:
            raise EmptyInput("report has no finite per-source values")
        return sum(values) / len(values)

    def value(self, source: SourceClass) -> float | None:
        raw = self.per_source.get(source)
        return None if raw is None else _finite(raw, self.infinity_policy)


def sdr_song(
    targets: dict[SourceClass, AudioBuffer],
    estimates: dict[SourceClass, AudioBuffer],
    silent_target: str = "skip",
    infinity_policy: str = "saturate",
) -> SdrReport:
    """Score one song: per-source SDR for all four classes and their mean."""
    for c in CLASS_ORDER:
        if c not in targets or c not in estimates:
            raise EvaluatorError(f"missing source {c.value}")
    per_source = {
        c: sdr_source(targets[c], estimates[c], silent_target=silent_target)
        for c in CLASS_ORDER
    }
    return SdrReport(per_source=per_source, infinity_policy=infinity_policy)


def sdr_dataset(reports: list[SdrReport]) -> SdrReport:
    """Average reports over songs: per source, and of the per-song means.

    The aggregated `mean` is the mean over songs of each song's mean (the
    order of averaging used for final scores); skipped sources simply drop
    out of their per-source average.
    """
    if not reports:
        raise EmptyInput("no reports to aggregate")
    policy = reports[0].infinity_policy
    per_source: dict[SourceClass, float | None] = {}
    for c in CLASS_ORDER:
        values = [r.value(c) for r in reports if r.value(c) is not None]
        per_source[c] = sum(values) / len(values) if values else None
    song_means = [r.mean for r in reports]
    return SdrReport(
        per_source=per_source,
        infinity_policy=policy,
        mean_override=sum(song_means) / len(song_means),
    )


def segment_scores(
    target: AudioBuffer,
    estimate: AudioBuffer,
    segment_seconds: float = 1.0,
) -> list[float]:
    """Per-segment SDRs over non-overlapping windows; final partial dropped."""
    seg = int(round(segment_seconds * SAMPLE_RATE))
    if seg <= 0:
        raise EvaluatorError("segment length must be positive")
    scores = []
    for start in range(0, len(target) - seg + 1, seg):
        value = sdr_source(
            target.slice(start, start + seg),
            estimate.slice(start, start + seg),
            silent_target="skip",
        )
        if value is not None:
            scores.append(value)
    return scores


def sdr_sisec_median(per_song_per_second_scores: list[list[float]]) -> float:
    """Median over songs of the median over 1-second segment scores."""
    if not per_song_per_second_scores:
        raise EmptyInput("no songs")
    medians = []
    for scores in per_song_per_second_scores:
        if not scores:
            raise EmptyInput("a song has no segment scores")
        medians.append(float(np.median(scores)))
    return float(np.median(medians))


class Phase(Enum):
    """Evaluation phases reveal nested subsets of the test set."""

    PHASE1 = 9
    PHASE2 = 18
    FINAL = 27
    ALL = 0

    @classmethod
    def from_name(cls, name: str) -> "Phase":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise EvaluatorError(f"unknown phase {name!r}") from None


def phase_subset(song_ids: list[str], phase: Phase, seed: int) -> list[str]:
    """Deterministic nested subsets: PHASE1 within PHASE2 within FINAL.

    Ids are sorted before shuffling so the subsets depend only on the id set
    and the seed, not on input order. ALL returns every id.
    """
    ids = sorted(song_ids)
    if phase is Phase.ALL:
        return ids
    if len(ids) < Phase.FINAL.value:
        raise TooFewSongs(
            f"challenge phases need at least {Phase.FINAL.value} songs, got {len(ids)}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    order = rng.permutation(len(ids))
    return [ids[i] for i in order[: phase.value]]


@dataclass
class LeaderboardRow:
    submission_id: str
    report: SdrReport


@dataclass
class Leaderboard:
    """Rows sorted descending by mean SDR; ties broken by submission id."""

    rows: list[LeaderboardRow] = field(default_factory=list)
    phase: Phase = Phase.ALL

    def __post_init__(self):
        self._sort()

    def _sort(self) -> None:
        self.rows.sort(key=lambda r: (-r.report.mean, r.submission_id))

    def add(self, submission_id: str, report: SdrReport) -> None:
        self.rows.append(LeaderboardRow(submission_id, report))
        self._sort()

    def to_table(self) -> str:
        """Plain-text table: Mean, Bass, Drums, Other, Vocals columns."""
        columns = [
            SourceClass.BASS,
            SourceClass.DRUMS,
            SourceClass.OTHER,
            SourceClass.VOCALS,
        ]
        header = f"{'Rank':>4}  {'Submission':<24} {'Mean':>7} " + " ".join(
            f"{c.value.capitalize():>7}" for c in columns
        )
        lines = [header, "-" * len(header)]
        for rank, row in enumerate(self.rows, start=1):
            cells = []
            for c in columns:
                v = row.report.value(c)
                cells.append(f"{v:>7.2f}" if v is not None else f"{'--':>7}")
            lines.append(
                f"{rank:>4}  {row.submission_id:<24} {row.report.mean:>7.2f} "
                + " ".join(cells)
            )
        return "\n".join(lines)

    def to_json(self) -> list[dict]:
        return [
            {
                "submission_id": row.submission_id,
                "mean": row.report.mean,
                "per_source": {
                    c.value: row.report.value(c) for c in CLASS_ORDER
                },
            }
            for row in self.rows
        ]
