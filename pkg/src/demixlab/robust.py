"""Robust-training baselines for corrupted stem datasets.

Two families of defenses are implemented against a pluggable separator:

* dataset refinement, which re-separates every stem of every song with the
  current model, either keeping only each stem's own-class estimate
  (``filtered``) or summing per-class estimates across all input stems
  (``redistributed``), optionally iterated with retraining in between;
* loss truncation, which drops the highest-loss samples of a batch (and,
  for bleeding-style corruption that affects every stem, the highest-loss
  time frames within samples) before the gradient step, plus energy-based
  stem cleaning that flags a stem as clean only when the estimate matching
  its label carries at least 20 dB more energy than every other estimate.

A deliberately small trainable separator (per-source spectral masks under
an L1 magnitude loss) makes the convergence phenomena observable at desk
scale without GPU training.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .audio import AudioBuffer, FrameSpec, istft, stft
from .dataset import CLASS_ORDER, Manifest, SongEntry, SongRef, SourceClass
from .separation import Separator, resolve_separator

logger = logging.getLogger(__name__)


class RobustError(Exception):
    pass


class EmptyInput(RobustError):
    pass


# --- Loss truncation ---------------------------------------------------------


@dataclass(frozen=True)
class TruncationPolicy:
    """Keep losses up to the nearest-rank q-quantile; drop the rest.

    axis 'batch' masks whole samples (rows), 'time' masks frames within each
    sample, 'both' combines the two. Ties at the threshold are kept. No
    truncation is applied during the first `warmup_steps` training steps.
    """

    q: float
    axis: str = "batch"
    warmup_steps: int = 0

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise RobustError(f"quantile {self.q} outside (0, 1]")
        if self.axis not in ("batch", "time", "both"):
            raise RobustError(f"unknown truncation axis {self.axis!r}")
        if self.warmup_steps < 0:
            raise RobustError("warmup_steps must be >= 0")


def _nearest_rank_keep(values: np.ndarray, q: float) -> np.ndarray:
    n = values.shape[-1]
    k = math.ceil(q * n)
    threshold = np.sort(values, axis=-1)[..., k - 1]
    return values <= threshold[..., None]


def truncate_losses(losses: np.ndarray, policy: TruncationPolicy) -> np.ndarray:
    """Boolean keep-mask with the same shape as `losses`.

    For 2-D losses (samples x frames) the batch axis thresholds per-sample
    mean losses and masks whole rows; the time axis thresholds frames within
    each sample. Entries strictly above the nearest-rank q-quantile are
    dropped; ties at the threshold are kept.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise EmptyInput("empty loss tensor")
    if losses.ndim == 1:
        if policy.axis != "batch":
            raise RobustError("1-D losses only support the batch axis")
        return _nearest_rank_keep(losses[None, :], policy.q)[0]
    if losses.ndim != 2:
        raise RobustError(f"losses must be 1-D or 2-D, got shape {losses.shape}")
    row_keep = _nearest_rank_keep(losses.mean(axis=1)[None, :], policy.q)[0]
    frame_keep = _nearest_rank_keep(losses, policy.q)
    if policy.axis == "batch":
        return np.broadcast_to(row_keep[:, None], losses.shape).copy()
    if policy.axis == "time":
        return frame_keep
    return row_keep[:, None] & frame_keep


# --- Dataset refinement ------------------------------------------------------


def _refined_manifest(
    dataset: Manifest, songs: list[SongRef], method: str, failed: list[str]
) -> Manifest:
    provenance = {
        "generator": f"refine-{method}",
        "parent_manifest": str(dataset.root) if dataset.root else None,
    }
    if failed:
        provenance["failed_songs"] = failed
    return Manifest(songs=songs, taxonomy=dataset.taxonomy, provenance=provenance)


def _refine(dataset: Manifest, sep, method: str) -> Manifest:
    out_songs: list[SongRef] = []
    failed: list[str] = []
    for ref in dataset.songs:
        song = dataset.load_song(ref.id)
        try:
            model = resolve_separator(sep, song)
            if method == "filtered":
                new_stems = {
                    c: model.separate(song.stems[c])[c] for c in CLASS_ORDER
                }
            else:
                acc = {c: np.zeros_like(song.stems[c].samples) for c in CLASS_ORDER}
                for input_class in CLASS_ORDER:
                    estimates = model.separate(song.stems[input_class])
                    for c in CLASS_ORDER:
                        acc[c] += estimates[c].samples
                new_stems = {c: AudioBuffer(acc[c]) for c in CLASS_ORDER}
        except Exception as exc:  # separator failure aborts this song only
            logger.warning("refinement failed for song %s: %s", ref.id, exc)
            failed.append(ref.id)
            continue
        out_songs.append(
            SongRef(id=ref.id, stems={c.value: new_stems[c] for c in CLASS_ORDER})
        )
    if dataset.songs and not out_songs:
        raise RobustError("refinement failed for every song")
    return _refined_manifest(dataset, out_songs, method, failed)


def refine_filtered(sep, dataset: Manifest) -> Manifest:
    """Replace each stem by its own-class estimate: content of other classes
    present in the stem is discarded."""
    return _refine(dataset, sep, "filtered")


def refine_redistributed(sep, dataset: Manifest) -> Manifest:
    """Replace each stem by the sum of that class's estimates over all four
    input stems: misplaced content moves to its true class."""
    return _refine(dataset, sep, "redistributed")


@dataclass
class RefinementState:
    """Progress of iterative dataset refinement."""

    iteration: int
    dataset: Manifest
    model: Separator | None
    history: list[tuple[int, Manifest, dict]] = field(default_factory=list)


def iterate_refinement(
    train: Callable[[Manifest], object],
    dataset: Manifest,
    iterations: int,
    method: str = "filtered",
    evaluate: Callable[[object, Manifest], dict] | None = None,
) -> RefinementState:
    """Alternate training and dataset refinement `iterations` times.

    `train` maps a manifest to a separator (or per-song separator factory);
    wrap a frozen separator as ``lambda _: sep``. Each round trains on the
    current dataset from scratch and refines it with the result.
    """
    if iterations < 1:
        raise RobustError("iterations must be >= 1")
    if method not in ("filtered", "redistributed"):
        raise RobustError(f"unknown refinement method {method!r}")
    state = RefinementState(iteration=0, dataset=dataset, model=None)
    for i in range(1, iterations + 1):
        model = train(state.dataset)
        refined = _refine(state.dataset, model, method)
        metrics = evaluate(model, refined) if evaluate else {}
        state = RefinementState(
            iteration=i,
            dataset=refined,
            model=model,
            history=state.history + [(i, refined, metrics)],
        )
    return state


# --- Energy-based stem cleaning ----------------------------------------------


@dataclass
class StemAssessment:
    song_id: str
    source: SourceClass
    clean: bool
    margin_db: float


def energy_clean(
    sep,
    dataset: Manifest,
    threshold_db: float = 20.0,
    saturation_db: float = 100.0,
) -> list[StemAssessment]:
    """Feed each stem through the separator as if it were a mixture.

    A stem is clean iff the energy of the estimate matching its label
    exceeds every other estimate's energy by at least `threshold_db`.
    Margins against silent competitors saturate at `saturation_db`; silent
    stems are never clean. Decisions are invariant to global stem gain for
    masking separators.
    """
    results = []
    for ref in dataset.songs:
        song = dataset.load_song(ref.id)
        model = resolve_separator(sep, song)
        for c in CLASS_ORDER:
            stem = song.stems[c]
            if stem.energy() == 0.0:
                results.append(StemAssessment(ref.id, c, False, -saturation_db))
                continue
            estimates = model.separate(stem)
            own = estimates[c].energy()
            competing = max(
                estimates[other].energy() for other in CLASS_ORDER if other is not c
            )
            if own == 0.0:
                margin = -saturation_db
            elif competing == 0.0:
                margin = saturation_db
            else:
                margin = float(
                    np.clip(10.0 * np.log10(own / competing), -saturation_db, saturation_db)
                )
            results.append(StemAssessment(ref.id, c, margin >= threshold_db, margin))
    return results


# --- Toy trainable mask model --------------------------------------------------


class ToyMaskModel:
    """Per-source non-negative spectral masks, applied bin-wise to the STFT.

    Masks live in [0, 1] and depend on frequency only, so the model accepts
    inputs of any length.
    """

    thread_safe = True

    def __init__(self, masks: np.ndarray, frames: FrameSpec):
        masks = np.asarray(masks, dtype=np.float64)
        if masks.shape != (len(CLASS_ORDER), frames.n_bins):
            raise RobustError(
                f"masks must have shape (4, {frames.n_bins}), got {masks.shape}"
            )
        self.masks = np.clip(masks, 0.0, 1.0)
        self.frames = frames

    @classmethod
    def initial(cls, frames: FrameSpec) -> "ToyMaskModel":
        return cls(np.full((len(CLASS_ORDER), frames.n_bins), 0.5), frames)

    def separate(self, mixture: AudioBuffer) -> dict[SourceClass, AudioBuffer]:
        spec = stft(mixture, self.frames)
        out = {}
        for i, c in enumerate(CLASS_ORDER):
            masked = spec.copy_with(spec.data * self.masks[i][None, :, None])
            out[c] = istft(masked)
        return out


def _song_features(song: SongEntry, frames: FrameSpec) -> tuple[np.ndarray, np.ndarray]:
    """Channel-averaged magnitude features: mixture (F, T), targets (4, F, T)."""
    mixture_mag = stft(song.stem_sum(), frames).magnitudes().mean(axis=0)
    targets = np.stack(
        [stft(song.stems[c], frames).magnitudes().mean(axis=0) for c in CLASS_ORDER]
    )
    return mixture_mag, targets


def _clean_val_loss(masks: np.ndarray, features: list[tuple[np.ndarray, np.ndarray]]) -> float:
    total = 0.0
    for mixture_mag, targets in features:
        err = masks[:, :, None] * mixture_mag[None, :, :] - targets
        total += float(np.mean(np.abs(err)))
    return total / len(features)


def train_toy_mask_model(
    dataset: Manifest,
    policy: TruncationPolicy | None,
    steps: int,
    seed: int,
    frames: FrameSpec = FrameSpec(frame_len=256, hop_len=64),
    learning_rate: float = 0.4,
    batch_size: int = 16,
    val_dataset: Manifest | None = None,
    eval_every: int | None = None,
) -> tuple[ToyMaskModel, dict[str, list[float]]]:
    """Subgradient training of spectral masks with an L1 magnitude loss.

    A training sample is one (song, source) pair: the mask row for that
    source applied to the song's mixture magnitudes against the (possibly
    corrupted) stem magnitudes. Each step draws a minibatch of songs,
    computes per-sample and per-frame L1 losses, optionally drops high-loss
    samples or frames per the truncation policy (after its warmup), and
    updates the masks with the subgradient of the kept entries, projected
    back into [0, 1]. Deterministic for a fixed seed. Returns the model and
    loss curves: 'train' holds per-evaluation mean batch losses, 'val'
    clean-validation losses on `val_dataset` (default: the training set).
    """
    if steps > 100_000:
        raise RobustError("steps capped at 100000 for the desk-scale trainer")
    features = [_song_features(song, frames) for song in dataset.load_songs()]
    if not features:
        raise EmptyInput("dataset has no songs")
    val_features = (
        [_song_features(song, frames) for song in val_dataset.load_songs()]
        if val_dataset is not None
        else features
    )
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    n_classes = len(CLASS_ORDER)
    masks = np.full((n_classes, frames.n_bins), 0.5)
    if eval_every is None:
        eval_every = max(1, len(features) // batch_size)
    curves: dict[str, list[float]] = {"train": [], "val": []}
    curves["val"].append(_clean_val_loss(masks, val_features))
    window_losses: list[float] = []
    for step in range(steps):
        batch = rng.choice(len(features), size=min(batch_size, len(features)), replace=False)
        mix_mags = np.stack([features[i][0] for i in batch])  # (B, F, T)
        targets = np.stack([features[i][1] for i in batch])  # (B, 4, F, T)
        err = masks[None, :, :, None] * mix_mags[:, None, :, :] - targets
        frame_losses = np.abs(err).mean(axis=2)  # (B, 4, T): per sample, per frame
        window_losses.append(float(frame_losses.mean()))
        if not np.isfinite(window_losses[-1]):
            raise RobustError(f"training diverged at step {step}")
        flat = frame_losses.reshape(-1, frame_losses.shape[2])  # (B*4, T)
        keep = np.ones_like(flat, dtype=bool)
        if policy is not None and step >= policy.warmup_steps:
            keep = truncate_losses(flat, policy)
        keep = keep.reshape(frame_losses.shape)
        weights = keep.astype(np.float64)[:, :, None, :]  # (B, 4, 1, T)
        kept_per_class = weights.sum(axis=(0, 3))  # (4, 1)
        if np.all(kept_per_class == 0.0):
            continue
        grad = (np.sign(err) * mix_mags[:, None, :, :] * weights).sum(axis=(0, 3))
        grad /= np.maximum(kept_per_class, 1.0) * frames.n_bins
        # Geometric decay to 1% of the initial rate: the L1 subgradient does
        # not vanish near the optimum, so the step size must.
        lr = learning_rate * 0.01 ** (step / max(1, steps))
        masks = np.clip(masks - lr * grad, 0.0, 1.0)
        if (step + 1) % eval_every == 0 or step == steps - 1:
            curves["train"].append(float(np.mean(window_losses)))
            window_losses = []
            curves["val"].append(_clean_val_loss(masks, val_features))
    return ToyMaskModel(masks, frames), curves


def toy_trainer(
    policy: TruncationPolicy | None,
    steps: int,
    seed: int,
    frames: FrameSpec = FrameSpec(frame_len=256, hop_len=64),
    **kwargs,
) -> Callable[[Manifest], ToyMaskModel]:
    """Factory suitable for `iterate_refinement`'s train argument."""

    def train(dataset: Manifest) -> ToyMaskModel:
        model, _ = train_toy_mask_model(
            dataset, policy, steps, seed, frames=frames, **kwargs
        )
        return model

    return train
