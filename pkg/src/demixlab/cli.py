"""Command-line entry point for scripted, reproducible runs.

Every artifact-producing subcommand stamps its output directory with a
provenance file (tool version, subcommand, seed, config hash); re-running
with the same arguments reproduces outputs bit-exactly. All randomness
flows from the --seed flag. Errors are reported as JSON on stderr with exit
code 1; usage problems exit 2.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import __version__
from .audio import AudioBuffer, load_wav
from .corruptor import (
    BleedConfig,
    LabelNoiseConfig,
    ConfusionMatrix,
    corrupt_bleeding,
    corrupt_label_noise,
    effective_corruption_fraction,
)
from .dataset import CLASS_ORDER, Manifest, SourceClass, load_manifest
from .evaluator import (
    Leaderboard,
    LeaderboardRow,
    Phase,
    SdrReport,
    phase_subset,
    sdr_dataset,
    sdr_song,
    segment_scores,
    sdr_sisec_median,
)
from .rating import (
    TrueSkillParams,
    assessor_stats,
    load_records,
    rank_table,
    replay_ratings,
    select_segments,
)
from .robust import (
    TruncationPolicy,
    energy_clean,
    iterate_refinement,
    train_toy_mask_model,
)
from .separation import external_separator, oracle_factory, passthrough
from .service import ListeningService, StimulusStore, build_app, prepare_stimuli


def _write_provenance(out_dir: Path, subcommand: str, config: dict) -> None:
    canonical = json.dumps(config, sort_keys=True)
    doc = {
        "tool": "demixlab",
        "version": __version__,
        "subcommand": subcommand,
        "seed": config.get("seed"),
        "config": config,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "provenance.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _report_to_json(report: SdrReport) -> dict:
    return {
        "mean": report.mean,
        "per_source": {c.value: report.value(c) for c in CLASS_ORDER},
    }


def _separator_from_options(oracle_manifest: str | None, external_cmd: str | None):
    if oracle_manifest and external_cmd:
        raise click.UsageError("choose one of --oracle-manifest / --external-cmd")
    if oracle_manifest:
        return oracle_factory(load_manifest(oracle_manifest))
    if external_cmd:
        return external_separator(external_cmd)
    raise click.UsageError("a separator is required: --oracle-manifest or --external-cmd")


@click.group()
@click.version_option(__version__)
def cli():
    """Dataset corruption, SDR evaluation, robust-training baselines and
    AB listening tests for music demixing experiments."""


@cli.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--kind", type=click.Choice(["label-noise", "bleeding"]), required=True)
@click.option("--rate", default=0.20, show_default=True, help="Relabel probability (label noise only).")
@click.option("--seed", default=0, show_default=True)
@click.option("--confusion", type=click.Path(exists=True), default=None,
              help="JSON file {labels: [...], rows: [[...]]} overriding the default confusion matrix.")
@click.option("--jobs", default=None, type=int, help="Parallel song workers (results are job-count independent).")
@click.option("--wav-format", default="float32", type=click.Choice(["float32", "pcm16"]),
              show_default=True, help="Output sample format (bleeding sums can exceed pcm16 headroom).")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON overriding corruption parameters (e.g. bleeding ranges: "
                   "gain_db_range, order_range, lowpass_cutoff_range, ...).")
def corrupt(manifest, out, kind, rate, seed, confusion, jobs, wav_format, config_path):
    """Generate a corrupted copy of a dataset plus its corruption log."""
    source = load_manifest(manifest)
    out_dir = Path(out)
    extra = json.loads(Path(config_path).read_text()) if config_path else {}
    if kind == "label-noise":
        matrix = LabelNoiseConfig.__dataclass_fields__["confusion"].default
        if confusion:
            doc = json.loads(Path(confusion).read_text())
            matrix = ConfusionMatrix(tuple(doc["labels"]), np.array(doc["rows"]))
        conf = LabelNoiseConfig(rate=extra.get("rate", rate), confusion=matrix, seed=seed)
        _, log = corrupt_label_noise(source, conf, out_dir=out_dir, jobs=jobs,
                                     wav_format=wav_format)
        fraction = effective_corruption_fraction(log, source)
        summary = {"kind": kind, "relabeled_stems": len(log.records),
                   "effective_corruption_fraction": fraction}
    else:
        known = {f for f in BleedConfig.__dataclass_fields__ if f != "seed"}
        ranges = {k: tuple(v) for k, v in extra.items() if k in known}
        _, log = corrupt_bleeding(source, BleedConfig(seed=seed, **ranges),
                                  out_dir=out_dir, jobs=jobs, wav_format=wav_format)
        summary = {"kind": kind, "bleed_records": len(log.records)}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_provenance(out_dir, "corrupt",
                      {"manifest": str(manifest), "kind": kind, "rate": rate, "seed": seed,
                       "wav_format": wav_format, "config": extra})
    click.echo(json.dumps(summary))


@cli.command()
@click.option("--estimates", required=True, type=click.Path(exists=True),
              help="Directory tree song_id/{bass,drums,other,vocals}.wav.")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--submission-id", default="submission", show_default=True)
@click.option("--phase", default="all", type=click.Choice(["phase1", "phase2", "final", "all"]))
@click.option("--seed", default=0, show_default=True, help="Seed for the phase subset draw.")
@click.option("--sisec", is_flag=True, help="Also compute the median-over-1s-segments score.")
@click.option("--jobs", default=None, type=int)
def evaluate(estimates, manifest, out, submission_id, phase, seed, sisec, jobs):
    """Score an estimates tree against reference stems (global SDR)."""
    reference = load_manifest(manifest)
    est_root = Path(estimates)
    out_dir = Path(out)
    ids = phase_subset(reference.song_ids(), Phase.from_name(phase), seed)

    def score(song_id: str):
        song = reference.load_song(song_id)
        est = {
            c: load_wav(est_root / song_id / f"{c.value}.wav") for c in CLASS_ORDER
        }
        report = sdr_song(song.stems, est)
        segments = (
            {c.value: segment_scores(song.stems[c], est[c]) for c in CLASS_ORDER}
            if sisec
            else None
        )
        return song_id, report, segments

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        scored = list(pool.map(score, ids))
    reports = {song_id: report for song_id, report, _ in scored}
    aggregate = sdr_dataset(list(reports.values()))
    doc = {
        "submission_id": submission_id,
        "phase": phase,
        "songs": {song_id: _report_to_json(r) for song_id, r in reports.items()},
        "aggregate": _report_to_json(aggregate),
    }
    if sisec:
        doc["sisec_median"] = {
            c.value: sdr_sisec_median([segs[c.value] for _, _, segs in scored])
            for c in CLASS_ORDER
        }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    board = Leaderboard(rows=[LeaderboardRow(submission_id, aggregate)],
                        phase=Phase.from_name(phase))
    (out_dir / "leaderboard.txt").write_text(board.to_table() + "\n")
    _write_provenance(out_dir, "evaluate",
                      {"estimates": str(estimates), "manifest": str(manifest),
                       "phase": phase, "seed": seed, "submission_id": submission_id})
    click.echo(json.dumps({"mean_sdr": aggregate.mean}))


@cli.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--method", type=click.Choice(["filtered", "redistributed"]), default="filtered", show_default=True)
@click.option("--iterations", default=1, show_default=True)
@click.option("--oracle-manifest", type=click.Path(exists=True), default=None,
              help="Reference manifest for a per-song ideal-ratio-mask separator.")
@click.option("--external-cmd", default=None, help="External separator command.")
@click.option("--seed", default=0, show_default=True)
def refine(manifest, out, method, iterations, oracle_manifest, external_cmd, seed):
    """Iteratively re-separate every stem of a dataset to remove corruptions."""
    dataset = load_manifest(manifest)
    separator = _separator_from_options(oracle_manifest, external_cmd)
    state = iterate_refinement(lambda _dataset: separator, dataset, iterations, method)
    out_dir = Path(out)
    from .dataset import materialize_manifest, save_manifest

    final = materialize_manifest(state.dataset, out_dir)
    save_manifest(final, out_dir / "manifest.json")
    history = [{"iteration": i, "songs": len(m.songs), "metrics": metrics}
               for i, m, metrics in state.history]
    (out_dir / "refine_history.json").write_text(json.dumps(history, indent=2) + "\n")
    _write_provenance(out_dir, "refine",
                      {"manifest": str(manifest), "method": method,
                       "iterations": iterations, "seed": seed})
    click.echo(json.dumps({"iterations": state.iteration, "songs": len(final.songs)}))


@cli.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--threshold-db", default=20.0, show_default=True)
@click.option("--oracle-manifest", type=click.Path(exists=True), default=None)
@click.option("--external-cmd", default=None)
@click.option("--seed", default=0, show_default=True)
def clean(manifest, out, threshold_db, oracle_manifest, external_cmd, seed):
    """Flag stems whose own-class estimate dominates by the energy margin."""
    dataset = load_manifest(manifest)
    separator = _separator_from_options(oracle_manifest, external_cmd)
    assessments = energy_clean(separator, dataset, threshold_db=threshold_db)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [
        {"song_id": a.song_id, "source": a.source.value, "clean": a.clean,
         "margin_db": a.margin_db}
        for a in assessments
    ]
    excluded = sum(1 for a in assessments if not a.clean) / len(assessments)
    doc = {"threshold_db": threshold_db, "excluded_fraction": excluded, "stems": rows}
    (out_dir / "clean_report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write_provenance(out_dir, "clean",
                      {"manifest": str(manifest), "threshold_db": threshold_db, "seed": seed})
    click.echo(json.dumps({"excluded_fraction": excluded}))


@cli.command("toy-train")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--steps", default=200, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--truncate-q", default=None, type=float,
              help="Loss-truncation quantile; omit to train without truncation.")
@click.option("--truncate-axis", default="batch", type=click.Choice(["batch", "time", "both"]))
@click.option("--warmup-steps", default=0, show_default=True)
@click.option("--val-manifest", type=click.Path(exists=True), default=None,
              help="Clean dataset for validation-loss curves (default: training set).")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON with trainer hyperparameters (learning_rate, batch_size, eval_every).")
def toy_train(manifest, out, steps, seed, truncate_q, truncate_axis, warmup_steps,
              val_manifest, config_path):
    """Train the desk-scale spectral-mask separator, with optional truncation."""
    dataset = load_manifest(manifest)
    val = load_manifest(val_manifest) if val_manifest else None
    policy = (
        TruncationPolicy(q=truncate_q, axis=truncate_axis, warmup_steps=warmup_steps)
        if truncate_q is not None
        else None
    )
    extra = json.loads(Path(config_path).read_text()) if config_path else {}
    allowed = {"learning_rate", "batch_size", "eval_every"}
    kwargs = {k: v for k, v in extra.items() if k in allowed}
    model, curves = train_toy_mask_model(dataset, policy, steps, seed, val_dataset=val,
                                         **kwargs)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "loss_curves.json").write_text(json.dumps(curves, indent=2) + "\n")
    np.savez(out_dir / "masks.npz", masks=model.masks)
    _plot_curves(curves, out_dir / "loss_curves.png")
    _write_provenance(out_dir, "toy-train",
                      {"manifest": str(manifest), "steps": steps, "seed": seed,
                       "truncate_q": truncate_q, "truncate_axis": truncate_axis,
                       "warmup_steps": warmup_steps})
    click.echo(json.dumps({"final_val_loss": curves["val"][-1]}))


def _plot_curves(curves: dict, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    if curves["train"]:
        ax.plot(range(1, len(curves["train"]) + 1), curves["train"], label="train")
    ax.plot(range(len(curves["val"])), curves["val"], label="clean validation")
    ax.set_xlabel("evaluation")
    ax.set_ylabel("L1 spectral loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


@cli.command()
@click.option("--log", "log_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--beta", default=25.0 / 6.0, show_default=True)
@click.option("--tau", default=25.0 / 300.0, show_default=True)
@click.option("--draw-probability", default=0.10, show_default=True)
def rate(log_path, out, beta, tau, draw_probability):
    """Replay a judgment log into TrueSkill ratings and a ranking table."""
    params = TrueSkillParams(beta=beta, tau=tau, draw_probability=draw_probability)
    records = load_records(log_path)
    ratings = replay_ratings(records, params)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {m: {"mu": r.mu, "sigma": r.sigma} for m, r in sorted(ratings.items())}
    (out_dir / "ratings.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (out_dir / "ranking.txt").write_text(rank_table(ratings) + "\n")
    _write_provenance(out_dir, "rate",
                      {"log": str(log_path), "beta": beta, "tau": tau,
                       "draw_probability": draw_probability, "seed": None})
    click.echo(json.dumps(doc))


@cli.command()
@click.option("--log", "log_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def stats(log_path, out):
    """Assessor interaction statistics and win matrices from a judgment log."""
    records = load_records(log_path)
    doc = assessor_stats(records)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "stats.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write_provenance(out_dir, "stats", {"log": str(log_path), "seed": None})
    click.echo(json.dumps({"n_comparisons": doc["n_comparisons"]}))


@cli.command()
@click.option("--wav", required=True, type=click.Path(exists=True))
@click.option("--n", default=4, show_default=True)
@click.option("--seconds", default=7.0, show_default=True)
@click.option("--min-gap", default=1.0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def segments(wav, n, seconds, min_gap, out):
    """Select the n highest-energy non-overlapping segments of a song."""
    song = load_wav(wav)
    bounds = select_segments(song, n, seconds, min_gap)
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    doc = [{"start": s, "end": e, "start_seconds": s / song.sample_rate,
            "end_seconds": e / song.sample_rate} for s, e in bounds]
    out_path.write_text(json.dumps(doc, indent=2) + "\n")
    click.echo(json.dumps(doc))


@cli.command("prepare-stimuli")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--model", "models", multiple=True, required=True,
              help="Repeatable: name=oracle | name=passthrough:<class> | name=external:<cmd>.")
@click.option("--n-segments", default=4, show_default=True)
@click.option("--segment-seconds", default=7.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
def prepare_stimuli_cmd(manifest, out, models, n_segments, segment_seconds, seed):
    """Render extraction/residual/reference clips for the listening test."""
    dataset = load_manifest(manifest)
    separators = {}
    for entry in models:
        name, _, spec = entry.partition("=")
        if not spec:
            raise click.UsageError(f"model option {entry!r} must look like name=kind")
        if spec == "oracle":
            separators[name] = oracle_factory(dataset)
        elif spec.startswith("passthrough:"):
            separators[name] = passthrough(SourceClass.from_name(spec.split(":", 1)[1]))
        elif spec.startswith("external:"):
            separators[name] = external_separator(spec.split(":", 1)[1])
        else:
            raise click.UsageError(f"unknown model spec {spec!r}")
    store = prepare_stimuli(
        separators, dataset, out, n_segments=n_segments,
        segment_seconds=segment_seconds, salt=str(seed),
    )
    _write_provenance(Path(out), "prepare-stimuli",
                      {"manifest": str(manifest), "models": sorted(separators),
                       "n_segments": n_segments, "segment_seconds": segment_seconds,
                       "seed": seed})
    click.echo(json.dumps({"stimuli": len(store.stimuli), "models": store.models}))


@cli.command()
@click.option("--store", "store_dir", type=click.Path(exists=True), default=None)
@click.option("--log", "log_path", type=click.Path(), default=None)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8765, show_default=True)
@click.option("--per-cell", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--demo", is_flag=True,
              help="Build a tiny synthetic two-model store (8 comparisons per assessor).")
def serve(store_dir, log_path, host, port, per_cell, seed, demo):
    """Run the AB listening-test HTTP service."""
    import uvicorn

    if demo:
        store_dir = store_dir or tempfile.mkdtemp(prefix="demixlab-demo-")
        store = build_demo_store(Path(store_dir), seed=seed)
        per_cell = 1
        click.echo(json.dumps({"demo_store": str(store_dir)}))
    else:
        if not store_dir:
            raise click.UsageError("--store is required (or pass --demo)")
        store = StimulusStore.load(store_dir)
    log_path = log_path or str(Path(store_dir) / "comparisons.jsonl")
    service = ListeningService(store, log_path, per_cell=per_cell, seed=seed)
    uvicorn.run(build_app(service), host=host, port=port, log_level="warning")


def build_demo_store(out_dir: Path, seed: int = 0) -> StimulusStore:
    """Two synthetic models on one synthetic song: an 8-comparison plan."""
    from .dataset import Manifest, SongRef
    from .separation import OracleIrm

    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    n = 6 * 44100
    t = np.arange(n) / 44100.0
    stems = {}
    for c, freq in zip(CLASS_ORDER, (220.0, 55.0, 3000.0, 880.0)):
        tone = 0.2 * np.sin(2 * np.pi * freq * t) * (0.5 + 0.5 * np.sin(2 * np.pi * 0.5 * t))
        stems[c.value] = AudioBuffer(np.stack([tone, tone * 0.8]))
    manifest = Manifest(songs=[SongRef(id="demo_song", stems=stems)])
    song = manifest.load_song("demo_song")
    models = {
        "model_alpha": OracleIrm.for_song(song),
        "model_beta": passthrough(SourceClass.VOCALS),
    }
    return prepare_stimuli(
        models, manifest, out_dir, n_segments=2, segment_seconds=1.0,
        min_gap_seconds=0.5, salt=str(seed),
    )


@cli.command()
@click.option("--out", required=True, type=click.Path())
@click.option("--reports", multiple=True, type=click.Path(exists=True),
              help="Repeatable: evaluation report.json files to merge into a leaderboard.")
@click.option("--log", "log_path", type=click.Path(exists=True), default=None,
              help="Judgment log for the SDR-gap vs preference agreement figure.")
def report(out, reports, log_path):
    """Emit leaderboard tables and the SDR-vs-preference agreement CSV/plot."""
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    loaded = {}
    board = Leaderboard(rows=[])
    for path in reports:
        doc = json.loads(Path(path).read_text())
        sdr = SdrReport(
            per_source={
                c: doc["aggregate"]["per_source"].get(c.value) for c in CLASS_ORDER
            },
            mean_override=doc["aggregate"]["mean"],
        )
        loaded[doc["submission_id"]] = sdr
        board.add(doc["submission_id"], sdr)
    if reports:
        (out_dir / "leaderboard.txt").write_text(board.to_table() + "\n")
        with (out_dir / "leaderboard.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["submission_id", "mean", "bass", "drums", "other", "vocals"])
            for row in board.rows:
                writer.writerow([
                    row.submission_id, row.report.mean,
                    row.report.value(SourceClass.BASS), row.report.value(SourceClass.DRUMS),
                    row.report.value(SourceClass.OTHER), row.report.value(SourceClass.VOCALS),
                ])
    if log_path:
        if not loaded:
            raise click.UsageError("--log needs --reports to look up per-model scores")
        rows = _agreement_rows(load_records(log_path), loaded)
        with (out_dir / "agreement.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model_a", "model_b", "song_id", "source", "stimulus_kind",
                             "sdr_gap_db", "agreement", "n"])
            writer.writerows(rows)
        _plot_agreement(rows, out_dir / "agreement.png")
    click.echo(json.dumps({"rows": len(board.rows), "agreement": bool(log_path)}))


def _agreement_rows(records, reports: dict) -> list:
    """Group judgments by (pair, song, class, kind); average agreement with SDR."""
    groups = {}
    for r in records:
        if r.model_a not in reports or r.model_b not in reports:
            continue
        source = SourceClass.from_name(r.source)
        sdr_a = reports[r.model_a].value(source)
        sdr_b = reports[r.model_b].value(source)
        if sdr_a is None or sdr_b is None:
            continue
        pair = tuple(sorted((r.model_a, r.model_b)))
        key = (pair, r.song_id, r.source, r.stimulus_kind)
        higher = r.model_a if sdr_a >= sdr_b else r.model_b
        agree = 1.0 if r.winner == higher else 0.0
        gap = abs(sdr_a - sdr_b)
        groups.setdefault(key, []).append((gap, agree))
    rows = []
    for (pair, song_id, source, kind), values in sorted(groups.items()):
        gaps = [g for g, _ in values]
        agrees = [a for _, a in values]
        rows.append([pair[0], pair[1], song_id, source, kind,
                     sum(gaps) / len(gaps), sum(agrees) / len(agrees), len(values)])
    return rows


def _plot_agreement(rows: list, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    if rows:
        ax.scatter([r[5] for r in rows], [r[6] for r in rows], alpha=0.6)
    ax.set_xlabel("SDR gap (dB)")
    ax.set_ylabel("agreement with SDR ranking")
    ax.set_ylim(-0.05, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def main():
    try:
        cli.main(standalone_mode=False)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.UsageError as exc:
        exc.show()
        sys.exit(2)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except Exception as exc:  # runtime failure: machine-readable on stderr
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}),
              file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
