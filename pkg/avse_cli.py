"""
Command line interface for the AVSE toolkit.

    avse corpus    build the synthetic audio-visual corpus
    avse simulate  write a mixture dataset descriptor (dsav, dssv or ssav)
    avse train     train one model variant (spk runs in two steps)
    avse evaluate  score checkpoints on descriptors into a report
    avse embed     export visual embeddings, project and plot them
    avse report    merge evaluation reports into one table, optionally check
                   seed-median orderings across variants

Failures print one JSON line {"error", "message"} on stderr and exit with
2 (configuration), 3 (pipeline state), 4 (I/O) or 1 (anything else).
"""
import dataclasses
import json
import logging
import sys
from pathlib import Path

import click

import artifact_storage
import avcorpus
import config
import embedviz
import evalkit
import mixsim
import sepnet
import trainkit
from errors import AvseError, CheckpointError, ConfigError, OrderingViolation, StateError, exit_code_for

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)


# Helper to pretty print JSON
def print_json(data):
    if data is not None:
        click.echo(json.dumps(data, indent=2, sort_keys=True))
    else:
        click.echo("No data to display.")


def _attach_log_file(path: str) -> None:
    root = logging.getLogger()
    target = str(Path(path).absolute())
    if any(isinstance(h, logging.FileHandler) and h.baseFilename == target for h in root.handlers):
        return
    Path(target).parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(target)
    handler.setFormatter(logging.Formatter(config.LOG_FORMAT))
    root.addHandler(handler)


class AvseGroup(click.Group):
    """Maps toolkit errors to a JSON error line and the exit-code contract."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (AvseError, OSError) as e:
            click.echo(json.dumps({"error": type(e).__name__, "message": str(e)}), err=True)
            logger.error(f"{type(e).__name__}: {e}")
            ctx.exit(exit_code_for(e))


def _run_config(ctx) -> config.RunConfig:
    if "run_config" not in ctx.obj:
        ctx.obj["run_config"] = config.load_run_config(ctx.obj["config_path"])
    return ctx.obj["run_config"]


def _store(manifest_dir: str) -> avcorpus.UtteranceStore:
    return avcorpus.UtteranceStore(avcorpus.load_manifest(manifest_dir))


@click.group(cls=AvseGroup)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=str(config.DEFAULT_CONFIG_FILE),
              show_default=True, help="RunConfig JSON file.")
@click.option("--workers", type=int, default=config.DEFAULT_WORKERS, show_default=True,
              help="Parallel workers for corpus generation and evaluation.")
@click.option("--log-file", default=config.LOG_FILE, show_default=True, help="Where to append log output.")
@click.pass_context
def cli(ctx, config_path, workers, log_file):
    """Decoupled audio-visual speaker extraction toolkit."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["workers"] = max(1, workers)
    if log_file:
        _attach_log_file(log_file)


# --- Corpus ---

@cli.command("corpus")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output corpus directory.")
@click.pass_context
def cmd_corpus(ctx, out_dir):
    """Synthesizes the corpus and writes manifest.jsonl + corpus.json."""
    cfg = _run_config(ctx)
    manifest = avcorpus.build_corpus(cfg.corpus, out_dir, workers=ctx.obj["workers"])
    click.secho(f"Corpus written to {out_dir}", fg="green")
    print_json({"manifest": str(Path(out_dir) / "manifest.jsonl"), "counts": manifest.counts})


# --- Simulate ---

@cli.command("simulate")
@click.option("--manifest", "manifest_dir", required=True, type=click.Path(exists=True), help="Corpus directory.")
@click.option("--variant", required=True, type=click.Choice(config.DATASET_VARIANTS))
@click.option("--split", required=True, type=click.Choice(config.SPLITS))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="Descriptor (.jsonl) to write.")
@click.option("--pairs", type=int, default=None, help="Number of mixtures (default: simulate.pairs[split]).")
@click.option("--seed", type=int, default=None, help="Dataset seed (default: simulate.seed).")
@click.option("--sir-range", type=float, nargs=2, default=None, help="Override the [-5, 10] dB SIR range.")
@click.option("--cross-speaker-shuffle", is_flag=True, default=False,
              help="dssv only: permute visual references across speakers.")
@click.option("--materialize", "materialize_dir", type=click.Path(file_okay=False), default=None,
              help="Also write mixture/target WAV files under this directory.")
@click.pass_context
def cmd_simulate(ctx, manifest_dir, variant, split, out_path, pairs, seed, sir_range, cross_speaker_shuffle, materialize_dir):
    """Samples a mixture dataset descriptor."""
    cfg = _run_config(ctx)
    cross = cross_speaker_shuffle or cfg.simulate.cross_speaker_shuffle
    if cross and variant != "dssv":
        raise ConfigError("--cross-speaker-shuffle applies to the dssv variant only")
    manifest = avcorpus.load_manifest(manifest_dir)
    seed = cfg.simulate.seed if seed is None else seed
    dataset = mixsim.build_dataset(
        manifest,
        variant,
        split,
        seed,
        cfg.simulate.pairs_for(split) if pairs is None else pairs,
        sir_range=tuple(sir_range) if sir_range else config.SIR_RANGE_DB,
        cross_speaker_visual=cross,
    )
    if cross:
        dataset = mixsim.reshuffle_epoch(dataset, 0, cross_speaker=True)
    mixsim.write_descriptor(dataset, out_path)

    materialize_dir = materialize_dir or (str(Path(out_path).parent / "wav") if cfg.simulate.materialize else None)
    if materialize_dir:
        mixsim.materialize(dataset, avcorpus.UtteranceStore(manifest), materialize_dir)
    click.secho(f"Wrote {len(dataset)} {variant}/{split} mixtures to {out_path}", fg="green")


# --- Train ---

@cli.command("train")
@click.option("--variant", required=True, type=click.Choice(config.MODEL_VARIANTS))
@click.option("--manifest", "manifest_dir", required=True, type=click.Path(exists=True), help="Corpus directory.")
@click.option("--train-set", type=click.Path(dir_okay=False), default=None, help="Training descriptor.")
@click.option("--dev-set", type=click.Path(dir_okay=False), default=None, help="Validation descriptor.")
@click.option("--out", "out_ckpt", required=True, type=click.Path(dir_okay=False), help="Checkpoint to write.")
@click.option("--step", type=click.IntRange(1, 2), default=None, help="spk only: 1 = identity pre-training, 2 = extraction.")
@click.option("--init-ckpt", type=click.Path(dir_okay=False), default=None, help="spk step 2: the step-1 checkpoint.")
@click.option("--spk-ckpt", type=click.Path(dir_okay=False), default=None, help="davse: trained spk checkpoint.")
@click.option("--sync-ckpt", type=click.Path(dir_okay=False), default=None, help="davse: trained sync checkpoint.")
@click.option("--visual-field", type=click.Choice(config.VISUAL_FIELDS), default=None, help="Override model.visual_field.")
@click.option("--max-epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None, help="Initial learning rate.")
@click.option("--seed", type=int, default=None, help="Training seed.")
@click.option("--log", "log_path", type=click.Path(dir_okay=False), default=None, help="Epoch log (JSON lines).")
@click.pass_context
def cmd_train(ctx, variant, manifest_dir, train_set, dev_set, out_ckpt, step, init_ckpt, spk_ckpt, sync_ckpt,
              visual_field, max_epochs, batch_size, lr, seed, log_path):
    """Trains one model variant and writes its best-dev checkpoint."""
    cfg = _run_config(ctx)
    overrides = {k: v for k, v in (("max_epochs", max_epochs), ("batch_size", batch_size),
                                   ("initial_lr", lr), ("seed", seed)) if v is not None}
    schedule = dataclasses.replace(cfg.train, **overrides)
    log_path = log_path or str(Path(out_ckpt).with_suffix(".trainlog.jsonl"))
    store = _store(manifest_dir)

    def datasets():
        if not train_set or not dev_set:
            raise ConfigError(f"{variant} training needs --train-set and --dev-set")
        return mixsim.load_descriptor(train_set), mixsim.load_descriptor(dev_set)

    model_overrides = {"visual_field": visual_field} if visual_field else {}

    if variant == "spk":
        if step is None:
            raise ConfigError("spk training runs in two steps; pass --step 1 or --step 2")
        if step == 1:
            n_train = len(store.manifest.speakers("train"))
            model = sepnet.build_model(cfg.model_config("spk", n_speakers=n_train, **model_overrides), seed=schedule.seed)
            log = trainkit.train_spk_step1(model, store, schedule, out_ckpt, log_path)
        else:
            if not init_ckpt:
                raise StateError("spk step 2 needs the step-1 checkpoint (--init-ckpt); run --step 1 first")
            model = sepnet.load_checkpoint(init_ckpt)
            if model.stage != "spk_step1":
                raise StateError(f"{init_ckpt} is not a step-1 checkpoint (stage={model.stage})")
            train, dev = datasets()
            log = trainkit.train_spk_step2(model, train, dev, schedule, store, out_ckpt, log_path)
    elif variant == "davse":
        if not spk_ckpt or not sync_ckpt:
            raise CheckpointError("davse training needs both --spk-ckpt and --sync-ckpt")
        train, dev = datasets()
        model = sepnet.build_model(cfg.model_config("davse", **model_overrides), seed=schedule.seed)
        log = trainkit.train_davse(model, train, dev, schedule, store, spk_ckpt, sync_ckpt, out_ckpt, log_path)
    else:
        if step is not None:
            raise ConfigError("--step applies to the spk variant only")
        train, dev = datasets()
        model = sepnet.build_model(cfg.model_config(variant, **model_overrides), seed=schedule.seed)
        procedure = trainkit.train_baseline if variant == "baseline" else trainkit.train_sync
        log = procedure(model, train, dev, schedule, store, out_ckpt, log_path)

    click.secho(f"Training finished ({log.stop_reason}); checkpoint at {out_ckpt}", fg="green")
    print_json({**log.summary(), "parameters": model.count_parameters()})


# --- Evaluate ---

@cli.command("evaluate")
@click.option("--manifest", "manifest_dir", required=True, type=click.Path(exists=True), help="Corpus directory.")
@click.option("--ckpt", "ckpts", multiple=True, type=click.Path(dir_okay=False), help="Checkpoint(s) to score.")
@click.option("--dataset", "datasets", multiple=True, type=click.Path(dir_okay=False),
              help="Descriptor(s) to score on.")
@click.option("--sets-dir", type=click.Path(file_okay=False), default=None,
              help="Without --dataset: score <sets-dir>/<variant>_<split>.jsonl for eval.datasets and eval.split.")
@click.option("--mixture-row/--no-mixture-row", default=True, show_default=True,
              help="Also score the unprocessed mixture.")
@click.option("--report", "report_path", required=True, type=click.Path(dir_okay=False), help="Report JSON to write.")
@click.option("--pesq-cmd", default=None, help="External PESQ command (called with reference and estimate WAVs).")
@click.pass_context
def cmd_evaluate(ctx, manifest_dir, ckpts, datasets, sets_dir, mixture_row, report_path, pesq_cmd):
    """Scores every checkpoint on every descriptor."""
    cfg = _run_config(ctx)
    if not datasets:
        if not sets_dir:
            raise ConfigError("Pass --dataset descriptor(s) or --sets-dir")
        datasets = cfg.eval.descriptor_paths(sets_dir)
        missing = [str(p) for p in datasets if not p.exists()]
        if missing:
            raise ConfigError(f"Descriptor(s) not found under {sets_dir}: {', '.join(missing)}")
    store = _store(manifest_dir)
    estimators = [evalkit.MixtureEstimator()] if mixture_row else []
    estimators += [evalkit.ModelEstimator.from_checkpoint(path) for path in ckpts]
    if not estimators:
        raise ConfigError("Nothing to evaluate: pass --ckpt or keep --mixture-row")
    pesq_cmd = pesq_cmd or cfg.eval.pesq_cmd or config.PESQ_CMD

    reports = []
    for path in datasets:
        dataset = mixsim.load_descriptor(path)
        for estimator in estimators:
            reports.append(evalkit.evaluate(estimator, dataset, store, pesq_cmd=pesq_cmd,
                                            workers=ctx.obj["workers"], config_digest=cfg.digest()))
    report = evalkit.merge_reports(reports)
    report.config_digest = cfg.digest()
    json_path, table_path = report.write(report_path)
    click.echo(report.table())
    click.secho(f"Report written to {json_path} and {table_path}", fg="green")


# --- Embed ---

@cli.command("embed")
@click.option("--manifest", "manifest_dir", required=True, type=click.Path(exists=True), help="Corpus directory.")
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False), help="Checkpoint (baseline or davse).")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--n-speakers", type=int, default=9, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--split", type=click.Choice(config.SPLITS), default="test", show_default=True)
@click.pass_context
def cmd_embed(ctx, manifest_dir, ckpt, out_dir, n_speakers, seed, split):
    """Exports V for sampled speakers and writes CSV/SVG plots with a silhouette summary."""
    store = _store(manifest_dir)
    model = sepnet.load_checkpoint(ckpt)
    dump = embedviz.export_embeddings(model, store.manifest, store, n_speakers, seed, split=split)
    out_dir = Path(out_dir)
    embedviz.save_dump(dump, out_dir / "embeddings.avt")
    summary = embedviz.summarize(dump, out_dir / "embeddings", label=f"{model.variant}-{model.config.visual_field}")
    print_json(summary)


# --- Report ---

@cli.command("report")
@click.argument("reports", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False), help="Merged report JSON to write.")
@click.option("--check-orderings", is_flag=True, default=False,
              help="Treat each report as one seed and check seed-median orderings across variants.")
@click.option("--embed-summary", "embed_summaries", multiple=True, type=click.Path(exists=True, dir_okay=False),
              help="embeddings_summary.json files to include in the separability check.")
@click.option("--visual-field", type=click.Choice(config.VISUAL_FIELDS), default="face", show_default=True)
def cmd_report(reports, out_path, check_orderings, embed_summaries, visual_field):
    """Merges evaluation reports and prints the table."""
    loaded = [evalkit.EvalReport.read(p) for p in reports]
    merged = evalkit.merge_reports(loaded)
    if out_path:
        merged.write(out_path)
    click.echo(merged.table())
    if not check_orderings:
        return
    summaries = [artifact_storage.read_json(p) for p in embed_summaries] if embed_summaries else None
    checks = evalkit.check_orderings(loaded, summaries, visual_field=visual_field)
    for c in checks:
        click.secho(f"{'PASS' if c.passed else 'FAIL'}  {c.name}  ({c.detail})", fg="green" if c.passed else "red")
    failed = [c.name for c in checks if not c.passed]
    if failed:
        raise OrderingViolation(f"{len(failed)} of {len(checks)} ordering checks failed: {'; '.join(failed)}")


@cli.command("check")
def cmd_check():
    """Validates the environment (data directory, config file, PESQ command)."""
    result = config.validate_environment()
    print_json(result)
    if not result["success"]:
        sys.exit(2)


def main():
    cli(obj={})


if __name__ == "__main__":
    main()
