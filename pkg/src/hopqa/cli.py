"""Command-line surface. Every subcommand reads the declarative JSON config
(--config) and writes its artifacts (JSON-lines, CSV, aligned text, PNG
figures) under the --out directory."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import click

from .config import PipelineConfig
from .fusion import load_fusion, save_fusion, write_predictions
from .index import save_index
from .metrics import EvalReport, format_report_table, write_histogram_csv
from .pipeline import (
    ABLATION_GRID,
    build_rank_dataset_from_config,
    evaluate_qa,
    evaluate_retrieval_step,
    facts_sweep,
    format_ablation_table,
    load_pipeline_data,
    run_ablation,
    run_retrieval,
    splits_from_traces,
    train_fusion_from_config,
    train_ranker_from_config,
    write_ablation_csv,
)
from .rankdata import count_gold_leaks, read_examples, write_examples
from .ranker import eval_ranker, load_ranker, save_ranker, score_pairs_file
from .retrieval import write_traces


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Pipeline config JSON (see README for the schema).")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out",
              help="Directory for artifacts.")
@click.pass_context
def main(ctx, config_path, seed, out_dir):
    """Multi-hop QA pipeline: retrieval, knowledge ranking, fusion reader."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["seed"] = seed
    ctx.obj["out"] = Path(out_dir)


def _config(ctx) -> PipelineConfig:
    path = ctx.obj.get("config_path")
    if path is None:
        raise click.UsageError("this command requires --config")
    return PipelineConfig.from_file(path, seed_override=ctx.obj.get("seed"))


def _outdir(ctx) -> Path:
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    return out


def _questions(data, split):
    qs = data.train_questions if split == "train" else data.dev_questions
    if not qs:
        raise click.ClickException(f"no {split} questions configured")
    return qs


@main.command("index")
@click.pass_context
def index_cmd(ctx):
    """Build the BM25 index and write a snapshot."""
    config = _config(ctx)
    data = load_pipeline_data(config)
    out = _outdir(ctx) / "index.json"
    save_index(data.index, out)
    click.echo(f"indexed {data.index.N} facts (avg length {data.index.avg_len:.2f}) -> {out}")


@main.command("retrieve")
@click.option("--split", type=click.Choice(["train", "dev"]), default="dev")
@click.option("--steps", type=click.Choice(["1", "2"]), default=None)
@click.option("--ranker", "ranker_path", type=click.Path(exists=True), default=None,
              help="Re-rank hits with a trained ranker checkpoint.")
@click.pass_context
def retrieve_cmd(ctx, split, steps, ranker_path):
    """Run multi-step retrieval and export the traces."""
    config = _config(ctx)
    data = load_pipeline_data(config)
    ranker = load_ranker(ranker_path) if ranker_path else None
    traces = run_retrieval(config, data, _questions(data, split), ranker=ranker,
                           steps=int(steps) if steps else None)
    out = _outdir(ctx) / f"traces_{split}.jsonl"
    write_traces(traces.values(), out)
    click.echo(f"wrote {len(traces)} question traces -> {out}")


@main.command("build-rankdata")
@click.pass_context
def build_rankdata_cmd(ctx):
    """Mine the ranking dataset (positives + negatives) and split it."""
    config = _config(ctx)
    data = load_pipeline_data(config)
    traces = run_retrieval(config, data, data.train_questions, steps=1)
    train_rows, val_rows = build_rank_dataset_from_config(config, data, traces)
    out = _outdir(ctx)
    write_examples(train_rows, out / "rankdata_train.jsonl")
    write_examples(val_rows, out / "rankdata_val.jsonl")
    leaks = count_gold_leaks(list(train_rows) + list(val_rows), data.train_questions)
    click.echo(f"rank dataset: {len(train_rows)} train / {len(val_rows)} val rows "
               f"(gold leaks: {leaks}) -> {out}")


@main.command("train-ranker")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Directory holding rankdata_train/val.jsonl (defaults to --out).")
@click.pass_context
def train_ranker_cmd(ctx, data_dir):
    """Train the knowledge ranking classifier."""
    config = _config(ctx)
    data = load_pipeline_data(config)
    src = Path(data_dir) if data_dir else _outdir(ctx)
    train_rows = read_examples(src / "rankdata_train.jsonl")
    model = train_ranker_from_config(config, data, train_rows)
    out = _outdir(ctx) / "ranker.ckpt"
    save_ranker(model, out)
    message = f"trained ranker on {len(train_rows)} rows -> {out}"
    val_path = src / "rankdata_val.jsonl"
    if val_path.exists():
        val_rows = read_examples(val_path)
        if val_rows:
            message += f" (val accuracy {100 * eval_ranker(model, val_rows):.2f}%)"
    click.echo(message)


@main.command("rank")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--in", "in_path", type=click.Path(exists=True), required=True,
              help='JSON-lines rows {"question","answer","fact"}.')
@click.option("--out-file", type=click.Path(), default=None)
@click.pass_context
def rank_cmd(ctx, model_path, in_path, out_file):
    """Score (question, answer, fact) rows with P(relevant)."""
    model = load_ranker(model_path)
    out = Path(out_file) if out_file else _outdir(ctx) / "scored_pairs.jsonl"
    n = score_pairs_file(model, in_path, out)
    click.echo(f"scored {n} pairs -> {out}")


@main.command("train-qa")
@click.option("--ranker", "ranker_path", type=click.Path(exists=True), default=None)
@click.pass_context
def train_qa_cmd(ctx, ranker_path):
    """Train the knowledge-fusion reader per the config's ablation flags."""
    config = _config(ctx)
    data = load_pipeline_data(config)
    flags = config.ablation
    ranker = load_ranker(ranker_path) if ranker_path and flags.use_skr else None
    steps = 2 if flags.use_step2 else 1
    traces = run_retrieval(config, data, data.train_questions, ranker=ranker, steps=steps)
    splits = splits_from_traces(traces, data.train_questions, steps)
    model = train_fusion_from_config(config, data, data.train_questions, splits,
                                     use_common=flags.use_kf)
    out = _outdir(ctx) / "fusion.ckpt"
    save_fusion(model, out)
    click.echo(f"trained fusion reader on {len(data.train_questions)} questions -> {out}")


@main.command("answer")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--split", type=click.Choice(["train", "dev"]), default="dev")
@click.option("--ranker", "ranker_path", type=click.Path(exists=True), default=None)
@click.pass_context
def answer_cmd(ctx, model_path, split, ranker_path):
    """Predict answers and export per-option probabilities."""
    config = _config(ctx)
    data = load_pipeline_data(config)
    model = load_fusion(model_path)
    flags = config.ablation
    ranker = load_ranker(ranker_path) if ranker_path and flags.use_skr else None
    steps = 2 if flags.use_step2 else 1
    questions = _questions(data, split)
    traces = run_retrieval(config, data, questions, ranker=ranker, steps=steps)
    splits = splits_from_traces(traces, questions, steps)
    _, predictions, _ = evaluate_qa(model, questions, splits, data.facts,
                                    facts_per_input=config.facts_per_input,
                                    bins=config.histogram_bins)
    out = _outdir(ctx) / f"predictions_{split}.jsonl"
    write_predictions(((qid, probs, label) for qid, (probs, label) in predictions.items()), out)
    click.echo(f"wrote {len(predictions)} predictions -> {out}")


@main.command("eval")
@click.option("--fusion", "fusion_path", type=click.Path(exists=True), default=None)
@click.option("--ranker", "ranker_path", type=click.Path(exists=True), default=None)
@click.option("--split", type=click.Choice(["train", "dev"]), default="dev")
@click.pass_context
def eval_cmd(ctx, fusion_path, ranker_path, split):
    """Full report: recall grid, ranker accuracy, QA accuracy, histogram."""
    from .plots import save_histogram_png

    config = _config(ctx)
    data = load_pipeline_data(config)
    out = _outdir(ctx)
    questions = _questions(data, split)
    ranker = load_ranker(ranker_path) if ranker_path else None
    traces = run_retrieval(config, data, questions, ranker=ranker, steps=2)
    report = EvalReport(
        step1=evaluate_retrieval_step(traces, questions, data.facts, 1),
        step2=evaluate_retrieval_step(traces, questions, data.facts, 2),
    )
    if ranker is not None:
        val_path = out / "rankdata_val.jsonl"
        if val_path.exists():
            val_rows = read_examples(val_path)
            if val_rows:
                report.ranker_accuracy = eval_ranker(ranker, val_rows)
    if fusion_path:
        model = load_fusion(fusion_path)
        steps = 2 if config.ablation.use_step2 else 1
        splits = splits_from_traces(traces, questions, steps)
        accuracy, predictions, hist = evaluate_qa(model, questions, splits, data.facts,
                                                  facts_per_input=config.facts_per_input,
                                                  bins=config.histogram_bins)
        report.qa_accuracy = accuracy
        report.histogram = hist
        write_histogram_csv(hist, out / "histogram.csv")
        save_histogram_png(hist, out / "histogram.png")
        write_predictions(((qid, probs, label) for qid, (probs, label) in predictions.items()),
                          out / f"predictions_{split}.jsonl")
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    table = format_report_table(report)
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    click.echo(table)


@main.command("ablate")
@click.option("--legs", default=None,
              help="Comma-separated leg names (default: the full grid).")
@click.pass_context
def ablate_cmd(ctx, legs):
    """Train and evaluate one fusion model per ablation leg."""
    from .plots import save_ablation_png

    config = _config(ctx)
    data = load_pipeline_data(config)
    out = _outdir(ctx)
    grid = ABLATION_GRID
    if legs:
        wanted = {name.strip() for name in legs.split(",")}
        unknown = wanted - {name for name, _ in ABLATION_GRID}
        if unknown:
            raise click.ClickException(f"unknown legs: {sorted(unknown)}")
        grid = tuple((name, flags) for name, flags in ABLATION_GRID if name in wanted)
    rows = run_ablation(config, data, grid, partial_path=out / "ablation_partial.csv")
    write_ablation_csv(rows, out / "ablation.csv")
    table = format_ablation_table(rows)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    save_ablation_png([r.name for r in rows], [r.accuracy for r in rows], out / "ablation.png")
    click.echo(table)


@main.command("sweep")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--counts", default="0,1,2,5,10", help="Comma-separated facts-per-input values.")
@click.option("--split", type=click.Choice(["train", "dev"]), default="dev")
@click.option("--ranker", "ranker_path", type=click.Path(exists=True), default=None)
@click.pass_context
def sweep_cmd(ctx, model_path, counts, split, ranker_path):
    """Accuracy as a function of the facts-per-input budget."""
    from .plots import save_sweep_png

    config = _config(ctx)
    data = load_pipeline_data(config)
    model = load_fusion(model_path)
    out = _outdir(ctx)
    questions = _questions(data, split)
    flags = config.ablation
    ranker = load_ranker(ranker_path) if ranker_path and flags.use_skr else None
    steps = 2 if flags.use_step2 else 1
    traces = run_retrieval(config, data, questions, ranker=ranker, steps=steps)
    splits = splits_from_traces(traces, questions, steps)
    values = [int(v) for v in counts.split(",")]
    pairs = facts_sweep(model, questions, splits, data.facts, values)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["facts_per_input", "accuracy"])
        for k, acc in pairs:
            writer.writerow([k, f"{acc:.6f}"])
    save_sweep_png(pairs, out / "sweep.png")
    for k, acc in pairs:
        click.echo(f"facts={k:>3}  accuracy={100 * acc:.2f}%")


if __name__ == "__main__":
    main()
