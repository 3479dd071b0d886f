######################################################################
# Licensed under the Apache License, Version 2.0 (the "License");
# You may not use this file except in compliance with the License.
# You may obtain a copy of the License at:
# https://www.apache.org/licenses/LICENSE-2.0
######################################################################

"""
verirl command line

Commands: verify, score, decontam, train, gen-data. Machine output goes to
standard output; logs, summaries and JSON error objects go to standard error.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Optional

import click

from verirl import __version__, config
from verirl.common import error_handlers
from verirl.common.jsonl import dumps, write_jsonl
from verirl.common.log_handlers import init_logging
from verirl.curriculum import Phase, load_dataset, load_plan
from verirl.decontam import (
    DecontamConfig,
    HashedBagOfTokensProvider,
    PrecomputedEmbeddingProvider,
    decontaminate,
)
from verirl.mathexpr import EvalError, parse_math, to_source
from verirl.models import ConfigError, GroundTruth, TruthType
from verirl.rewards import ANSWER_MARKERS, RewardConfig, grade_records, read_grading_file, summarize
from verirl.toyenv import SyntheticTaskConfig, ToyEnvironment
from verirl.trainer import run_curriculum
from verirl.verifier import choice_match, math_equivalent, string_match

logger = logging.getLogger("verirl")

GLOBAL_KEYS = (
    "SEED", "OUT_DIR", "LOG_LEVEL", "PLAN",
    "W_F", "W_A", "W_T", "W_P", "THINK_OPEN", "THINK_CLOSE", "ANSWER_MARKER",
    "NGRAM_SIZE", "SIMILARITY_THRESHOLD", "EMBEDDING_DIM",
)
PHASE_NAMES = [p.name for p in Phase]


@dataclass(frozen=True)
class CliConfig:
    """Global options after resolving flags over the config file over defaults"""
    config_path: Optional[str] = None
    seed: int = config.SEED
    out_dir: str = config.OUT_DIR
    verbose: bool = False
    seed_given: bool = False
    settings: Dict[str, str] = field(default_factory=dict)

    def get(self, key: str, flag=None, default=None, kind=str):
        """Flag value, else config-file value, else default"""
        if flag is not None:
            return flag
        raw = self.settings.get(key)
        if raw is None or raw == "":
            return default
        try:
            return kind(raw)
        except ValueError as error:
            raise click.BadParameter(f"{key}={raw!r} in {self.config_path}", param_hint="--config") from error


class VerirlGroup(click.Group):
    """Click group that turns escaping exceptions into documented exit codes"""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.exceptions.ClickException, click.exceptions.Exit, click.exceptions.Abort):
            raise
        except Exception as error:  # pylint: disable=broad-except
            ctx.exit(error_handlers.handle(error))


######################################################################
# G L O B A L   O P T I O N S
######################################################################
@click.group(cls=VerirlGroup)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Flat KEY=VALUE config file")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Master random seed")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Directory for run artifacts")
@click.option("--verbose", is_flag=True, help="Log at DEBUG level")
@click.version_option(__version__, prog_name="verirl")
@click.pass_context
def cli(ctx, config_path, seed, out_dir, verbose):
    """Verifiable-reward RL: grading, decontamination, data generation and curriculum training"""
    try:
        settings = {k.upper(): v for k, v in config.read_config_file(config_path).items()}
    except FileNotFoundError as error:
        raise click.BadParameter(str(error), param_hint="--config") from error
    unknown = sorted(set(settings) - set(GLOBAL_KEYS))
    if unknown:
        raise click.BadParameter("unknown keys " + ", ".join(unknown), param_hint="--config")
    cli_config = CliConfig(config_path=config_path, verbose=verbose, settings=settings)
    cli_config = CliConfig(
        config_path=config_path,
        seed=cli_config.get("SEED", seed, config.SEED, int),
        out_dir=cli_config.get("OUT_DIR", out_dir, config.OUT_DIR),
        verbose=verbose,
        seed_given=seed is not None or "SEED" in settings,
        settings=settings,
    )
    init_logging("verirl", logging.DEBUG if verbose else cli_config.get("LOG_LEVEL", None, config.LOG_LEVEL))
    ctx.obj = cli_config


def _reward_config(cli_config: CliConfig, w_f, w_a, w_t, w_p, answer_marker) -> RewardConfig:
    try:
        return RewardConfig(
            w_f=cli_config.get("W_F", w_f, config.W_FORMAT, float),
            w_a=cli_config.get("W_A", w_a, config.W_ACCURACY, float),
            w_t=cli_config.get("W_T", w_t, config.W_TYPE, float),
            w_p=cli_config.get("W_P", w_p, config.W_PARAM, float),
            think_open=cli_config.get("THINK_OPEN", None, config.THINK_OPEN),
            think_close=cli_config.get("THINK_CLOSE", None, config.THINK_CLOSE),
            answer_marker=cli_config.get("ANSWER_MARKER", answer_marker, config.ANSWER_MARKER),
        )
    except ConfigError as error:
        raise click.BadParameter(str(error), param_hint="reward weights") from error


######################################################################
# V E R I F Y   O N E   A N S W E R
######################################################################
@cli.command("verify")
@click.argument("answer")
@click.argument("truth")
@click.argument("truth_type", type=click.Choice([t.value for t in TruthType]))
@click.option("--options", default=None, help="Comma-separated option labels (choice only)")
def cmd_verify(answer, truth, truth_type, options):
    """Checks ANSWER against TRUTH and prints {"equivalent", "detail"}"""
    kind = TruthType(truth_type)
    if kind is TruthType.MATH:
        truth_expr, answer_expr = parse_math(truth), parse_math(answer)
        try:
            equivalent = math_equivalent(answer_expr, truth_expr)
            detail = f"{to_source(answer_expr)} vs {to_source(truth_expr)}"
        except EvalError as error:
            equivalent, detail = False, f"not evaluable: {error}"
    elif kind is TruthType.STRING:
        equivalent, detail = string_match(answer, truth), "normalized string match"
    else:
        labels = tuple(o.strip() for o in options.split(",") if o.strip()) if options else ()
        ground_truth = GroundTruth(kind, truth, labels)
        equivalent = choice_match(answer, ground_truth.value, ground_truth.options)
        detail = f"options {','.join(ground_truth.options)}"
    click.echo(dumps({"equivalent": equivalent, "detail": detail}))


######################################################################
# S C O R E   A   G R A D I N G   F I L E
######################################################################
@cli.command("score")
@click.argument("input_path", metavar="INPUT")
@click.option("--output", "-o", default="-", show_default=True, help="Output JSONL path or - for stdout")
@click.option("--w-f", type=float, default=None, help="Format weight")
@click.option("--w-a", type=float, default=None, help="Accuracy weight")
@click.option("--w-t", type=float, default=None, help="Type-match weight")
@click.option("--w-p", type=float, default=None, help="Value-match weight")
@click.option("--answer-marker", type=click.Choice(ANSWER_MARKERS), default=None)
@click.pass_obj
def cmd_score(cli_config, input_path, output, w_f, w_a, w_t, w_p, answer_marker):
    """Scores every record of a grading JSONL file (or - for stdin)"""
    reward_config = _reward_config(cli_config, w_f, w_a, w_t, w_p, answer_marker)
    results = grade_records(read_grading_file(input_path), reward_config)
    write_jsonl((breakdown.to_record(record_id) for record_id, breakdown in results), output)
    summary = summarize(results)
    click.echo(
        f"scored {summary.count} records: mean total reward {summary.mean_total:.4f}, "
        f"format-pass rate {summary.format_rate:.4f}, mean accuracy {summary.mean_accuracy:.4f}",
        err=True,
    )


######################################################################
# D E C O N T A M I N A T E
######################################################################
@cli.command("decontam")
@click.option("--train", "train_path", required=True, help="Training dataset JSONL")
@click.option("--test", "test_path", required=True, help="Test dataset JSONL")
@click.option("--provider", type=click.Choice(["hashed", "precomputed", "none"]), default="hashed",
              show_default=True, help="Embedding provider for stage 2")
@click.option("--embeddings", default=None, help="Embedding JSONL for the precomputed provider")
@click.option("--threshold", type=click.FloatRange(-1.0, 1.0), default=None, help="Cosine threshold")
@click.option("--ngram", "ngram_size", type=click.IntRange(min=1), default=None, help="Gram size")
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True)
@click.pass_obj
def cmd_decontam(cli_config, train_path, test_path, provider, embeddings, threshold, ngram_size, workers):
    """Removes training records that overlap the test set"""
    if provider == "precomputed" and not embeddings:
        raise click.UsageError("--provider precomputed needs --embeddings")
    decontam_config = DecontamConfig(
        ngram_size=cli_config.get("NGRAM_SIZE", ngram_size, config.NGRAM_SIZE, int),
        threshold=cli_config.get("SIMILARITY_THRESHOLD", threshold, config.SIMILARITY_THRESHOLD, float),
    )
    train = load_dataset(train_path)
    test = load_dataset(test_path)
    if provider == "hashed":
        embedder = HashedBagOfTokensProvider(cli_config.get("EMBEDDING_DIM", None, config.EMBEDDING_DIM, int))
    elif provider == "precomputed":
        embedder = PrecomputedEmbeddingProvider.from_file(embeddings)
    else:
        embedder = None

    retained, report = decontaminate(train, test, embedder, decontam_config, workers)
    os.makedirs(cli_config.out_dir, exist_ok=True)
    filtered_path = os.path.join(cli_config.out_dir, "train.decontaminated.jsonl")
    report_path = os.path.join(cli_config.out_dir, "contamination_report.jsonl")
    write_jsonl((s.serialize() for s in retained), filtered_path)
    report.write(report_path)
    click.echo(dumps({**report.counts(), "retained": len(retained)}))
    click.echo(f"kept {len(retained)} of {len(train)} records; wrote {filtered_path} and {report_path}", err=True)


######################################################################
# T R A I N
######################################################################
@cli.command("train")
@click.option("--plan", "plan_path", default=None, help="Curriculum plan KEY=VALUE file")
@click.option("--skip-phase", "skipped", multiple=True, type=click.Choice(PHASE_NAMES, case_sensitive=False),
              help="Leave a phase out (repeatable)")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a plan key (repeatable)")
@click.option("--dump-rollouts", "dump_every", type=click.IntRange(min=0), default=config.DUMP_ROLLOUTS_EVERY,
              show_default=True, help="Write every N-th step's rollout groups to rollouts.jsonl, 0 disables")
@click.pass_obj
def cmd_train(cli_config, plan_path, skipped, overrides, dump_every):
    """Runs the curriculum on the synthetic environment"""
    settings = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise click.BadParameter(f"expected KEY=VALUE, got {item!r}", param_hint="--set")
        settings[key.strip().upper()] = value.strip()
    if cli_config.seed_given:
        settings.setdefault("SEED", str(cli_config.seed))
    plan = load_plan(cli_config.get("PLAN", plan_path), settings)
    if skipped:
        plan = plan.skip_phases(Phase.parse(name) for name in skipped)

    logger.info("*" * 70)
    logger.info("  V E R I R L   C U R R I C U L U M   T R A I N I N G  ".center(70, "*"))
    logger.info("*" * 70)
    reward_config = _reward_config(cli_config, None, None, None, None, None)
    result = run_curriculum(plan, reward_config=reward_config, out_dir=cli_config.out_dir,
                            dump_rollouts_every=dump_every)
    for evaluation in result.evaluations:
        click.echo(dumps(evaluation.to_record()))
    click.echo(f"trained {len(result.metrics)} steps; artifacts in {cli_config.out_dir}", err=True)


######################################################################
# G E N E R A T E   S Y N T H E T I C   D A T A
######################################################################
@cli.command("gen-data")
@click.option("--phase", type=click.Choice(PHASE_NAMES, case_sensitive=False), default="FRA", show_default=True)
@click.option("--count", type=click.IntRange(min=0), default=10, show_default=True)
@click.option("--output", "-o", default="-", show_default=True, help="Output JSONL path or - for stdout")
@click.option("--operand-low", type=int, default=0, show_default=True)
@click.option("--operand-high", type=int, default=3, show_default=True)
@click.option("--vocab-size", type=int, default=8, show_default=True)
@click.option("--caption-verbosity", type=int, default=1, show_default=True)
@click.pass_obj
def cmd_gen_data(cli_config, phase, count, output, operand_low, operand_high, vocab_size, caption_verbosity):
    """Writes synthetic tasks in the dataset schema"""
    try:
        task_config = SyntheticTaskConfig(
            seed=cli_config.seed,
            operand_low=operand_low,
            operand_high=operand_high,
            vocab_size=vocab_size,
            caption_verbosity=caption_verbosity,
        )
    except ConfigError as error:
        raise click.BadParameter(str(error)) from error
    samples = ToyEnvironment(task_config).gen_tasks(Phase.parse(phase), count)
    write_jsonl((s.serialize() for s in samples), output)
    logger.info("Wrote %d %s samples", len(samples), phase.upper())


def main():  # pragma: no cover
    """Console entry point"""
    cli(prog_name="verirl")  # pylint: disable=no-value-for-parameter


if __name__ == "__main__":  # pragma: no cover
    main()
