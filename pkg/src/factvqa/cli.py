"""Command-line surface for the whole pipeline.

Machine-readable output goes to stdout or files as JSON; logs go to
stderr. Exit codes: 0 success, 1 validation failure, 2 configuration
error (including CLI usage errors).
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from .errors import ConfigurationError, FactVqaError
from .runner import (
    Pipeline,
    RunConfig,
    run_build_dataset,
    run_dataset_stats,
    run_eval_detector,
    run_eval_vqa,
    run_train_detector,
    run_train_vqa,
    write_report,
)

log = logging.getLogger("factvqa")

EXIT_VALIDATION = 1
EXIT_CONFIG = 2


def common_options(fn):
    @click.option("--config", "config_path", required=True, type=click.Path(),
                  help="Run config JSON with sections {data, detector, msan, train, eval}.")
    @click.option("--seed", default=0, show_default=True, type=click.IntRange(min=0),
                  help="Seed recorded in every output.")
    @click.option("--out", "out_dir", default="out", show_default=True, type=click.Path(),
                  help="Directory for reports and artifacts.")
    @click.option("--root", default=None, type=click.Path(),
                  help="Base for relative paths in the config (default: config dir).")
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        return fn(*args, **kwargs)

    return wrapper


def _load(config_path: str, root: str | None) -> RunConfig:
    return RunConfig.load(config_path, root=root)


def _run(stage, config_path, seed, out_dir, root, echo=True):
    try:
        config = _load(config_path, root)
        report = stage(config, seed, Path(out_dir))
    except ConfigurationError as exc:
        log.error("%s", exc)
        sys.exit(EXIT_CONFIG)
    except FactVqaError as exc:
        log.error("%s", exc)
        sys.exit(EXIT_VALIDATION)
    if echo:
        click.echo(json.dumps(report, indent=2, sort_keys=True))
    return report


@click.group()
def main():
    """Fact-aligned visual question answering pipeline."""
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("build-dataset")
@common_options
def build_dataset_cmd(config_path, seed, out_dir, root):
    """Template, score, select, and split a fact-aligned dataset."""
    _run(run_build_dataset, config_path, seed, out_dir, root)


@main.command("dataset-stats")
@common_options
def dataset_stats_cmd(config_path, seed, out_dir, root):
    """Threshold grid, unique counts, and top-element tables."""
    _run(run_dataset_stats, config_path, seed, out_dir, root)


@main.command("train-detector")
@common_options
def train_detector_cmd(config_path, seed, out_dir, root):
    """Train the relation fact detector; keeps the best dev recall@1."""
    _run(run_train_detector, config_path, seed, out_dir, root)


@main.command("eval-detector")
@common_options
def eval_detector_cmd(config_path, seed, out_dir, root):
    """Element accuracies and fact recall@k for a detector checkpoint."""
    _run(run_eval_detector, config_path, seed, out_dir, root)


@main.command("train-vqa")
@common_options
def train_vqa_cmd(config_path, seed, out_dir, root):
    """Train the attention model over a frozen detector."""
    _run(run_train_vqa, config_path, seed, out_dir, root)


@main.command("eval-vqa")
@common_options
def eval_vqa_cmd(config_path, seed, out_dir, root):
    """Overall and per-type accuracy under the configured metric."""
    _run(run_eval_vqa, config_path, seed, out_dir, root)


def _pipeline_or_exit(config_path, root) -> Pipeline:
    try:
        return Pipeline.load(_load(config_path, root))
    except ConfigurationError as exc:
        log.error("%s", exc)
        sys.exit(EXIT_CONFIG)
    except FactVqaError as exc:
        log.error("%s", exc)
        sys.exit(EXIT_VALIDATION)


def _post_server(server: str, endpoint: str, payload: dict) -> dict:
    import httpx

    response = httpx.post(f"{server.rstrip('/')}{endpoint}", json=payload, timeout=120.0)
    response.raise_for_status()
    return response.json()


@main.command("predict")
@common_options
@click.option("--question", required=True, help="Question text.")
@click.option("--image-id", required=True, help="Image identifier for the feature provider.")
@click.option("--question-id", default="", help="Identifier echoed into the record.")
@click.option("--task", default="open_ended", show_default=True,
              type=click.Choice(["open_ended", "multi_choice"]))
@click.option("--choices", default=None,
              help="Comma-separated candidate answers (multi-choice task).")
@click.option("--server", default=None,
              help="Base URL of a running service; runs remotely instead of in-process.")
def predict_cmd(config_path, seed, out_dir, root, question, image_id, question_id,
                task, choices, server):
    """Answer one question about one image; emits a prediction record."""
    choice_list = [c.strip() for c in choices.split(",")] if choices else None
    if server:
        record = _post_server(server, "/predict", {
            "question": question, "image_id": image_id, "question_id": question_id,
            "task": task, "choices": choice_list})
    else:
        pipeline = _pipeline_or_exit(config_path, root)
        try:
            record = pipeline.predict(question, image_id, question_id=question_id,
                                      task=task, choices=choice_list)
        except FactVqaError as exc:
            log.error("%s", exc)
            sys.exit(EXIT_VALIDATION)
    click.echo(json.dumps(record, indent=2, sort_keys=True))


@main.command("case-study")
@common_options
@click.option("--question", required=True, help="Question text.")
@click.option("--image-id", required=True, help="Image identifier for the feature provider.")
@click.option("--question-id", default="", help="Identifier echoed into the record.")
@click.option("--top5", is_flag=True, help="Display only the five best facts.")
@click.option("--server", default=None,
              help="Base URL of a running service; runs remotely instead of in-process.")
def case_study_cmd(config_path, seed, out_dir, root, question, image_id, question_id,
                   top5, server):
    """Dump attention weights and candidate facts for one example."""
    if server:
        record = _post_server(server, "/case-study", {
            "question": question, "image_id": image_id, "question_id": question_id,
            "top5": top5})
    else:
        pipeline = _pipeline_or_exit(config_path, root)
        try:
            record = pipeline.case_study(question, image_id, question_id=question_id,
                                         top5=top5)
        except FactVqaError as exc:
            log.error("%s", exc)
            sys.exit(EXIT_VALIDATION)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report(record, out / "case_study.json")
    click.echo(json.dumps(record, indent=2, sort_keys=True))


@main.command("grad-check")
@click.option("--config", "config_path", required=False, type=click.Path(),
              help="Unused; accepted for interface uniformity.")
@click.option("--seed", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--out", "out_dir", default=None, type=click.Path())
def grad_check_cmd(config_path, seed, out_dir):
    """Finite-difference checks for every layer type."""
    from .checks import gradient_check_suite

    results = gradient_check_suite()
    for r in results:
        log.info("%-24s %s (max rel err %.2e)", r["name"],
                 "pass" if r["passed"] else "FAIL", r["max_rel_error"])
    report = {"checks": results, "passed": all(r["passed"] for r in results),
              "seed": seed}
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_report(report, out / "grad_check.json")
    click.echo(json.dumps(report, indent=2, sort_keys=True))
    if not report["passed"]:
        sys.exit(EXIT_VALIDATION)


@main.command("selftest")
@click.option("--config", "config_path", required=False, type=click.Path(),
              help="Unused; accepted for interface uniformity.")
@click.option("--seed", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--out", "out_dir", default=None, type=click.Path())
def selftest_cmd(config_path, seed, out_dir):
    """Run the full built-in property suite."""
    from .checks import selftest_suite

    results = selftest_suite()
    for r in results:
        log.info("%-32s %s (%s)", r["name"], "pass" if r["passed"] else "FAIL",
                 r["detail"])
    report = {"checks": results, "passed": all(r["passed"] for r in results),
              "seed": seed}
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_report(report, out / "selftest.json")
    click.echo(json.dumps(report, indent=2, sort_keys=True))
    if not report["passed"]:
        sys.exit(EXIT_VALIDATION)


@main.command("serve")
@common_options
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve_cmd(config_path, seed, out_dir, root, host, port):
    """Run the HTTP inference service over a trained pipeline."""
    import uvicorn

    from .service import create_app

    pipeline = _pipeline_or_exit(config_path, root)
    app = create_app(pipeline, config_hash=_load(config_path, root).hash())
    uvicorn.run(app, host=host, port=port, log_level="info")


if __name__ == "__main__":
    main()
