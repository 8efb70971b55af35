# Backend/app/cli.py
"""
Command-line entry points: index, annotate, evaluate, serve.

    python -m app.cli index --config data/run_config.json
    python -m app.cli annotate "lost deb" --config data/run_config.json
    python -m app.cli evaluate --ablation no-judge
    python -m app.cli serve --port 8001
"""
import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from loguru import logger

from app.core.config import DEFAULT_CONFIG_PATH, RunConfig, load_run_config, setup_logging
from app.core.errors import ConfigError, FaqAnnotationError, exit_code_for
from app.evaluation.datasets import corpus_statistics
from app.evaluation.runner import (
    evaluate_run,
    main_method_label,
    measure_latency,
    render_table,
    single_agent_configs,
    write_reports,
)
from app.runtime import create_runtime
from app.utils.retrieval_utils import build_embedding_index, index_path, save_embedding_index


def _apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    pipeline = config.pipeline
    updates = {}
    if getattr(args, "parallel", None) is not None:
        pipeline = pipeline.model_copy(update={"parallel": args.parallel})
    if getattr(args, "no_cache", False):
        pipeline = pipeline.model_copy(update={"cache_enabled": False})
    ablations = getattr(args, "ablation", None) or []
    for name in ablations:
        pipeline = pipeline.with_ablation(name)
    if ablations and config.cache_path:
        # Results cached under another configuration must not be reused
        path = Path(config.cache_path)
        suffix = "+".join(name.replace("=", "-").replace(",", "-") for name in ablations)
        updates["cache_path"] = str(path.with_name(f"{path.stem}.{suffix}{path.suffix}"))
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "backend", None):
        updates["backend"] = config.backend.model_copy(update={"kind": args.backend})
    if getattr(args, "audit", False):
        updates["audit_log"] = True
    if getattr(args, "dataset_format", None):
        if config.dataset is None:
            raise ConfigError("--dataset-format needs a dataset section in the config")
        updates["dataset"] = config.dataset.model_copy(update={"format": args.dataset_format})
    updates["pipeline"] = pipeline
    config = config.model_copy(update=updates)
    config.check_paths()
    return config


def _load(args: argparse.Namespace) -> RunConfig:
    return _apply_overrides(load_run_config(args.config, check_paths=False), args)


def cmd_index(args: argparse.Namespace) -> int:
    config = _load(args)
    runtime = create_runtime(config)
    for with_answers in (False, True):
        index = build_embedding_index(runtime.corpus, with_answers, runtime.gateway)
        save_embedding_index(index, str(index_path(config.index_dir, with_answers)))
    stats = corpus_statistics(runtime.corpus, runtime.training_labels, runtime.test if runtime.test else None)
    print(stats.to_string(index=False))
    return 0


def cmd_annotate(args: argparse.Namespace) -> int:
    config = _load(args)
    runtime = create_runtime(config)
    result = runtime.pipeline.annotate_with_cache(args.utterance, use_cache=not args.no_cache)
    payload = result.verdict.to_payload(runtime.corpus)
    payload["cache_hit"] = result.cache_hit
    print(json.dumps(payload, indent=2, ensure_ascii=False))
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _load(args)
    if args.output_dir:
        config = config.model_copy(update={"output_dir": args.output_dir})
    runtime = create_runtime(config)

    extra = []
    if args.standard and config.pipeline.few_shot_mode != "shared":
        extra.append((main_method_label(config.pipeline.with_ablation("shared-fewshots")),
                      config.pipeline.with_ablation("shared-fewshots")))
    if args.single_agents:
        extra.extend(single_agent_configs(config.pipeline))

    dataset_name = config.dataset.format if config.dataset else "bank"
    report = evaluate_run(
        runtime.corpus, runtime.test, config, runtime.gateway,
        training=runtime.training, extra_methods=extra, baselines=args.baselines,
        use_cache=not args.no_cache, dataset_name=dataset_name,
    )
    if args.latency:
        utterances = [item.utterance for item in runtime.test[:args.latency]]
        rows = measure_latency(runtime.corpus, utterances, config, runtime.gateway, runtime.training)
        report = report.model_copy(update={"latency": rows})

    write_reports(report, config.output_dir, stem=args.report_name or f"{dataset_name}_report")
    print(render_table(report))
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from app.main import create_app

    config = _load(args)
    runtime = create_runtime(config)
    host = args.host or config.service.host
    port = args.port or config.service.port
    logger.info(f"Serving annotation API on {host}:{port}")
    uvicorn.run(create_app(runtime), host=host, port=port)
    return 0


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=DEFAULT_CONFIG_PATH, help="Run configuration JSON")
    parser.add_argument("--seed", type=int, default=None, help="Override the configured seed")
    parser.add_argument("--backend", choices=["live", "record", "replay", "scripted"], default=None)
    parser.add_argument("--no-cache", action="store_true", help="Bypass the result cache")
    mode = parser.add_mutually_exclusive_group()
    mode.add_argument("--parallel", dest="parallel", action="store_true", default=None)
    mode.add_argument("--sequential", dest="parallel", action="store_false")
    parser.add_argument("--ablation", action="append", default=[],
                        help="no-judge | shared-fewshots | no-planner | no-answers | no-embeddings | agents=a,b")
    parser.add_argument("--audit", action="store_true", help="Write one audit record per annotation")
    parser.add_argument("--log-level", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="faq-annotate", description="Multi-agent FAQ annotation")
    sub = parser.add_subparsers(dest="command", required=True)

    p_index = sub.add_parser("index", help="Build embedding indexes and print corpus statistics")
    _common(p_index)
    p_index.set_defaults(func=cmd_index)

    p_annotate = sub.add_parser("annotate", help="Map one utterance to its top FAQs")
    p_annotate.add_argument("utterance")
    _common(p_annotate)
    p_annotate.set_defaults(func=cmd_annotate)

    p_eval = sub.add_parser("evaluate", help="Score the pipeline and baselines on a labeled dataset")
    _common(p_eval)
    p_eval.add_argument("--dataset-format", choices=["bank", "lcqmc", "fiqa"], default=None)
    p_eval.add_argument("--output-dir", default=None)
    p_eval.add_argument("--report-name", default=None)
    p_eval.add_argument("--no-baselines", dest="baselines", action="store_false")
    p_eval.add_argument("--single-agents", action="store_true", help="Add one row per agent (judge disabled)")
    p_eval.add_argument("--standard", action="store_true", help="Add the shared few-shot configuration")
    p_eval.add_argument("--latency", type=int, default=0, metavar="N",
                        help="Also time N utterances sequentially and in parallel")
    p_eval.set_defaults(func=cmd_evaluate)

    p_serve = sub.add_parser("serve", help="Run the HTTP annotation service")
    _common(p_serve)
    p_serve.add_argument("--host", default=None)
    p_serve.add_argument("--port", type=int, default=None)
    p_serve.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.log_level:
        setup_logging(level=args.log_level.upper())
    else:
        setup_logging()
    try:
        return args.func(args)
    except FaqAnnotationError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
