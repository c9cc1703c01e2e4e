"""``agentmod`` command line.

Exit codes: 0 success, 1 when per-item failures exceed ``--fail-threshold``,
2 on usage or fatal errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .backends import ChatBackend, FixtureChatBackend, GenerationParams, HttpChatBackend
from .config import ConfigError, RunConfig, load_config
from .datagen import SCHEMA_VERSION as DATAGEN_SCHEMA
from .datagen import DatagenError, DatagenSettings, emit_training_config, run_datagen
from .dataset import MANIFEST_SCHEMA_VERSION, ImageStore, ManifestError, load_manifest, validate_known_splits
from .metrics import AVERAGINGS, EvalError, evaluate
from .report import REPORT_SCHEMA_VERSION, render_report
from .reward import RewardScorer, make_reward_server, score_stream
from .runner import RESULTS_SCHEMA_VERSION, Mode, ToolContext, make_moderation_server, read_results, run_batch, write_results
from .tools import FixtureToolBackend, HttpToolBackend, ToolCache, ToolKind, ToolRegistry

logger = logging.getLogger("agentmod")

EXIT_OK, EXIT_ITEM_FAILURES, EXIT_FATAL = 0, 1, 2


class FatalError(Exception):
    pass


def _chat_backend(spec: str | None, config: RunConfig, images: ImageStore, role: str) -> ChatBackend:
    if not spec:
        raise FatalError(f"no {role} backend given (flag or config key {role}_backend)")
    if spec.startswith("fixture:"):
        return FixtureChatBackend.from_file(spec[len("fixture:"):])
    if spec.startswith(("http://", "https://")):
        return HttpChatBackend(spec, model=config.model, images=images, retries=config.retries, timeout=config.timeout)
    raise FatalError(f"unsupported {role} backend {spec!r} (use fixture:PATH or an http(s) URL)")


def _tool_backend(spec: str, config: RunConfig):
    if spec.startswith("fixture:"):
        return FixtureToolBackend.from_file(spec[len("fixture:"):])
    if spec.startswith(("http://", "https://")):
        return HttpToolBackend(spec, timeout=config.timeout, retries=config.retries)
    raise FatalError(f"unsupported tool backend {spec!r}")


def _tool_context(config: RunConfig) -> ToolContext:
    registry = ToolRegistry()
    for kind in ToolKind:
        spec = getattr(config, f"{kind.value}_backend") or config.tool_backend
        if spec:
            registry.register(kind, _tool_backend(spec, config))
    cache = ToolCache(config.cache_dir) if config.cache_dir else ToolCache()
    return ToolContext(registry, cache, config.tool_policy)


def _bind(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not port.isdigit():
        raise FatalError(f"bad bind address {text!r}, expected HOST:PORT")
    return host or "127.0.0.1", int(port)


def _check_threshold(n_failed: int, n_total: int, threshold: float) -> int:
    if n_total and n_failed / n_total > threshold:
        logger.error("%d/%d items failed, above threshold %.3f", n_failed, n_total, threshold)
        return EXIT_ITEM_FAILURES
    return EXIT_OK


def cmd_datagen(args, config: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    images = ImageStore(manifest.base_dir, config.blob_dir)
    teacher = _chat_backend(config.teacher_backend, config, images, "teacher")
    tools = _tool_context(config)
    settings = DatagenSettings(
        k=config.k,
        seed=config.seed,
        params=GenerationParams(config.teacher_temperature, config.teacher_top_p, config.teacher_max_new_tokens),
        selective=not args.no_selective,
        simple_threshold=config.simple_threshold,
        tool_policy=config.tool_policy,
        missing_image=args.missing_image,
        label_mode=args.label_mode,
        parallelism=config.parallelism,
    )
    summary = run_datagen(manifest, teacher, tools.registry, args.out, settings, images, tools.cache, config.provenance())
    print(json.dumps(summary.to_dict(), sort_keys=True))
    return _check_threshold(summary.n_skipped, summary.n_samples, args.fail_threshold)


def cmd_train_config(args, config: RunConfig) -> int:
    path = emit_training_config(args.stage, args.out, metadata=config.provenance())
    print(path)
    return EXIT_OK


def cmd_moderate(args, config: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    report = validate_known_splits(manifest)
    if report.match:
        logger.info(report.message)
    images = ImageStore(manifest.base_dir, config.blob_dir)
    backend = _chat_backend(config.student_backend, config, images, "student")
    params = GenerationParams(config.temperature, config.top_p, config.max_new_tokens)
    run = run_batch(
        manifest,
        Mode.parse(args.mode),
        backend,
        params,
        config.parallelism,
        tools=_tool_context(config),
        images=images,
        missing_image=args.missing_image,
        max_tool_turns=config.max_tool_turns,
        lenient=args.lenient,
    )
    write_results(run, args.out, config.provenance())
    n_failed = run.metadata["n_failed"]
    print(f"{len(run.results)} results, {n_failed} failed -> {args.out}")
    return _check_threshold(n_failed, len(run.results), args.fail_threshold)


def cmd_eval(args, config: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    labels = args.label or []
    if labels and len(labels) != len(args.results):
        raise FatalError("give one --label per --results file")
    reports, names = [], []
    for i, path in enumerate(args.results):
        results, header = read_results(path)
        reports.append(
            evaluate(results, manifest, args.averaging, "excluded" if args.failures_excluded else "wrong", args.label_mode)
        )
        names.append(labels[i] if labels else header.get("mode", Path(path).stem))
    paths = render_report(reports, names, args.out, metadata=config.provenance(), figure=not args.no_figure)
    print(paths["txt"].read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_score_reward(args, config: RunConfig) -> int:
    spaces = {}
    for m in args.manifest or []:
        space = load_manifest(m).label_space
        spaces[space.name] = space
    scorer = RewardScorer(spaces, tuple(config.reward_weights), args.strict_answer)
    if args.http:
        server = make_reward_server(_bind(args.http), scorer)
        print(f"reward service on {server.url}", file=sys.stderr)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            server.server_close()
        return EXIT_OK
    src = open(args.input, encoding="utf-8") if args.input != "-" else sys.stdin
    n = errors = 0
    try:
        for line in score_stream(src, scorer):
            n += 1
            errors += '"error"' in line
            sys.stdout.write(line + "\n")
    finally:
        if src is not sys.stdin:
            src.close()
    sys.stdout.flush()
    return _check_threshold(errors, n, args.fail_threshold)


def cmd_serve(args, config: RunConfig) -> int:
    images = ImageStore(None, config.blob_dir)
    backend = _chat_backend(config.student_backend, config, images, "student")
    params = GenerationParams(config.temperature, config.top_p, config.max_new_tokens)
    server = make_moderation_server(
        _bind(args.bind),
        backend,
        Mode.parse(args.mode),
        _tool_context(config),
        images=images,
        params=params,
        max_in_flight=args.max_in_flight,
        max_tool_turns=config.max_tool_turns,
    )
    print(f"moderation service on {server.url}", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_demo(args, config: RunConfig) -> int:
    from .synthetic import RecordingBackend, SimulatedModel, make_corpus

    out = Path(args.out)
    seed = config.seed
    corpus = make_corpus(out, args.n, seed=seed, dataset_name="hateful_memes")
    tools = ToolContext(ToolRegistry.single(FixtureToolBackend(corpus.tool_table, name=f"fixture:{corpus.tools_path.name}")))
    teacher = RecordingBackend(SimulatedModel(corpus, accuracy=0.6, seed=seed, name="teacher"))
    student = RecordingBackend(SimulatedModel(corpus, accuracy=0.75, seed=seed + 1, name="student"))
    run_datagen(corpus.manifest, teacher, tools.registry, out / "_record_datagen", DatagenSettings(seed=seed))
    for mode in ("enforced:none", "enforced:all", "selective"):
        run_batch(corpus.manifest, mode, student, tools=tools)
    teacher.dump(out / "teacher.json")
    student.dump(out / "student.json")
    for p in sorted((out / "_record_datagen").iterdir()):
        p.unlink()
    (out / "_record_datagen").rmdir()
    (out / "config.toml").write_text(
        "\n".join(
            [
                f'teacher_backend = "fixture:{out / "teacher.json"}"',
                f'student_backend = "fixture:{out / "student.json"}"',
                f'tool_backend = "fixture:{corpus.tools_path}"',
                f"seed = {seed}",
                "",
            ]
        ),
        encoding="utf-8",
    )
    print(f"demo corpus with {args.n} samples written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agentmod", description="Tool-augmented multimodal moderation pipeline.")
    parser.add_argument("--version", action="store_true", help="print package and schema versions")
    parser.add_argument("-v", "--verbose", action="store_true")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config; flags override its keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--parallelism", type=int)
    common.add_argument("--fail-threshold", type=float, default=1.0, help="max tolerated failed fraction (default 1.0)")

    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("datagen", parents=[common], help="generate SFT/GRPO/multi-turn training data")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--teacher", dest="teacher_backend")
    p.add_argument("--tools", dest="tool_backend")
    p.add_argument("--cache-dir")
    p.add_argument("--k", type=int)
    p.add_argument("--simple-threshold", type=float)
    p.add_argument("--tool-policy", choices=["strict", "best-effort"])
    p.add_argument("--no-selective", action="store_true", help="skip multi-turn data synthesis")
    p.add_argument("--missing-image", choices=["error", "skip"], default="error")
    p.add_argument("--label-mode", choices=["native", "binarized"], default="native")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train-config", parents=[common], help="emit a LoRA or GRPO training config")
    p.add_argument("--stage", choices=["lora", "grpo"], required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_config)

    p = sub.add_parser("moderate", parents=[common], help="run moderation over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", default="enforced:all", help="enforced:all|enforced:none|enforced:ocr+captioner|selective")
    p.add_argument("--backend", dest="student_backend")
    p.add_argument("--tools", dest="tool_backend")
    p.add_argument("--cache-dir")
    p.add_argument("--out", required=True)
    p.add_argument("--max-tool-turns", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--top-p", type=float)
    p.add_argument("--max-new-tokens", type=int)
    p.add_argument("--missing-image", choices=["error", "skip"], default="skip")
    p.add_argument("--lenient", action="store_true", help="accept answers from malformed outputs")
    p.set_defaults(func=cmd_moderate)

    p = sub.add_parser("eval", parents=[common], help="score results and render report tables")
    p.add_argument("--results", action="append", required=True, help="results JSONL (repeatable)")
    p.add_argument("--label", action="append", help="row label per results file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--averaging", choices=AVERAGINGS)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--failures-as-wrong", action="store_true", help="count failed items as wrong (default)")
    group.add_argument("--failures-excluded", action="store_true")
    p.add_argument("--label-mode", choices=["native", "binarized"], default="native")
    p.add_argument("--out", required=True, help="report path; .json/.txt/.tsv/.png written side by side")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score-reward", parents=[common], help="score outputs from stdin or serve POST /score")
    p.add_argument("--input", default="-")
    p.add_argument("--manifest", action="append", help="register a manifest's label space by name")
    p.add_argument("--weights", nargs=2, type=float, dest="reward_weights", metavar=("ANSWER", "FORMAT"))
    p.add_argument("--strict-answer", action="store_true", help="zero the answer reward when format is invalid")
    p.add_argument("--http", metavar="HOST:PORT")
    p.set_defaults(func=cmd_score_reward)

    p = sub.add_parser("serve", parents=[common], help="run the moderation HTTP service")
    p.add_argument("--bind", default="127.0.0.1:8080")
    p.add_argument("--backend", dest="student_backend")
    p.add_argument("--tools", dest="tool_backend")
    p.add_argument("--mode", default="selective")
    p.add_argument("--max-in-flight", type=int, default=8)
    p.add_argument("--max-tool-turns", type=int)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("demo", parents=[common], help="write a synthetic corpus with fixture backends")
    p.add_argument("out")
    p.add_argument("--n", type=int, default=20)
    p.set_defaults(func=cmd_demo)
    return parser


def version_text() -> str:
    return "\n".join(
        [
            f"agentmod {__version__}",
            f"manifest schema {MANIFEST_SCHEMA_VERSION}",
            f"datagen schema {DATAGEN_SCHEMA}",
            f"results schema {RESULTS_SCHEMA_VERSION}",
            f"report schema {REPORT_SCHEMA_VERSION}",
        ]
    )


_OVERRIDE_KEYS = (
    "seed", "parallelism", "teacher_backend", "student_backend", "tool_backend", "cache_dir", "k",
    "simple_threshold", "tool_policy", "max_tool_turns", "temperature", "top_p", "max_new_tokens", "reward_weights",
)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.version:
        print(version_text())
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_FATAL

    overrides: dict[str, Any] = {k: getattr(args, k, None) for k in _OVERRIDE_KEYS}
    try:
        config = load_config(args.config, overrides)
        return args.func(args, config)
    except (ConfigError, ManifestError, DatagenError, EvalError, FatalError, FileNotFoundError, ValueError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
