"""Command-line interface.

Exit codes: 0 success, 2 configuration or usage error, 3 backend error,
4 storage error. Logs go to stderr; with ``--json`` stdout carries exactly
one JSON document.
"""

from __future__ import annotations

import argparse
import base64
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any

from . import __version__
from .errors import (
    BackendError,
    ConfigError,
    EngineError,
    PromptEvolverError,
    StorageFailure,
    UnknownScorer,
    UnknownTemplateVariant,
)

log = logging.getLogger("promptevolver")

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND, EXIT_STORAGE = 0, 2, 3, 4

# config keys set by each run flag
_RUN_FLAGS = {
    "seed": "rng_seed",
    "n": "population_size",
    "t": "generations",
    "k": "samples_per_prompt",
    "pm": "mutation_rate",
    "guidance": "guidance_scorer",
    "template": "template_variant",
    "parallelism": "parallelism",
    "backend": "kind",
    "vlm_url": "vlm_url",
    "t2i_url": "t2i_url",
    "scorer": "scorer_url",
}


class CliError(Exception):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(message)
        self.code = code


def _exit_code(exc: PromptEvolverError) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, StorageFailure):
        return EXIT_STORAGE
    if isinstance(exc, (BackendError, EngineError)):
        return EXIT_BACKEND
    return EXIT_BACKEND


def _add_run_flags(p: argparse.ArgumentParser, *, baseline: bool) -> None:
    p.add_argument("--image", required=True, help="target image (PNG or JPEG)")
    p.add_argument("--config", help="YAML/JSON configuration file")
    p.add_argument("--out", help="root directory for run folders (default: storage.root, 'runs')")
    p.add_argument("--run-id", help="run folder name (default: timestamp plus random suffix)")
    p.add_argument("--seed", type=int, help="64-bit run seed; also seeds the sim world")
    p.add_argument("--n", type=int, help="population size N" + (" (baseline default 60)" if baseline else ""))
    if not baseline:
        p.add_argument("--t", type=int, help="number of generations T")
        p.add_argument("--pm", type=float, help="mutation probability per offspring")
        p.add_argument("--grounded-crossover", action="store_true", default=None,
                       help="show crossover the images generated from both parents")
    p.add_argument("--k", type=int, help="images generated per prompt K")
    p.add_argument("--guidance", help="guidance scorer id: clip, blip, dreamsim, openclip, sim")
    p.add_argument("--template", help="template family: structured, minimal or spatial")
    p.add_argument("--backend", choices=("sim", "http"), help="'sim' wires all backends to the simulation world")
    p.add_argument("--vlm-url", help="OpenAI-compatible VLM base URL (or PE_VLM_URL)")
    p.add_argument("--t2i-url", help="image-generation base URL (or PE_T2I_URL)")
    p.add_argument("--scorer", help="similarity scorer endpoint URL (or PE_SCORER_URL)")
    p.add_argument("--parallelism", type=int, help="concurrent offspring pipelines")
    p.add_argument("--server", help="submit to a running promptevolver service at this URL instead of running locally")
    p.add_argument("--json", action="store_true", help="print one JSON document to stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptevolver",
        description="Recover a text-to-image prompt for a target image by VLM-guided evolution.",
        epilog="exit codes: 0 ok, 2 config/usage error, 3 backend error, 4 storage error",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("invert", help="evolve a prompt for a target image")
    _add_run_flags(p, baseline=False)

    p = sub.add_parser("baseline", help="one-shot baseline: best of N prompts from a single VLM call")
    _add_run_flags(p, baseline=True)

    p = sub.add_parser("resume", help="continue an interrupted run")
    p.add_argument("run_dir", help="run directory (<root>/<run-id>)")
    p.add_argument("--json", action="store_true", help="print one JSON document to stdout")

    p = sub.add_parser("eval", help="re-score stored best prompts with another generator (cross-model transfer)")
    p.add_argument("run_dirs", nargs="+", metavar="RUN_DIR")
    p.add_argument("--t2i", default="sim", help="'sim', 'sim:<seed>' or an image-generation base URL")
    p.add_argument("--metric", default="sim", help="scorer id used for re-scoring")
    p.add_argument("--k", type=int, help="images per prompt (default: the run's K)")
    p.add_argument("--out", default="scores.csv", help="scores file (CSV, one row per image)")
    p.add_argument("--json", action="store_true", help="print one JSON document to stdout")

    p = sub.add_parser("report", help="render win tables and run summaries")
    p.add_argument("inputs", nargs="*", metavar="INPUT", help="comparison JSON files or run directories")
    p.add_argument("--format", default="markdown", help="markdown, csv or json")
    p.add_argument("--out", help="output directory (default: reports/ beside each input)")
    p.add_argument("--json", action="store_true", help="print one JSON document to stdout")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--root", default=None, help="run store root (default: PE_STORE_ROOT or 'runs')")
    p.add_argument("--workers", type=int, default=2, help="concurrent runs")

    p = sub.add_parser("sim-image", help="write the target image of a simulation world")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--features", type=int, default=12, help="number of hidden feature tokens")
    p.add_argument("--out", required=True)
    return parser


# -- commands ---------------------------------------------------------------


def _run_config(args: argparse.Namespace, *, baseline: bool):
    from .api import baseline_config, load_config_file
    from .core import validate_config, with_overrides

    raw = load_config_file(args.config)
    overrides: dict[str, Any] = {}
    for flag, key in _RUN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "grounded_crossover", None):
        overrides["crossover_grounding"] = True
    if args.out:
        overrides["storage_root"] = args.out
    if overrides.get("kind") == "sim" and "guidance_scorer" not in overrides:
        overrides["guidance_scorer"] = "sim"
    try:
        if baseline:
            n = overrides.pop("population_size", None)
            return baseline_config(raw, n, **overrides)
        return with_overrides(validate_config(raw), **overrides)
    except UnknownScorer as exc:
        raise CliError(EXIT_CONFIG, f"--guidance: {exc}") from exc
    except UnknownTemplateVariant as exc:
        raise CliError(EXIT_CONFIG, f"--template: {exc}") from exc


def _print_result(summary: dict[str, Any], as_json: bool) -> None:
    if as_json:
        print(json.dumps(summary, sort_keys=True))
    else:
        print(summary["best_prompt"])
        print(f"fitness: {summary['best_fitness']:.6f}")
        print(f"run: {summary['run_dir']}")


def cmd_run(args: argparse.Namespace, *, baseline: bool) -> int:
    from .api import load_target, result_summary, start_run

    cfg = _run_config(args, baseline=baseline)
    if args.server:
        return _remote_run(args, cfg, baseline=baseline)
    target = load_target(args.image)
    manifest, result = start_run(cfg, target, run_id=args.run_id, mode="baseline" if baseline else "invert")
    _print_result(result_summary(manifest, result), args.json)
    return EXIT_OK


def _remote_run(args: argparse.Namespace, cfg, *, baseline: bool) -> int:
    import httpx

    from .core import config_to_dict

    try:
        data = Path(args.image).read_bytes()
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read image {args.image}: {exc}") from exc
    body = {
        "image_b64": base64.b64encode(data).decode("ascii"),
        "mode": "baseline" if baseline else "invert",
        "config": config_to_dict(cfg),
        "run_id": args.run_id,
        "source_id": Path(args.image).stem,
    }
    base = args.server.rstrip("/")
    try:
        with httpx.Client(timeout=60.0) as client:
            resp = client.post(f"{base}/runs", json=body)
            if resp.status_code >= 400:
                raise CliError(_remote_code(resp.status_code), f"service rejected run: {resp.text}")
            run_id = resp.json()["run_id"]
            while True:
                status = client.get(f"{base}/runs/{run_id}").json()
                if status["status"] != "running":
                    break
                time.sleep(1.0)
            if status["status"] != "completed":
                raise CliError(EXIT_BACKEND, f"run {run_id} {status['status']}: {status.get('error')}")
            summary = client.get(f"{base}/runs/{run_id}/result").json()
    except httpx.HTTPError as exc:
        raise CliError(EXIT_BACKEND, f"cannot reach service at {base}: {exc}") from exc
    _print_result(summary, args.json)
    return EXIT_OK


def _remote_code(status: int) -> int:
    return {422: EXIT_CONFIG, 409: EXIT_STORAGE}.get(status, EXIT_BACKEND)


def cmd_resume(args: argparse.Namespace) -> int:
    from .api import result_summary, split_run_dir
    from .runstore import load_run, resume_run

    root, run_id = split_run_dir(args.run_dir)
    result = resume_run(root, run_id)
    _print_result(result_summary(load_run(root, run_id), result), args.json)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    from .api import rescore_run

    for d in args.run_dirs:
        if not Path(d).is_dir():
            raise CliError(EXIT_STORAGE, f"run directory not found: {d}")
    rows = []
    for d in args.run_dirs:
        rows += rescore_run(d, args.t2i, args.metric, args.k)
    out = Path(args.out)
    fields = ["run_id", "image_id", "k", "seed", "score", "cached_fitness", "prompt"]
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(fields)
            for r in rows:
                writer.writerow([r.run_id, r.image_id, r.k, r.seed, repr(r.score), repr(r.cached_fitness), r.prompt])
    except OSError as exc:
        raise StorageFailure(f"cannot write {out}: {exc}") from exc
    if args.json:
        print(json.dumps({"scores_file": str(out), "rows": [r.__dict__ for r in rows]}, sort_keys=True))
    else:
        for r in rows:
            print(f"{r.run_id}\tk={r.k}\tscore={r.score:.6f}\tcached={r.cached_fitness:.6f}")
        print(f"scores: {out}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    from .analysis import FORMATS, emit_report, load_comparison_input, summary_dict, win_table_from_counts, win_table_from_pairs, ComparisonPair

    if args.format not in FORMATS:
        raise CliError(EXIT_CONFIG, f"--format: unknown format {args.format!r} (choose from {', '.join(FORMATS)})")
    if not args.inputs:
        raise CliError(EXIT_CONFIG, "EmptyGroup: no report inputs given")
    written, summaries = [], []
    for item in args.inputs:
        path = Path(item)
        if not path.exists():
            raise CliError(EXIT_STORAGE, f"input not found: {item}")
        written += emit_report(path, args.format, args.out)
        if path.is_file():
            doc = load_comparison_input(path)
            table = (
                win_table_from_pairs([ComparisonPair(**p) for p in doc["pairs"]], doc.get("method_a", "A"), doc.get("method_b", "B"))
                if "pairs" in doc
                else win_table_from_counts(doc)
            )
            summaries.append({"input": str(path), **summary_dict(table)})
    if args.json:
        print(json.dumps({"files": [str(p) for p in written], "summaries": summaries}, sort_keys=True))
    else:
        for s in summaries:
            print(
                f"{s['input']}: {s['wins_a']}/{s['wins_b']}/{s['total']} "
                f"(pref {s['preference_a_pct']:.1f}%), one-sided p = {s['p_value']:.4g}"
            )
        for p in written:
            print(p)
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(args.root, args.workers), host=args.host, port=args.port)
    return EXIT_OK


def cmd_sim_image(args: argparse.Namespace) -> int:
    from .backends import SimWorld

    world = SimWorld.generate(args.seed, args.features)
    try:
        Path(args.out).write_bytes(world.target_image())
    except OSError as exc:
        raise StorageFailure(f"cannot write {args.out}: {exc}") from exc
    print(" ".join(world.target_features))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handlers = {
        "invert": lambda a: cmd_run(a, baseline=False),
        "baseline": lambda a: cmd_run(a, baseline=True),
        "resume": cmd_resume,
        "eval": cmd_eval,
        "report": cmd_report,
        "serve": cmd_serve,
        "sim-image": cmd_sim_image,
    }
    try:
        return handlers[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except PromptEvolverError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
