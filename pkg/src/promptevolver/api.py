"""Glue used by both the CLI and the HTTP service."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .backends import (
    Backends,
    HttpT2I,
    ScorerBackend,
    SimScorer,
    SimT2I,
    SimWorld,
    T2IBackend,
    build_backends,
    build_scorer,
    score_pair,
    sim_world_for,
    t2i_generate,
)
from .core import RunConfig, TargetImage, validate_config, with_overrides
from .engine import Evolution
from .errors import ConfigError, OutOfRange, StorageFailure
from .records import RunResult
from .rng import derive_seed
from .runstore import RunHandle, RunManifest, create_run, load_generations, load_run


def load_config_file(path: str | Path | None) -> dict[str, Any]:
    """Read a YAML (or JSON) configuration document; ``None`` gives an empty one."""
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, Mapping):
        raise ConfigError(f"config {path} must be a mapping at the top level")
    return dict(doc)


def load_target(path: str | Path) -> TargetImage:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read image {path}: {exc}") from exc
    try:
        return TargetImage(data, path.stem)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def start_run(
    cfg: RunConfig,
    target: TargetImage,
    *,
    root: str | Path | None = None,
    run_id: str | None = None,
    mode: str = "invert",
    backends: Backends | None = None,
) -> tuple[RunManifest, RunResult]:
    """Create a run directory and execute the run into it."""
    if backends is None:
        backends = build_backends(cfg, target)
    manifest = create_run(cfg, target, root or cfg.storage_root, run_id, mode=mode)
    with RunHandle(manifest) as handle:
        result = Evolution(target, cfg, backends, handle).run()
    return manifest, result


def split_run_dir(run_dir: str | Path) -> tuple[Path, str]:
    run_dir = Path(run_dir)
    if not (run_dir / "manifest.json").is_file():
        raise StorageFailure(f"{run_dir} is not a run directory")
    return run_dir.parent, run_dir.name


# -- cross-model re-scoring -------------------------------------------------


@dataclass(frozen=True)
class EvalRow:
    run_id: str
    image_id: str
    k: int
    seed: int
    prompt: str
    score: float
    cached_fitness: float


def t2i_from_spec(spec: str, cfg: RunConfig, target: TargetImage) -> T2IBackend:
    """``sim`` (the run's own world), ``sim:<seed>`` (another world) or an HTTP base URL."""
    if spec == "sim":
        return SimT2I(sim_world_for(cfg, target))
    if spec.startswith("sim:"):
        try:
            seed = int(spec[4:])
        except ValueError:
            raise OutOfRange("t2i", f"bad sim world seed in {spec!r}") from None
        return SimT2I(SimWorld.generate(seed, cfg.backends.sim_feature_count, cfg.backends.sim_dropout), id=spec)
    if spec.startswith(("http://", "https://")):
        be = cfg.backends
        return HttpT2I(spec, None, be.t2i_model, be.image_size, timeout_s=be.timeout_s, max_in_flight=be.max_in_flight)
    raise OutOfRange("t2i", f"unknown text-to-image backend {spec!r}")


def scorer_from_spec(metric: str, cfg: RunConfig, target: TargetImage) -> ScorerBackend:
    if metric == "sim":
        return SimScorer(sim_world_for(cfg, target))
    return build_scorer(cfg, metric)


def rescore_run(run_dir: str | Path, t2i_spec: str, metric: str, k: int | None = None) -> list[EvalRow]:
    """Regenerate images for a run's best prompt with another generator and score them.

    Seeds follow the run's own derivation, so re-scoring with the original
    backend and metric reproduces the cached fitness exactly.
    """
    root, run_id = split_run_dir(run_dir)
    manifest = load_run(root, run_id)
    records = load_generations(manifest.run_dir)
    if not records:
        raise StorageFailure(f"{run_dir} has no completed generations")
    result = RunResult.from_records(records)
    cfg = manifest.config
    target = TargetImage((manifest.run_dir / manifest.target_path).read_bytes(), run_id)
    t2i = t2i_from_spec(t2i_spec, cfg, target)
    scorer = scorer_from_spec(metric, cfg, target)
    best = result.best_individual
    k = k or cfg.samples_per_prompt
    base_seed = derive_seed(cfg.rng_seed, "t2i", best.prompt.digest)
    images = t2i_generate(t2i, best.prompt, k, base_seed, max_retries=cfg.backends.max_retries)
    return [
        EvalRow(run_id, target.content_hash[:16], i, img.seed, best.prompt.text, score_pair(scorer, target.data, img.data), best.mean_score)
        for i, img in enumerate(images)
    ]


def result_summary(manifest: RunManifest, result: RunResult) -> dict[str, Any]:
    best = result.best_individual
    return {
        "run_id": manifest.run_id,
        "run_dir": str(manifest.run_dir),
        "best_prompt": best.prompt.text,
        "best_fitness": best.mean_score,
        "per_image_scores": list(best.fitness.per_image_scores),
        "generations": len(result.generation_records) - 1,
        "prompts_created": result.prompts_created,
        "total_t2i_images": result.total_t2i_images,
        "total_vlm_calls": result.total_vlm_calls,
        "best_by_generation": result.best_score_by_generation,
    }


BASELINE_POPULATION = 60


def baseline_config(raw: Mapping[str, Any], population_size: int | None = None, **overrides: Any) -> RunConfig:
    """Config for the one-shot baseline: T=0, no mutation, N=60 unless set explicitly."""
    explicit = "population_size" in raw or "population_size" in (raw.get("engine") or {})
    cfg = validate_config(raw)
    n = population_size or (cfg.population_size if explicit else BASELINE_POPULATION)
    return with_overrides(cfg, **overrides, population_size=n, generations=0, mutation_rate=0.0)
