"""The genetic algorithm: VLM-driven initialization, crossover and mutation,
cached K-sample fitness, and elitist (mu + lambda) survivor selection.
"""

from __future__ import annotations

import logging
import threading
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .backends import Backends, CallLog, score_pair, t2i_generate, vlm_chat
from .core import (
    FitnessRecord,
    GeneratedImage,
    Individual,
    Operator,
    Prompt,
    RunConfig,
    TargetImage,
    image_extension,
    prompt_digest,
)
from .errors import (
    BackendError,
    EmptyAfterTruncation,
    InitUnderflow,
    NoPromptsFound,
    UnevaluatedIndividual,
    UnevaluatedPopulation,
)
from .records import GenerationRecord, Population, RunResult, fitness_key
from .rng import derive_seed, substream
from .templates import (
    TemplateRegistry,
    TemplateVariant,
    parse_population,
    parse_single_prompt,
    render_crossover,
    render_init,
    render_mutation,
)

log = logging.getLogger(__name__)

__all__ = [
    "Evolution",
    "FitnessCache",
    "MemoryImageStore",
    "Population",
    "RunResult",
    "evaluate",
    "initialize_population",
    "make_offspring",
    "run_baseline",
    "run_evolution",
    "select_survivors",
    "tournament_select",
]


# -- storage hooks ----------------------------------------------------------


class ImageStore(Protocol):
    def put(self, key: str, data: bytes) -> None: ...

    def get(self, key: str) -> bytes: ...


class MemoryImageStore:
    def __init__(self) -> None:
        self._images: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def put(self, key: str, data: bytes) -> None:
        with self._lock:
            self._images.setdefault(key, data)

    def get(self, key: str) -> bytes:
        with self._lock:
            return self._images[key]

    def __len__(self) -> int:
        return len(self._images)


class RunSink(Protocol):
    """What the engine needs from a persistent run store."""

    images: ImageStore

    def commit_generation(self, record: GenerationRecord, cache: FitnessCache) -> None: ...

    def set_status(self, status: str) -> None: ...


# -- fitness cache ----------------------------------------------------------


@dataclass(frozen=True)
class CacheEntry:
    prompt_text: str
    record: FitnessRecord
    generation: int


@dataclass
class _Pending:
    event: threading.Event = field(default_factory=threading.Event)
    failed: bool = False


class FitnessCache:
    """Prompt-text keyed fitness store; each distinct text is evaluated once.

    Concurrent requests for the same uncached text wait for the first caller
    instead of issuing duplicate generations. Failed evaluations are not stored.
    """

    def __init__(self, entries: dict[str, CacheEntry] | None = None) -> None:
        self._entries: dict[str, CacheEntry] = dict(entries or {})
        self._pending: dict[str, _Pending] = {}
        self._lock = threading.Lock()
        self.hit_count = 0
        self.miss_count = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, text: str) -> bool:
        return prompt_digest(text) in self._entries

    def get(self, text: str) -> FitnessRecord | None:
        entry = self._entries.get(prompt_digest(text))
        return entry.record if entry else None

    def entries(self) -> dict[str, CacheEntry]:
        with self._lock:
            return dict(self._entries)

    def get_or_evaluate(
        self, text: str, compute: Callable[[], FitnessRecord], generation: int = 0
    ) -> FitnessRecord:
        digest = prompt_digest(text)
        while True:
            with self._lock:
                entry = self._entries.get(digest)
                if entry is not None:
                    self.hit_count += 1
                    return entry.record
                pending = self._pending.get(digest)
                owner = pending is None
                if owner:
                    pending = self._pending[digest] = _Pending()
            if owner:
                break
            pending.event.wait()
        try:
            record = compute()
        except BaseException:
            with self._lock:
                pending.failed = True
                del self._pending[digest]
            pending.event.set()
            raise
        with self._lock:
            self._entries.setdefault(digest, CacheEntry(text, record, generation))
            self.miss_count += 1
            del self._pending[digest]
        pending.event.set()
        return record


# -- context ----------------------------------------------------------------


@dataclass
class _Context:
    cfg: RunConfig
    target: TargetImage
    backends: Backends
    cache: FitnessCache
    images: ImageStore
    registry: TemplateRegistry
    call_log: CallLog = field(default_factory=CallLog)
    sleep: Callable[[float], None] = time.sleep
    _counts_lock: threading.Lock = field(default_factory=threading.Lock)
    t2i_images: int = 0
    substitutions: int = 0

    @property
    def variant(self) -> TemplateVariant:
        return TemplateVariant(self.cfg.template_variant, self.cfg.crossover_grounding)

    def chat(self, messages, temperature: float, tag: str) -> str:
        return vlm_chat(
            self.backends.vlm,
            messages,
            temperature,
            tag,
            max_retries=self.backends.max_retries,
            call_log=self.call_log,
            sleep=self.sleep,
        )

    def count_images(self, n: int) -> None:
        with self._counts_lock:
            self.t2i_images += n

    def count_substitution(self) -> None:
        with self._counts_lock:
            self.substitutions += 1


def _context(
    target: TargetImage,
    cfg: RunConfig,
    backends: Backends,
    cache: FitnessCache | None = None,
    images: ImageStore | None = None,
    registry: TemplateRegistry | None = None,
) -> _Context:
    return _Context(
        cfg,
        target,
        backends,
        cache if cache is not None else FitnessCache(),
        images if images is not None else MemoryImageStore(),
        registry or TemplateRegistry.with_overrides(cfg.template_override_dir),
    )


def _limits(cfg: RunConfig) -> dict:
    return {
        "token_limit": cfg.token_limit,
        "reserved_special_tokens": cfg.reserved_special_tokens,
        "tokenizer": cfg.tokenizer,
    }


# -- operators --------------------------------------------------------------


def _init_individuals(ctx: _Context) -> list[Individual]:
    cfg = ctx.cfg
    n = cfg.population_size
    entries: list[tuple[Prompt, float]] = []
    for tag in ("g0/init", "g0/init-followup"):
        want = n - len(entries)
        messages = render_init(want, ctx.variant, ctx.target, ctx.registry)
        text = ctx.chat(messages, cfg.init_temperature, tag)
        try:
            entries += parse_population(text, want, **_limits(cfg))
        except NoPromptsFound:
            log.warning("%s: VLM response contained no usable prompts", tag)
        if len(entries) >= n:
            break
    if len(entries) < n:
        raise InitUnderflow(f"VLM produced {len(entries)} of {n} initial prompts after one follow-up call")
    return [
        Individual(f"g0-i{j:03d}", prompt, 0, Operator.INIT, init_probability=prob)
        for j, (prompt, prob) in enumerate(entries)
    ]


def initialize_population(
    target: TargetImage, cfg: RunConfig, vlm_or_backends, *, registry: TemplateRegistry | None = None
) -> Population:
    """Ask the VLM for N prompts in one call (plus at most one follow-up); not yet evaluated."""
    backends = vlm_or_backends if isinstance(vlm_or_backends, Backends) else Backends(vlm_or_backends, None, None)
    ctx = _context(target, cfg, backends, registry=registry)
    return Population(_init_individuals(ctx), 0)


def tournament_select(pop: Population | Sequence[Individual], rng: np.random.Generator, size: int = 2) -> Individual:
    """Fittest of ``size`` distinct individuals drawn uniformly without replacement."""
    individuals = pop.individuals if isinstance(pop, Population) else tuple(pop)
    if any(ind.fitness is None for ind in individuals):
        raise UnevaluatedPopulation("tournament selection needs an evaluated population")
    if not 1 <= size <= len(individuals):
        raise ValueError(f"tournament size {size} incompatible with population of {len(individuals)}")
    picks = rng.choice(len(individuals), size=size, replace=False)
    return min((individuals[int(i)] for i in picks), key=fitness_key)


def _parent_image(ctx: _Context, parent: Individual) -> GeneratedImage:
    record = parent.fitness
    k = max(range(record.k), key=lambda j: (record.per_image_scores[j], -j))
    base = derive_seed(ctx.cfg.rng_seed, "t2i", parent.prompt.digest)
    return GeneratedImage(ctx.images.get(record.image_refs[k]), base + k, parent.prompt.digest)


def _offspring(ctx: _Context, pop: Population, generation: int, index: int) -> Individual:
    cfg = ctx.cfg
    rng = substream(cfg.rng_seed, "offspring", generation, index)
    p1 = tournament_select(pop, rng, cfg.tournament_size)
    p2 = tournament_select(pop, rng, cfg.tournament_size)
    mutate = bool(rng.random() < cfg.mutation_rate)
    tag = f"g{generation}/o{index:03d}"
    substituted = False

    try:
        parent_images = None
        if cfg.crossover_grounding:
            parent_images = (_parent_image(ctx, p1), _parent_image(ctx, p2))
        messages = render_crossover(p1.prompt, p2.prompt, ctx.variant, ctx.target, parent_images, ctx.registry)
        reply = ctx.chat(messages, cfg.crossover_temperature, f"{tag}/crossover")
        child = parse_single_prompt(reply, **_limits(cfg))
    except (BackendError, NoPromptsFound, EmptyAfterTruncation) as exc:
        child = min(p1, p2, key=fitness_key).prompt
        substituted = True
        ctx.count_substitution()
        log.warning("%s crossover failed (%s); copying the fitter parent", tag, exc)

    operator = Operator.CROSSOVER
    if mutate:
        try:
            messages = render_mutation(child, ctx.variant, ctx.target, ctx.registry)
            reply = ctx.chat(messages, cfg.mutation_temperature, f"{tag}/mutation")
            child = parse_single_prompt(reply, **_limits(cfg))
            operator = Operator.CROSSOVER_THEN_MUTATION
        except (BackendError, NoPromptsFound, EmptyAfterTruncation) as exc:
            substituted = True
            ctx.count_substitution()
            log.warning("%s mutation failed (%s); keeping the unmutated child", tag, exc)

    return Individual(
        f"g{generation}-o{index:03d}", child, generation, operator, (p1.id, p2.id), substituted=substituted
    )


def _evaluate(ctx: _Context, prompt: Prompt, generation: int) -> FitnessRecord:
    cfg = ctx.cfg

    def compute() -> FitnessRecord:
        digest = prompt.digest
        base_seed = derive_seed(cfg.rng_seed, "t2i", digest)
        images = t2i_generate(
            ctx.backends.t2i,
            prompt,
            cfg.samples_per_prompt,
            base_seed,
            max_retries=ctx.backends.max_retries,
            call_log=ctx.call_log,
            sleep=ctx.sleep,
        )
        scores, refs = [], []
        for k, img in enumerate(images):
            scores.append(
                score_pair(ctx.backends.scorer, ctx.target.data, img.data, max_retries=ctx.backends.max_retries, sleep=ctx.sleep)
            )
            refs.append(f"{digest}-{k}.{image_extension(img.data)}")
        # store only after the whole prompt succeeded
        for ref, img in zip(refs, images):
            ctx.images.put(ref, img.data)
        ctx.count_images(len(images))
        return FitnessRecord.from_scores(scores, refs, ctx.backends.scorer.id)

    return ctx.cache.get_or_evaluate(prompt.text, compute, generation)


def evaluate(
    prompt: Prompt,
    target: TargetImage,
    cfg: RunConfig,
    t2i,
    scorer,
    cache: FitnessCache,
    *,
    images: ImageStore | None = None,
    generation: int = 0,
) -> FitnessRecord:
    """Mean similarity of K generated images to the target; cached by prompt text."""
    if prompt.content_token_count > cfg.max_content_tokens:
        raise ValueError("prompt exceeds the token limit")
    ctx = _context(target, cfg, Backends(None, t2i, scorer, cfg.backends.max_retries), cache, images)
    return _evaluate(ctx, prompt, generation)


def make_offspring(
    pop: Population,
    target: TargetImage,
    cfg: RunConfig,
    vlm_or_backends,
    generation: int | None = None,
    *,
    images: ImageStore | None = None,
    registry: TemplateRegistry | None = None,
) -> list[Individual]:
    """N unevaluated children for ``generation`` (default: the next one)."""
    if not pop.evaluated:
        raise UnevaluatedPopulation("offspring need an evaluated parent population")
    backends = vlm_or_backends if isinstance(vlm_or_backends, Backends) else Backends(vlm_or_backends, None, None)
    ctx = _context(target, cfg, backends, images=images, registry=registry)
    gen = pop.generation_index + 1 if generation is None else generation
    return [_offspring(ctx, pop, gen, i) for i in range(cfg.population_size)]


def select_survivors(parents: Population, offspring: Sequence[Individual], n: int) -> Population:
    """Top ``n`` of parents + offspring; ties go to parents, then to the smaller text."""
    pool = [(ind, 0) for ind in parents] + [(ind, 1) for ind in offspring]
    for ind, _ in pool:
        if ind.fitness is None:
            raise UnevaluatedIndividual(f"individual {ind.id} has no fitness")
    ranked = sorted(pool, key=lambda item: (-item[0].mean_score, item[1], item[0].prompt.text))
    return Population(tuple(ind for ind, _ in ranked[:n]), parents.generation_index + 1)


# -- driver -----------------------------------------------------------------


class Evolution:
    """Drives one run; can start fresh or continue from a committed generation."""

    def __init__(
        self,
        target: TargetImage,
        cfg: RunConfig,
        backends: Backends,
        store: RunSink | None = None,
        *,
        cache: FitnessCache | None = None,
        registry: TemplateRegistry | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.cfg = cfg
        self.store = store
        images = store.images if store is not None else None
        self.ctx = _context(target, cfg, backends, cache, images, registry)
        self.ctx.sleep = sleep

    @property
    def cache(self) -> FitnessCache:
        return self.ctx.cache

    def _map(self, fn, items):
        if self.cfg.parallelism <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.cfg.parallelism) as pool:
            return list(pool.map(fn, items))

    def _evaluate_all(self, individuals: Sequence[Individual], generation: int) -> list[Individual]:
        return self._map(lambda ind: ind.with_fitness(_evaluate(self.ctx, ind.prompt, generation)), individuals)

    def _record(self, generation: int, population, offspring, before, started: float) -> GenerationRecord:
        ctx = self.ctx
        tags = sorted(tag for service, tag, outcome in ctx.call_log.entries[before["log"]:] if service == "vlm" and outcome == "ok")
        calls = {"init": 0, "crossover": 0, "mutation": 0}
        for tag in tags:
            op = tag.rsplit("/", 1)[-1]
            calls["init" if op.startswith("init") else op] += 1
        return GenerationRecord(
            generation_index=generation,
            population=tuple(population),
            offspring=tuple(offspring),
            cache_hits=ctx.cache.hit_count - before["hits"],
            cache_misses=ctx.cache.miss_count - before["misses"],
            t2i_images=ctx.t2i_images - before["images"],
            vlm_calls=calls,
            vlm_call_tags=tuple(tags),
            substitutions=ctx.substitutions - before["subs"],
            duration_s=round(time.perf_counter() - started, 6),
        )

    def _snapshot(self) -> dict[str, int]:
        ctx = self.ctx
        return {
            "hits": ctx.cache.hit_count,
            "misses": ctx.cache.miss_count,
            "images": ctx.t2i_images,
            "subs": ctx.substitutions,
            "log": len(ctx.call_log.entries),
        }

    def _commit(self, record: GenerationRecord) -> None:
        if self.store is not None:
            self.store.commit_generation(record, self.cache)

    def run(self, records: Sequence[GenerationRecord] = ()) -> RunResult:
        """Run (or continue) to ``cfg.generations``; ``records`` are already-committed generations."""
        records = list(records)
        try:
            if not records:
                started, before = time.perf_counter(), self._snapshot()
                initial = _init_individuals(self.ctx)
                evaluated = self._evaluate_all(initial, 0)
                rec = self._record(0, evaluated, (), before, started)
                self._commit(rec)
                records.append(rec)
            last = records[-1]
            pop = Population(last.population, last.generation_index)
            for t in range(last.generation_index + 1, self.cfg.generations + 1):
                started, before = time.perf_counter(), self._snapshot()
                children = self._map(lambda i: _offspring(self.ctx, pop, t, i), range(self.cfg.population_size))
                children = self._evaluate_all(children, t)
                pop = select_survivors(pop, children, self.cfg.population_size)
                rec = self._record(t, pop.individuals, children, before, started)
                self._commit(rec)
                records.append(rec)
                log.info("generation %d: best %.4f", t, rec.best_score)
        except BaseException:
            if self.store is not None:
                self.store.set_status("aborted")
            raise
        if self.store is not None:
            self.store.set_status("completed")
        return RunResult.from_records(records)


def run_evolution(
    target: TargetImage,
    cfg: RunConfig,
    backends: Backends,
    store: RunSink | None = None,
    **kw,
) -> RunResult:
    return Evolution(target, cfg, backends, store, **kw).run()


def run_baseline(
    target: TargetImage,
    cfg: RunConfig,
    backends: Backends,
    store: RunSink | None = None,
    **kw,
) -> RunResult:
    """Best of N prompts from a single initialization call, with no evolution."""
    if cfg.generations != 0:
        raise ValueError("the baseline requires generations = 0")
    return run_evolution(target, cfg, backends, store, **kw)
