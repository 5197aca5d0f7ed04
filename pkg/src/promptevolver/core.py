"""Domain types, configuration and validation shared by every module."""

from __future__ import annotations

import enum
import hashlib
import io
import math
import re
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

from PIL import Image, UnidentifiedImageError

from .errors import MissingField, OutOfRange, UnknownScorer, UnknownTemplateVariant

SCHEMA_VERSION = 1

# -- hashing ----------------------------------------------------------------


def prompt_digest(text: str) -> str:
    """128-bit hex digest of the exact UTF-8 prompt text."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:32]


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# -- tokenizers -------------------------------------------------------------

Tokenizer = Callable[[str], "list[tuple[int, int]]"]
"""A tokenizer maps text to ``(start, end)`` character spans, one per token."""

_WORD_OR_PUNCT = re.compile(r"\w+|[^\w\s]")


def whitespace_punct_spans(text: str) -> list[tuple[int, int]]:
    """Default tokenizer: runs of word characters, or single punctuation marks.

    A rough stand-in for CLIP's BPE; it over-counts slightly on rare words and
    under-counts on long compounds, which is acceptable for a length guard.
    """
    return [m.span() for m in _WORD_OR_PUNCT.finditer(text)]


_TOKENIZERS: dict[str, Tokenizer] = {"default": whitespace_punct_spans}


def register_tokenizer(name: str, tokenizer: Tokenizer) -> None:
    """Register a span tokenizer (e.g. a BPE wrapper) under ``name``."""
    _TOKENIZERS[name] = tokenizer


def get_tokenizer(name: str) -> Tokenizer:
    try:
        return _TOKENIZERS[name]
    except KeyError:
        raise OutOfRange("tokenizer", f"unknown tokenizer: {name!r}") from None


def count_tokens(text: str, tokenizer: str = "default") -> int:
    return len(get_tokenizer(tokenizer)(text))


# -- images -----------------------------------------------------------------

_ACCEPTED_FORMATS = {"PNG", "JPEG"}


def image_format(data: bytes) -> str:
    """Return ``"PNG"`` or ``"JPEG"``; raise ``ValueError`` for anything else."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            fmt = im.format
            im.verify()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ValueError(f"not a valid raster image: {exc}") from exc
    if fmt not in _ACCEPTED_FORMATS:
        raise ValueError(f"unsupported image format {fmt}")
    return fmt


def image_extension(data: bytes) -> str:
    return {"PNG": "png", "JPEG": "jpg"}[image_format(data)]


# -- value objects ----------------------------------------------------------


@dataclass(frozen=True)
class Prompt:
    text: str
    content_token_count: int

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("prompt text must be non-empty")
        if self.content_token_count < 0:
            raise ValueError("content_token_count must be nonnegative")

    @classmethod
    def from_text(cls, text: str, tokenizer: str = "default") -> Prompt:
        return cls(text, count_tokens(text, tokenizer))

    @property
    def digest(self) -> str:
        return prompt_digest(self.text)


@dataclass(frozen=True)
class TargetImage:
    data: bytes = field(repr=False)
    source_id: str = ""
    content_hash: str = ""

    def __post_init__(self) -> None:
        image_format(self.data)
        object.__setattr__(self, "content_hash", content_hash(self.data))

    @property
    def extension(self) -> str:
        return image_extension(self.data)


@dataclass(frozen=True)
class GeneratedImage:
    data: bytes = field(repr=False)
    seed: int
    prompt_hash: str

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        image_format(self.data)


@dataclass(frozen=True)
class FitnessRecord:
    per_image_scores: tuple[float, ...]
    mean_score: float
    image_refs: tuple[str, ...]
    scorer_id: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "per_image_scores", tuple(float(s) for s in self.per_image_scores))
        object.__setattr__(self, "image_refs", tuple(self.image_refs))
        if not self.per_image_scores:
            raise ValueError("a fitness record needs at least one score")
        if len(self.image_refs) != len(self.per_image_scores):
            raise ValueError("one image reference per score is required")
        expected = math.fsum(self.per_image_scores) / len(self.per_image_scores)
        if abs(expected - self.mean_score) > 1e-9:
            raise ValueError(f"mean_score {self.mean_score} != mean of scores {expected}")

    @classmethod
    def from_scores(cls, scores, image_refs, scorer_id: str) -> FitnessRecord:
        scores = tuple(float(s) for s in scores)
        return cls(scores, math.fsum(scores) / len(scores), tuple(image_refs), scorer_id)

    @property
    def k(self) -> int:
        return len(self.per_image_scores)

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_image_scores": list(self.per_image_scores),
            "mean_score": self.mean_score,
            "image_refs": list(self.image_refs),
            "scorer_id": self.scorer_id,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> FitnessRecord:
        return cls(
            tuple(d["per_image_scores"]), d["mean_score"], tuple(d["image_refs"]), d["scorer_id"]
        )


class Operator(str, enum.Enum):
    INIT = "init"
    CROSSOVER = "crossover"
    CROSSOVER_THEN_MUTATION = "crossover_then_mutation"


@dataclass(frozen=True)
class Individual:
    id: str
    prompt: Prompt
    born_generation: int
    operator: Operator
    parent_ids: tuple[str, ...] = ()
    fitness: FitnessRecord | None = None
    init_probability: float | None = None
    substituted: bool = False  # a failed VLM call was replaced by the fallback rule

    def __post_init__(self) -> None:
        object.__setattr__(self, "parent_ids", tuple(self.parent_ids))
        if self.born_generation < 0:
            raise ValueError("born_generation must be >= 0")
        is_init = self.operator is Operator.INIT
        if is_init != (self.born_generation == 0 and not self.parent_ids):
            raise ValueError("operator=init iff born_generation=0 with no parents")
        if not is_init and len(self.parent_ids) != 2:
            raise ValueError("offspring need exactly two parent ids")
        if self.init_probability is not None:
            if not is_init:
                raise ValueError("init_probability is only valid for init individuals")
            if not 0.0 <= self.init_probability <= 1.0:
                raise ValueError("init_probability must lie in [0, 1]")

    @property
    def mean_score(self) -> float:
        if self.fitness is None:
            raise ValueError(f"individual {self.id} has not been evaluated")
        return self.fitness.mean_score

    def with_fitness(self, record: FitnessRecord) -> Individual:
        return replace(self, fitness=record)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "prompt": self.prompt.text,
            "content_token_count": self.prompt.content_token_count,
            "born_generation": self.born_generation,
            "operator": self.operator.value,
            "parent_ids": list(self.parent_ids),
            "fitness": self.fitness.to_dict() if self.fitness else None,
            "init_probability": self.init_probability,
            "substituted": self.substituted,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Individual:
        return cls(
            id=d["id"],
            prompt=Prompt(d["prompt"], d["content_token_count"]),
            born_generation=d["born_generation"],
            operator=Operator(d["operator"]),
            parent_ids=tuple(d["parent_ids"]),
            fitness=FitnessRecord.from_dict(d["fitness"]) if d.get("fitness") else None,
            init_probability=d.get("init_probability"),
            substituted=d.get("substituted", False),
        )


# -- configuration ----------------------------------------------------------


class TemplateFamily(str, enum.Enum):
    STRUCTURED = "structured"
    MINIMAL = "minimal"
    SPATIAL = "spatial"


_FAMILY_ALIASES = {
    "structured": TemplateFamily.STRUCTURED,
    "minimal": TemplateFamily.MINIMAL,
    "spatial": TemplateFamily.SPATIAL,
    "spatialemphasis": TemplateFamily.SPATIAL,
    "spatial_emphasis": TemplateFamily.SPATIAL,
}


def parse_template_family(name: str | TemplateFamily) -> TemplateFamily:
    if isinstance(name, TemplateFamily):
        return name
    try:
        return _FAMILY_ALIASES[str(name).strip().lower()]
    except KeyError:
        raise UnknownTemplateVariant(str(name)) from None


ENDPOINT_SCORERS = ("clip", "blip", "dreamsim", "openclip")
_SCORER_IDS: set[str] = {*ENDPOINT_SCORERS, "sim"}


def register_scorer_id(scorer_id: str) -> None:
    _SCORER_IDS.add(scorer_id)


def known_scorer_ids() -> frozenset[str]:
    return frozenset(_SCORER_IDS)


@dataclass(frozen=True)
class BackendSettings:
    kind: str = "sim"  # "sim" or "http"
    vlm_url: str | None = None
    vlm_key: str | None = None
    vlm_model: str = "default"
    t2i_url: str | None = None
    t2i_key: str | None = None
    t2i_model: str = "default"
    image_size: str = "512x512"
    scorer_url: str | None = None
    # guidance id -> scorer endpoint URL; lets one config carry all four variants
    scorer_endpoints: Mapping[str, str] = field(default_factory=dict)
    max_in_flight: int = 4
    max_retries: int = 3
    timeout_s: float = 120.0
    sim_world_seed: int | None = None
    sim_dropout: float = 0.1
    sim_feature_count: int = 12


@dataclass(frozen=True)
class RunConfig:
    population_size: int = 10
    generations: int = 5
    samples_per_prompt: int = 3
    mutation_rate: float = 0.1
    tournament_size: int = 2
    crossover_temperature: float = 0.7
    mutation_temperature: float = 0.9
    init_temperature: float = 0.7
    token_limit: int = 77
    reserved_special_tokens: int = 2
    tokenizer: str = "default"
    guidance_scorer: str = "clip"
    rng_seed: int = 0
    parallelism: int = 1
    template_variant: TemplateFamily = TemplateFamily.STRUCTURED
    crossover_grounding: bool = False
    template_override_dir: str | None = None
    backends: BackendSettings = field(default_factory=BackendSettings)
    storage_root: str = "runs"

    @property
    def total_prompt_budget(self) -> int:
        return self.population_size * (self.generations + 1)

    @property
    def max_content_tokens(self) -> int:
        return self.token_limit - self.reserved_special_tokens


_ENGINE_KEYS = (
    "population_size",
    "generations",
    "samples_per_prompt",
    "mutation_rate",
    "tournament_size",
    "crossover_temperature",
    "mutation_temperature",
    "init_temperature",
    "token_limit",
    "reserved_special_tokens",
    "tokenizer",
    "guidance_scorer",
    "rng_seed",
    "parallelism",
)
_TEMPLATE_KEYS = {
    "template_variant": "template_variant",
    "crossover_grounding": "crossover_grounding",
    "override_dir": "template_override_dir",
}
_BACKEND_KEYS = tuple(f.name for f in fields(BackendSettings))
_SECTIONS = ("engine", "backends", "templates", "storage")


def _int(raw: Mapping[str, Any], key: str, default: int, lo: int | None = None, hi: int | None = None) -> int:
    value = raw.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        else:
            raise OutOfRange(key, f"{key} must be an integer, got {value!r}")
    if (lo is not None and value < lo) or (hi is not None and value > hi):
        raise OutOfRange(key, f"{key}={value} outside [{lo}, {hi}]")
    return value


def _float(raw: Mapping[str, Any], key: str, default: float, lo: float | None = None, hi: float | None = None) -> float:
    value = raw.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise OutOfRange(key, f"{key} must be a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value) or (lo is not None and value < lo) or (hi is not None and value > hi):
        raise OutOfRange(key, f"{key}={value} outside [{lo}, {hi}]")
    return value


def _bool(raw: Mapping[str, Any], key: str, default: bool) -> bool:
    value = raw.get(key, default)
    if not isinstance(value, bool):
        raise OutOfRange(key, f"{key} must be a boolean, got {value!r}")
    return value


def _opt_str(raw: Mapping[str, Any], key: str, default: str | None = None) -> str | None:
    value = raw.get(key, default)
    if value is not None and not isinstance(value, str):
        raise OutOfRange(key, f"{key} must be a string, got {value!r}")
    return value


def _section(raw: Mapping[str, Any], name: str) -> Mapping[str, Any]:
    value = raw.get(name) or {}
    if not isinstance(value, Mapping):
        raise OutOfRange(name, f"section {name!r} must be a mapping")
    return value


def validate_config(raw: Mapping[str, Any] | None = None) -> RunConfig:
    """Validate a parsed configuration document and apply defaults.

    The document has ``engine``, ``backends``, ``templates`` and ``storage``
    sections. Engine and template keys are also accepted at the top level so
    that short documents like ``{"population_size": 60, "generations": 0}``
    work without nesting.
    """
    raw = dict(raw or {})
    unknown = set(raw) - set(_SECTIONS) - set(_ENGINE_KEYS) - set(_TEMPLATE_KEYS)
    if unknown:
        raise OutOfRange(sorted(unknown)[0], f"unknown configuration key(s): {sorted(unknown)}")

    eng = {k: raw[k] for k in _ENGINE_KEYS if k in raw}
    eng.update(_section(raw, "engine"))
    tpl = {k: raw[k] for k in _TEMPLATE_KEYS if k in raw}
    tpl.update(_section(raw, "templates"))
    be = dict(_section(raw, "backends"))
    st = dict(_section(raw, "storage"))

    for key in sorted(set(eng) - set(_ENGINE_KEYS)):
        raise OutOfRange(key, f"unknown engine key: {key}")
    for key in sorted(set(tpl) - set(_TEMPLATE_KEYS)):
        raise OutOfRange(key, f"unknown templates key: {key}")
    for key in sorted(set(be) - set(_BACKEND_KEYS)):
        raise OutOfRange(key, f"unknown backends key: {key}")
    for key in sorted(set(st) - {"root"}):
        raise OutOfRange(key, f"unknown storage key: {key}")

    n = _int(eng, "population_size", 10, lo=2)
    token_limit = _int(eng, "token_limit", 77, lo=1)
    reserved = _int(eng, "reserved_special_tokens", 2, lo=0)
    if token_limit <= reserved:
        raise OutOfRange("token_limit", "token_limit must exceed reserved_special_tokens")

    scorer = eng.get("guidance_scorer", "clip")
    if not isinstance(scorer, str) or scorer not in _SCORER_IDS:
        raise UnknownScorer(str(scorer))
    tokenizer = _opt_str(eng, "tokenizer", "default")
    get_tokenizer(tokenizer)

    family = parse_template_family(tpl.get("template_variant", "structured"))
    grounded = _bool(tpl, "crossover_grounding", False)
    if grounded and family is not TemplateFamily.STRUCTURED:
        raise OutOfRange(
            "crossover_grounding", "grounded crossover is only available with the structured templates"
        )

    kind = be.get("kind", "sim")
    if kind not in ("sim", "http"):
        raise OutOfRange("kind", f"backends.kind must be 'sim' or 'http', got {kind!r}")
    endpoints = be.get("scorer_endpoints") or {}
    if not isinstance(endpoints, Mapping) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in endpoints.items()
    ):
        raise OutOfRange("scorer_endpoints", "scorer_endpoints must map scorer ids to URLs")
    world_seed = be.get("sim_world_seed")
    if world_seed is not None:
        world_seed = _int(be, "sim_world_seed", 0, lo=0, hi=2**64 - 1)
    backends = BackendSettings(
        kind=kind,
        vlm_url=_opt_str(be, "vlm_url"),
        vlm_key=_opt_str(be, "vlm_key"),
        vlm_model=_opt_str(be, "vlm_model", "default"),
        t2i_url=_opt_str(be, "t2i_url"),
        t2i_key=_opt_str(be, "t2i_key"),
        t2i_model=_opt_str(be, "t2i_model", "default"),
        image_size=_opt_str(be, "image_size", "512x512"),
        scorer_url=_opt_str(be, "scorer_url"),
        scorer_endpoints=dict(sorted(endpoints.items())),
        max_in_flight=_int(be, "max_in_flight", 4, lo=1),
        max_retries=_int(be, "max_retries", 3, lo=0),
        timeout_s=_float(be, "timeout_s", 120.0, lo=0.0),
        sim_world_seed=world_seed,
        sim_dropout=_float(be, "sim_dropout", 0.1, lo=0.0, hi=0.99),
        sim_feature_count=_int(be, "sim_feature_count", 12, lo=1),
    )

    root = st.get("root", "runs")
    if not isinstance(root, str) or not root:
        raise MissingField("root", "storage.root must be a non-empty path")

    return RunConfig(
        population_size=n,
        generations=_int(eng, "generations", 5, lo=0),
        samples_per_prompt=_int(eng, "samples_per_prompt", 3, lo=1),
        mutation_rate=_float(eng, "mutation_rate", 0.1, lo=0.0, hi=1.0),
        tournament_size=_int(eng, "tournament_size", 2, lo=1, hi=n),
        crossover_temperature=_float(eng, "crossover_temperature", 0.7, lo=0.0),
        mutation_temperature=_float(eng, "mutation_temperature", 0.9, lo=0.0),
        init_temperature=_float(eng, "init_temperature", 0.7, lo=0.0),
        token_limit=token_limit,
        reserved_special_tokens=reserved,
        tokenizer=tokenizer,
        guidance_scorer=scorer,
        rng_seed=_int(eng, "rng_seed", 0, lo=0, hi=2**64 - 1),
        parallelism=_int(eng, "parallelism", 1, lo=1),
        template_variant=family,
        crossover_grounding=grounded,
        template_override_dir=_opt_str(tpl, "override_dir"),
        backends=backends,
        storage_root=root,
    )


def config_to_dict(cfg: RunConfig, *, redact_secrets: bool = False) -> dict[str, Any]:
    """Serialize to the nested document shape accepted by ``validate_config``."""
    be = asdict(cfg.backends)
    be["scorer_endpoints"] = dict(cfg.backends.scorer_endpoints)
    if redact_secrets:
        be["vlm_key"] = None
        be["t2i_key"] = None
    return {
        "engine": {k: getattr(cfg, k) for k in _ENGINE_KEYS},
        "templates": {
            "template_variant": cfg.template_variant.value,
            "crossover_grounding": cfg.crossover_grounding,
            "override_dir": cfg.template_override_dir,
        },
        "backends": be,
        "storage": {"root": cfg.storage_root},
    }


def with_overrides(cfg: RunConfig, **engine_overrides: Any) -> RunConfig:
    """Re-validate ``cfg`` with flat overrides applied (``None`` values are ignored)."""
    doc = config_to_dict(cfg)
    for key, value in engine_overrides.items():
        if value is None:
            continue
        if key in _TEMPLATE_KEYS:
            doc["templates"][key] = value
        elif key in _BACKEND_KEYS:
            doc["backends"][key] = value
        elif key == "storage_root":
            doc["storage"]["root"] = value
        else:
            doc["engine"][key] = value
    return validate_config(doc)
