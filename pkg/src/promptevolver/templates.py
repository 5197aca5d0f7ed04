"""VLM instruction templates, response parsing and prompt truncation."""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .core import GeneratedImage, Prompt, TargetImage, TemplateFamily, get_tokenizer, parse_template_family
from .errors import EmptyAfterTruncation, GroundingImagesMissing, NoPromptsFound, OutOfRange, TemplateError

log = logging.getLogger(__name__)

OPERATORS = ("system", "init", "crossover", "mutation", "grounded_crossover")


@dataclass(frozen=True)
class TemplateVariant:
    family: TemplateFamily = TemplateFamily.STRUCTURED
    grounded_crossover: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", parse_template_family(self.family))
        if self.grounded_crossover and self.family is not TemplateFamily.STRUCTURED:
            raise TemplateError("grounded crossover exists only for the structured family")


class Role(str, enum.Enum):
    SYSTEM = "system"
    USER = "user"


@dataclass(frozen=True)
class VlmMessage:
    role: Role
    text: str
    image_attachments: tuple[bytes, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "image_attachments", tuple(self.image_attachments))
        if self.role is Role.SYSTEM and self.image_attachments:
            raise ValueError("system messages cannot carry images")


# -- registry ---------------------------------------------------------------


class TemplateRegistry:
    """Template texts keyed by ``(family, operator)``.

    Built-in texts ship with the package. An override directory may replace
    any of them with a file named ``<family>.<operator>.txt``.
    """

    def __init__(self, texts: dict[tuple[str, str], str]) -> None:
        self._texts = dict(texts)

    @classmethod
    def builtin(cls) -> TemplateRegistry:
        return cls(_builtin_texts())

    @classmethod
    def with_overrides(cls, override_dir: str | Path | None) -> TemplateRegistry:
        texts = _builtin_texts()
        if override_dir is not None:
            for path in sorted(Path(override_dir).glob("*.*.txt")):
                family, operator, _ = path.name.split(".", 2)
                if operator not in OPERATORS:
                    log.warning("ignoring template override with unknown operator: %s", path.name)
                    continue
                texts[(family, operator)] = _normalize(path.read_text(encoding="utf-8"))
        return cls(texts)

    def get(self, family: TemplateFamily | str, operator: str) -> str:
        family = parse_template_family(family).value
        try:
            return self._texts[(family, operator)]
        except KeyError:
            raise TemplateError(f"no {operator!r} template for family {family!r}") from None


def _normalize(text: str) -> str:
    return text.replace("\r\n", "\n").rstrip("\n")


@lru_cache(maxsize=None)
def _builtin_texts_cached() -> tuple[tuple[tuple[str, str], str], ...]:
    pkg = resources.files("promptevolver") / "templates_data"
    out = []
    for entry in pkg.iterdir():
        name = entry.name
        if not name.endswith(".txt"):
            continue
        family, operator, _ = name.split(".", 2)
        out.append(((family, operator), _normalize(entry.read_text(encoding="utf-8"))))
    return tuple(sorted(out))


def _builtin_texts() -> dict[tuple[str, str], str]:
    return dict(_builtin_texts_cached())


_PLACEHOLDER = re.compile(r"\{(n|prompt|prompt_1|prompt_2)\}")


def _fill(template: str, **values: str) -> str:
    # single pass, so substituted prompt text is never re-scanned
    def sub(m: re.Match[str]) -> str:
        try:
            return values[m.group(1)]
        except KeyError:
            raise TemplateError(f"template needs a value for {{{m.group(1)}}}") from None

    return _PLACEHOLDER.sub(sub, template)


def _system(variant: TemplateVariant, registry: TemplateRegistry) -> VlmMessage:
    return VlmMessage(Role.SYSTEM, registry.get(variant.family, "system"))


# -- rendering --------------------------------------------------------------


def render_init(
    n: int, variant: TemplateVariant, target: TargetImage, registry: TemplateRegistry | None = None
) -> list[VlmMessage]:
    if n < 1:
        raise ValueError("n must be >= 1")
    registry = registry or TemplateRegistry.builtin()
    text = _fill(registry.get(variant.family, "init"), n=str(n))
    return [_system(variant, registry), VlmMessage(Role.USER, text, (target.data,))]


def render_crossover(
    p1: Prompt,
    p2: Prompt,
    variant: TemplateVariant,
    target: TargetImage,
    parent_images: tuple[GeneratedImage, GeneratedImage] | None = None,
    registry: TemplateRegistry | None = None,
) -> list[VlmMessage]:
    registry = registry or TemplateRegistry.builtin()
    if variant.grounded_crossover:
        if parent_images is None:
            raise GroundingImagesMissing("grounded crossover needs one generated image per parent")
        template = registry.get(variant.family, "grounded_crossover")
        attachments = (target.data, parent_images[0].data, parent_images[1].data)
    else:
        template = registry.get(variant.family, "crossover")
        attachments = (target.data,)
    text = _fill(template, prompt_1=p1.text, prompt_2=p2.text)
    return [_system(variant, registry), VlmMessage(Role.USER, text, attachments)]


def render_mutation(
    p: Prompt, variant: TemplateVariant, target: TargetImage, registry: TemplateRegistry | None = None
) -> list[VlmMessage]:
    registry = registry or TemplateRegistry.builtin()
    text = _fill(registry.get(variant.family, "mutation"), prompt=p.text)
    return [_system(variant, registry), VlmMessage(Role.USER, text, (target.data,))]


# -- parsing ----------------------------------------------------------------

_OPEN = re.compile(r"<prompt(\s[^<>]*)?>", re.IGNORECASE)
_CLOSE = re.compile(r"</prompt\s*>", re.IGNORECASE)
_PROB = re.compile(r"""probability\s*=\s*(?:"([^"]*)"|'([^']*)'|([^\s"'>]+))""", re.IGNORECASE)


@dataclass(frozen=True)
class TagSpan:
    text: str
    attributes: str
    start: int


def scan_prompt_tags(response_text: str) -> tuple[list[TagSpan], int]:
    """Find well-formed ``<prompt ...>...</prompt>`` spans in document order.

    Returns the spans and the number of malformed tags that were skipped: an
    opening tag interrupted by another opening tag or by end of input, or a
    span whose text is empty after trimming.
    """
    spans: list[TagSpan] = []
    malformed = 0
    opens = list(_OPEN.finditer(response_text))
    for i, m in enumerate(opens):
        limit = opens[i + 1].start() if i + 1 < len(opens) else len(response_text)
        close = _CLOSE.search(response_text, m.end(), limit)
        if close is None:
            malformed += 1
            continue
        body = response_text[m.end() : close.start()].strip()
        if not body:
            malformed += 1
            continue
        spans.append(TagSpan(body, m.group(1) or "", m.start()))
    return spans, malformed


def _probability(attributes: str) -> tuple[float, bool]:
    m = _PROB.search(attributes)
    if m is None:
        return 0.0, False
    raw = next(g for g in m.groups() if g is not None)
    try:
        value = float(raw)
    except ValueError:
        return 0.0, False
    if value != value:  # NaN
        return 0.0, False
    return min(1.0, max(0.0, value)), True


def parse_population(
    response_text: str,
    expected_n: int,
    *,
    token_limit: int = 77,
    reserved_special_tokens: int = 2,
    tokenizer: str = "default",
) -> list[tuple[Prompt, float]]:
    """Extract up to ``expected_n`` ``(prompt, probability)`` pairs.

    Prompts are truncated to the token limit. Missing or unparsable
    probabilities become 0.0; they are informational only.
    """
    if expected_n < 1:
        raise ValueError("expected_n must be >= 1")
    spans, malformed = scan_prompt_tags(response_text)
    if not spans:
        raise NoPromptsFound("no <prompt> tags in VLM response")
    out: list[tuple[Prompt, float]] = []
    bad_probs = 0
    for span in spans[:expected_n]:
        try:
            prompt = truncate_prompt(span.text, token_limit, tokenizer, reserved_special_tokens)
        except EmptyAfterTruncation:
            malformed += 1
            continue
        prob, ok = _probability(span.attributes)
        bad_probs += not ok
        out.append((prompt, prob))
    if malformed or bad_probs:
        log.warning(
            "population response: skipped %d malformed tag(s), %d missing/invalid probabilities",
            malformed,
            bad_probs,
        )
    if not out:
        raise NoPromptsFound("no usable <prompt> tags in VLM response")
    return out


def parse_single_prompt(
    response_text: str,
    *,
    token_limit: int | None = None,
    reserved_special_tokens: int = 2,
    tokenizer: str = "default",
) -> Prompt:
    """Return the last well-formed prompt span; earlier ones are treated as drafts."""
    spans, _ = scan_prompt_tags(response_text)
    if not spans:
        raise NoPromptsFound("no <prompt> tags in VLM response")
    text = spans[-1].text
    if token_limit is None:
        return Prompt.from_text(text, tokenizer)
    return truncate_prompt(text, token_limit, tokenizer, reserved_special_tokens)


# -- truncation -------------------------------------------------------------


def truncate_prompt(
    text: str, token_limit: int = 77, tokenizer: str = "default", reserved_special_tokens: int = 2
) -> Prompt:
    """Keep at most ``token_limit - reserved_special_tokens`` content tokens.

    Whole trailing tokens are dropped and the kept prefix is cut right after
    its last token, so already-short text comes back unchanged.
    """
    if token_limit <= reserved_special_tokens:
        raise OutOfRange("token_limit", "token_limit must exceed reserved_special_tokens")
    budget = token_limit - reserved_special_tokens
    spans = get_tokenizer(tokenizer)(text)
    if len(spans) <= budget:
        if not text.strip():
            raise EmptyAfterTruncation("prompt is empty")
        return Prompt(text, len(spans))
    cut = text[: spans[budget - 1][1]]
    if not cut.strip():
        raise EmptyAfterTruncation("prompt is empty after truncation")
    return Prompt(cut, budget)
