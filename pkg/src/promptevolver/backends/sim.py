"""Deterministic simulation backends.

A ``SimWorld`` stands in for the whole black box: a hidden set of weighted
feature tokens describes the target image, the simulated generator renders
whichever of those tokens (plus known noise tokens) a prompt mentions, and the
simulated scorer is a weighted Jaccard similarity between feature sets. The
simulated VLM reads the rendered templates and edits prompts with a bias
towards the hidden features, mimicking an operator that can see the image.

Sim images are genuine PNG files: a 1xW bilevel pixel row plus a ``tEXt``
chunk with the feature tokens, so every other module handles them exactly
like real images.
"""

from __future__ import annotations

import math
import re
import struct
import threading
import zlib
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

from ..core import Prompt, prompt_digest
from ..errors import UnrecognizedTemplate
from ..rng import substream
from ..templates import Role, VlmMessage
from .base import VlmCapabilities

# Visual words the random worlds draw from; the rest become noise vocabulary.
VOCABULARY = (
    "fox", "cat", "dog", "horse", "owl", "woman", "man", "child", "boat", "car",
    "bicycle", "lighthouse", "castle", "bridge", "tree", "forest", "mountain", "lake", "river", "ocean",
    "desert", "snow", "rain", "fog", "sunset", "dawn", "night", "moon", "stars", "clouds",
    "red", "orange", "golden", "blue", "green", "purple", "silver", "black", "white", "pastel",
    "portrait", "closeup", "aerial", "wide", "macro", "silhouette", "reflection", "shadow", "backlit", "neon",
    "watercolor", "oil", "photorealistic", "cinematic", "vintage", "minimalist", "surreal", "gothic", "rustic", "futuristic",
    "wooden", "stone", "glass", "velvet", "marble", "metal", "lantern", "umbrella", "flowers", "market",
)

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
ROW_WIDTH = 64
_FEATURE_KEY = b"features"
_WORD = re.compile(r"[a-z]+")


# -- sim image codec --------------------------------------------------------


def _chunk(kind: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(kind + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + kind + payload + struct.pack(">I", crc)


def encode_sim_image(features: Mapping[str, float | None] | Sequence[str], row_bits: Sequence[int]) -> bytes:
    """PNG with one row of ``len(row_bits)`` bilevel pixels and a feature list.

    Features are written sorted, as ``token`` or ``token:weight``.
    """
    if isinstance(features, Mapping):
        items = sorted(features.items())
    else:
        items = [(t, None) for t in sorted(set(features))]
    text = " ".join(t if w is None else f"{t}:{w:g}" for t, w in items)
    width = len(row_bits)
    packed = bytearray((width + 7) // 8)
    for i, bit in enumerate(row_bits):
        if bit:
            packed[i // 8] |= 0x80 >> (i % 8)
    ihdr = struct.pack(">IIBBBBB", width, 1, 1, 0, 0, 0, 0)
    idat = zlib.compress(b"\x00" + bytes(packed), 9)
    return (
        PNG_SIGNATURE
        + _chunk(b"IHDR", ihdr)
        + _chunk(b"tEXt", _FEATURE_KEY + b"\x00" + text.encode("latin-1"))
        + _chunk(b"IDAT", idat)
        + _chunk(b"IEND", b"")
    )


def decode_sim_features(data: bytes) -> dict[str, float | None] | None:
    """Feature tokens embedded in a sim image, or ``None`` for any other image."""
    if not data.startswith(PNG_SIGNATURE):
        return None
    pos = len(PNG_SIGNATURE)
    while pos + 8 <= len(data):
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        kind = data[pos + 4 : pos + 8]
        payload = data[pos + 8 : pos + 8 + length]
        pos += 12 + length
        if kind == b"tEXt":
            key, _, value = payload.partition(b"\x00")
            if key == _FEATURE_KEY:
                out: dict[str, float | None] = {}
                for item in value.decode("latin-1").split():
                    token, _, weight = item.partition(":")
                    out[token] = float(weight) if weight else None
                return out
        if kind == b"IEND":
            break
    return None


def prompt_tokens(text: str) -> list[str]:
    """Lower-cased word tokens in first-occurrence order."""
    return list(dict.fromkeys(_WORD.findall(text.lower())))


# -- world ------------------------------------------------------------------


@dataclass(frozen=True)
class SimWorld:
    target_features: Mapping[str, float]
    noise_vocab: tuple[str, ...] = ()
    dropout: float = 0.0
    seed: int = 0
    noise_weight: float = 1.0
    init_coverage: float = 0.5  # chance an init prompt mentions each hidden feature
    init_noise_rate: float = 3.0  # mean noise tokens per init prompt at temperature 1
    mutation_bias: float = 0.75  # chance a mutation edit moves towards the target

    def __post_init__(self) -> None:
        if not self.target_features:
            raise ValueError("a sim world needs at least one target feature")
        if any(w <= 0 for w in self.target_features.values()):
            raise ValueError("target feature weights must be strictly positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        object.__setattr__(self, "target_features", dict(sorted(self.target_features.items())))
        object.__setattr__(
            self, "noise_vocab", tuple(sorted(set(self.noise_vocab) - set(self.target_features)))
        )

    @classmethod
    def generate(
        cls, seed: int, n_features: int = 12, dropout: float = 0.1, vocabulary: Sequence[str] = VOCABULARY
    ) -> SimWorld:
        rng = substream(seed, "world")
        if not 1 <= n_features < len(vocabulary):
            raise ValueError(f"n_features must be in [1, {len(vocabulary) - 1}]")
        picked = rng.choice(len(vocabulary), size=n_features, replace=False)
        weights = rng.uniform(0.5, 2.0, size=n_features)
        features = {vocabulary[i]: round(float(w), 3) for i, w in zip(picked, weights)}
        noise = tuple(v for v in vocabulary if v not in features)
        return cls(features, noise, dropout, seed)

    @classmethod
    def from_target_image(cls, data: bytes, seed: int, dropout: float = 0.1) -> SimWorld | None:
        """Rebuild a world from a sim target image; ``None`` if ``data`` is not one."""
        feats = decode_sim_features(data)
        if not feats:
            return None
        features = {t: (w if w is not None else 1.0) for t, w in feats.items()}
        return cls(features, tuple(v for v in VOCABULARY if v not in features), dropout, seed)

    @property
    def vocabulary(self) -> frozenset[str]:
        return frozenset(self.target_features) | frozenset(self.noise_vocab)

    def weight(self, token: str) -> float:
        return self.target_features.get(token, self.noise_weight)

    def target_image(self) -> bytes:
        rng = substream(self.seed, "target-image")
        return encode_sim_image(self.target_features, rng.integers(0, 2, size=ROW_WIDTH).tolist())

    def similarity(self, a: set[str] | frozenset[str], b: set[str] | frozenset[str]) -> float:
        """Weighted Jaccard similarity; two empty sets count as identical."""
        union = a | b
        if not union:
            return 1.0
        inter = math.fsum(self.weight(t) for t in sorted(a & b))
        return min(1.0, inter / math.fsum(self.weight(t) for t in sorted(union)))

    def expected_fitness(self, tokens: set[str] | frozenset[str]) -> float:
        """Exact expected score of a prompt mentioning ``tokens``, by enumerating dropout outcomes.

        Only practical for small token sets; used as an oracle in tests.
        """
        feats = sorted(t for t in tokens if t in self.vocabulary)
        target = frozenset(self.target_features)
        total = 0.0
        for mask in range(1 << len(feats)):
            kept = {t for i, t in enumerate(feats) if mask >> i & 1}
            p = (1 - self.dropout) ** len(kept) * self.dropout ** (len(feats) - len(kept))
            total += p * self.similarity(kept, target)
        return total

    # -- simulated T2I ------------------------------------------------------

    def render(self, text: str, seed: int) -> bytes:
        rng = substream(self.seed, "t2i", prompt_digest(text), seed)
        present = [t for t in prompt_tokens(text) if t in self.vocabulary]
        kept = [t for t in present if rng.random() >= self.dropout] if self.dropout else present
        return encode_sim_image(kept, rng.integers(0, 2, size=ROW_WIDTH).tolist())

    def features_of(self, data: bytes) -> frozenset[str]:
        feats = decode_sim_features(data)
        if feats is None:
            # a real photo used with the sim backend: it stands for the hidden target
            return frozenset(self.target_features)
        return frozenset(feats)

    # -- simulated VLM ------------------------------------------------------

    def respond(self, messages: Sequence[VlmMessage], temperature: float, call_tag: str = "") -> str:
        user = next((m.text for m in reversed(messages) if m.role is Role.USER), None)
        if user is None:
            raise UnrecognizedTemplate("no user message")
        rng = substream(self.seed, "vlm", call_tag)
        if m := _INIT_MARKER.search(user):
            return self._init(int(m.group(1)), temperature, rng)
        if m := _CROSSOVER_MARKER.search(user):
            return self._crossover(m.group(1), m.group(2))
        if m := _MUTATION_MARKER.search(user):
            return self._mutate(m.group(1), temperature, rng)
        raise UnrecognizedTemplate("message does not match any known template")

    def _init(self, n: int, temperature: float, rng) -> str:
        features = list(self.target_features)
        raw = rng.uniform(0.2, 1.0, size=n)
        probs = raw / raw.sum()
        lines = []
        for i in range(n):
            chosen = [f for f in features if rng.random() < self.init_coverage]
            if not chosen:
                chosen = [features[int(rng.integers(len(features)))]]
            if self.noise_vocab:
                k = min(int(rng.poisson(self.init_noise_rate * temperature)), len(self.noise_vocab))
                chosen += [self.noise_vocab[j] for j in rng.choice(len(self.noise_vocab), size=k, replace=False)]
            lines.append(f'<prompt probability="{probs[i]:.2f}">{" ".join(sorted(chosen))}</prompt>')
        return "\n".join(lines)

    def _crossover(self, text_1: str, text_2: str) -> str:
        a, b = set(prompt_tokens(text_1)), set(prompt_tokens(text_2))
        child = (a & b) | {t for t in a ^ b if t in self.target_features}
        if not child:
            child = a
        return f"<prompt>{' '.join(sorted(child))}</prompt>"

    def _mutate(self, text: str, temperature: float, rng) -> str:
        tokens = set(prompt_tokens(text))
        edits = 1 + int(rng.binomial(2, min(1.0, temperature / 1.5)))
        for _ in range(edits):
            if rng.random() < self.mutation_bias:
                missing = sorted(t for t in self.target_features if t not in tokens)
                noisy = sorted(t for t in tokens if t not in self.target_features)
                if missing and (not noisy or rng.random() < 0.5):
                    w = [self.target_features[t] for t in missing]
                    tokens.add(missing[int(rng.choice(len(missing), p=[x / sum(w) for x in w]))])
                elif noisy:
                    tokens.discard(noisy[int(rng.integers(len(noisy)))])
            elif self.noise_vocab and rng.random() < 0.5:
                tokens.add(self.noise_vocab[int(rng.integers(len(self.noise_vocab)))])
            elif len(tokens) > 1:
                ordered = sorted(tokens)
                tokens.discard(ordered[int(rng.integers(len(ordered)))])
        return f"<prompt>{' '.join(sorted(tokens))}</prompt>"


_INIT_MARKER = re.compile(r"Generate (\d+) diverse text-to-image prompts")
_CROSSOVER_MARKER = re.compile(r"^Prompt 1: (.*?)\nPrompt 2: (.*?)\n", re.MULTILINE | re.DOTALL)
_MUTATION_MARKER = re.compile(r"^Current prompt(?: to mutate)?: (.*?)\n", re.MULTILINE)


# -- backend adapters -------------------------------------------------------


@dataclass
class _Counter:
    calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def bump(self) -> None:
        with self._lock:
            self.calls += 1


class SimVlm:
    def __init__(self, world: SimWorld) -> None:
        self.world = world
        self.capabilities = VlmCapabilities(id="sim-vlm", supports_images=True, max_attachments=3)
        self._counter = _Counter()

    @property
    def calls(self) -> int:
        return self._counter.calls

    def chat(self, messages: Sequence[VlmMessage], temperature: float, call_tag: str) -> str:
        self._counter.bump()
        return self.world.respond(messages, temperature, call_tag)


class SimT2I:
    image_size = f"{ROW_WIDTH}x1"

    def __init__(self, world: SimWorld, id: str = "sim-t2i") -> None:
        self.world = world
        self.id = id
        self._counter = _Counter()

    @property
    def calls(self) -> int:
        return self._counter.calls

    def generate_one(self, prompt: Prompt, seed: int) -> bytes:
        self._counter.bump()
        return self.world.render(prompt.text, seed)


class SimScorer:
    id = "sim"
    score_range = (0.0, 1.0)

    def __init__(self, world: SimWorld) -> None:
        self.world = world

    def score(self, a: bytes, b: bytes) -> float:
        return self.world.similarity(self.world.features_of(a), self.world.features_of(b))
