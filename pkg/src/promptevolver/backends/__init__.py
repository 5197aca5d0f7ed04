"""Backends: interfaces, HTTP clients, simulation world, and the factory."""

from __future__ import annotations

import os
from collections.abc import Callable

from ..core import RunConfig, TargetImage, register_scorer_id
from ..errors import MissingField, UnknownScorer
from .base import (
    Backends,
    CallLog,
    ScorerBackend,
    T2IBackend,
    VlmBackend,
    VlmCapabilities,
    backoff_delay,
    call_with_retries,
    score_pair,
    t2i_generate,
    vlm_chat,
)
from .http import HttpScorer, HttpT2I, HttpVlm
from .sim import SimScorer, SimT2I, SimVlm, SimWorld, decode_sim_features, encode_sim_image

__all__ = [
    "Backends",
    "CallLog",
    "HttpScorer",
    "HttpT2I",
    "HttpVlm",
    "ScorerBackend",
    "SimScorer",
    "SimT2I",
    "SimVlm",
    "SimWorld",
    "T2IBackend",
    "VlmBackend",
    "VlmCapabilities",
    "backoff_delay",
    "build_backends",
    "build_scorer",
    "call_with_retries",
    "decode_sim_features",
    "encode_sim_image",
    "register_scorer",
    "score_pair",
    "sim_world_for",
    "t2i_generate",
    "vlm_chat",
]

_PLUGIN_SCORERS: dict[str, Callable[[], ScorerBackend]] = {}


def register_scorer(scorer_id: str, factory: Callable[[], ScorerBackend]) -> None:
    """Make an in-process scorer available as a guidance id."""
    _PLUGIN_SCORERS[scorer_id] = factory
    register_scorer_id(scorer_id)


def sim_world_for(cfg: RunConfig, target: TargetImage | None = None) -> SimWorld:
    """The sim world a run uses: read from a sim target image, else generated from the seed."""
    seed = cfg.backends.sim_world_seed if cfg.backends.sim_world_seed is not None else cfg.rng_seed
    if target is not None:
        world = SimWorld.from_target_image(target.data, seed, cfg.backends.sim_dropout)
        if world is not None:
            return world
    return SimWorld.generate(seed, cfg.backends.sim_feature_count, cfg.backends.sim_dropout)


def _env(value: str | None, var: str) -> str | None:
    return value if value else os.environ.get(var) or None


def build_backends(cfg: RunConfig, target: TargetImage | None = None) -> Backends:
    be = cfg.backends
    if be.kind == "sim":
        world = sim_world_for(cfg, target)
        return Backends(SimVlm(world), SimT2I(world), SimScorer(world), be.max_retries)

    common = {"timeout_s": be.timeout_s, "max_in_flight": be.max_in_flight}
    vlm_url = _env(be.vlm_url, "PE_VLM_URL")
    t2i_url = _env(be.t2i_url, "PE_T2I_URL")
    if not vlm_url:
        raise MissingField("vlm_url", "no VLM endpoint: set backends.vlm_url or PE_VLM_URL")
    if not t2i_url:
        raise MissingField("t2i_url", "no text-to-image endpoint: set backends.t2i_url or PE_T2I_URL")
    vlm = HttpVlm(vlm_url, _env(be.vlm_key, "PE_VLM_KEY"), be.vlm_model, **common)
    t2i = HttpT2I(t2i_url, _env(be.t2i_key, "PE_T2I_KEY"), be.t2i_model, be.image_size, **common)
    return Backends(vlm, t2i, build_scorer(cfg, cfg.guidance_scorer), be.max_retries)


def build_scorer(cfg: RunConfig, scorer_id: str) -> ScorerBackend:
    if scorer_id in _PLUGIN_SCORERS:
        return _PLUGIN_SCORERS[scorer_id]()
    if scorer_id == "sim":
        raise UnknownScorer("sim (only available with the sim backend)")
    url = cfg.backends.scorer_endpoints.get(scorer_id) or _env(cfg.backends.scorer_url, "PE_SCORER_URL")
    if not url:
        raise MissingField("scorer_url", f"no endpoint for scorer {scorer_id!r}: set backends.scorer_endpoints or PE_SCORER_URL")
    return HttpScorer(url, scorer_id, timeout_s=cfg.backends.timeout_s, max_in_flight=cfg.backends.max_in_flight)
