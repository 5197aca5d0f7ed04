"""Run-level records shared by the engine and the run store."""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any

from .core import Individual


def fitness_key(ind: Individual) -> tuple[float, int, str]:
    """Sort key putting the best individual first: higher fitness, older, then lexicographic text."""
    return (-ind.mean_score, ind.born_generation, ind.prompt.text)


@dataclass(frozen=True)
class Population:
    individuals: tuple[Individual, ...]
    generation_index: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "individuals", tuple(self.individuals))

    def __len__(self) -> int:
        return len(self.individuals)

    def __iter__(self):
        return iter(self.individuals)

    def __getitem__(self, i: int) -> Individual:
        return self.individuals[i]

    @property
    def evaluated(self) -> bool:
        return all(ind.fitness is not None for ind in self.individuals)

    def best(self) -> Individual:
        return min(self.individuals, key=fitness_key)


@dataclass(frozen=True)
class GenerationRecord:
    generation_index: int
    population: tuple[Individual, ...]
    offspring: tuple[Individual, ...] = ()
    cache_hits: int = 0
    cache_misses: int = 0
    t2i_images: int = 0
    vlm_calls: Mapping[str, int] = field(default_factory=dict)
    vlm_call_tags: tuple[str, ...] = ()
    substitutions: int = 0
    duration_s: float = 0.0

    @property
    def best_score(self) -> float:
        return max(ind.mean_score for ind in self.population)

    @property
    def total_vlm_calls(self) -> int:
        return sum(self.vlm_calls.values())

    def to_dict(self, *, include_timing: bool = True) -> dict[str, Any]:
        d: dict[str, Any] = {
            "generation_index": self.generation_index,
            "population": [ind.to_dict() for ind in self.population],
            "offspring": [ind.to_dict() for ind in self.offspring],
            "cache_hits": self.cache_hits,
            "cache_misses": self.cache_misses,
            "t2i_images": self.t2i_images,
            "vlm_calls": dict(sorted(self.vlm_calls.items())),
            "vlm_call_tags": list(self.vlm_call_tags),
            "substitutions": self.substitutions,
        }
        if include_timing:
            d["duration_s"] = self.duration_s
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> GenerationRecord:
        return cls(
            generation_index=d["generation_index"],
            population=tuple(Individual.from_dict(x) for x in d["population"]),
            offspring=tuple(Individual.from_dict(x) for x in d["offspring"]),
            cache_hits=d["cache_hits"],
            cache_misses=d["cache_misses"],
            t2i_images=d["t2i_images"],
            vlm_calls=dict(d["vlm_calls"]),
            vlm_call_tags=tuple(d["vlm_call_tags"]),
            substitutions=d["substitutions"],
            duration_s=d.get("duration_s", 0.0),
        )


@dataclass(frozen=True)
class RunResult:
    best_individual: Individual
    final_population: Population
    generation_records: tuple[GenerationRecord, ...]

    @property
    def total_t2i_images(self) -> int:
        return sum(r.t2i_images for r in self.generation_records)

    @property
    def total_vlm_calls(self) -> int:
        return sum(r.total_vlm_calls for r in self.generation_records)

    @property
    def prompts_created(self) -> int:
        first = self.generation_records[0]
        return len(first.population) + sum(len(r.offspring) for r in self.generation_records[1:])

    @property
    def best_score_by_generation(self) -> list[float]:
        return [r.best_score for r in self.generation_records]

    @classmethod
    def from_records(cls, records: list[GenerationRecord] | tuple[GenerationRecord, ...]) -> RunResult:
        last = records[-1]
        pop = Population(last.population, last.generation_index)
        return cls(pop.best(), pop, tuple(records))

    def to_dict(self, *, include_timing: bool = False) -> dict[str, Any]:
        return {
            "best_individual": self.best_individual.to_dict(),
            "final_generation": self.final_population.generation_index,
            "total_t2i_images": self.total_t2i_images,
            "total_vlm_calls": self.total_vlm_calls,
            "prompts_created": self.prompts_created,
            "generations": [r.to_dict(include_timing=include_timing) for r in self.generation_records],
        }

    def canonical_json(self) -> str:
        """Byte-stable serialization (timing excluded) used to compare runs."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
