from __future__ import annotations

import numpy as np
import pytest

from conftest import sim_config, sim_setup
from promptevolver.backends import Backends, SimScorer, SimT2I, SimVlm, SimWorld
from promptevolver.core import FitnessRecord, Individual, Operator, Prompt, TargetImage
from promptevolver.engine import (
    Evolution,
    FitnessCache,
    evaluate,
    initialize_population,
    make_offspring,
    run_baseline,
    run_evolution,
    select_survivors,
    tournament_select,
)
from promptevolver.errors import GenerationRefused, InitUnderflow, Transport, UnevaluatedIndividual, UnevaluatedPopulation
from promptevolver.records import Population
from promptevolver.rng import substream


def scored(text, score, gen=0, id=None, op=None):
    op = op or (Operator.INIT if gen == 0 else Operator.CROSSOVER)
    parents = () if op is Operator.INIT else ("p", "q")
    rec = FitnessRecord.from_scores([score], [f"{text}-0.png"], "sim")
    return Individual(id or text, Prompt.from_text(text), gen, op, parents, rec)


class ScriptedVlm:
    """VLM that replays fixed replies and records what it was asked."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.capabilities = SimVlm(SimWorld({"a": 1.0})).capabilities
        self.calls = []

    def chat(self, messages, temperature, call_tag):
        self.calls.append((call_tag, temperature, messages))
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return reply


def tags(n, start=0):
    return "".join(f'<prompt probability="0.1">prompt {chr(97 + i)}</prompt>' for i in range(start, start + n))


# -- initialization ---------------------------------------------------------


def test_initialize_population_sim():
    world, target, backends = sim_setup(2)
    pop = initialize_population(target, sim_config(2), backends)
    assert len(pop.individuals) == 10 and pop.generation_index == 0
    for ind in pop:
        assert ind.operator is Operator.INIT and ind.born_generation == 0
        assert ind.init_probability is not None and ind.fitness is None
    assert sum(i.init_probability for i in pop) == pytest.approx(1.0, abs=0.06)


def test_initialize_takes_first_n():
    _, target, _ = sim_setup(0)
    pop = initialize_population(target, sim_config(0), ScriptedVlm([tags(12)]))
    assert [i.prompt.text for i in pop] == [f"prompt {chr(97 + i)}" for i in range(10)]


def test_initialize_follow_up_call():
    _, target, _ = sim_setup(0)
    vlm = ScriptedVlm([tags(6), tags(4, start=6)])
    pop = initialize_population(target, sim_config(0), vlm)
    assert len(pop.individuals) == 10
    assert [c[0] for c in vlm.calls] == ["g0/init", "g0/init-followup"]
    assert "Generate 4 diverse" in vlm.calls[1][2][1].text


def test_init_underflow():
    _, target, _ = sim_setup(0)
    with pytest.raises(InitUnderflow):
        initialize_population(target, sim_config(0), ScriptedVlm(["nothing", "still nothing"]))


# -- tournament -------------------------------------------------------------


def test_tournament_forced_pair():
    pop = [scored("good", 0.9), scored("bad", 0.1)]
    rng = substream(0, "t")
    assert all(tournament_select(pop, rng).prompt.text == "good" for _ in range(200))


def test_tournament_probability():
    pop = [scored("a", 0.9), scored("b", 0.5), scored("c", 0.1)]
    rng = substream(1, "t")
    wins = sum(tournament_select(pop, rng).prompt.text == "a" for _ in range(10_000))
    assert abs(wins / 10_000 - 2 / 3) <= 0.03


def test_tournament_tie_rule():
    pop = [scored(t, 0.5) for t in ("delta", "alpha", "charlie", "bravo")]
    rng = substream(2, "t")
    for _ in range(500):
        winner = tournament_select(pop, rng)
        assert winner.prompt.text != "delta"  # never the largest text
    older = scored("zzz", 0.5, gen=0)
    younger = scored("aaa", 0.5, gen=1)
    assert tournament_select([older, younger], rng) is older


def test_tournament_requires_fitness():
    ind = Individual("x", Prompt.from_text("x"), 0, Operator.INIT)
    with pytest.raises(UnevaluatedPopulation):
        tournament_select([ind, scored("y", 0.1)], substream(0))


# -- offspring --------------------------------------------------------------


def evaluated_population(seed=0):
    world, target, backends = sim_setup(seed)
    cfg = sim_config(seed)
    cache = FitnessCache()
    pop = initialize_population(target, cfg, backends)
    inds = [i.with_fitness(evaluate(i.prompt, target, cfg, backends.t2i, backends.scorer, cache)) for i in pop]
    return Population(tuple(inds), 0), target, backends, cfg


@pytest.mark.parametrize("pm, op", [(0.0, Operator.CROSSOVER), (1.0, Operator.CROSSOVER_THEN_MUTATION)])
def test_mutation_extremes(pm, op):
    pop, target, backends, cfg = evaluated_population()
    from promptevolver.core import with_overrides

    kids = make_offspring(pop, target, with_overrides(cfg, mutation_rate=pm), backends)
    assert len(kids) == 10
    assert all(k.operator is op and len(k.parent_ids) == 2 and k.born_generation == 1 for k in kids)


def test_mutation_rate_statistics():
    pop, target, backends, cfg = evaluated_population()
    mutated = total = 0
    for gen in range(1, 1001):
        for k in make_offspring(pop, target, cfg, backends, gen):
            total += 1
            mutated += k.operator is Operator.CROSSOVER_THEN_MUTATION
    assert total == 10_000
    assert abs(mutated / total - 0.1) <= 0.01


def test_crossover_and_mutation_temperatures():
    pop, target, _, cfg = evaluated_population()
    from promptevolver.core import with_overrides

    vlm = ScriptedVlm(["<prompt>child text</prompt>"] * 40)
    make_offspring(pop, target, with_overrides(cfg, mutation_rate=1.0), vlm)
    temps = {tag.rsplit("/", 1)[1]: t for tag, t, _ in vlm.calls}
    assert temps == {"crossover": 0.7, "mutation": 0.9}


def test_failed_crossover_copies_fitter_parent(monkeypatch):
    import promptevolver.backends.base as base

    monkeypatch.setattr(base, "backoff_delay", lambda attempt, rng=None: 0.0)
    pop, target, _, cfg = evaluated_population()
    vlm = ScriptedVlm([Transport("down")] * 4 + ["<prompt>fine</prompt>"] * 100)
    kids = make_offspring(pop, target, cfg, Backends(vlm, None, None, max_retries=3))
    first = kids[0]
    assert first.substituted
    parents = [i for i in pop if i.id in first.parent_ids]
    best = min(parents, key=lambda i: (-i.mean_score, i.born_generation, i.prompt.text))
    assert first.prompt == best.prompt
    assert not kids[1].substituted


def test_failed_mutation_keeps_child():
    pop, target, _, cfg = evaluated_population()
    from promptevolver.core import with_overrides

    vlm = ScriptedVlm(["<prompt>crossed child</prompt>", "no tags here"] + ["<prompt>x</prompt>"] * 40)
    kids = make_offspring(pop, target, with_overrides(cfg, mutation_rate=1.0), vlm)
    assert kids[0].prompt.text == "crossed child" and kids[0].operator is Operator.CROSSOVER and kids[0].substituted


def test_grounded_crossover_attaches_parent_images():
    seed = 4
    world, target, backends = sim_setup(seed)
    cfg = sim_config(seed, generations=1)
    from promptevolver.core import with_overrides

    cfg = with_overrides(cfg, crossover_grounding=True)
    seen = []

    class Spy(SimVlm):
        def chat(self, messages, temperature, call_tag):
            seen.append((call_tag, messages[-1].image_attachments))
            return super().chat(messages, temperature, call_tag)

    run_evolution(target, cfg, Backends(Spy(world), backends.t2i, backends.scorer))
    cross = [a for tag, a in seen if tag.endswith("crossover")]
    assert len(cross) == 10
    for attachments in cross:
        assert len(attachments) == 3 and attachments[0] == target.data
        assert all(world.features_of(img) is not None for img in attachments[1:])


# -- evaluation -------------------------------------------------------------


class FixedScores:
    id = "fixed"
    score_range = (0.0, 1.0)

    def __init__(self, scores):
        self.scores = list(scores)

    def score(self, a, b):
        return self.scores.pop(0)


def test_evaluate_examples():
    world, target, backends = sim_setup(0)
    t2i = SimT2I(world)
    rec = evaluate(Prompt.from_text("fox"), target, sim_config(0, samples_per_prompt=1), t2i, FixedScores([0.7]), FitnessCache())
    assert rec.mean_score == pytest.approx(0.7) and rec.k == 1
    rec = evaluate(Prompt.from_text("fox"), target, sim_config(0), t2i, FixedScores([0.2, 0.4, 0.6]), FitnessCache())
    assert rec.mean_score == pytest.approx(0.4, abs=1e-9)


def test_evaluate_cache_hit():
    world, target, _ = sim_setup(0)
    t2i, cache, cfg = SimT2I(world), FitnessCache(), sim_config(0)
    first = evaluate(Prompt.from_text("fox"), target, cfg, t2i, SimScorer(world), cache)
    calls, misses = t2i.calls, cache.miss_count
    second = evaluate(Prompt.from_text("fox"), target, cfg, t2i, SimScorer(world), cache)
    assert second is first and t2i.calls == calls == 3
    assert cache.miss_count == misses and cache.hit_count == 1


def test_partial_evaluation_not_cached():
    world, target, _ = sim_setup(0)

    class FailsOnSecond(SimT2I):
        def generate_one(self, prompt, seed):
            if self.calls == 1:
                self._counter.bump()
                raise GenerationRefused("refused")
            return super().generate_one(prompt, seed)

    cache = FitnessCache()
    cfg = sim_config(0)
    with pytest.raises(GenerationRefused):
        evaluate(Prompt.from_text("fox"), target, cfg, FailsOnSecond(world), SimScorer(world), cache)
    assert "fox" not in cache and len(cache) == 0


# -- selection --------------------------------------------------------------


def test_survivors_elitism():
    parents = Population(tuple(scored(f"p{i}", 0.1 + i / 10) for i in range(4)), 0)
    kids = [scored(f"o{i}", 0.0, gen=1) for i in range(4)]
    out = select_survivors(parents, kids, 4)
    assert set(out.individuals) == set(parents.individuals) and out.generation_index == 1


def test_survivors_tie_prefers_parent():
    parents = Population((scored("zz parent", 0.8), scored("p high", 0.9)), 0)
    kids = [scored("aa child", 0.8, gen=1), scored("low", 0.1, gen=1)]
    out = select_survivors(parents, kids, 2)
    assert [i.prompt.text for i in out] == ["p high", "zz parent"]


def test_survivors_offspring_dominate():
    parents = Population(tuple(scored(f"p{i}", 0.1) for i in range(3)), 2)
    kids = [scored(f"o{i}", 0.5 + i / 10, gen=3) for i in range(3)]
    out = select_survivors(parents, kids, 3)
    assert set(out.individuals) == set(kids) and out.generation_index == 3


def test_survivors_require_fitness():
    parents = Population((scored("a", 0.5), scored("b", 0.4)), 0)
    with pytest.raises(UnevaluatedIndividual):
        select_survivors(parents, [Individual("c", Prompt.from_text("c"), 1, Operator.CROSSOVER, ("a", "b"))], 2)


# -- whole runs -------------------------------------------------------------


def test_run_accounting():
    world, target, backends = sim_setup(5)
    result = run_evolution(target, sim_config(5), backends)
    recs = result.generation_records
    assert len(recs) == 6 and result.prompts_created == 60
    assert all(len(r.population) == 10 for r in recs)
    assert len(recs[0].offspring) == 0 and all(len(r.offspring) == 10 for r in recs[1:])
    for r in recs[1:]:
        assert r.vlm_calls["crossover"] == 10
        assert r.vlm_calls["mutation"] == sum(i.operator is Operator.CROSSOVER_THEN_MUTATION for i in r.offspring)
    distinct = {i.prompt.text for r in recs for i in (*r.population, *r.offspring)}
    assert result.total_t2i_images == backends.t2i.calls == 3 * len(distinct)
    assert result.total_vlm_calls == backends.vlm.calls
    best = result.best_individual
    assert best.mean_score == max(i.mean_score for i in result.final_population)
    seq = result.best_score_by_generation
    assert all(b >= a for a, b in zip(seq, seq[1:]))


def test_mutation_calls_expectation():
    mutations = offspring = 0
    for seed in range(40):
        _, target, backends = sim_setup(seed)
        result = run_evolution(target, sim_config(seed), backends)
        for r in result.generation_records[1:]:
            mutations += r.vlm_calls["mutation"]
            offspring += len(r.offspring)
    assert abs(mutations / offspring - 0.1) < 0.03


def test_baseline():
    world, target, backends = sim_setup(6)
    cfg = sim_config(6, population_size=60, generations=0, mutation_rate=0.0)
    result = run_baseline(target, cfg, backends)
    (rec,) = result.generation_records
    assert len(rec.population) == 60 and result.prompts_created == 60
    assert rec.vlm_calls["crossover"] == rec.vlm_calls["mutation"] == 0
    distinct = len({i.prompt.text for i in rec.population})
    assert result.total_t2i_images == 3 * distinct
    if distinct == 60:
        assert result.total_t2i_images == 180
    with pytest.raises(ValueError):
        run_baseline(target, sim_config(6), backends)


def test_baseline_duplicates_share_cache():
    world, target, backends = sim_setup(0)
    vlm = ScriptedVlm(['<prompt probability="0.5">same fox</prompt>' * 5 + tags(5)])
    cfg = sim_config(0, generations=0)
    result = run_baseline(target, cfg, Backends(vlm, backends.t2i, backends.scorer))
    rec = result.generation_records[0]
    assert result.total_t2i_images == 3 * 6 < 30 and rec.cache_hits == 4


def test_run_determinism_and_parallelism():
    results = []
    for parallelism in (1, 1, 4):
        _, target, backends = sim_setup(9)
        results.append(run_evolution(target, sim_config(9, parallelism=parallelism), backends).canonical_json())
    assert results[0] == results[1] == results[2]


def test_cache_concurrent_single_evaluation():
    import threading
    from concurrent.futures import ThreadPoolExecutor

    cache = FitnessCache()
    computed = []
    gate = threading.Event()

    def compute():
        computed.append(1)
        gate.wait(1.0)
        return FitnessRecord.from_scores([0.5], ["r"], "x")

    with ThreadPoolExecutor(8) as pool:
        futures = [pool.submit(cache.get_or_evaluate, "same", compute) for _ in range(8)]
        gate.set()
        records = {id(f.result()) for f in futures}
    assert len(computed) == 1 and len(records) == 1
    assert cache.miss_count == 1 and cache.hit_count == 7
