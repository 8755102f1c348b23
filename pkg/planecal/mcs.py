"""Measurement configuration selection by differential evolution.

A subset of K configurations is encoded as K real genes in [0, pool);
decoding floors each gene and shifts duplicates to the next free index,
so every genome maps to a valid subset.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from planecal.exceptions import InvalidArgumentError
from planecal.kinematics import position_jacobians
from planecal.models import N_JOINTS, DeConfig, RobotModel, SampleSet, SelectionResult
from planecal.observability import identifiable_columns, observability_index, singular_values

logger = logging.getLogger(__name__)


class DeOutcome(NamedTuple):
    best: np.ndarray
    value: float
    history: List[float]
    population_values: List[float]
    generations: int


def _evaluate(objective: Callable, population: np.ndarray, executor: Optional[ThreadPoolExecutor]) -> np.ndarray:
    values = list(executor.map(objective, population)) if executor else [objective(x) for x in population]
    out = np.asarray(values, dtype=float)
    out[np.isnan(out)] = -np.inf
    return out


def de_optimize(objective: Callable[[np.ndarray], float], bounds, cfg: Optional[DeConfig] = None) -> DeOutcome:
    """Maximize `objective` with DE/rand/1/bin, clamping trial vectors to `bounds`.

    The random stream depends only on cfg.seed; evaluations may run on
    worker threads but results are consumed in population order.
    """
    cfg = cfg or DeConfig()
    b = np.asarray(bounds, dtype=float)
    if b.ndim != 2 or b.shape[1] != 2 or not np.all(np.isfinite(b)) or np.any(b[:, 0] >= b[:, 1]):
        raise InvalidArgumentError("bounds must be finite [lo, hi] pairs with lo < hi")
    lo, hi = b[:, 0], b[:, 1]
    dim, size = b.shape[0], cfg.population_size
    rng = np.random.default_rng(cfg.seed)

    executor = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        population = lo + (hi - lo) * rng.random((size, dim))
        fitness = _evaluate(objective, population, executor)
        best = int(np.argmax(fitness))
        best_x, best_value = population[best].copy(), float(fitness[best])
        history: List[float] = []
        stall, generation = 0, 0

        for generation in range(1, cfg.max_generations + 1):
            trials = np.empty_like(population)
            for i in range(size):
                candidates = np.delete(np.arange(size), i)
                r1, r2, r3 = rng.choice(candidates, size=3, replace=False)
                mutant = np.clip(population[r1] + cfg.F * (population[r2] - population[r3]), lo, hi)
                cross = rng.random(dim) < cfg.CR
                cross[rng.integers(dim)] = True
                trials[i] = np.where(cross, mutant, population[i])

            trial_fitness = _evaluate(objective, trials, executor)
            replace = trial_fitness >= fitness
            population[replace] = trials[replace]
            fitness[replace] = trial_fitness[replace]

            gen_best = int(np.argmax(fitness))
            if fitness[gen_best] > best_value:
                best_x, best_value = population[gen_best].copy(), float(fitness[gen_best])
                stall = 0
            else:
                stall += 1
            history.append(best_value)
            if stall >= cfg.stall_generations:
                logger.debug("de stalled for %d generations at generation %d", stall, generation)
                break
    finally:
        if executor:
            executor.shutdown()

    return DeOutcome(best_x, best_value, history, fitness.tolist(), generation)


def decode_subset(genes, pool_size: int) -> List[int]:
    """Floor genes to indices, moving duplicates cyclically to the next unused index."""
    genes = np.asarray(genes, dtype=float)
    if genes.size > pool_size:
        raise InvalidArgumentError(f"cannot pick {genes.size} distinct indices from a pool of {pool_size}")
    indices = np.clip(np.floor(genes).astype(int), 0, pool_size - 1)
    used = set()
    for idx in indices:
        idx = int(idx)
        while idx in used:
            idx = (idx + 1) % pool_size
        used.add(idx)
    return sorted(used)


def _subset_index(jacobians: np.ndarray, subset: Sequence[int]) -> float:
    stacked = jacobians[list(subset)].reshape(-1, jacobians.shape[-1])
    return observability_index(singular_values(stacked))


def select_configurations(
    model: RobotModel,
    pool,
    K: int,
    cfg: Optional[DeConfig] = None,
    columns: Optional[Sequence[int]] = None,
) -> SelectionResult:
    """Pick the K configurations of `pool` with the largest observability index.

    Only identifiable parameter columns enter the index unless `columns`
    is given.
    """
    cfg = cfg or DeConfig()
    pool = np.asarray(pool, dtype=float).reshape(-1, N_JOINTS)
    n = pool.shape[0]
    if K <= 0:
        raise InvalidArgumentError("K must be positive")
    if K > n:
        raise InvalidArgumentError(f"K={K} exceeds the pool of {n} configurations")

    cols = identifiable_columns(model) if columns is None else np.asarray(columns, dtype=int)
    jacobians = position_jacobians(model, pool)[:, :, cols]

    if K == n:
        value = _subset_index(jacobians, range(n))
        return SelectionResult(chosen_indices=list(range(n)), index_value=value,
                               generations_used=0, history=[value], final_population_values=[value])

    def fitness(genes: np.ndarray) -> float:
        return _subset_index(jacobians, decode_subset(genes, n))

    bounds = np.tile([0.0, float(n)], (K, 1))
    outcome = de_optimize(fitness, bounds, cfg)
    chosen = decode_subset(outcome.best, n)
    logger.info("selected %d of %d configurations, index %.4f after %d generations",
                K, n, outcome.value, outcome.generations)
    return SelectionResult(
        chosen_indices=chosen,
        index_value=outcome.value,
        generations_used=outcome.generations,
        history=outcome.history,
        final_population_values=outcome.population_values,
    )


def observability_curve(
    model: RobotModel,
    pool,
    K_values: Sequence[int],
    cfg: Optional[DeConfig] = None,
) -> List[Tuple[int, float]]:
    """Best observability index found for each subset size in `K_values`."""
    ks = list(K_values)
    if ks != sorted(ks):
        raise InvalidArgumentError("K values must be sorted ascending")
    if not ks:
        return []
    cols = identifiable_columns(model)
    return [(k, select_configurations(model, pool, k, cfg, columns=cols).index_value) for k in ks]


def _plane_seed(seed: int, plane_id: int) -> int:
    return int(np.random.SeedSequence([seed, plane_id]).generate_state(1)[0])


def select_per_plane(
    model: RobotModel,
    samples: SampleSet,
    K: int,
    cfg: Optional[DeConfig] = None,
    max_workers: int = 1,
) -> Tuple[SampleSet, Dict[int, SelectionResult]]:
    """Run the selection independently on every plane's pool, in parallel."""
    cfg = cfg or DeConfig()
    groups = samples.group_by_plane()
    cols = identifiable_columns(model)

    def _select(pid: int) -> SelectionResult:
        plane_cfg = cfg.model_copy(update={"seed": _plane_seed(cfg.seed, pid)})
        return select_configurations(model, groups[pid].joints, K, plane_cfg, columns=cols)

    with ThreadPoolExecutor(max_workers=max(1, min(max_workers, len(groups)))) as ex:
        results = dict(zip(groups, ex.map(_select, groups)))

    chosen = SampleSet.concat([groups[pid].take(res.chosen_indices) for pid, res in results.items()])
    return chosen, results
