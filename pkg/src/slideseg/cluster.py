"""Feature-space clustering with evolutionary selection of the cluster count.

The quality objective is the variance-ratio (Calinski-Harabasz) form:
(between-cluster dispersion / (k - 1)) / (within-cluster dispersion / (n - k)),
higher is better. k-means assignments are deterministic given a seed
(k-means++ seeding, Lloyd iterations until the largest centroid shift drops
below 1e-6 or 300 iterations). The evolutionary search walks over integer k
only; assignments are always delegated to k-means, and each k is evaluated
with a seed derived from (seed, k) so its fitness is a pure, cacheable
function of k.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ConsistencyError, DegenerateClusteringError, InputError
from .rng import derive_rng
from .tissue import PatchGrid, PatchRecord

# Finite stand-in for an infinite variance ratio (zero within-dispersion),
# so models stay JSON-serializable and comparable.
OBJECTIVE_CAP = 1e18

KMEANS_TOL = 1e-6
KMEANS_MAX_ITER = 300


@dataclass(frozen=True)
class ClusterModel:
    k: int
    centroids: np.ndarray  # (k, dim)
    assignment: np.ndarray  # (n,) ints in [0, k)
    objective: float
    seed: int = 0


@dataclass(frozen=True)
class EvolutionConfig:
    population: int = 16
    generations: int = 20
    k_min: int = 2
    k_max: int = 8
    mutation_rate: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.k_min < 2:
            raise ConfigError(f"k_min must be >= 2, got {self.k_min}")
        if self.k_max < self.k_min:
            raise ConfigError(f"k_max {self.k_max} < k_min {self.k_min}")
        if self.population < 4:
            raise ConfigError(f"population must be >= 4, got {self.population}")
        if self.generations < 1:
            raise ConfigError(f"generations must be >= 1, got {self.generations}")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ConfigError(f"mutation_rate must be in [0,1], got {self.mutation_rate}")


def cluster_objective(
    features: np.ndarray, assignment: np.ndarray, centroids: np.ndarray
) -> float:
    """Variance-ratio score of a clustering; raises on degenerate input."""
    x = np.asarray(features, dtype=np.float64)
    a = np.asarray(assignment)
    c = np.asarray(centroids, dtype=np.float64)
    n, k = x.shape[0], c.shape[0]
    if a.shape[0] != n or x.shape[1] != c.shape[1]:
        raise InputError("features, assignment, and centroids dims are inconsistent")
    if k < 2:
        raise InputError(f"need at least 2 clusters, got {k}")
    sizes = np.bincount(a, minlength=k)
    if (sizes == 0).any():
        raise DegenerateClusteringError(f"empty cluster(s): {np.where(sizes == 0)[0].tolist()}")
    overall = x.mean(axis=0)
    within = float(((x - c[a]) ** 2).sum())
    between = float((sizes * ((c - overall) ** 2).sum(axis=1)).sum())
    if within <= 0.0:
        if between <= 0.0:
            raise DegenerateClusteringError("all points identical: 0/0 variance ratio")
        return OBJECTIVE_CAP
    if n == k:
        # within == 0 handled above; n == k with within > 0 cannot happen
        return OBJECTIVE_CAP
    return (between / (k - 1)) / (within / (n - k))


def _assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)  # ties -> lowest index


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [int(rng.integers(0, n))]
    d2 = ((x - x[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(0, n))
        centers.append(idx)
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return x[centers].copy()


def kmeans_assign(
    features: np.ndarray, k: int, seed: int, return_history: bool = False
):
    """Deterministic seeded k-means; returns a ClusterModel.

    With ``return_history`` also returns the within-dispersion after every
    assignment step (non-increasing by construction).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise InputError(f"features must be 2D, got shape {x.shape}")
    n = x.shape[0]
    if k < 2 or n < k:
        raise InputError(f"need 2 <= k <= n, got k={k}, n={n}")
    rng = derive_rng(seed, "kmeans_init")
    centroids = _kmeanspp_init(x, k, rng)
    history = []
    assignment = _assign(x, centroids)
    for _ in range(KMEANS_MAX_ITER):
        # Reseed empty clusters with the point farthest from its centroid.
        sizes = np.bincount(assignment, minlength=k)
        for empty in np.where(sizes == 0)[0]:
            far = int(np.argmax(((x - centroids[assignment]) ** 2).sum(axis=1)))
            centroids[empty] = x[far]
            assignment[far] = empty
            sizes = np.bincount(assignment, minlength=k)
        if return_history:
            history.append(float(((x - centroids[assignment]) ** 2).sum()))
        new_centroids = np.stack(
            [x[assignment == j].mean(axis=0) for j in range(k)], axis=0
        )
        shift = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        assignment = _assign(x, centroids)
        if shift < KMEANS_TOL:
            break
    if return_history:
        history.append(float(((x - centroids[assignment]) ** 2).sum()))
    objective = cluster_objective(x, assignment, centroids)
    model = ClusterModel(
        k=k, centroids=centroids, assignment=assignment, objective=objective, seed=int(seed)
    )
    return (model, history) if return_history else model


def evolve_cluster_count(features: np.ndarray, cfg: EvolutionConfig) -> ClusterModel:
    """Genetic search over integer k in [k_min, k_max] for the best objective.

    Tournament selection (size 2), +-1 mutation, elitism of one. Fitness of a
    candidate k is the objective of a seeded kmeans_assign and is memoized,
    so the elitism invariant (result >= every generation-0 candidate) holds
    exactly.
    """
    cfg.validate()
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] < cfg.k_max:
        raise InputError(f"need n >= k_max, got n={x.shape[0]}, k_max={cfg.k_max}")
    models: dict[int, ClusterModel] = {}

    def fitness(k: int) -> float:
        if k not in models:
            seed_k = int(derive_rng(cfg.seed, "fitness", k).integers(2**63))
            models[k] = kmeans_assign(x, k, seed_k)
        return models[k].objective

    if cfg.k_min == cfg.k_max:
        fitness(cfg.k_min)
        return models[cfg.k_min]

    rng = derive_rng(cfg.seed, "evolve")
    population = rng.integers(cfg.k_min, cfg.k_max + 1, size=cfg.population).tolist()
    # Best-so-far with deterministic tie-break toward smaller k.
    best_k = min(population, key=lambda k: (-fitness(k), k))
    for _ in range(cfg.generations):
        next_pop = [best_k]  # elitism
        while len(next_pop) < cfg.population:
            i, j = rng.integers(0, cfg.population, size=2)
            child = population[i] if fitness(population[i]) >= fitness(population[j]) else population[j]
            if rng.random() < cfg.mutation_rate:
                child = child + (1 if rng.integers(0, 2) else -1)
                child = min(max(child, cfg.k_min), cfg.k_max)
            next_pop.append(int(child))
        population = next_pop
        best_k = min(population + [best_k], key=lambda k: (-fitness(k), k))
    return models[best_k]


def prototype_classify(labeled_examples: dict[int, np.ndarray], query: np.ndarray) -> int:
    """Nearest-prototype label: each class prototype is the mean of its
    examples; ties break toward the lowest class index."""
    if not labeled_examples:
        raise InputError("need at least one class with examples")
    q = np.asarray(query, dtype=np.float64)
    best_label, best_d = None, np.inf
    for label in sorted(labeled_examples):
        ex = np.asarray(labeled_examples[label], dtype=np.float64)
        if ex.ndim != 2 or ex.shape[0] < 1:
            raise InputError(f"class {label} needs a (n_examples, dim) array")
        proto = ex.mean(axis=0)
        if proto.shape != q.shape:
            raise InputError(f"query dim {q.shape} != prototype dim {proto.shape}")
        d = float(((proto - q) ** 2).sum())
        if d < best_d:
            best_label, best_d = label, d
    return best_label


def balanced_sample(
    grid: PatchGrid, model: ClusterModel, per_cluster: int, seed: int
) -> list[PatchRecord]:
    """Up to per_cluster eligible records from each cluster, uniformly.

    The model's assignment must align with grid.eligible_records() order.
    """
    eligible = grid.eligible_records()
    if model.assignment.shape[0] != len(eligible):
        raise ConsistencyError(
            f"assignment covers {model.assignment.shape[0]} patches, grid has "
            f"{len(eligible)} eligible"
        )
    rng = derive_rng(seed, "balanced_sample")
    chosen: list[PatchRecord] = []
    for j in range(model.k):
        members = np.where(model.assignment == j)[0]
        if len(members) <= per_cluster:
            pick = members
        else:
            pick = np.sort(rng.choice(members, size=per_cluster, replace=False))
        chosen.extend(eligible[i] for i in pick)
    return chosen


def save_cluster_model(model: ClusterModel, path) -> None:
    with open(path, "w") as f:
        json.dump(
            {
                "k": model.k,
                "centroids": model.centroids.tolist(),
                "objective": model.objective,
                "seed": model.seed,
            },
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")


def load_cluster_model(path) -> ClusterModel:
    with open(path) as f:
        d = json.load(f)
    centroids = np.asarray(d["centroids"], dtype=np.float64)
    return ClusterModel(
        k=d["k"],
        centroids=centroids,
        assignment=np.zeros(0, dtype=np.int64),
        objective=d["objective"],
        seed=d.get("seed", 0),
    )
