from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union
import json
import logging

import numpy as np
from scipy.sparse import csr_matrix

from app.errors import ColdStartError, IsolatedNodeError
from app.models import (
    Alignment,
    CoOccurrence,
    GraphArrays,
    GraphBank,
    HyperParams,
    InteractionLog,
    KnowledgeGraph,
    LayeredGraph,
    Locality,
    ObjectKind,
    Partition,
)
from app.rng import make_rng

logger = logging.getLogger(__name__)

KIND_CODES = {ObjectKind.USER: 0, ObjectKind.ITEM: 1}
LOCALITY_CODES = {Locality.LOCAL: 0, Locality.NONLOCAL: 1}

# graphs used for validation, evaluation and export
EVAL_EPOCH = -1


def build_cooccurrence(log: InteractionLog) -> CoOccurrence:
    """Index train positives both ways; valid/test records never enter"""
    users, items = log.pairs(Partition.TRAIN, label=1)
    if users.size == 0:
        raise ValueError("train partition has no positives")
    data = np.ones(users.size, dtype=np.int8)
    user_items = csr_matrix((data, (users, items)), shape=(log.n_users, log.n_items))
    user_items.sum_duplicates()
    user_items.sort_indices()
    item_users = user_items.T.tocsr()
    item_users.sort_indices()
    return CoOccurrence(user_items=user_items, item_users=item_users)


def local_seed(kind: ObjectKind, object_id: int, cooc: CoOccurrence, align: Alignment) -> np.ndarray:
    """Entities aligned with a user's train positives, or with the item itself"""
    if kind == ObjectKind.ITEM:
        if not 0 <= object_id < len(align):
            raise IndexError(f"item {object_id} out of range")
        return align.entities_of([object_id])

    if not 0 <= object_id < cooc.user_items.shape[0]:
        raise IndexError(f"user {object_id} out of range")
    items = cooc.train_items(object_id)
    if items.size == 0:
        raise ColdStartError(f"user {object_id} has no train positives")
    return np.unique(align.entities_of(items))


def nonlocal_seed(kind: ObjectKind, object_id: int, cooc: CoOccurrence, align: Alignment) -> np.ndarray:
    """Entities aligned with the high-order (item-user-item) co-occurrence items"""
    if kind == ObjectKind.USER:
        items = cooc.user_highorder_items(object_id)
    else:
        items = cooc.item_highorder_items(object_id)
    if items.size == 0:
        raise IsolatedNodeError(f"{kind.value} {object_id} has no co-occurring items")
    return np.unique(align.entities_of(items))


def _choose(rng: np.random.Generator, pool_size: int, size: int) -> np.ndarray:
    return rng.choice(pool_size, size=size, replace=pool_size < size)


def _candidate_triples(kg: KnowledgeGraph, heads: np.ndarray) -> np.ndarray:
    """Indices of every triple whose head is in `heads`"""
    heads = np.unique(heads)
    starts = kg.offsets[heads]
    counts = kg.offsets[heads + 1] - starts
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    run_starts = np.repeat(starts - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
    return run_starts + np.arange(total)


def propagate(
    seed: np.ndarray,
    kg: KnowledgeGraph,
    depth: int,
    sizes: Union[int, Sequence[int]],
    rng: Union[int, np.random.Generator],
    seed_size: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample a fixed-size seed and `depth` fixed-size triple layers along KG links

    Returns (seed entities, layers of shape (depth, m, 3), dead-end flags per layer).
    """
    if depth < 1:
        raise ValueError("depth must be at least 1")
    sizes = [sizes] * depth if isinstance(sizes, int) else list(sizes)
    if len(sizes) != depth or min(sizes) < 1:
        raise ValueError("need one positive sample size per layer")
    if len(set(sizes)) != 1:
        raise ValueError("layers of one graph share a single size")
    seed = np.asarray(seed, dtype=np.int64)
    if seed.size == 0:
        raise ValueError("empty seed")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))

    m = sizes[0]
    seed_size = seed_size or m
    seeds = seed[_choose(rng, seed.size, seed_size)]

    layers = np.empty((depth, m, 3), dtype=np.int64)
    dead_ends = np.zeros(depth, dtype=bool)
    frontier = seeds
    for layer in range(depth):
        candidates = _candidate_triples(kg, frontier)
        if candidates.size:
            picked = candidates[_choose(rng, candidates.size, m)]
            layers[layer, :, 0] = kg.heads[picked]
            layers[layer, :, 1] = kg.relations[picked]
            layers[layer, :, 2] = kg.tails[picked]
        elif layer == 0:
            # nothing leaves the seed: self loops keep the shape and the seed's meaning
            entities = seeds[_choose(rng, seeds.size, m)]
            layers[layer] = np.stack([entities, np.full(m, kg.self_loop), entities], axis=1)
            dead_ends[layer] = True
        else:
            layers[layer] = layers[layer - 1][rng.choice(m, size=m, replace=True)]
            dead_ends[layer] = True
        frontier = layers[layer, :, 2]
    return seeds, layers, dead_ends

def seed_pool(
    kind: ObjectKind,
    object_id: int,
    locality: Locality,
    cooc: CoOccurrence,
    align: Alignment,
) -> np.ndarray:
    """Entities a graph's seed is drawn from; an isolated object's non-local pool is its local one"""
    if locality == Locality.NONLOCAL:
        try:
            return nonlocal_seed(kind, object_id, cooc, align)
        except IsolatedNodeError:
            pass
    return local_seed(kind, object_id, cooc, align)


def sample_graph(
    kind: ObjectKind,
    object_id: int,
    locality: Locality,
    pool: np.ndarray,
    kg: KnowledgeGraph,
    hp: HyperParams,
    epoch: int = 0,
) -> LayeredGraph:
    size = hp.layer_size(locality)
    # epoch -1 is the evaluation view; SeedSequence keys must be non-negative
    rng = make_rng(hp.seed, "graph", KIND_CODES[kind], object_id, LOCALITY_CODES[locality], epoch + 1)
    seeds, layers, dead_ends = propagate(pool, kg, hp.depth, size, rng, seed_size=size)
    return LayeredGraph(
        owner=(kind, object_id),
        locality=locality,
        seed_entities=seeds,
        layers=layers,
        dead_ends=(np.flatnonzero(dead_ends) + 1).tolist(),
    )


def object_graph(
    kind: ObjectKind,
    object_id: int,
    locality: Locality,
    cooc: CoOccurrence,
    kg: KnowledgeGraph,
    align: Alignment,
    hp: HyperParams,
    epoch: int = 0,
) -> LayeredGraph:
    """Build one object's local or non-local layered graph"""
    pool = seed_pool(kind, object_id, locality, cooc, align)
    return sample_graph(kind, object_id, locality, pool, kg, hp, epoch)


class GraphService:
    """Layered graphs of one prepared dataset

    Seed pools depend only on the train partition, so they are computed once
    and every epoch only resamples the layers.
    """

    def __init__(
        self,
        log: InteractionLog,
        kg: KnowledgeGraph,
        align: Alignment,
        hp: HyperParams,
        cooc: Optional[CoOccurrence] = None,
    ):
        self.log = log
        self.kg = kg
        self.align = align
        self.hp = hp
        self.cooc = cooc if cooc is not None else build_cooccurrence(log)
        self.active_users = np.diff(self.cooc.user_items.indptr) > 0
        self._pools: Dict[Tuple[ObjectKind, Locality], Dict[int, np.ndarray]] = {}

    def active(self, kind: ObjectKind) -> np.ndarray:
        if kind == ObjectKind.USER:
            return self.active_users
        return np.ones(self.log.n_items, dtype=bool)

    def seed_pools(self, kind: ObjectKind, locality: Locality) -> Dict[int, np.ndarray]:
        key = (kind, locality)
        if key not in self._pools:
            ids = np.flatnonzero(self.active(kind)).tolist()
            self._pools[key] = {i: seed_pool(kind, i, locality, self.cooc, self.align) for i in ids}
        return self._pools[key]

    def object_graph(self, kind: ObjectKind, object_id: int, locality: Locality, epoch: int = 0) -> LayeredGraph:
        pool = self.seed_pools(kind, locality).get(object_id)
        if pool is None:
            pool = seed_pool(kind, object_id, locality, self.cooc, self.align)
        return sample_graph(kind, object_id, locality, pool, self.kg, self.hp, epoch)

    def _build_arrays(self, kind: ObjectKind, locality: Locality, epoch: int) -> GraphArrays:
        hp = self.hp
        n_objects = self.log.n_users if kind == ObjectKind.USER else self.log.n_items
        size = hp.layer_size(locality)
        seeds = np.zeros((n_objects, size), dtype=np.int64)
        layers = np.zeros((n_objects, hp.depth, size, 3), dtype=np.int64)
        dead_ends = np.zeros((n_objects, hp.depth), dtype=bool)
        pools = self.seed_pools(kind, locality)

        def fill(object_id: int) -> None:
            graph = sample_graph(kind, object_id, locality, pools[object_id], self.kg, hp, epoch)
            seeds[object_id] = graph.seed_entities
            layers[object_id] = graph.layers
            for layer in graph.dead_ends:
                dead_ends[object_id, layer - 1] = True

        ids = list(pools)
        if hp.threads > 1:
            with ThreadPoolExecutor(max_workers=hp.threads) as executor:
                list(executor.map(fill, ids))
        else:
            for object_id in ids:
                fill(object_id)

        fallbacks = int(dead_ends.any(axis=1).sum())
        if fallbacks:
            logger.warning(f"{fallbacks} {kind.value} {locality.value} graphs used the dead-end fallback")
        return GraphArrays(seeds=seeds, layers=layers, dead_ends=dead_ends)

    def build_bank(self, epoch: int = 0) -> GraphBank:
        """Construct every user's and item's graphs for one epoch"""
        cold = int((~self.active_users).sum())
        if cold:
            logger.warning(f"{cold} cold-start users without train positives get no graphs")
        graphs = {
            (kind, locality): self._build_arrays(kind, locality, epoch)
            for kind in (ObjectKind.USER, ObjectKind.ITEM)
            for locality in self.hp.localities
        }
        return GraphBank(epoch=epoch, graphs=graphs, active_users=self.active_users.copy())


def build_graph_bank(
    log: InteractionLog,
    kg: KnowledgeGraph,
    align: Alignment,
    hp: HyperParams,
    epoch: int = 0,
    cooc: Optional[CoOccurrence] = None,
) -> GraphBank:
    return GraphService(log, kg, align, hp, cooc).build_bank(epoch)


def dump_graphs(bank: GraphBank, path: Path) -> int:
    """Write one JSON line per layered graph; returns the number of records"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    written = 0
    with open(path, "w", encoding="utf-8") as handle:
        for (kind, locality), arrays in bank.graphs.items():
            for object_id in range(arrays.seeds.shape[0]):
                if kind == ObjectKind.USER and not bank.active_users[object_id]:
                    continue
                graph = bank.graph(kind, locality, object_id)
                handle.write(json.dumps(graph.to_record()) + "\n")
                written += 1
    return written
