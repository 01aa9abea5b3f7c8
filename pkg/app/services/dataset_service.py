from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple
import hashlib
import json
import logging

import numpy as np
import pandas as pd

from app.config import resolve_data_path
from app.errors import AlignmentError, ConfigError, DataFormatError
from app.models import (
    Alignment,
    DatasetStats,
    InteractionLog,
    KnowledgeGraph,
    Partition,
    PreparedData,
    RunConfig,
)
from app.rng import make_rng
from app.store import DataStore

logger = logging.getLogger(__name__)


def _iter_fields(path: Path) -> Iterator[Tuple[int, List[str]]]:
    """Yield (line number, fields) for every data line, skipping blanks and # comments"""
    try:
        handle = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise DataFormatError(path, f"cannot open file: {e}") from e

    with handle:
        try:
            for line_no, line in enumerate(handle, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                yield line_no, line.split()
        except UnicodeDecodeError as e:
            raise DataFormatError(path, f"not valid UTF-8: {e}") from e


def _parse_id(path: Path, line_no: int, token: str, what: str) -> int:
    try:
        value = int(token)
    except ValueError:
        raise DataFormatError(path, f"{what} '{token}' is not an integer", line_no) from None
    if value < 0:
        raise DataFormatError(path, f"{what} '{token}' is negative", line_no)
    return value


def _dense(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Return (sorted original ids, dense index of each value)"""
    originals = np.unique(values)
    return originals, np.searchsorted(originals, values)


def load_interactions(
    path: Path,
    rating_threshold: Optional[float] = None,
    rng_seed: int = 0,
) -> InteractionLog:
    """Read `user item [rating]` lines, binarise and add one sampled negative per positive"""
    path = Path(path)
    users, items, ratings = [], [], []
    for line_no, fields in _iter_fields(path):
        if len(fields) not in (2, 3):
            raise DataFormatError(path, f"expected 2 or 3 fields, got {len(fields)}", line_no)
        users.append(_parse_id(path, line_no, fields[0], "user id"))
        items.append(_parse_id(path, line_no, fields[1], "item id"))
        if len(fields) == 3:
            try:
                ratings.append(float(fields[2]))
            except ValueError:
                raise DataFormatError(path, f"rating '{fields[2]}' is not a number", line_no) from None
        else:
            ratings.append(np.inf)  # unrated lines always count as positive

    if not users:
        raise DataFormatError(path, "no interaction records")

    user_ids, dense_users = _dense(np.asarray(users, dtype=np.int64))
    item_ids, dense_items = _dense(np.asarray(items, dtype=np.int64))
    ratings = np.asarray(ratings, dtype=np.float64)
    n_users, n_items = len(user_ids), len(item_ids)

    # one row per (user, item); a pair is positive if any of its ratings passes
    frame = pd.DataFrame({"user": dense_users, "item": dense_items, "rating": ratings})
    pairs = frame.groupby(["user", "item"], sort=True)["rating"].max().reset_index()
    if rating_threshold is None:
        pairs["positive"] = True
    else:
        pairs["positive"] = pairs["rating"] >= rating_threshold

    out_users, out_items, out_labels = [], [], []
    warnings: List[str] = []
    catalog = np.arange(n_items, dtype=np.int64)
    for user, group in pairs.groupby("user", sort=True):
        positives = group.loc[group["positive"], "item"].to_numpy(dtype=np.int64)
        if positives.size == 0:
            continue
        interacted = group["item"].to_numpy(dtype=np.int64)
        unobserved = np.setdiff1d(catalog, interacted, assume_unique=True)

        rng = make_rng(rng_seed, "negatives", int(user))
        if positives.size > unobserved.size:
            message = (
                f"user {user_ids[user]} has {positives.size} positives but only "
                f"{unobserved.size} unobserved items; using all of them"
            )
            logger.warning(message)
            warnings.append(message)
            negatives = rng.permutation(unobserved)
        else:
            negatives = rng.choice(unobserved, size=positives.size, replace=False)

        out_users.append(np.full(positives.size + negatives.size, user, dtype=np.int64))
        out_items.append(np.concatenate([positives, negatives]))
        out_labels.append(np.concatenate([np.ones(positives.size, np.int8), np.zeros(negatives.size, np.int8)]))

    if not out_users:
        raise DataFormatError(path, "no positive interactions after applying the rating threshold")

    users_arr = np.concatenate(out_users)
    log = InteractionLog(
        users=users_arr,
        items=np.concatenate(out_items),
        labels=np.concatenate(out_labels),
        partition=np.full(users_arr.shape[0], int(Partition.TRAIN), dtype=np.int8),
        n_users=n_users,
        n_items=n_items,
        user_ids=user_ids,
        item_ids=item_ids,
        warnings=warnings,
    )
    logger.info(
        f"Loaded {path.name}: {n_users} users, {n_items} items, "
        f"{int(log.labels.sum())} positives, {len(log) - int(log.labels.sum())} negatives"
    )
    return log


def largest_remainder(n: int, ratios: Sequence[float]) -> np.ndarray:
    """Integer shares of n proportional to ratios; leftovers go to the largest fractions"""
    quotas = np.asarray(ratios, dtype=np.float64) * n
    counts = np.floor(quotas + 1e-9).astype(np.int64)
    leftover = n - int(counts.sum())
    if leftover > 0:
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:leftover]] += 1
    return counts


def _validate_ratios(ratios: Sequence[float]) -> None:
    if len(ratios) != 3:
        raise ValueError("ratios must be (train, valid, test)")
    for ratio in ratios:
        if not 0.0 < ratio < 1.0:
            raise ValueError(f"split ratio {ratio} outside (0, 1)")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios sum to {sum(ratios)}, expected 1")


def split(log: InteractionLog, ratios: Sequence[float] = (0.6, 0.2, 0.2), rng_seed: int = 0) -> InteractionLog:
    """Assign every record a partition, keeping each positive with its paired negative"""
    _validate_ratios(ratios)
    partition = np.empty(len(log), dtype=np.int8)

    order = np.argsort(log.users, kind="stable")
    boundaries = np.flatnonzero(np.diff(log.users[order])) + 1
    for rows in np.split(order, boundaries):
        if rows.size == 0:
            continue
        user = int(log.users[rows[0]])
        positives = rows[log.labels[rows] == 1]
        negatives = rows[log.labels[rows] == 0]
        n_pairs = min(positives.size, negatives.size)

        units: List[np.ndarray] = [np.array([positives[k], negatives[k]]) for k in range(n_pairs)]
        units += [np.array([r]) for r in positives[n_pairs:]]
        units += [np.array([r]) for r in negatives[n_pairs:]]

        rng = make_rng(rng_seed, "split", user)
        shuffled = rng.permutation(len(units))
        counts = largest_remainder(len(units), ratios)
        cursor = 0
        for part, count in zip((Partition.TRAIN, Partition.VALID, Partition.TEST), counts):
            for unit in shuffled[cursor:cursor + count]:
                partition[units[unit]] = int(part)
            cursor += count

    sizes = {p.name.lower(): int((partition == int(p)).sum()) for p in Partition}
    logger.info(f"Split {len(log)} records into {sizes}")
    return log.with_partition(partition)


def load_kg(path: Path) -> KnowledgeGraph:
    """Read `head relation tail` triples, re-index densely and build the head index"""
    path = Path(path)
    rows = []
    for line_no, fields in _iter_fields(path):
        if len(fields) != 3:
            raise DataFormatError(path, f"expected 3 fields, got {len(fields)}", line_no)
        rows.append((
            _parse_id(path, line_no, fields[0], "head"),
            _parse_id(path, line_no, fields[1], "relation"),
            _parse_id(path, line_no, fields[2], "tail"),
        ))
    if not rows:
        raise DataFormatError(path, "knowledge graph file has no triples")

    raw = np.asarray(rows, dtype=np.int64)
    entity_ids = np.unique(np.concatenate([raw[:, 0], raw[:, 2]]))
    relation_ids = np.unique(raw[:, 1])
    dense = np.stack([
        np.searchsorted(entity_ids, raw[:, 0]),
        np.searchsorted(relation_ids, raw[:, 1]),
        np.searchsorted(entity_ids, raw[:, 2]),
    ], axis=1)
    # lexicographic unique sorts by (head, relation, tail) and drops duplicates
    triples = np.unique(dense, axis=0)
    n_entities = int(entity_ids.size)
    heads = np.ascontiguousarray(triples[:, 0])

    kg = KnowledgeGraph(
        heads=heads,
        relations=np.ascontiguousarray(triples[:, 1]),
        tails=np.ascontiguousarray(triples[:, 2]),
        offsets=np.searchsorted(heads, np.arange(n_entities + 1), side="left"),
        n_entities=n_entities,
        n_relations=int(relation_ids.size),
        entity_ids=entity_ids,
        relation_ids=relation_ids,
    )
    dropped = raw.shape[0] - kg.n_triples
    logger.info(
        f"Loaded {path.name}: {kg.n_entities} entities, {kg.n_relations} relations, "
        f"{kg.n_triples} triples ({dropped} duplicates removed)"
    )
    return kg


def _entity_index(kg: KnowledgeGraph, original: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Dense entity index of original ids plus a mask of ids that exist in the KG"""
    position = np.searchsorted(kg.entity_ids, original)
    clipped = np.minimum(position, kg.n_entities - 1)
    found = kg.entity_ids[clipped] == original
    return clipped, found


def load_alignment(path: Optional[Path], log: InteractionLog, kg: KnowledgeGraph) -> Alignment:
    """Map every item to one entity; without a file items share the entity id space"""
    if path is None:
        dense, found = _entity_index(kg, log.item_ids)
        if not found.all():
            missing = log.item_ids[~found]
            raise AlignmentError(
                f"{missing.size} items have no entity with the same id "
                f"(first: {missing[0]}, n_entities={kg.n_entities})"
            )
        return Alignment(item_to_entity=dense.astype(np.int64))

    path = Path(path)
    item_to_entity = np.full(log.n_items, -1, dtype=np.int64)
    for line_no, fields in _iter_fields(path):
        if len(fields) != 2:
            raise DataFormatError(path, f"expected 2 fields, got {len(fields)}", line_no)
        item = _parse_id(path, line_no, fields[0], "item id")
        entity = _parse_id(path, line_no, fields[1], "entity id")

        item_pos = np.searchsorted(log.item_ids, item)
        if item_pos >= log.n_items or log.item_ids[item_pos] != item:
            continue  # item never interacted with
        dense, found = _entity_index(kg, np.asarray([entity]))
        if not found[0]:
            raise AlignmentError(f"{path}:{line_no}: entity {entity} is not in the knowledge graph")
        if item_to_entity[item_pos] not in (-1, dense[0]):
            raise AlignmentError(f"{path}:{line_no}: item {item} is aligned to more than one entity")
        item_to_entity[item_pos] = dense[0]

    unaligned = np.flatnonzero(item_to_entity < 0)
    if unaligned.size:
        raise AlignmentError(
            f"{unaligned.size} items have no alignment (first: {log.item_ids[unaligned[0]]})"
        )
    return Alignment(item_to_entity=item_to_entity)


def export_idmaps(log: InteractionLog, kg: KnowledgeGraph, output_dir: Path) -> List[Path]:
    """Write `original_id \\t dense_id` tables for users, items, entities and relations"""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, originals in (
        ("users", log.user_ids),
        ("items", log.item_ids),
        ("entities", kg.entity_ids),
        ("relations", kg.relation_ids),
    ):
        target = output_dir / f"{name}.idmap.tsv"
        frame = pd.DataFrame({"original_id": originals, "dense_id": np.arange(originals.size)})
        frame.to_csv(target, sep="\t", header=False, index=False)
        written.append(target)
    return written


def dataset_stats(log: InteractionLog, kg: KnowledgeGraph, digest: Optional[str] = None) -> DatasetStats:
    return DatasetStats(
        n_users=log.n_users,
        n_items=log.n_items,
        n_interactions=int(log.labels.sum()),
        n_entities=kg.n_entities,
        n_relations=kg.n_relations,
        n_triples=kg.n_triples,
        partition_sizes={p.name.lower(): int((log.partition == int(p)).sum()) for p in Partition},
        digest=digest,
        warnings=len(log.warnings),
    )


def stats_table(stats: DatasetStats) -> str:
    """Render the statistics in the layout of the dataset summary table"""
    frame = pd.DataFrame(
        [
            ("User-item interaction", "# users", stats.n_users),
            ("User-item interaction", "# items", stats.n_items),
            ("User-item interaction", "# interactions", stats.n_interactions),
            ("Knowledge graph", "# entities", stats.n_entities),
            ("Knowledge graph", "# relations", stats.n_relations),
            ("Knowledge graph", "# triplets", stats.n_triples),
        ],
        columns=["group", "statistic", "value"],
    )
    return frame.to_string(index=False)


def prepare(config: RunConfig, interactions: Path, kg_path: Path, alignment: Optional[Path]) -> PreparedData:
    """Run the dataset pipeline end to end"""
    log = load_interactions(interactions, config.rating_threshold, config.seed)
    log = split(log, config.split_ratios, config.seed)
    kg = load_kg(kg_path)
    align = load_alignment(alignment, log, kg)
    return PreparedData(log=log, kg=kg, alignment=align)


def _file_digest(path: Path) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()


class DatasetService:
    """Prepared data of one run, backed by the run's on-disk cache"""

    def __init__(self, config: RunConfig, store: DataStore):
        self.config = config
        self.store = store

    def input_path(self, field: str, required: bool = True) -> Optional[Path]:
        value = getattr(self.config, field)
        if value is None:
            if required:
                raise ConfigError(f"--{field} is required (or `{field} = ...` in the config file)")
            return None
        path = resolve_data_path(value)
        if not path.exists():
            raise ConfigError(f"--{field}: {path} does not exist")
        return path

    def inputs(self) -> Tuple[Path, Path, Optional[Path]]:
        return self.input_path("interactions"), self.input_path("kg"), self.input_path("alignment", required=False)

    def source(self) -> Dict[str, Any]:
        """Everything the prepared arrays depend on: input contents, threshold, ratios and seed"""
        interactions, kg, alignment = self.inputs()
        return {
            "interactions": _file_digest(interactions),
            "kg": _file_digest(kg),
            "alignment": _file_digest(alignment) if alignment is not None else None,
            "rating_threshold": self.config.rating_threshold,
            "split_ratios": list(self.config.split_ratios),
            "seed": self.config.seed,
        }

    def prepare(self) -> Tuple[PreparedData, str]:
        """Parse, split and cache the inputs; returns the data and the cache digest"""
        interactions, kg, alignment = self.inputs()
        data = prepare(self.config, interactions, kg, alignment)
        digest = self.store.save(data, self.source())
        if self.config.output_dir is not None:
            export_idmaps(data.log, data.kg, Path(self.config.output_dir))
        return data, digest

    def load(self) -> PreparedData:
        """Cached data when it was built from the current inputs and settings, else a fresh preparation"""
        if self.store.exists():
            # round trip so tuples and floats compare the way they were stored
            wanted = json.loads(json.dumps(self.source(), sort_keys=True))
            if self.store.source() == wanted:
                logger.info(f"Using prepared data in {self.store.root}")
                return self.store.load()
            logger.warning(f"Prepared data in {self.store.root} came from other inputs or settings; preparing again")
        data, _ = self.prepare()
        return data


class PairSampler:
    """Pairs every train positive with one negative drawn from the user's frozen train negatives"""

    def __init__(self, log: InteractionLog):
        users, positives = log.pairs(Partition.TRAIN, label=1)
        neg_users, neg_items = log.pairs(Partition.TRAIN, label=0)

        pools: List[np.ndarray] = []
        catalog = np.arange(log.n_items, dtype=np.int64)
        borrowed = 0
        for user in range(log.n_users):
            pool = np.sort(neg_items[neg_users == user])
            if pool.size == 0 and np.any(users == user):
                # no frozen negatives in train: fall back to items the user never touched
                pool = np.setdiff1d(catalog, log.items[log.users == user])
                borrowed += 1
            pools.append(pool)
        if borrowed:
            logger.warning(f"{borrowed} users have no train negatives; sampling from unobserved items")

        sizes = np.array([pool.size for pool in pools], dtype=np.int64)
        keep = sizes[users] > 0
        if not keep.all():
            logger.warning(f"dropping {int((~keep).sum())} train positives of users with no negative candidates")
        self.users = users[keep]
        self.positives = positives[keep]
        self.pool_sizes = sizes
        self.pool_offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.pool_items = np.concatenate(pools) if pools else np.empty(0, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.users.size)

    def epoch(self, seed: int, epoch: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(user, positive, negative) triples in shuffled order for one epoch"""
        rng = make_rng(seed, "pairs", epoch)
        counts = self.pool_sizes[self.users]
        picks = np.minimum((rng.random(self.users.size) * counts).astype(np.int64), counts - 1)
        negatives = self.pool_items[self.pool_offsets[self.users] + picks]
        order = make_rng(seed, "shuffle", epoch).permutation(self.users.size)
        return self.users[order], self.positives[order], negatives[order]
