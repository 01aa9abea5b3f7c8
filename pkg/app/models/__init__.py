from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Dict, List, Literal, Optional, Tuple
from enum import Enum
import numpy as np
from scipy.sparse import csr_matrix


class Partition(int, Enum):
    TRAIN = 0
    VALID = 1
    TEST = 2


class ObjectKind(str, Enum):
    USER = "user"
    ITEM = "item"


class Locality(str, Enum):
    LOCAL = "local"
    NONLOCAL = "nonlocal"


DEFAULT_TOP_K = [5, 10, 20, 50, 100]


# Hyper-parameter Models
class HyperParams(BaseModel):
    """Everything that changes the objective or the optimisation"""

    L: int = Field(2, ge=1)
    J: int = Field(1, ge=1)
    tau: float = Field(0.1, gt=0)
    alpha: float = Field(1.0, ge=0)
    lambda1: float = Field(1e-6, ge=0)
    lambda2: float = Field(1e-4, ge=0)
    eta: float = Field(4e-3, gt=0)
    d: int = Field(64, ge=1)
    batch_size: int = Field(2048, ge=1)
    local_size: int = Field(40, ge=1)
    nonlocal_size: int = Field(128, ge=1)
    seed: int = Field(2022, ge=0)
    epochs: int = Field(100, ge=0)
    patience: int = Field(5, ge=1)
    threads: int = Field(1, ge=1)

    # ablation switches
    disable_intra: bool = False
    disable_inter: bool = False
    disable_nonlocal: bool = False

    # variants
    similarity: Literal["dot", "cosine"] = "dot"
    symmetric_inter: bool = False
    activation: Literal["relu", "leaky_relu"] = "relu"
    l2_mode: Literal["batch", "full"] = "batch"
    optimizer: Literal["lazy", "dense"] = "lazy"
    resample_graphs: bool = True
    precision: int = 64

    @field_validator("precision")
    @classmethod
    def check_precision(cls, value: int) -> int:
        if value not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        return value

    @property
    def depth(self) -> int:
        """Number of sampled layers per graph (L positive layers + J negative layers)"""
        return self.L + self.J

    @property
    def localities(self) -> List[Locality]:
        if self.disable_nonlocal:
            return [Locality.LOCAL]
        return [Locality.LOCAL, Locality.NONLOCAL]

    def layer_size(self, locality: Locality) -> int:
        return self.local_size if locality == Locality.LOCAL else self.nonlocal_size

    @property
    def vector_width(self) -> int:
        """Length of the concatenated user/item vector used for prediction"""
        return len(self.localities) * (self.L + 1) * self.d


class RunConfig(HyperParams):
    """Flat operator configuration: dataset paths, output and all hyper-parameters"""

    dataset: Literal["book", "movie", "music", "custom"] = "custom"
    interactions: Optional[str] = None
    kg: Optional[str] = None
    alignment: Optional[str] = None
    output_dir: Optional[str] = None
    rating_threshold: Optional[float] = None
    train_ratio: float = 0.6
    valid_ratio: float = 0.2
    test_ratio: float = 0.2
    f1_threshold: float = Field(0.5, gt=0, lt=1)
    top_k: List[int] = Field(default_factory=lambda: list(DEFAULT_TOP_K))
    bprmf_epochs: int = Field(50, ge=0)
    log_every: int = Field(1, ge=1)

    @field_validator("top_k", mode="before")
    @classmethod
    def parse_top_k(cls, value):
        if isinstance(value, str):
            value = [int(part) for part in value.replace(" ", "").split(",") if part]
        return sorted(set(value))

    @field_validator("rating_threshold", "interactions", "kg", "alignment", "output_dir", mode="before")
    @classmethod
    def blank_is_none(cls, value):
        if isinstance(value, str) and value.strip().lower() in ("", "none"):
            return None
        return value

    @model_validator(mode="after")
    def check_ratios(self):
        ratios = self.split_ratios
        if any(not 0 < r < 1 for r in ratios):
            raise ValueError(f"split ratios must lie in (0, 1), got {ratios}")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
        return self

    @property
    def split_ratios(self) -> Tuple[float, float, float]:
        return (self.train_ratio, self.valid_ratio, self.test_ratio)

    def hyper_params(self) -> HyperParams:
        return HyperParams(**self.model_dump(include=set(HyperParams.model_fields)))


# Array containers
class ArrayModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)


class InteractionLog(ArrayModel):
    """Implicit-feedback records with dense ids and a partition per record"""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    partition: np.ndarray
    n_users: int
    n_items: int
    user_ids: np.ndarray  # dense index -> original id
    item_ids: np.ndarray
    warnings: List[str] = Field(default_factory=list)

    def __len__(self) -> int:
        return int(self.users.shape[0])

    def mask(self, partition: Optional[Partition] = None, label: Optional[int] = None) -> np.ndarray:
        keep = np.ones(len(self), dtype=bool)
        if partition is not None:
            keep &= self.partition == int(partition)
        if label is not None:
            keep &= self.labels == label
        return keep

    def pairs(self, partition: Optional[Partition] = None, label: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        keep = self.mask(partition, label)
        return self.users[keep], self.items[keep]

    def records(self) -> List[Tuple[int, int, int, int]]:
        return list(zip(self.users.tolist(), self.items.tolist(), self.labels.tolist(), self.partition.tolist()))

    def with_partition(self, partition: np.ndarray) -> "InteractionLog":
        return self.model_copy(update={"partition": partition.astype(np.int8)})


class KnowledgeGraph(ArrayModel):
    """Deduplicated triples sorted by (head, relation, tail) with a CSR head index"""

    heads: np.ndarray
    relations: np.ndarray
    tails: np.ndarray
    offsets: np.ndarray  # n_entities + 1
    n_entities: int
    n_relations: int
    entity_ids: np.ndarray
    relation_ids: np.ndarray

    @property
    def n_triples(self) -> int:
        return int(self.heads.shape[0])

    @property
    def self_loop(self) -> int:
        """Reserved relation index used for dead-end padding"""
        return self.n_relations

    def triples(self) -> List[Tuple[int, int, int]]:
        return list(zip(self.heads.tolist(), self.relations.tolist(), self.tails.tolist()))

    def adjacency(self, head: int) -> List[Tuple[int, int]]:
        lo, hi = self.offsets[head], self.offsets[head + 1]
        return list(zip(self.relations[lo:hi].tolist(), self.tails[lo:hi].tolist()))


class Alignment(ArrayModel):
    item_to_entity: np.ndarray

    def entities_of(self, items) -> np.ndarray:
        return self.item_to_entity[np.asarray(items, dtype=np.int64)]

    def __len__(self) -> int:
        return int(self.item_to_entity.shape[0])


class LayeredGraph(ArrayModel):
    owner: Tuple[ObjectKind, int]
    locality: Locality
    seed_entities: np.ndarray  # (seed_size,)
    layers: np.ndarray  # (depth, m, 3) of (head, relation, tail)
    dead_ends: List[int] = Field(default_factory=list)

    @property
    def layer_sizes(self) -> List[int]:
        return [int(self.layers.shape[1])] * int(self.layers.shape[0])

    def to_record(self) -> dict:
        return {
            "owner": {"object": self.owner[0].value, "id": int(self.owner[1])},
            "locality": self.locality.value,
            "seed_entities": self.seed_entities.tolist(),
            "layers": self.layers.tolist(),
            "dead_ends": list(self.dead_ends),
        }


class GraphArrays(ArrayModel):
    """Fixed-shape graphs of one (object kind, locality) pair, row i = object i"""

    seeds: np.ndarray  # (n, seed_size)
    layers: np.ndarray  # (n, depth, m, 3)
    dead_ends: np.ndarray  # (n, depth) bool, true where the fallback filled the layer


class GraphBank(ArrayModel):
    epoch: int
    graphs: Dict[Tuple[ObjectKind, Locality], GraphArrays]
    active_users: np.ndarray  # users that own graphs (at least one train positive)

    def arrays(self, kind: ObjectKind, locality: Locality) -> GraphArrays:
        return self.graphs[(kind, locality)]

    def graph(self, kind: ObjectKind, locality: Locality, object_id: int) -> LayeredGraph:
        arrays = self.arrays(kind, locality)
        layers = arrays.layers[object_id]
        return LayeredGraph(
            owner=(kind, object_id),
            locality=locality,
            seed_entities=arrays.seeds[object_id],
            layers=layers,
            dead_ends=(np.flatnonzero(arrays.dead_ends[object_id]) + 1).tolist(),
        )


# Loss / training records
class LossBreakdown(BaseModel):
    bpr: float
    intra: float
    inter: float
    l2: float
    total: float


class TrainRecord(BaseModel):
    epoch: int
    step: int
    bpr: Optional[float] = None
    intra: Optional[float] = None
    inter: Optional[float] = None
    l2: Optional[float] = None
    total: Optional[float] = None
    valid_auc: Optional[float] = None
    wall_ms: float = 0.0


# Reporting Models
class MetricReport(BaseModel):
    auc: float = Field(..., ge=0, le=1)
    f1: float = Field(..., ge=0, le=1)
    recall_at: Dict[int, float]
    n_eval_users: int
    model: str = "kgic"

    @field_validator("recall_at")
    @classmethod
    def check_recall(cls, value: Dict[int, float]):
        previous = -1.0
        for k in sorted(value):
            if not 0.0 <= value[k] <= 1.0:
                raise ValueError(f"recall@{k} outside [0, 1]")
            if value[k] < previous - 1e-12:
                raise ValueError("recall must be non-decreasing in K")
            previous = value[k]
        return value

    def to_text(self) -> str:
        lines = [f"model          {self.model}", f"AUC            {self.auc:.4f}", f"F1             {self.f1:.4f}"]
        for k in sorted(self.recall_at):
            lines.append(f"Recall@{k:<7} {self.recall_at[k]:.4f}")
        lines.append(f"eval users     {self.n_eval_users}")
        return "\n".join(lines)


class DatasetStats(BaseModel):
    n_users: int
    n_items: int
    n_interactions: int
    n_entities: int
    n_relations: int
    n_triples: int
    partition_sizes: Dict[str, int] = Field(default_factory=dict)
    digest: Optional[str] = None
    warnings: int = 0


class PreparedData(ArrayModel):
    log: InteractionLog
    kg: KnowledgeGraph
    alignment: Alignment


class CoOccurrence(ArrayModel):
    """Train-positive incidence in both directions; the three maps are derived on demand"""

    user_items: csr_matrix  # users x items
    item_users: csr_matrix  # items x users

    @staticmethod
    def _row(matrix: csr_matrix, row: int) -> np.ndarray:
        return matrix.indices[matrix.indptr[row]:matrix.indptr[row + 1]]

    def _union(self, matrix: csr_matrix, rows: np.ndarray) -> np.ndarray:
        if rows.size == 0:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate([self._row(matrix, r) for r in rows])).astype(np.int64)

    def train_items(self, user: int) -> np.ndarray:
        return self._row(self.user_items, user).astype(np.int64)

    def similar_users(self, user: int) -> np.ndarray:
        return self._union(self.item_users, self._row(self.user_items, user))

    def user_highorder_items(self, user: int) -> np.ndarray:
        return self._union(self.user_items, self.similar_users(user))

    def item_highorder_items(self, item: int) -> np.ndarray:
        return self._union(self.user_items, self._row(self.item_users, item))
