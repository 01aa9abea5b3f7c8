from typing import Dict, List, NamedTuple, Optional, Sequence, Union
import logging

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from app.errors import NonFiniteError
from app.models import GraphBank, HyperParams, LayeredGraph, Locality, ObjectKind
from app.rng import derive_seed

logger = logging.getLogger(__name__)

DTYPES = {32: torch.float32, 64: torch.float64}
LEAKY_SLOPE = 0.2


class LayerEncoding(NamedTuple):
    embedding: torch.Tensor  # (..., d)
    weights: Optional[torch.Tensor] = None  # (..., m), absent for the seed layer


class Prediction(NamedTuple):
    user_vec: torch.Tensor
    item_vec: torch.Tensor
    score: torch.Tensor


class ParamStore(nn.Module):
    """Entity and relation tables plus the two-layer attention MLP

    The relation table carries one extra row: index `n_relations` is the
    self-loop relation used to pad dead-end layers.
    """

    def __init__(self, n_entities: int, n_relations: int, d: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        if min(n_entities, n_relations, d) < 1:
            raise ValueError("n_entities, n_relations and d must be positive")
        self.n_entities = n_entities
        self.n_relations = n_relations
        self.d = d
        self.sparse = True
        self.entity_embeddings = nn.Parameter(torch.zeros(n_entities, d, dtype=dtype))
        self.relation_embeddings = nn.Parameter(torch.zeros(n_relations + 1, d, dtype=dtype))
        self.attn_W0 = nn.Parameter(torch.zeros(d, 2 * d, dtype=dtype))
        self.attn_b0 = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.attn_W1 = nn.Parameter(torch.zeros(1, d, dtype=dtype))
        self.attn_b1 = nn.Parameter(torch.zeros(1, dtype=dtype))

    @property
    def dtype(self) -> torch.dtype:
        return self.entity_embeddings.dtype

    def tensors(self) -> Dict[str, torch.Tensor]:
        """Parameters in checkpoint order"""
        return {
            "entity_embeddings": self.entity_embeddings,
            "relation_embeddings": self.relation_embeddings,
            "attn_W0": self.attn_W0,
            "attn_b0": self.attn_b0,
            "attn_W1": self.attn_W1,
            "attn_b1": self.attn_b1,
        }

    def mlp_tensors(self) -> List[torch.Tensor]:
        return [self.attn_W0, self.attn_b0, self.attn_W1, self.attn_b1]

    def entities(self, index: torch.Tensor) -> torch.Tensor:
        return F.embedding(index, self.entity_embeddings, sparse=self.sparse)

    def relations(self, index: torch.Tensor) -> torch.Tensor:
        return F.embedding(index, self.relation_embeddings, sparse=self.sparse)


def init_params(
    n_entities: int,
    n_relations: int,
    d: int,
    rng_seed: int,
    dtype: torch.dtype = torch.float64,
) -> ParamStore:
    """Xavier-uniform tables and weights, zero biases"""
    params = ParamStore(n_entities, n_relations, d, dtype)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(rng_seed, "init"))
        with torch.no_grad():
            for tensor in (params.entity_embeddings, params.relation_embeddings, params.attn_W0, params.attn_W1):
                nn.init.xavier_uniform_(tensor)
    return params


def check_finite(tensor: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(name)
    return tensor


def _as_index(values: Union[np.ndarray, torch.Tensor, Sequence[int]]) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values.long()
    return torch.as_tensor(np.asarray(values, dtype=np.int64))


def attention_logits(
    heads: torch.Tensor,
    relations: torch.Tensor,
    params: ParamStore,
    activation: str = "relu",
) -> torch.Tensor:
    """Scalar logit per triple from the (head, relation) embeddings, shape (..., m)"""
    d = params.d
    hidden = F.linear(heads, params.attn_W0[:, :d]) + F.linear(relations, params.attn_W0[:, d:]) + params.attn_b0
    if activation == "leaky_relu":
        hidden = F.leaky_relu(hidden, LEAKY_SLOPE)
    else:
        hidden = F.relu(hidden)
    return F.linear(hidden, params.attn_W1, params.attn_b1).squeeze(-1)


def attention_weights(layer, params: ParamStore, activation: str = "relu") -> torch.Tensor:
    """Softmax attention over the m triples of a layer; `layer` is (..., m, 3)"""
    layer = _as_index(layer)
    if layer.shape[-2] < 1:
        raise ValueError("a layer needs at least one triple")
    for tensor in params.mlp_tensors():
        check_finite(tensor, "attention MLP")
    heads = check_finite(params.entities(layer[..., 0]), "entity_embeddings")
    relations = check_finite(params.relations(layer[..., 1]), "relation_embeddings")
    return torch.softmax(attention_logits(heads, relations, params, activation), dim=-1)


def encode_layer(layer, params: ParamStore, activation: str = "relu") -> LayerEncoding:
    layer = _as_index(layer)
    weights = attention_weights(layer, params, activation)
    tails = check_finite(params.entities(layer[..., 2]), "entity_embeddings")
    embedding = (weights.unsqueeze(-1) * tails).sum(dim=-2)
    return LayerEncoding(embedding=embedding, weights=weights)


def encode_seed(seed_entities, params: ParamStore) -> LayerEncoding:
    seed_entities = _as_index(seed_entities)
    if seed_entities.shape[-1] == 0:
        raise ValueError("empty seed")
    rows = check_finite(params.entities(seed_entities), "entity_embeddings")
    return LayerEncoding(embedding=rows.mean(dim=-2))


def encode_batch(seeds, layers, params: ParamStore, activation: str = "relu") -> LayerEncoding:
    """Encode n graphs at once: seeds (n, S), layers (n, D, m, 3) -> embeddings (n, D+1, d)"""
    anchor = encode_seed(seeds, params)
    deep = encode_layer(layers, params, activation)
    embedding = torch.cat([anchor.embedding.unsqueeze(-2), deep.embedding], dim=-2)
    return LayerEncoding(embedding=embedding, weights=deep.weights)


def encode_graph(graph: LayeredGraph, params: ParamStore, activation: str = "relu") -> List[LayerEncoding]:
    """Seed encoding followed by one encoding per sampled layer"""
    batch = encode_batch(graph.seed_entities[None], graph.layers[None], params, activation)
    encodings = [LayerEncoding(embedding=batch.embedding[0, 0])]
    for layer in range(graph.layers.shape[0]):
        encodings.append(LayerEncoding(embedding=batch.embedding[0, layer + 1], weights=batch.weights[0, layer]))
    return encodings


def object_vector(encodings: Sequence[torch.Tensor], L: int) -> torch.Tensor:
    """Concatenate layers 0..L of every locality: each (..., >= L+1, d) -> (..., n_loc*(L+1)*d)"""
    parts = []
    for stacked in encodings:
        if stacked.shape[-2] < L + 1:
            raise ValueError(f"need {L + 1} layer encodings, got {stacked.shape[-2]}")
        head = stacked[..., : L + 1, :]
        parts.append(head.reshape(*head.shape[:-2], -1))
    return torch.cat(parts, dim=-1)


def predict(user_encodings: Sequence[torch.Tensor], item_encodings: Sequence[torch.Tensor], L: int) -> Prediction:
    user_vec = object_vector(user_encodings, L)
    item_vec = object_vector(item_encodings, L)
    if user_vec.shape[-1] != item_vec.shape[-1]:
        raise ValueError(f"vector length mismatch: {user_vec.shape[-1]} vs {item_vec.shape[-1]}")
    return Prediction(user_vec=user_vec, item_vec=item_vec, score=(user_vec * item_vec).sum(dim=-1))


def encode_objects(
    params: ParamStore,
    bank: GraphBank,
    kind: ObjectKind,
    ids,
    hp: HyperParams,
) -> Dict[Locality, torch.Tensor]:
    """Layer encodings (n, L+J+1, d) per locality for the given objects"""
    ids = np.asarray(ids, dtype=np.int64)
    encoded = {}
    for locality in hp.localities:
        arrays = bank.arrays(kind, locality)
        encoded[locality] = encode_batch(arrays.seeds[ids], arrays.layers[ids], params, hp.activation).embedding
    return encoded


def object_vectors(
    params: ParamStore,
    bank: GraphBank,
    kind: ObjectKind,
    ids,
    hp: HyperParams,
    chunk_size: int = 1024,
) -> torch.Tensor:
    """Prediction vectors for many objects, encoded in chunks without gradients"""
    ids = np.asarray(ids, dtype=np.int64)
    chunks = []
    with torch.no_grad():
        for start in range(0, ids.size, chunk_size):
            encoded = encode_objects(params, bank, kind, ids[start:start + chunk_size], hp)
            chunks.append(object_vector([encoded[loc] for loc in hp.localities], hp.L))
    if not chunks:
        return torch.zeros(0, hp.vector_width, dtype=params.dtype)
    return torch.cat(chunks)
