from typing import Iterable, NamedTuple, Sequence, Tuple
import logging

import numpy as np
import torch
import torch.nn.functional as F

from app.errors import NonFiniteError
from app.models import GraphBank, HyperParams, Locality, LossBreakdown, ObjectKind
from app.services.encoder_service import ParamStore, encode_objects, object_vector

logger = logging.getLogger(__name__)


class LossResult(NamedTuple):
    total: torch.Tensor
    breakdown: LossBreakdown


def _check_tau(tau: float) -> None:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def _check_encodings(tensor: torch.Tensor, name: str) -> None:
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(name)


def similarity(a: torch.Tensor, b: torch.Tensor, mode: str = "dot") -> torch.Tensor:
    """Pairwise similarity along the last axis with broadcasting"""
    if mode == "cosine":
        return F.cosine_similarity(a, b, dim=-1)
    return (a * b).sum(dim=-1)


def intra_loss(
    encodings: Sequence[torch.Tensor],
    tau: float,
    L: int,
    mode: str = "dot",
) -> torch.Tensor:
    """Seed layer against aggregated layers 1..L (positives) and L+1.. (negatives)

    `encodings` holds one (..., L+J+1, d) tensor per graph of the object; the
    per-graph losses are summed.
    """
    _check_tau(tau)
    total = None
    for stacked in encodings:
        _check_encodings(stacked, "layer encodings")
        if stacked.shape[-2] < L + 2:
            raise ValueError("intra loss needs at least one negative layer beyond L")
        anchor = stacked[..., :1, :]
        scores = similarity(anchor, stacked[..., 1:, :], mode) / tau
        loss = torch.logsumexp(scores, dim=-1) - torch.logsumexp(scores[..., :L], dim=-1)
        total = loss if total is None else total + loss
    return total


def inter_loss(
    local: torch.Tensor,
    nonlocal_: torch.Tensor,
    tau: float,
    L: int,
    mode: str = "dot",
    symmetric: bool = False,
) -> torch.Tensor:
    """Local layer k against non-local layer k, with the other non-local layers 0..L as negatives"""
    _check_tau(tau)
    _check_encodings(local, "local encodings")
    _check_encodings(nonlocal_, "non-local encodings")
    anchors = local[..., : L + 1, :]
    candidates = nonlocal_[..., : L + 1, :]
    if L == 0:
        logger.warning("inter loss with a single layer has no negatives; returning 0")
        return torch.zeros(anchors.shape[:-2], dtype=anchors.dtype)

    scores = similarity(anchors.unsqueeze(-2), candidates.unsqueeze(-3), mode) / tau
    diagonal = torch.diagonal(scores, dim1=-2, dim2=-1)
    loss = (torch.logsumexp(scores, dim=-1) - diagonal).sum(dim=-1)
    if symmetric:
        reverse = (torch.logsumexp(scores, dim=-2) - diagonal).sum(dim=-1)
        loss = (loss + reverse) / 2
    return loss


def bpr_loss(score_pos: torch.Tensor, score_neg: torch.Tensor) -> torch.Tensor:
    """-ln sigmoid(pos - neg) in softplus form"""
    return F.softplus(-(score_pos - score_neg))


def l2_term(tensors: Iterable[torch.Tensor]) -> torch.Tensor:
    total = None
    for tensor in tensors:
        squares = tensor.pow(2).sum()
        total = squares if total is None else total + squares
    if total is None:
        return torch.zeros(())
    return total


def touched_rows(bank: GraphBank, hp: HyperParams, users: np.ndarray, items: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Entity and relation rows read by the graphs of the given objects"""
    entities, relations = [], []
    for kind, ids in ((ObjectKind.USER, users), (ObjectKind.ITEM, items)):
        for locality in hp.localities:
            arrays = bank.arrays(kind, locality)
            layers = arrays.layers[ids]
            entities.extend([arrays.seeds[ids].ravel(), layers[..., 0].ravel(), layers[..., 2].ravel()])
            relations.append(layers[..., 1].ravel())
    return np.unique(np.concatenate(entities)), np.unique(np.concatenate(relations))


def _regularised(params: ParamStore, bank: GraphBank, hp: HyperParams, users: np.ndarray, items: np.ndarray) -> torch.Tensor:
    if hp.l2_mode == "full":
        return l2_term([params.entity_embeddings, params.relation_embeddings, *params.mlp_tensors()])
    entity_rows, relation_rows = touched_rows(bank, hp, users, items)
    return l2_term([
        params.entities(torch.as_tensor(entity_rows)),
        params.relations(torch.as_tensor(relation_rows)),
        *params.mlp_tensors(),
    ])


def total_loss(
    batch: Tuple[np.ndarray, np.ndarray, np.ndarray],
    bank: GraphBank,
    params: ParamStore,
    hp: HyperParams,
) -> LossResult:
    """BPR plus weighted contrastive and L2 terms for a batch of (user, positive, negative)"""
    users, positives, negatives = (np.asarray(part, dtype=np.int64) for part in batch)
    if users.size == 0:
        raise ValueError("empty batch")
    if not (users.size == positives.size == negatives.size):
        raise ValueError("batch columns differ in length")

    distinct_users, user_index = np.unique(users, return_inverse=True)
    distinct_items, item_index = np.unique(np.concatenate([positives, negatives]), return_inverse=True)
    if not bank.active_users[distinct_users].all():
        raise ValueError("batch contains users without graphs")

    user_enc = encode_objects(params, bank, ObjectKind.USER, distinct_users, hp)
    item_enc = encode_objects(params, bank, ObjectKind.ITEM, distinct_items, hp)
    user_vec = object_vector([user_enc[loc] for loc in hp.localities], hp.L)
    item_vec = object_vector([item_enc[loc] for loc in hp.localities], hp.L)

    user_rows = user_vec[torch.as_tensor(user_index)]
    item_index = torch.as_tensor(item_index)
    pos_scores = (user_rows * item_vec[item_index[: users.size]]).sum(dim=-1)
    neg_scores = (user_rows * item_vec[item_index[users.size:]]).sum(dim=-1)
    bpr = bpr_loss(pos_scores, neg_scores).mean()

    zero = torch.zeros((), dtype=params.dtype)
    intra = zero
    if not hp.disable_intra:
        per_object = torch.cat([
            intra_loss([enc[loc] for loc in hp.localities], hp.tau, hp.L, hp.similarity)
            for enc in (user_enc, item_enc)
        ])
        intra = per_object.mean()

    inter = zero
    if not hp.disable_inter and Locality.NONLOCAL in hp.localities:
        per_object = torch.cat([
            inter_loss(enc[Locality.LOCAL], enc[Locality.NONLOCAL], hp.tau, hp.L, hp.similarity, hp.symmetric_inter)
            for enc in (user_enc, item_enc)
        ])
        inter = per_object.mean()

    l2 = _regularised(params, bank, hp, distinct_users, distinct_items)
    total = bpr + hp.lambda1 * (hp.alpha * intra + inter) + hp.lambda2 * l2

    breakdown = LossBreakdown(
        bpr=bpr.item(),
        intra=intra.item(),
        inter=inter.item(),
        l2=l2.item(),
        total=total.item(),
    )
    return LossResult(total=total, breakdown=breakdown)
