from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Protocol, Sequence
import logging

import numpy as np
import pandas as pd
import torch
from scipy.special import expit
from sklearn.metrics import f1_score, roc_auc_score
from torch import nn

from app.errors import MetricError
from app.models import (
    DEFAULT_TOP_K,
    GraphBank,
    HyperParams,
    InteractionLog,
    MetricReport,
    ObjectKind,
    Partition,
    PreparedData,
    RunConfig,
)
from app.rng import derive_seed
from app.services.dataset_service import PairSampler
from app.services.encoder_service import ParamStore, object_vectors
from app.services.graph_service import EVAL_EPOCH, GraphService
from app.services.objective_service import bpr_loss, l2_term

logger = logging.getLogger(__name__)


class Scorer(Protocol):
    name: str

    def score_pairs(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        ...

    def score_users(self, users: np.ndarray) -> np.ndarray:
        ...


class RecallResult(NamedTuple):
    recall_at: Dict[int, float]
    n_eval_users: int
    per_user: pd.DataFrame


class EvalResult(NamedTuple):
    report: MetricReport
    per_user: pd.DataFrame


# Metrics
def _check_labels(scores, labels) -> tuple:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise MetricError(f"{scores.size} scores for {labels.size} labels")
    return scores, labels


def auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative, ties count half"""
    scores, labels = _check_labels(scores, labels)
    if np.unique(labels).size < 2:
        raise MetricError("AUC needs both positive and negative labels")
    return float(roc_auc_score(labels, scores))


def f1(scores, labels, threshold: float = 0.5) -> float:
    """F1 of sigmoid(score) >= threshold; 0 when nothing is predicted or present"""
    scores, labels = _check_labels(scores, labels)
    predictions = (expit(scores) >= threshold).astype(np.int64)
    return float(f1_score(labels, predictions, zero_division=0))


def recall_at_k(
    scorer: Scorer,
    log: InteractionLog,
    ks: Sequence[int] = DEFAULT_TOP_K,
    partition: Partition = Partition.TEST,
    chunk_size: int = 512,
) -> RecallResult:
    """Mean Recall@K over users with held-out positives, ranking the catalog minus their other positives"""
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValueError("K values must be positive")
    held = log.mask(partition, label=1)
    if not log.mask(partition).any():
        raise MetricError(f"{partition.name.lower()} partition is empty")

    held_users, held_items = log.users[held], log.items[held]
    seen = log.mask(label=1) & ~held
    seen_users, seen_items = log.users[seen], log.items[seen]
    eval_users = np.unique(held_users)
    if eval_users.size == 0:
        raise MetricError(f"no user has {partition.name.lower()} positives")

    max_k = min(ks[-1], log.n_items)
    rows: List[dict] = []
    for start in range(0, eval_users.size, chunk_size):
        chunk = eval_users[start:start + chunk_size]
        scores = np.array(scorer.score_users(chunk), dtype=np.float64, copy=True)
        for row, user in enumerate(chunk):
            scores[row, seen_items[seen_users == user]] = -np.inf
            ranking = np.argsort(-scores[row], kind="stable")[:max_k]
            targets = held_items[held_users == user]
            hits = np.isin(ranking, targets)
            record = {"user": int(log.user_ids[user])}
            for k in ks:
                record[f"recall@{k}"] = float(hits[:k].sum()) / targets.size
            rows.append(record)

    per_user = pd.DataFrame(rows)
    recall = {k: float(per_user[f"recall@{k}"].mean()) for k in ks}
    return RecallResult(recall_at=recall, n_eval_users=int(eval_users.size), per_user=per_user)


# Scorers
def popularity_scores(log: InteractionLog) -> np.ndarray:
    """Train-positive counts scaled to [0, 1] and centred, so above-average items score positive"""
    users, items = log.pairs(Partition.TRAIN, label=1)
    counts = np.bincount(items, minlength=log.n_items).astype(np.float64)
    if counts.max() > 0:
        counts /= counts.max()
    return counts - counts.mean()


class KGICScorer:
    """Dot products of precomputed user and item vectors; users without graphs fall back to popularity"""

    name = "kgic"

    def __init__(self, params: ParamStore, bank: GraphBank, hp: HyperParams, popularity: np.ndarray):
        self.popularity = popularity
        self.active = bank.active_users
        n_users = self.active.size
        self.item_vectors = object_vectors(params, bank, ObjectKind.ITEM, np.arange(popularity.size), hp).cpu().numpy()
        self.user_vectors = np.zeros((n_users, self.item_vectors.shape[1]), dtype=self.item_vectors.dtype)
        active_ids = np.flatnonzero(self.active)
        if active_ids.size:
            self.user_vectors[active_ids] = object_vectors(params, bank, ObjectKind.USER, active_ids, hp).cpu().numpy()
        cold = n_users - active_ids.size
        if cold:
            logger.info(f"{cold} cold-start users scored by item popularity")

    def score_pairs(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        scores = np.einsum("nw,nw->n", self.user_vectors[users], self.item_vectors[items]).astype(np.float64)
        cold = ~self.active[users]
        scores[cold] = self.popularity[items[cold]]
        return scores

    def score_users(self, users: np.ndarray) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        scores = (self.user_vectors[users] @ self.item_vectors.T).astype(np.float64)
        cold = ~self.active[users]
        scores[cold] = self.popularity
        return scores


class BPRMF(nn.Module):
    """Plain matrix factorisation baseline"""

    name = "bprmf"

    def __init__(self, n_users: int, n_items: int, d: int, seed: int = 0):
        super().__init__()
        self.user_embeddings = nn.Embedding(n_users, d, dtype=torch.float64)
        self.item_embeddings = nn.Embedding(n_items, d, dtype=torch.float64)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, "init", 1))
            nn.init.xavier_uniform_(self.user_embeddings.weight)
            nn.init.xavier_uniform_(self.item_embeddings.weight)

    def forward(self, users: torch.Tensor, items: torch.Tensor) -> torch.Tensor:
        return (self.user_embeddings(users) * self.item_embeddings(items)).sum(dim=-1)

    def score_pairs(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self(torch.as_tensor(np.asarray(users, dtype=np.int64)), torch.as_tensor(np.asarray(items, dtype=np.int64))).numpy()

    def score_users(self, users: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            rows = self.user_embeddings(torch.as_tensor(np.asarray(users, dtype=np.int64)))
            return (rows @ self.item_embeddings.weight.T).numpy()


def train_bprmf(
    log: InteractionLog,
    d: int = 64,
    eta: float = 4e-3,
    epochs: int = 50,
    seed: int = 2022,
    lambda2: float = 1e-4,
    batch_size: int = 2048,
) -> BPRMF:
    """Fit BPRMF with BPR loss, batch L2 and Adam on the train partition"""
    model = BPRMF(log.n_users, log.n_items, d, seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=eta)
    sampler = PairSampler(log)
    if len(sampler) == 0:
        raise ValueError("train partition has no positives")

    for epoch in range(epochs):
        users, positives, negatives = sampler.epoch(seed, epoch)
        running = 0.0
        for start in range(0, users.size, batch_size):
            u = torch.as_tensor(users[start:start + batch_size])
            p = torch.as_tensor(positives[start:start + batch_size])
            n = torch.as_tensor(negatives[start:start + batch_size])
            loss = bpr_loss(model(u, p), model(u, n)).mean()
            loss = loss + lambda2 * l2_term([model.user_embeddings(u), model.item_embeddings(p), model.item_embeddings(n)])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            running += loss.item() * u.numel()
        logger.info(f"BPRMF epoch {epoch}: loss {running / users.size:.6f}")
    return model


def ctr_metrics(scorer: Scorer, log: InteractionLog, partition: Partition, threshold: float = 0.5) -> Dict[str, float]:
    keep = log.mask(partition)
    if not keep.any():
        raise MetricError(f"{partition.name.lower()} partition is empty")
    scores = scorer.score_pairs(log.users[keep], log.items[keep])
    labels = log.labels[keep]
    return {"auc": auc(scores, labels), "f1": f1(scores, labels, threshold)}


def evaluate(
    scorer: Scorer,
    log: InteractionLog,
    partition: Partition = Partition.TEST,
    threshold: float = 0.5,
    ks: Optional[Sequence[int]] = None,
) -> EvalResult:
    """CTR metrics on the partition's frozen 1:1 records plus top-K recall"""
    ctr = ctr_metrics(scorer, log, partition, threshold)
    recall = recall_at_k(scorer, log, ks or DEFAULT_TOP_K, partition)
    report = MetricReport(
        auc=ctr["auc"],
        f1=ctr["f1"],
        recall_at=recall.recall_at,
        n_eval_users=recall.n_eval_users,
        model=scorer.name,
    )
    logger.info(f"{scorer.name} on {partition.name.lower()}: AUC {report.auc:.4f}, F1 {report.f1:.4f}")
    return EvalResult(report=report, per_user=recall.per_user)


class EvalService:
    """Scores a prepared dataset with a trained model or the BPRMF baseline"""

    def __init__(self, data: PreparedData, config: RunConfig):
        self.data = data
        self.config = config
        self.hp = config.hyper_params()

    def popularity(self) -> np.ndarray:
        return popularity_scores(self.data.log)

    def kgic_scorer(self, params: ParamStore) -> KGICScorer:
        data = self.data
        bank = GraphService(data.log, data.kg, data.alignment, self.hp).build_bank(EVAL_EPOCH)
        return KGICScorer(params, bank, self.hp, self.popularity())

    def bprmf_scorer(self) -> BPRMF:
        hp = self.hp
        return train_bprmf(
            self.data.log,
            d=hp.d,
            eta=hp.eta,
            epochs=self.config.bprmf_epochs,
            seed=hp.seed,
            lambda2=hp.lambda2,
            batch_size=hp.batch_size,
        )

    def evaluate(self, scorer: Scorer, partition: Partition = Partition.TEST) -> EvalResult:
        return evaluate(scorer, self.data.log, partition, self.config.f1_threshold, self.config.top_k)

    def write(self, result: EvalResult, output_dir: Path, per_user: bool = False) -> List[Path]:
        """metrics_<model>.json, plus recall_per_user_<model>.tsv when asked"""
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        name = result.report.model
        report_path = output_dir / f"metrics_{name}.json"
        report_path.write_text(result.report.model_dump_json(indent=2), encoding="utf-8")
        written = [report_path]
        if per_user:
            per_user_path = output_dir / f"recall_per_user_{name}.tsv"
            result.per_user.to_csv(per_user_path, sep="\t", index=False)
            written.append(per_user_path)
        return written
