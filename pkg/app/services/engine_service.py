from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence
import copy
import logging
import time

import numpy as np
import torch

from app.errors import DivergenceError, NonFiniteError
from app.models import HyperParams, Partition, PreparedData, TrainRecord
from app.services.checkpoint_service import save_checkpoint
from app.services.dataset_service import PairSampler
from app.services.encoder_service import DTYPES, ParamStore, init_params
from app.services.eval_service import KGICScorer, auc, popularity_scores
from app.services.graph_service import EVAL_EPOCH, GraphService
from app.services.objective_service import total_loss

logger = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
EPS = 1e-8

Callback = Callable[[TrainRecord], None]


class GradientSet(NamedTuple):
    """Gradients of one backward pass; embedding tables hold only the touched rows"""

    entity_rows: torch.Tensor
    entity_grads: torch.Tensor
    relation_rows: torch.Tensor
    relation_grads: torch.Tensor
    dense: Dict[str, torch.Tensor]


class AdamState:
    """Adam over the parameter store: lazy sparse Adam for the tables, dense Adam for the MLP"""

    def __init__(self, params: ParamStore, eta: float, mode: str = "lazy"):
        self.mode = mode
        self.t = 0
        if mode == "lazy":
            params.sparse = True
            self.optimizers = [
                torch.optim.SparseAdam([params.entity_embeddings, params.relation_embeddings], lr=eta, betas=BETAS, eps=EPS),
                torch.optim.Adam(params.mlp_tensors(), lr=eta, betas=BETAS, eps=EPS),
            ]
        else:
            params.sparse = False
            self.optimizers = [torch.optim.Adam(params.parameters(), lr=eta, betas=BETAS, eps=EPS)]

    def zero_grad(self) -> None:
        for optimizer in self.optimizers:
            optimizer.zero_grad(set_to_none=True)


def optimizer_mode(hp: HyperParams) -> str:
    """Full-table L2 yields dense table gradients, which sparse Adam cannot take"""
    if hp.optimizer == "lazy" and hp.l2_mode == "full":
        logger.warning("l2_mode=full needs dense gradients; switching to dense Adam")
        return "dense"
    return hp.optimizer


def _rows(grad: Optional[torch.Tensor], like: torch.Tensor):
    if grad is None:
        return torch.zeros(0, dtype=torch.long), torch.zeros(0, like.shape[1], dtype=like.dtype)
    if grad.is_sparse:
        grad = grad.coalesce()
        return grad.indices()[0], grad.values()
    touched = torch.nonzero(grad.abs().sum(dim=1), as_tuple=True)[0]
    return touched, grad[touched]


def backward(total: torch.Tensor, params: ParamStore, state: Optional[AdamState] = None) -> GradientSet:
    """Reverse-mode gradients of the total loss, checked for finiteness"""
    if state is not None:
        state.zero_grad()
    else:
        params.zero_grad(set_to_none=True)
    total.backward()

    entity_rows, entity_grads = _rows(params.entity_embeddings.grad, params.entity_embeddings)
    relation_rows, relation_grads = _rows(params.relation_embeddings.grad, params.relation_embeddings)
    dense = {}
    for name in ("attn_W0", "attn_b0", "attn_W1", "attn_b1"):
        grad = getattr(params, name).grad
        dense[name] = grad if grad is not None else torch.zeros_like(getattr(params, name))

    for name, grad in (("entity_embeddings", entity_grads), ("relation_embeddings", relation_grads), *dense.items()):
        if not torch.isfinite(grad).all():
            raise NonFiniteError(f"gradient of {name}")
    return GradientSet(entity_rows, entity_grads, relation_rows, relation_grads, dense)


def _table_grad(rows: torch.Tensor, values: torch.Tensor, table: torch.Tensor, sparse: bool) -> Optional[torch.Tensor]:
    if sparse:
        if rows.numel() == 0:
            return None
        return torch.sparse_coo_tensor(rows.unsqueeze(0), values, table.shape).coalesce()
    grad = torch.zeros_like(table)
    grad.index_add_(0, rows, values)
    return grad


def adam_step(params: ParamStore, grads: GradientSet, state: AdamState, eta: Optional[float] = None) -> int:
    """Apply one bias-corrected Adam update with `grads`; returns the step count"""
    sparse = state.mode == "lazy"
    params.entity_embeddings.grad = _table_grad(grads.entity_rows, grads.entity_grads, params.entity_embeddings, sparse)
    params.relation_embeddings.grad = _table_grad(
        grads.relation_rows, grads.relation_grads, params.relation_embeddings, sparse
    )
    for name, grad in grads.dense.items():
        getattr(params, name).grad = grad

    for optimizer in state.optimizers:
        if eta is not None:
            for group in optimizer.param_groups:
                group["lr"] = eta
        optimizer.step()
    state.t += 1
    return state.t


class FitResult(NamedTuple):
    params: ParamStore
    records: List[TrainRecord]
    best_epoch: int
    best_valid_auc: float
    checkpoint: Optional[Path]


def _append(log_path: Optional[Path], record: TrainRecord, callbacks: Sequence[Callback]) -> None:
    if log_path is not None:
        with open(log_path, "a", encoding="utf-8") as handle:
            handle.write(record.model_dump_json(exclude_none=True) + "\n")
    for callback in callbacks:
        callback(record)


def fit(
    data: PreparedData,
    hp: HyperParams,
    output_dir: Optional[Path] = None,
    callbacks: Sequence[Callback] = (),
    log_every: int = 1,
) -> FitResult:
    """Train with per-epoch graphs, early stopping on valid AUC and best-state checkpointing"""
    log, kg, align = data.log, data.kg, data.alignment
    torch.set_num_threads(hp.threads)

    sampler = PairSampler(log)
    if len(sampler) == 0:
        raise ValueError("train partition has no positives")
    graphs = GraphService(log, kg, align, hp)
    popularity = popularity_scores(log)
    valid = log.mask(Partition.VALID)

    log_path = checkpoint_path = None
    if output_dir is not None:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        log_path = output_dir / "train_log.jsonl"
        log_path.write_text("", encoding="utf-8")
        checkpoint_path = output_dir / "best.ckpt"

    params = init_params(kg.n_entities, kg.n_relations, hp.d, hp.seed, DTYPES[hp.precision])
    state = AdamState(params, hp.eta, optimizer_mode(hp))
    eval_bank = graphs.build_bank(EVAL_EPOCH)

    records: List[TrainRecord] = []
    best_state, best_auc, best_epoch, stale = None, -np.inf, -1, 0
    bank = None
    step = 0

    def diverged(message: str):
        snapshot = best_state if best_state is not None else copy.deepcopy(params.state_dict())
        path = None
        if checkpoint_path is not None:
            params.load_state_dict(snapshot)
            path = save_checkpoint(params, hp.L, checkpoint_path, hp)
        logger.error(message)
        return DivergenceError(message, last_good_state=snapshot, checkpoint_path=path)

    for epoch in range(hp.epochs):
        started = time.perf_counter()
        if bank is None or hp.resample_graphs:
            bank = graphs.build_bank(epoch)
        users, positives, negatives = sampler.epoch(hp.seed, epoch)

        for start in range(0, users.size, hp.batch_size):
            batch = (
                users[start:start + hp.batch_size],
                positives[start:start + hp.batch_size],
                negatives[start:start + hp.batch_size],
            )
            try:
                result = total_loss(batch, bank, params, hp)
            except NonFiniteError as e:
                raise diverged(f"epoch {epoch} step {step}: {e}") from e
            if not np.isfinite(result.breakdown.total):
                raise diverged(f"epoch {epoch} step {step}: total loss is {result.breakdown.total}")
            try:
                grads = backward(result.total, params, state)
            except NonFiniteError as e:
                raise diverged(f"epoch {epoch} step {step}: {e}") from e
            adam_step(params, grads, state)
            step += 1

            if step % log_every == 0:
                record = TrainRecord(
                    epoch=epoch,
                    step=step,
                    **result.breakdown.model_dump(),
                    wall_ms=(time.perf_counter() - started) * 1000,
                )
                records.append(record)
                _append(log_path, record, callbacks)

        valid_auc = None
        if valid.any():
            scorer = KGICScorer(params, eval_bank, hp, popularity)
            valid_auc = auc(scorer.score_pairs(log.users[valid], log.items[valid]), log.labels[valid])
        record = TrainRecord(epoch=epoch, step=step, valid_auc=valid_auc, wall_ms=(time.perf_counter() - started) * 1000)
        records.append(record)
        _append(log_path, record, callbacks)
        logger.info(f"Epoch {epoch}: {step} steps, valid AUC {valid_auc if valid_auc is None else round(valid_auc, 4)}")

        # without a valid partition the latest epoch counts as best
        score = valid_auc if valid_auc is not None else float(epoch)
        if score > best_auc:
            best_auc, best_epoch, stale = score, epoch, 0
            best_state = copy.deepcopy(params.state_dict())
        else:
            stale += 1
            if stale >= hp.patience:
                logger.info(f"Early stop after epoch {epoch}; best epoch {best_epoch}")
                break

    if best_state is not None:
        params.load_state_dict(best_state)
    saved = save_checkpoint(params, hp.L, checkpoint_path, hp) if checkpoint_path is not None else None
    return FitResult(
        params=params,
        records=records,
        best_epoch=best_epoch,
        best_valid_auc=float(best_auc) if valid.any() and best_epoch >= 0 else float("nan"),
        checkpoint=saved,
    )
