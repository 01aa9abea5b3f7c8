import json
import math

import numpy as np
import pytest
import torch

from app.errors import CheckpointError, DivergenceError, NonFiniteError
from app.services import checkpoint_service, dataset_service, encoder_service, engine_service, objective_service
from app.services.engine_service import AdamState


def numeric_grad(loss_fn, tensor, index, eps=1e-5) -> float:
    """Central finite difference of a scalar loss along one coordinate"""
    with torch.no_grad():
        original = tensor[index].item()
        tensor[index] = original + eps
        plus = loss_fn()
        tensor[index] = original - eps
        minus = loss_fn()
        tensor[index] = original
    return (plus - minus) / (2 * eps)


def close(analytic: float, numeric: float) -> bool:
    return abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-8


@pytest.fixture
def sampler(prepared):
    return dataset_service.PairSampler(prepared.log)


class TestBackward:
    def test_squared_norm(self):
        params = encoder_service.init_params(5, 2, 3, rng_seed=0)
        params.sparse = False
        total = objective_service.l2_term([params.entity_embeddings])
        grads = engine_service.backward(total, params)
        assert torch.allclose(grads.entity_grads, 2 * params.entity_embeddings[grads.entity_rows].detach())
        assert grads.dense["attn_W0"].abs().sum() == 0

    def test_matches_finite_differences(self, bank, sampler, micro_config):
        hp = micro_config.hyper_params()
        for seed in range(100):
            params = encoder_service.init_params(30, 3, 2, rng_seed=seed)
            users, positives, negatives = sampler.epoch(seed, 0)
            batch = (users[:4], positives[:4], negatives[:4])
            grads = engine_service.backward(objective_service.total_loss(batch, bank, params, hp).total, params)

            def loss_fn():
                return objective_service.total_loss(batch, bank, params, hp).breakdown.total

            for name in ("attn_W0", "attn_b0", "attn_W1", "attn_b1"):
                tensor = getattr(params, name)
                for index in np.ndindex(*tensor.shape):
                    analytic = grads.dense[name][index].item()
                    assert close(analytic, numeric_grad(loss_fn, tensor, index)), (seed, name, index)

            rng = np.random.default_rng(seed)
            for _ in range(15):
                use_entities = rng.random() < 0.7 or grads.relation_rows.numel() == 0
                rows, values, table = (
                    (grads.entity_rows, grads.entity_grads, params.entity_embeddings)
                    if use_entities
                    else (grads.relation_rows, grads.relation_grads, params.relation_embeddings)
                )
                k, col = int(rng.integers(rows.numel())), int(rng.integers(params.d))
                index = (int(rows[k]), col)
                assert close(values[k, col].item(), numeric_grad(loss_fn, table, index)), (seed, index)

    def test_output_bias_has_no_gradient(self, bank, sampler, micro_config):
        hp = micro_config.hyper_params()
        params = encoder_service.init_params(30, 3, hp.d, rng_seed=1)
        users, positives, negatives = sampler.epoch(1, 0)
        result = objective_service.total_loss((users[:8], positives[:8], negatives[:8]), bank, params, hp)
        grads = engine_service.backward(result.total, params)
        assert abs(grads.dense["attn_b1"].item()) < 1e-10

    def test_non_finite_gradient(self):
        params = encoder_service.init_params(5, 2, 3, rng_seed=0)
        params.sparse = False
        total = (params.entity_embeddings.sum() * torch.tensor(float("inf"), dtype=torch.float64))
        with pytest.raises(NonFiniteError, match="gradient"):
            engine_service.backward(total, params)


class TestAdam:
    def test_first_step_moves_by_learning_rate(self, bank, sampler, micro_config):
        hp = micro_config.hyper_params()
        eta = 1e-3
        params = encoder_service.init_params(30, 3, hp.d, rng_seed=2)
        state = AdamState(params, eta=eta)
        users, positives, negatives = sampler.epoch(2, 0)
        result = objective_service.total_loss((users[:8], positives[:8], negatives[:8]), bank, params, hp)
        grads = engine_service.backward(result.total, params, state)
        before = {name: tensor.detach().clone() for name, tensor in params.tensors().items()}
        assert engine_service.adam_step(params, grads, state) == 1

        # dense Adam: eta * g / (|g| + eps)
        g = grads.dense["attn_W0"]
        moved = before["attn_W0"] - params.attn_W0.detach()
        assert torch.allclose(moved, eta * g / (g.abs() + engine_service.EPS), rtol=1e-6, atol=1e-15)
        strong = g.abs() > 1e-4
        assert torch.allclose(moved[strong], eta * torch.sign(g[strong]), rtol=1e-3)

        # sparse Adam adds eps before the bias correction: eta * g / (|g| + eps / sqrt(1 - beta2))
        g = grads.entity_grads
        rows = grads.entity_rows
        moved = before["entity_embeddings"][rows] - params.entity_embeddings.detach()[rows]
        lazy_eps = engine_service.EPS / math.sqrt(1 - engine_service.BETAS[1])
        assert torch.allclose(moved, eta * g / (g.abs() + lazy_eps), rtol=1e-6, atol=1e-15)
        strong = g.abs() > 1e-2
        assert torch.allclose(moved[strong], eta * torch.sign(g[strong]), rtol=1e-3)

    def test_step_uses_the_given_gradients(self):
        params = encoder_service.init_params(5, 2, 3, rng_seed=0)
        state = AdamState(params, eta=0.1)
        before = params.entity_embeddings.detach().clone()
        grads = engine_service.GradientSet(
            entity_rows=torch.tensor([3]),
            entity_grads=torch.full((1, 3), 2.0, dtype=torch.float64),
            relation_rows=torch.zeros(0, dtype=torch.long),
            relation_grads=torch.zeros(0, 3, dtype=torch.float64),
            dense={name: torch.zeros_like(getattr(params, name)) for name in ("attn_W0", "attn_b0", "attn_W1", "attn_b1")},
        )
        engine_service.adam_step(params, grads, state, eta=0.05)
        after = params.entity_embeddings.detach()
        assert torch.allclose(before[3] - after[3], torch.full((3,), 0.05, dtype=torch.float64), rtol=1e-5)
        assert torch.equal(before[[0, 1, 2, 4]], after[[0, 1, 2, 4]])

    def test_untouched_rows_stay_put(self, bank, sampler, micro_config):
        hp = micro_config.hyper_params()
        params = encoder_service.init_params(30, 3, hp.d, rng_seed=2)
        state = AdamState(params, eta=1e-2)
        users, positives, negatives = sampler.epoch(2, 0)
        result = objective_service.total_loss((users[:2], positives[:2], negatives[:2]), bank, params, hp)
        grads = engine_service.backward(result.total, params, state)
        before = params.entity_embeddings.detach().clone()
        engine_service.adam_step(params, grads, state)
        untouched = np.setdiff1d(np.arange(30), grads.entity_rows.numpy())
        assert torch.equal(before[untouched], params.entity_embeddings.detach()[untouched])

    def test_zero_gradient_changes_nothing(self):
        params = encoder_service.init_params(5, 2, 3, rng_seed=0)
        state = AdamState(params, eta=0.1, mode="dense")
        before = {name: tensor.detach().clone() for name, tensor in params.tensors().items()}
        grads = engine_service.GradientSet(
            entity_rows=torch.zeros(0, dtype=torch.long),
            entity_grads=torch.zeros(0, 3, dtype=torch.float64),
            relation_rows=torch.zeros(0, dtype=torch.long),
            relation_grads=torch.zeros(0, 3, dtype=torch.float64),
            dense={name: torch.zeros_like(getattr(params, name)) for name in ("attn_W0", "attn_b0", "attn_W1", "attn_b1")},
        )
        assert engine_service.adam_step(params, grads, state) == 1
        for name, tensor in params.tensors().items():
            assert torch.equal(before[name], tensor.detach())

    def test_full_l2_switches_to_dense(self, micro_config):
        hp = micro_config.hyper_params().model_copy(update={"l2_mode": "full"})
        assert engine_service.optimizer_mode(hp) == "dense"
        assert engine_service.optimizer_mode(micro_config.hyper_params()) == "lazy"

    def test_loss_descends_on_a_fixed_batch(self, bank, sampler, micro_config):
        hp = micro_config.hyper_params()
        params = encoder_service.init_params(30, 3, hp.d, rng_seed=3)
        state = AdamState(params, eta=1e-3)
        users, positives, negatives = sampler.epoch(3, 0)
        batch = (users[:16], positives[:16], negatives[:16])
        losses = []
        for _ in range(51):
            result = objective_service.total_loss(batch, bank, params, hp)
            losses.append(result.breakdown.total)
            grads = engine_service.backward(result.total, params, state)
            engine_service.adam_step(params, grads, state)
        assert sum(b < a for a, b in zip(losses, losses[1:])) >= 45

    def test_fits_a_single_triple(self, bank, prepared, micro_config):
        hp = micro_config.hyper_params().model_copy(update={"lambda1": 0.0, "lambda2": 0.0})
        users, items = prepared.log.pairs(label=1)
        negatives = np.setdiff1d(np.arange(20), items[users == 0])
        batch = ([0], [int(items[users == 0][0])], [int(negatives[0])])
        params = encoder_service.init_params(30, 3, hp.d, rng_seed=4)
        state = AdamState(params, eta=0.05)
        for _ in range(500):
            result = objective_service.total_loss(batch, bank, params, hp)
            grads = engine_service.backward(result.total, params, state)
            engine_service.adam_step(params, grads, state)
        assert objective_service.total_loss(batch, bank, params, hp).breakdown.bpr < 1e-3


class TestFit:
    def test_bit_identical_reruns(self, prepared, micro_config):
        hp = micro_config.hyper_params()
        first = engine_service.fit(prepared, hp)
        second = engine_service.fit(prepared, hp)
        for name, tensor in first.params.tensors().items():
            assert torch.equal(tensor, second.params.tensors()[name])
        assert [r.total for r in first.records] == [r.total for r in second.records]

    def test_thread_count_does_not_change_training(self, prepared, micro_config):
        hp = micro_config.hyper_params()
        previous = torch.get_num_threads()
        try:
            single = engine_service.fit(prepared, hp.model_copy(update={"threads": 1}))
            threaded = engine_service.fit(prepared, hp.model_copy(update={"threads": 4}))
        finally:
            torch.set_num_threads(previous)
        for name, tensor in single.params.tensors().items():
            assert torch.allclose(tensor, threaded.params.tensors()[name], rtol=0.0, atol=1e-9), name
        assert len(single.records) == len(threaded.records)
        for a, b in zip(single.records, threaded.records):
            if a.total is not None:
                assert abs(a.total - b.total) <= 1e-9
            if a.valid_auc is not None:
                assert abs(a.valid_auc - b.valid_auc) <= 1e-9
        assert single.best_epoch == threaded.best_epoch

    def test_log_and_checkpoint(self, prepared, micro_config, tmp_path):
        hp = micro_config.hyper_params()
        seen = []
        result = engine_service.fit(prepared, hp, tmp_path / "run", callbacks=[seen.append])

        lines = [json.loads(line) for line in (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()]
        assert len(lines) == len(seen) == 8  # 3 steps + 1 epoch record, twice
        epoch_records = [line for line in lines if "valid_auc" in line]
        assert [line["epoch"] for line in epoch_records] == [0, 1]
        assert all(0.0 <= line["valid_auc"] <= 1.0 for line in epoch_records)
        step_records = [line for line in lines if "total" in line]
        assert {"bpr", "intra", "inter", "l2", "wall_ms"} <= set(step_records[0])

        assert result.checkpoint == tmp_path / "run" / "best.ckpt"
        assert checkpoint_service.sidecar_path(result.checkpoint).exists()
        assert result.best_epoch in (0, 1)
        loaded = checkpoint_service.load_checkpoint(result.checkpoint, expected=hp)
        for name, tensor in result.params.tensors().items():
            assert torch.equal(tensor, loaded.tensors()[name])

    def test_patience_stops_early(self, prepared, micro_config):
        hp = micro_config.hyper_params().model_copy(update={"epochs": 30, "patience": 1})
        result = engine_service.fit(prepared, hp)
        epochs_run = len({r.epoch for r in result.records})
        assert epochs_run < 30 or result.best_epoch == 29

    def test_frozen_graphs(self, prepared, micro_config):
        hp = micro_config.hyper_params().model_copy(update={"resample_graphs": False})
        result = engine_service.fit(prepared, hp)
        assert len(result.records) == 8

    def test_divergence(self, prepared, micro_config, tmp_path, monkeypatch):
        real_total_loss = engine_service.total_loss
        calls = []

        def poisoned(batch, bank, params, hp):
            calls.append(1)
            if len(calls) == 2:
                raise NonFiniteError("layer encodings")
            return real_total_loss(batch, bank, params, hp)

        monkeypatch.setattr(engine_service, "total_loss", poisoned)
        with pytest.raises(DivergenceError) as error:
            engine_service.fit(prepared, micro_config.hyper_params(), tmp_path / "run")
        assert error.value.checkpoint_path == tmp_path / "run" / "best.ckpt"
        assert error.value.last_good_state is not None
        assert checkpoint_service.load_checkpoint(error.value.checkpoint_path).d == micro_config.d


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        params = encoder_service.init_params(7, 2, 3, rng_seed=9)
        path = checkpoint_service.save_checkpoint(params, 2, tmp_path / "m.ckpt")
        loaded = checkpoint_service.load_checkpoint(path)
        for name, tensor in params.tensors().items():
            assert torch.equal(tensor, loaded.tensors()[name])
        header = checkpoint_service.read_header(path.read_bytes(), path)
        assert (header.n_entities, header.n_relations, header.d, header.L) == (7, 2, 3, 2)

    def test_bad_magic(self, tmp_path):
        path = checkpoint_service.save_checkpoint(encoder_service.init_params(7, 2, 3, rng_seed=9), 2, tmp_path / "m.ckpt")
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="magic"):
            checkpoint_service.load_checkpoint(path)

    def test_truncated_and_trailing(self, tmp_path):
        path = checkpoint_service.save_checkpoint(encoder_service.init_params(7, 2, 3, rng_seed=9), 2, tmp_path / "m.ckpt")
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(CheckpointError, match="truncated"):
            checkpoint_service.load_checkpoint(path)
        path.write_bytes(blob + b"\x00")
        with pytest.raises(CheckpointError, match="trailing"):
            checkpoint_service.load_checkpoint(path)

    def test_dimension_mismatch(self, tmp_path, micro_config):
        path = checkpoint_service.save_checkpoint(encoder_service.init_params(7, 2, 3, rng_seed=9), 1, tmp_path / "m.ckpt")
        with pytest.raises(CheckpointError, match="d=3"):
            checkpoint_service.load_checkpoint(path, expected=micro_config.hyper_params())
        with pytest.raises(CheckpointError, match="entities"):
            checkpoint_service.load_checkpoint(path, n_entities=8)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            checkpoint_service.load_checkpoint(tmp_path / "absent.ckpt")

    def test_sidecar(self, tmp_path, micro_config):
        hp = micro_config.hyper_params()
        path = checkpoint_service.save_checkpoint(encoder_service.init_params(7, 2, 4, rng_seed=9), 1, tmp_path / "m.ckpt", hp)
        assert checkpoint_service.load_sidecar(path) == hp
        assert checkpoint_service.load_sidecar(tmp_path / "other.ckpt") is None
