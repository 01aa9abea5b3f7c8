from pathlib import Path
from typing import Iterable, List, Tuple

import numpy as np
import pytest

from app.models import KnowledgeGraph, RunConfig
from app.services import dataset_service, graph_service

N_USERS = 12
N_ITEMS = 20
N_ATTRIBUTES = 10


def write_lines(path: Path, lines: Iterable[str]) -> Path:
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def kg_from_triples(triples: List[Tuple[int, int, int]], n_entities: int, n_relations: int) -> KnowledgeGraph:
    """KnowledgeGraph over already-dense ids, without going through a file"""
    raw = np.unique(np.asarray(triples, dtype=np.int64).reshape(-1, 3), axis=0)
    heads = np.ascontiguousarray(raw[:, 0])
    return KnowledgeGraph(
        heads=heads,
        relations=np.ascontiguousarray(raw[:, 1]),
        tails=np.ascontiguousarray(raw[:, 2]),
        offsets=np.searchsorted(heads, np.arange(n_entities + 1), side="left"),
        n_entities=n_entities,
        n_relations=n_relations,
        entity_ids=np.arange(n_entities),
        relation_ids=np.arange(n_relations),
    )


@pytest.fixture
def toy_files(tmp_path):
    """12 users x 20 items, every item linked to two of ten attribute entities and back"""
    interactions = []
    for user in range(N_USERS):
        for k in range(5):
            interactions.append(f"{user}\t{(user + 7 * k) % N_ITEMS}")

    triples = []
    for item in range(N_ITEMS):
        triples.append(f"{item} 0 {N_ITEMS + item % N_ATTRIBUTES}")
        triples.append(f"{item} 1 {N_ITEMS + (3 * item) % N_ATTRIBUTES}")
    for attribute in range(N_ATTRIBUTES):
        triples.append(f"{N_ITEMS + attribute} 2 {attribute}")
        triples.append(f"{N_ITEMS + attribute} 2 {attribute + N_ATTRIBUTES}")

    return (
        write_lines(tmp_path / "ratings.txt", ["# user item", *interactions]),
        write_lines(tmp_path / "kg.txt", triples),
    )


@pytest.fixture
def micro_config(toy_files, tmp_path) -> RunConfig:
    interactions, kg = toy_files
    return RunConfig(
        interactions=str(interactions),
        kg=str(kg),
        output_dir=str(tmp_path / "run"),
        d=4,
        L=1,
        J=1,
        local_size=3,
        nonlocal_size=4,
        batch_size=16,
        epochs=2,
        patience=2,
        lambda1=0.1,
        lambda2=1e-3,
        eta=1e-2,
        seed=7,
    )


@pytest.fixture
def prepared(micro_config):
    return dataset_service.prepare(micro_config, micro_config.interactions, micro_config.kg, None)


@pytest.fixture
def bank(prepared, micro_config):
    return graph_service.build_graph_bank(
        prepared.log, prepared.kg, prepared.alignment, micro_config.hyper_params(), epoch=0
    )
