from pathlib import Path
from typing import NamedTuple, Optional
import json
import logging
import struct

import numpy as np
import pandas as pd
import torch

from app.errors import CheckpointError
from app.models import GraphBank, HyperParams, ObjectKind
from app.services.encoder_service import DTYPES, ParamStore, object_vectors

logger = logging.getLogger(__name__)

MAGIC = b"KGIC"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIIII")
COUNT = struct.Struct("<Q")


class CheckpointHeader(NamedTuple):
    version: int
    n_entities: int
    n_relations: int
    d: int
    L: int


def sidecar_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(params: ParamStore, L: int, path: Path, hp: Optional[HyperParams] = None) -> Path:
    """Write the little-endian binary checkpoint and, with `hp`, its JSON sidecar"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [HEADER.pack(MAGIC, FORMAT_VERSION, params.n_entities, params.n_relations, params.d, L)]
    for tensor in params.tensors().values():
        values = tensor.detach().cpu().to(torch.float64).numpy().ravel().astype("<f8")
        chunks.append(COUNT.pack(values.size))
        chunks.append(values.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    if hp is not None:
        sidecar_path(path).write_text(hp.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Checkpoint saved to {path}")
    return path


def read_header(blob: bytes, path: Path) -> CheckpointHeader:
    if len(blob) < HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, n_entities, n_relations, d, L = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    return CheckpointHeader(version, n_entities, n_relations, d, L)


def load_checkpoint(
    path: Path,
    expected: Optional[HyperParams] = None,
    n_entities: Optional[int] = None,
    n_relations: Optional[int] = None,
    precision: int = 64,
) -> ParamStore:
    """Read a checkpoint, checking its dimensions against the run when given"""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    header = read_header(blob, path)

    mismatches = []
    if expected is not None and (header.d, header.L) != (expected.d, expected.L):
        mismatches.append(f"checkpoint d={header.d} L={header.L}, config d={expected.d} L={expected.L}")
    if n_entities is not None and header.n_entities != n_entities:
        mismatches.append(f"checkpoint has {header.n_entities} entities, data has {n_entities}")
    if n_relations is not None and header.n_relations != n_relations:
        mismatches.append(f"checkpoint has {header.n_relations} relations, data has {n_relations}")
    if mismatches:
        raise CheckpointError(f"{path}: " + "; ".join(mismatches))

    params = ParamStore(header.n_entities, header.n_relations, header.d, DTYPES[precision])
    offset = HEADER.size
    with torch.no_grad():
        for name, tensor in params.tensors().items():
            if offset + COUNT.size > len(blob):
                raise CheckpointError(f"{path}: truncated before {name}")
            (count,) = COUNT.unpack_from(blob, offset)
            offset += COUNT.size
            if count != tensor.numel():
                raise CheckpointError(f"{path}: {name} holds {count} values, expected {tensor.numel()}")
            end = offset + 8 * count
            if end > len(blob):
                raise CheckpointError(f"{path}: truncated inside {name}")
            values = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            tensor.copy_(torch.from_numpy(values.copy()).reshape(tensor.shape))
            offset = end
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return params


def load_sidecar(path: Path) -> Optional[HyperParams]:
    sidecar = sidecar_path(path)
    if not sidecar.exists():
        return None
    try:
        return HyperParams(**json.loads(sidecar.read_text(encoding="utf-8")))
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"{sidecar}: {e}") from e


def export_embeddings(params: ParamStore, bank: GraphBank, hp: HyperParams, item_ids: np.ndarray, path: Path) -> Path:
    """Write `item_id \\t v1 ... vW` rows of every item's prediction vector"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vectors = object_vectors(params, bank, ObjectKind.ITEM, np.arange(item_ids.size), hp).cpu().numpy()
    frame = pd.DataFrame(vectors)
    frame.insert(0, "item_id", item_ids)
    frame.to_csv(path, sep="\t", header=False, index=False, float_format="%.17g")
    logger.info(f"Exported {len(frame)} item vectors of width {vectors.shape[1]} to {path}")
    return path
