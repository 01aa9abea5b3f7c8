from pathlib import Path
from typing import Any, Dict, Optional
import hashlib
import json
import logging

import numpy as np

from app.errors import DataFormatError
from app.models import Alignment, InteractionLog, KnowledgeGraph, PreparedData

logger = logging.getLogger(__name__)

CACHE_VERSION = 1


class DataStore:
    """Binary cache of a prepared dataset: one .npy per array plus meta.json"""

    LOG_ARRAYS = ("users", "items", "labels", "partition", "user_ids", "item_ids")
    KG_ARRAYS = ("heads", "relations", "tails", "offsets", "entity_ids", "relation_ids")

    def __init__(self, root: Path):
        self.root = Path(root)

    def _array_path(self, prefix: str, name: str) -> Path:
        return self.root / f"{prefix}_{name}.npy"

    def exists(self) -> bool:
        return (self.root / "meta.json").exists()

    def save(self, data: PreparedData, source: Optional[Dict[str, Any]] = None) -> str:
        """Write the cache and return its digest; `source` records what the data was built from"""
        self.root.mkdir(parents=True, exist_ok=True)
        arrays: Dict[str, np.ndarray] = {}
        for name in self.LOG_ARRAYS:
            arrays[f"log_{name}"] = getattr(data.log, name)
        for name in self.KG_ARRAYS:
            arrays[f"kg_{name}"] = getattr(data.kg, name)
        arrays["align_item_to_entity"] = data.alignment.item_to_entity

        for key, array in arrays.items():
            np.save(self.root / f"{key}.npy", np.ascontiguousarray(array), allow_pickle=False)

        meta = {
            "version": CACHE_VERSION,
            "n_users": data.log.n_users,
            "n_items": data.log.n_items,
            "n_entities": data.kg.n_entities,
            "n_relations": data.kg.n_relations,
            "warnings": data.log.warnings,
        }
        (self.root / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2), encoding="utf-8")
        source_path = self.root / "source.json"
        if source is None:
            source_path.unlink(missing_ok=True)
        else:
            source_path.write_text(json.dumps(source, sort_keys=True, indent=2), encoding="utf-8")
        digest = self.digest()
        logger.info(f"Cache written to {self.root} (sha256 {digest[:12]})")
        return digest

    def digest(self) -> str:
        sha = hashlib.sha256()
        for path in sorted(self.root.glob("*.npy")) + [self.root / "meta.json"]:
            sha.update(path.name.encode("utf-8"))
            sha.update(path.read_bytes())
        return sha.hexdigest()

    def source(self) -> Optional[Dict[str, Any]]:
        path = self.root / "source.json"
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def load(self) -> PreparedData:
        if not self.exists():
            raise DataFormatError(self.root, "no prepared cache here; run `prepare` first")
        meta = json.loads((self.root / "meta.json").read_text(encoding="utf-8"))
        if meta.get("version") != CACHE_VERSION:
            raise DataFormatError(self.root, f"cache version {meta.get('version')} is not supported")

        def read(prefix: str, name: str) -> np.ndarray:
            return np.load(self._array_path(prefix, name), allow_pickle=False)

        log = InteractionLog(
            **{name: read("log", name) for name in self.LOG_ARRAYS},
            n_users=meta["n_users"],
            n_items=meta["n_items"],
            warnings=meta["warnings"],
        )
        kg = KnowledgeGraph(
            **{name: read("kg", name) for name in self.KG_ARRAYS},
            n_entities=meta["n_entities"],
            n_relations=meta["n_relations"],
        )
        alignment = Alignment(item_to_entity=read("align", "item_to_entity"))
        return PreparedData(log=log, kg=kg, alignment=alignment)
