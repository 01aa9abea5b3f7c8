from pathlib import Path

from app.commands import BaseCommand, add_run_arguments, cache_store, run_config
from app.services import checkpoint_service
from app.services.dataset_service import DatasetService
from app.services.graph_service import EVAL_EPOCH, GraphService


class Command(BaseCommand):
    help = "Write every item's prediction vector as TSV"

    def add_arguments(self, parser):
        add_run_arguments(parser)
        parser.add_argument("--checkpoint", type=Path, help="defaults to <output>/best.ckpt")
        parser.add_argument("--out", type=Path, help="defaults to <output>/item_embeddings.tsv")

    def handle(self, **options):
        config = run_config(options)
        output_dir = Path(config.output_dir)
        data = DatasetService(config, cache_store(config)).load()
        hp = config.hyper_params()

        path = options.get("checkpoint") or output_dir / "best.ckpt"
        params = checkpoint_service.load_checkpoint(
            path,
            expected=hp,
            n_entities=data.kg.n_entities,
            n_relations=data.kg.n_relations,
            precision=hp.precision,
        )
        bank = GraphService(data.log, data.kg, data.alignment, hp).build_bank(EVAL_EPOCH)
        out = options.get("out") or output_dir / "item_embeddings.tsv"
        checkpoint_service.export_embeddings(params, bank, hp, data.log.item_ids, out)
        self.write(f"Item vectors written to {out}")
