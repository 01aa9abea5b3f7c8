from pathlib import Path
import logging

from app.commands import BaseCommand, add_run_arguments, cache_store, run_config
from app.services import checkpoint_service
from app.services.dataset_service import DatasetService
from app.services.eval_service import EvalService

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = "Score the test partition with a checkpoint or the BPRMF baseline"

    def add_arguments(self, parser):
        add_run_arguments(parser)
        parser.add_argument("--checkpoint", type=Path, help="defaults to <output>/best.ckpt")
        parser.add_argument("--baseline", choices=["bprmf"], help="train and report a baseline instead")
        parser.add_argument("--per-user", action="store_true", help="write per-user recall rows as TSV")

    def handle(self, **options):
        config = run_config(options)
        output_dir = Path(config.output_dir)
        data = DatasetService(config, cache_store(config)).load()
        service = EvalService(data, config)
        hp = service.hp

        if options.get("baseline") == "bprmf":
            scorer = service.bprmf_scorer()
        else:
            path = options.get("checkpoint") or output_dir / "best.ckpt"
            params = checkpoint_service.load_checkpoint(
                path,
                expected=hp,
                n_entities=data.kg.n_entities,
                n_relations=data.kg.n_relations,
                precision=hp.precision,
            )
            stored = checkpoint_service.load_sidecar(path)
            if stored is not None and stored != hp:
                logger.warning(f"{path} was trained with different settings than the current configuration")
            scorer = service.kgic_scorer(params)

        result = service.evaluate(scorer)
        written = service.write(result, output_dir, per_user=options.get("per_user", False))
        if len(written) > 1:
            self.write(f"Per-user recall written to {written[1]}")
        self.write(result.report.to_text())
