from pathlib import Path
import logging

from app.commands import BaseCommand, add_run_arguments, cache_store, echo_config, run_config
from app.services import engine_service, graph_service
from app.services.dataset_service import DatasetService
from app.services.graph_service import GraphService

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = "Train the model and keep the best-validation checkpoint"

    def add_arguments(self, parser):
        add_run_arguments(parser)
        parser.add_argument("--dump-graphs", action="store_true", help="write the first epoch's graphs as JSON lines")

    def handle(self, **options):
        config = run_config(options)
        output_dir = Path(config.output_dir)
        echo_config(config)
        data = DatasetService(config, cache_store(config)).load()
        hp = config.hyper_params()

        if options.get("dump_graphs"):
            bank = GraphService(data.log, data.kg, data.alignment, hp).build_bank(epoch=0)
            count = graph_service.dump_graphs(bank, output_dir / "graphs.jsonl")
            self.write(f"Wrote {count} graphs to {output_dir / 'graphs.jsonl'}")

        result = engine_service.fit(data, hp, output_dir, log_every=config.log_every)
        self.write(f"best epoch     {result.best_epoch}")
        self.write(f"valid AUC      {result.best_valid_auc:.4f}")
        self.write(f"checkpoint     {result.checkpoint}")
