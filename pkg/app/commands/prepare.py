from pathlib import Path
import logging

from app.commands import BaseCommand, add_run_arguments, cache_store, echo_config, run_config
from app.services import dataset_service
from app.services.dataset_service import DatasetService

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = "Parse, split and cache a dataset, then report its statistics"

    def add_arguments(self, parser):
        add_run_arguments(parser)

    def handle(self, **options):
        config = run_config(options)
        output_dir = Path(config.output_dir)
        service = DatasetService(config, cache_store(config))
        data, digest = service.prepare()

        stats = dataset_service.dataset_stats(data.log, data.kg, digest)
        table = dataset_service.stats_table(stats)
        (output_dir / "stats.txt").write_text(table + "\n", encoding="utf-8")
        (output_dir / "stats.json").write_text(stats.model_dump_json(indent=2), encoding="utf-8")
        echo_config(config)

        self.write(table)
        self.write(f"partitions     {stats.partition_sizes}")
        self.write(f"cache digest   {digest}")
