"""
Shared base for bundlecodec management commands.
"""

import logging
from pathlib import Path
from typing import Any, Dict

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from ..diffnum import debug_numerics
from ..exceptions import BundleCodecError
from ..utils import check_keys, load_json_config, merge_options, write_run_record

logger = logging.getLogger(__name__)


class BundleCommand(BaseCommand):
    """Adds --seed and --config and turns library failures into exit code 2.

    Subclasses implement run(seed, config, **options); `config` is the parsed
    --config file, and explicit flags are merged over it with layered().
    """

    requires_system_checks = []
    requires_migrations_checks = False
    # keys accepted in a --config file besides "seed"
    config_keys = ()

    def add_arguments(self, parser):
        parser.add_argument('--seed', type=int, default=None,
                            help=f'Master random seed (default {settings.BUNDLECODEC_SEED})')
        parser.add_argument('--config', default=None, metavar='CFG.json',
                            help='JSON file of option defaults; explicit flags take precedence')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        try:
            config = load_json_config(options['config'])
            check_keys(config, set(self.config_keys) | {'seed'}, source=f'{self.command_name} config')
            seed = options['seed'] if options['seed'] is not None else config.get('seed', settings.BUNDLECODEC_SEED)
            with debug_numerics(settings.BUNDLECODEC_DEBUG_NUMERICS):
                self.run(int(seed), config, **options)
        except BundleCodecError as exc:
            logger.debug(f"{self.command_name} failed", exc_info=True)
            raise CommandError(str(exc), returncode=2)
        except OSError as exc:
            target = f" {exc.filename}" if exc.filename else ''
            raise CommandError(f"io: {exc.strerror or exc}{target}", returncode=2)

    def run(self, seed: int, config: Dict[str, Any], /, **options):
        raise NotImplementedError('subclasses of BundleCommand must provide a run() method')

    @property
    def command_name(self) -> str:
        return self.__module__.rsplit('.', 1)[-1]

    @staticmethod
    def layered(config: Dict[str, Any], options: Dict[str, Any], keys) -> Dict[str, Any]:
        """config file values for `keys`, overridden by flags that were given"""
        return merge_options({k: config.get(k) for k in keys}, {k: options.get(k) for k in keys})

    def record(self, artifact, options: Dict[str, Any]) -> Path:
        return write_run_record(artifact, self.command_name, options)

    def success(self, message: str):
        self.stdout.write(self.style.SUCCESS(message))
