"""
Django management command to synthesize a labelled bundle dataset.
"""

from django.conf import settings

from ...curves import get_families, synth_dataset
from ...dataio import BndDataset, write_bnd
from ...diffnum import Rng
from ...exceptions import ConfigError
from ..base import BundleCommand

OPTION_KEYS = ('families', 'bundles_per_family', 'group_size', 'points', 'noise')


class Command(BundleCommand):
    help = 'Generate synthetic streamline bundles from template curve families and write a BND1 file'
    config_keys = OPTION_KEYS

    def add_command_arguments(self, parser):
        parser.add_argument('--families', type=int, default=None, help='Number of curve families (default 4)')
        parser.add_argument('--bundles-per-family', type=int, default=None, help='Bundles per family (default 50)')
        parser.add_argument('--group-size', type=int, default=None,
                            help=f'Streamlines per bundle (default {settings.BUNDLECODEC_GROUP_SIZE})')
        parser.add_argument('--points', type=int, default=None,
                            help=f'Points per streamline (default {settings.BUNDLECODEC_POINT_COUNT})')
        parser.add_argument('--noise', type=float, default=None, help='Per-point noise level (default 0.05)')
        parser.add_argument('--out', required=True, help='Output .bnd path')

    def run(self, seed, config, /, **options):
        opts = dict(families=4, bundles_per_family=50, group_size=settings.BUNDLECODEC_GROUP_SIZE,
                    points=settings.BUNDLECODEC_POINT_COUNT, noise=0.05)
        opts.update(self.layered(config, options, OPTION_KEYS))
        if opts['bundles_per_family'] < 1:
            raise ConfigError(f"bundles per family must be >= 1, got {opts['bundles_per_family']}")
        if opts['noise'] < 0:
            raise ConfigError(f"noise must be >= 0, got {opts['noise']}")

        families = get_families(opts['families'])
        self.stdout.write(f"Synthesizing {opts['families'] * opts['bundles_per_family']} bundles "
                          f"from families: {', '.join(f.name for f in families)}")
        bundles = synth_dataset(families, opts['bundles_per_family'], opts['group_size'],
                                opts['points'], opts['noise'], Rng(seed))
        dataset = BndDataset.from_bundles(bundles, labels=[f.name for f in families])
        write_bnd(dataset, options['out'])
        self.record(options['out'], dict(opts, seed=seed, out=options['out']))
        self.success(f"Wrote {len(dataset)} bundles to {options['out']}")
