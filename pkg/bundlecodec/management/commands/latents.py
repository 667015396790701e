"""
Django management command to export per-streamline latent vectors.
"""

from ...dataio import SplitSpec, export_latents, load_split_bundles
from ...trainer import load_checkpoint
from ..base import BundleCommand


class Command(BundleCommand):
    help = 'Encode every bundle of a split and write its latent vectors to a BNL1 file'

    def add_command_arguments(self, parser):
        parser.add_argument('--ckpt', required=True, help='Trained checkpoint')
        parser.add_argument('--data', required=True, help='Prepared directory or raw .bnd file')
        parser.add_argument('--split', choices=('train', 'val', 'all'), default='all')
        parser.add_argument('--out', required=True, help='Output .bnl path')
        parser.add_argument('--append', action='store_true', help='Append to an existing .bnl file')

    def run(self, seed, config, /, **options):
        ckpt = load_checkpoint(options['ckpt'])
        bundles = load_split_bundles(options['data'], options['split'], ckpt.stats, SplitSpec(seed=seed))
        records = export_latents(ckpt.model, bundles, options['out'], append=options['append'])
        self.record(options['out'], dict(ckpt=options['ckpt'], data=options['data'], split=options['split'],
                                         append=options['append'], seed=seed))
        self.success(f"Wrote {len(records)} {ckpt.arch} latent records to {options['out']}")
