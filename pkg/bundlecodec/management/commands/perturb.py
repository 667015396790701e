"""
Django management command to sweep latent perturbations across checkpoints.
"""

from pathlib import Path

from django.conf import settings

from ...analysis import PerturbSpec, emit_plots, perturb_sweeps
from ...dataio import SplitSpec, load_split_bundles
from ...exceptions import ConfigError
from ...metrics import BuanConfig
from ...trainer import load_checkpoint
from ...utils import float_list, int_list
from ..base import BundleCommand


class Command(BundleCommand):
    help = 'Decode z + eps * noise for a grid of eps and report mean BUAN and MSE per architecture'
    config_keys = ('bundle_index', 'eps', 'trials', 'theta')

    def add_command_arguments(self, parser):
        defaults = settings.BUNDLECODEC_PERTURB_DEFAULTS
        parser.add_argument('--ckpt', nargs='+', required=True, help='Checkpoints to compare')
        parser.add_argument('--data', required=True, help='Prepared directory or raw .bnd file')
        parser.add_argument('--split', choices=('train', 'val', 'all'), default='val')
        parser.add_argument('--bundle-index', type=int_list, default=None,
                            help='Comma-separated bundle indices within the split (default 0)')
        parser.add_argument('--eps', type=float_list, default=None,
                            help=f"Comma-separated magnitudes (default {','.join(map(str, defaults['eps_grid']))})")
        parser.add_argument('--trials', type=int, default=None,
                            help=f"Noise draws per magnitude (default {defaults['trials']})")
        parser.add_argument('--theta', type=float, default=None, help='BUAN distance threshold')
        parser.add_argument('--out', required=True, help='Output directory for CSV and plot files')

    def run(self, seed, config, /, **options):
        opts = self.layered(config, options, ('bundle_index', 'eps', 'trials', 'theta'))
        spec_args = {'seed': seed}
        if 'eps' in opts:
            spec_args['eps_grid'] = opts['eps']
        if 'trials' in opts:
            spec_args['trials'] = opts['trials']
        spec = PerturbSpec(**spec_args)
        cfg = BuanConfig(opts.get('theta'))

        checkpoints = [load_checkpoint(p) for p in options['ckpt']]
        bundles = load_split_bundles(options['data'], options['split'], checkpoints[0].stats,
                                     SplitSpec(seed=seed))
        indices = opts.get('bundle_index', [0])
        out_of_range = [i for i in indices if not 0 <= i < len(bundles)]
        if out_of_range:
            raise ConfigError(f"bundle indices {out_of_range} outside the {len(bundles)}-bundle "
                              f"{options['split']} split")
        chosen = [bundles[i] for i in indices]

        sweeps = perturb_sweeps([c.model for c in checkpoints], chosen, spec, cfg)
        self.stdout.write(sweeps.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
        written = emit_plots(sweeps, {}, options['out'])
        self.record(Path(options['out']), dict(ckpt=options['ckpt'], data=options['data'],
                                               split=options['split'], bundle_index=indices,
                                               eps=spec.eps_grid, trials=spec.trials, theta=cfg.theta,
                                               seed=seed))
        self.success(f"Wrote {len(written)} files to {options['out']}")
