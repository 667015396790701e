"""
Django management command to report reconstruction quality of trained checkpoints.
"""

from pathlib import Path

from django.conf import settings

from ...codec import KINDS
from ...dataio import SplitSpec, load_split_bundles
from ...exceptions import ConfigError
from ...metrics import BuanConfig, write_report_csv
from ...trainer import compare_checkpoints, evaluate_split, load_checkpoint
from ..base import BundleCommand


class Command(BundleCommand):
    help = 'Evaluate checkpoints on a data split: mean/std BUAN and MSE per class, or a comparison table'
    config_keys = ('theta',)

    def add_command_arguments(self, parser):
        parser.add_argument('--ckpt', nargs='+', required=True, help='One or more checkpoints')
        parser.add_argument('--data', required=True, help='Prepared directory or raw .bnd file')
        parser.add_argument('--split', choices=('train', 'val', 'all'), default='val')
        parser.add_argument('--theta', type=float, default=None,
                            help=f'BUAN distance threshold (default {settings.BUNDLECODEC_BUAN_THRESHOLD})')
        parser.add_argument('--arch', choices=KINDS, default=None,
                            help='Fail unless the checkpoint holds this architecture')
        parser.add_argument('--out', default=None, help='Directory for report CSV files')
        parser.add_argument('--export', default=None,
                            help='Write denormalized reconstructions of a single checkpoint to this .bnd path')

    def run(self, seed, config, /, **options):
        theta = options['theta'] if options['theta'] is not None else config.get('theta')
        cfg = BuanConfig(theta)
        paths = options['ckpt']
        if options['export'] and len(paths) > 1:
            raise ConfigError("--export takes a single checkpoint")
        checkpoints = [load_checkpoint(p) for p in paths]
        out_dir = Path(options['out']) if options['out'] else None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)

        for path, ckpt in zip(paths, checkpoints):
            bundles = load_split_bundles(options['data'], options['split'], ckpt.stats, SplitSpec(seed=seed))
            result = evaluate_split(ckpt, bundles, cfg, arch=options['arch'], export_path=options['export'])
            self.stdout.write(f"{path} ({ckpt.arch}, iteration {ckpt.iteration}, theta {cfg.theta}):")
            self.stdout.write(result.summary())
            if out_dir is not None:
                write_report_csv(result.report, out_dir / f"report_{Path(path).stem}.csv")

        if len(checkpoints) > 1:
            bundles = load_split_bundles(options['data'], options['split'], checkpoints[0].stats,
                                         SplitSpec(seed=seed))
            table = compare_checkpoints(checkpoints, bundles, cfg)
            self.stdout.write("Mean BUAN by class and architecture:")
            self.stdout.write(table.to_string(float_format=lambda v: f"{v:.4f}"))
            if out_dir is not None:
                table.to_csv(out_dir / 'comparison.csv', float_format='%.17g', lineterminator='\n')
        if out_dir is not None:
            self.record(out_dir, dict(ckpt=paths, data=options['data'], split=options['split'],
                                      theta=cfg.theta, seed=seed))
        if options['export']:
            self.success(f"Exported reconstructions to {options['export']}")
