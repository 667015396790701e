"""
Django management command to balance, split and normalize a bundle dataset.
"""

from ...dataio import SplitSpec, prepare_dataset, read_bnd, save_prepared
from ..base import BundleCommand


class Command(BundleCommand):
    help = 'Balance classes, split train/validation and normalize; writes train.bnd, val.bnd and norm.json'
    config_keys = ('train_fraction', 'balance')

    def add_command_arguments(self, parser):
        parser.add_argument('--data', required=True, help='Input .bnd file')
        parser.add_argument('--out', required=True, help='Output directory')
        parser.add_argument('--train-fraction', type=float, default=None, help='Training fraction (default 0.9)')
        parser.add_argument('--no-balance', action='store_true', help='Keep every bundle of larger classes')

    def run(self, seed, config, /, **options):
        opts = dict(train_fraction=0.9, balance=True)
        opts.update(self.layered(config, options, ('train_fraction',)))
        if options['no_balance']:
            opts['balance'] = False
        elif 'balance' in config:
            opts['balance'] = bool(config['balance'])

        dataset = read_bnd(options['data'])
        split, stats = prepare_dataset(dataset, SplitSpec(opts['train_fraction'], seed, opts['balance']))
        save_prepared(options['out'], split, stats, dataset.group_size, dataset.point_count)
        self.record(options['out'], dict(opts, seed=seed, data=options['data']))

        for label in split.classes():
            n_train = sum(b.label == label for b in split.train)
            n_val = sum(b.label == label for b in split.val)
            self.stdout.write(f"  {label}: {n_train} train, {n_val} validation")
        self.success(f"Prepared {len(split.train)} train and {len(split.val)} validation bundles in {options['out']}")
