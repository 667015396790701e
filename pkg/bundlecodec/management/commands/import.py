"""
Django management command to import TrackVis tractography files as labelled bundles.
"""

from pathlib import Path

from django.conf import settings

from ...dataio import BndDataset, bundles_from_tracks, import_trackvis, read_bnd, write_bnd
from ...diffnum import Rng
from ...exceptions import DataError
from ..base import BundleCommand


class Command(BundleCommand):
    help = 'Import .trk streamlines, resample them and group them into bundles of one class'
    config_keys = ('group_size', 'points')

    def add_command_arguments(self, parser):
        parser.add_argument('paths', nargs='+', help='TrackVis .trk files')
        parser.add_argument('--label', required=True, help='Class label for every imported bundle')
        parser.add_argument('--group-size', type=int, default=None,
                            help=f'Streamlines per bundle (default {settings.BUNDLECODEC_GROUP_SIZE})')
        parser.add_argument('--points', type=int, default=None,
                            help=f'Points per streamline after resampling (default {settings.BUNDLECODEC_POINT_COUNT})')
        parser.add_argument('--append', action='store_true',
                            help='Add the bundles to an existing output file')
        parser.add_argument('--out', required=True, help='Output .bnd path')

    def run(self, seed, config, /, **options):
        opts = dict(group_size=settings.BUNDLECODEC_GROUP_SIZE, points=settings.BUNDLECODEC_POINT_COUNT)
        opts.update(self.layered(config, options, ('group_size', 'points')))
        rng = Rng(seed)
        bundles = []
        for index, path in enumerate(options['paths']):
            tracks = import_trackvis(path)
            bundles.extend(bundles_from_tracks(tracks, options['label'], opts['group_size'], opts['points'],
                                               rng.spawn(index), provenance=Path(path).stem))
        if not bundles:
            raise DataError(f"no complete bundle of {opts['group_size']} streamlines in the input files")

        existing = []
        labels = None
        if options['append'] and Path(options['out']).exists():
            previous = read_bnd(options['out'])
            existing, labels = previous.bundles, list(previous.labels)
            if options['label'] not in labels:
                labels.append(options['label'])
        dataset = BndDataset.from_bundles(existing + bundles, labels=labels)
        write_bnd(dataset, options['out'])
        self.record(options['out'], dict(opts, seed=seed, label=options['label'],
                                         paths=options['paths'], append=options['append']))
        self.success(f"Imported {len(bundles)} bundles labelled {options['label']} into {options['out']}")
