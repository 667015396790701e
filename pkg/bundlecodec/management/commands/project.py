"""
Django management command to project exported latents to two dimensions.
"""

from pathlib import Path

from ...analysis import cluster_silhouette, emit_plots, pca_project, stack_latents
from ...dataio import read_latents
from ..base import BundleCommand


class Command(BundleCommand):
    help = 'PCA-project latent records per architecture and write coordinates, plots and silhouette scores'

    def add_command_arguments(self, parser):
        parser.add_argument('--latents', nargs='+', required=True, help='BNL1 latent files')
        parser.add_argument('--out', required=True, help='Output directory')
        parser.add_argument('--dims', type=int, default=2, help='Projection dimension (default 2)')

    def run(self, seed, config, /, **options):
        by_tag = {}
        for path in options['latents']:
            for record in read_latents(path):
                by_tag.setdefault(record.model_tag, []).append(record)

        projections = {}
        for tag, records in sorted(by_tag.items()):
            latents, labels = stack_latents(records)
            projection = pca_project(latents, options['dims'])
            projections[tag] = (projection, labels)
            score = cluster_silhouette(projection.coords, labels)
            explained = ', '.join(f"{v:.1%}" for v in projection.explained)
            self.stdout.write(f"{tag}: {len(latents)} latents, explained variance {explained}, "
                              f"silhouette {score:.4f}")

        written = emit_plots(None, projections, options['out'])
        self.record(Path(options['out']), dict(latents=options['latents'], dims=options['dims']))
        self.success(f"Wrote {len(written)} files to {options['out']}")
