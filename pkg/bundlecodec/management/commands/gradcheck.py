"""
Django management command to check reverse-mode gradients against finite differences.
"""

from ...codec import KINDS, end_to_end_check
from ...diffnum import Rng, grad_check, primitive_cases
from ...exceptions import NumericalError
from ..base import BundleCommand


class Command(BundleCommand):
    help = 'Finite-difference gradient check of every primitive and of each architecture loss'

    def add_command_arguments(self, parser):
        parser.add_argument('--arch', nargs='*', choices=KINDS, default=None,
                            help='Architectures to check end to end (default all)')
        parser.add_argument('--step', type=float, default=1e-5, help='Central difference step')
        parser.add_argument('--tol', type=float, default=1e-4, help='Relative error tolerance')
        parser.add_argument('--max-coords', type=int, default=None,
                            help='Sample at most this many coordinates per input')
        parser.add_argument('--skip-primitives', action='store_true')

    def run(self, seed, config, /, **options):
        step, tol, max_coords = options['step'], options['tol'], options['max_coords']
        failures = []
        if not options['skip_primitives']:
            rng = Rng(seed)
            for name, (function, points) in primitive_cases(rng.spawn(0)).items():
                report = grad_check(function, points, step, tol, max_coords, rng.spawn(1))
                self._show(name, report)
                if not report.passed:
                    failures.append(name)
        arches = options['arch'] if options['arch'] else list(KINDS)
        for kind in arches:
            report = end_to_end_check(kind, seed, step, tol, max_coords)
            self._show(f"model:{kind}", report)
            if not report.passed:
                failures.append(f"model:{kind}")
        if failures:
            raise NumericalError(f"gradient check failed for {', '.join(failures)}", module='diffnum')
        self.success("All gradient checks passed")

    def _show(self, name, report):
        status = 'ok' if report.passed else 'FAIL'
        self.stdout.write(f"  {name:<20} max rel err {report.max_rel_err:.2e} "
                          f"over {report.checked} coords  {status}")
