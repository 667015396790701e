"""
Django management command to verify the Gaussian-Gumbel KL closed form numerically.
"""

from ...diffnum import Rng
from ...exceptions import NumericalError
from ...klcheck import KlParams, kl_closed_form, kl_grid, kl_monte_carlo, kl_quadrature
from ..base import BundleCommand

QUADRATURE_TOLERANCE = 1e-8
MONTE_CARLO_SE = 3.0


class Command(BundleCommand):
    help = 'Compare the closed-form KL(N(0, sigma^2) || Gumbel(0, beta)) with quadrature and Monte Carlo'

    def add_command_arguments(self, parser):
        parser.add_argument('--sigma', type=float, default=1.0)
        parser.add_argument('--beta', type=float, default=1.0)
        parser.add_argument('--mc-samples', type=int, default=10 ** 6)
        parser.add_argument('--grid', action='store_true',
                            help='Also check a 10 x 10 grid of sigma in [0.5, 4] and beta in [1, 20]')

    def run(self, seed, config, /, **options):
        params = KlParams(options['sigma'], options['beta'])
        closed = kl_closed_form(params)
        quad = kl_quadrature(params)
        mc_mean, mc_se = kl_monte_carlo(params, options['mc_samples'], Rng(seed))
        self.stdout.write(f"sigma={params.sigma} beta={params.beta}")
        self.stdout.write(f"  closed form  {closed:.9f}")
        self.stdout.write(f"  quadrature   {quad:.9f} (diff {abs(closed - quad):.2e})")
        self.stdout.write(f"  monte carlo  {mc_mean:.9f} +/- {mc_se:.2e} "
                          f"(diff {abs(closed - mc_mean):.2e}, n={options['mc_samples']})")

        worst = abs(closed - quad)
        if options['grid']:
            grid = kl_grid()
            worst = max(worst, float(grid['abs_diff'].max()))
            self.stdout.write(f"  grid of {len(grid)} points: max |closed - quadrature| {grid['abs_diff'].max():.2e}")
        if worst > QUADRATURE_TOLERANCE:
            raise NumericalError(f"closed form and quadrature differ by {worst:.2e}", module='klcheck')
        if abs(closed - mc_mean) > MONTE_CARLO_SE * mc_se:
            self.stderr.write(self.style.WARNING(
                f"Monte Carlo estimate is {abs(closed - mc_mean) / mc_se:.1f} standard errors from the closed form"))
        self.success("Closed form agrees with quadrature")
