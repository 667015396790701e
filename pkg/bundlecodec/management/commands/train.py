"""
Django management command to train one bundle autoencoder.
"""

from pathlib import Path

from ...codec import KINDS
from ...dataio import SplitSpec, load_training_data
from ...exceptions import ConfigError
from ...trainer import TrainConfig, load_checkpoint, resume_run, train_run
from ..base import BundleCommand

FLAG_KEYS = ('arch', 'iterations', 'batch_size', 'learning_rate', 'eval_every')


class Command(BundleCommand):
    help = 'Train an autoencoder (vqdiff, vqvae, vqema, ae or vae) and write a checkpoint and loss log'
    config_keys = tuple(TrainConfig.field_names())

    def add_command_arguments(self, parser):
        parser.add_argument('--arch', choices=KINDS, default=None, help='Architecture (default vqdiff)')
        parser.add_argument('--data', required=True, help='Prepared directory or raw .bnd file')
        parser.add_argument('--out', default=None, help='Checkpoint path (default checkpoint.bnc)')
        parser.add_argument('--iterations', type=int, default=None,
                            help='Total iterations, or extra iterations with --resume')
        parser.add_argument('--batch-size', type=int, default=None, help='Bundles per batch')
        parser.add_argument('--learning-rate', type=float, default=None, help='Adam learning rate')
        parser.add_argument('--log', default=None, help='Loss log CSV path (default loss.csv)')
        parser.add_argument('--eval-every', type=int, default=None,
                            help='Iterations between validation passes and checkpoints')
        parser.add_argument('--resume', default=None, metavar='CKPT',
                            help='Continue training from this checkpoint')

    def run(self, seed, config, /, **options):
        flags = self.layered({}, options, FLAG_KEYS)
        if options['out']:
            flags['checkpoint_path'] = options['out']
        if options['log']:
            flags['log_path'] = options['log']
        if options['seed'] is not None:
            flags['seed'] = options['seed']

        if options['resume']:
            extra = flags.pop('iterations', None) or config.get('iterations')
            if not extra:
                raise ConfigError("--resume needs --iterations for the extra iterations to run")
            if 'arch' in flags:
                raise ConfigError("--arch cannot change when resuming a checkpoint")
            overrides = {k: v for k, v in flags.items() if k in ('checkpoint_path', 'log_path', 'eval_every')}
            # a raw .bnd file is re-split with the seed of the original run
            run_seed = load_checkpoint(options['resume']).config.seed
            split, _ = load_training_data(options['data'], SplitSpec(seed=run_seed))
            result = resume_run(options['resume'], split, int(extra), overrides)
        else:
            train_config = TrainConfig.from_options(config, flags)
            split, stats = load_training_data(options['data'], SplitSpec(seed=train_config.seed))
            result = train_run(train_config, split, stats)

        final = result.checkpoint.config
        self.record(final.checkpoint_path, dict(final.to_dict(), data=options['data'],
                                                resume=options['resume']))
        last = result.losses['loss'].iloc[-1] if len(result.losses) else float('nan')
        self.stdout.write(f"Final training loss {last:.6f}, validation mse {result.val_mse:.6f}")
        self.success(f"Wrote checkpoint {final.checkpoint_path} at iteration "
                     f"{result.checkpoint.iteration} and loss log {Path(final.log_path)}")
