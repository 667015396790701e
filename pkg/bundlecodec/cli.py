"""
Command-line entry point.
dispatch(argv) runs one bundlecodec management command in-process and maps
the outcome to an exit code: 0 on success, 1 on a usage error, 2 when the
command itself fails.
"""

import logging
import os
import sys
from typing import List, Optional, TextIO

import django
from django.apps import apps
from django.conf import settings
from django.core.management import load_command_class
from django.core.management.base import CommandError

logger = logging.getLogger(__name__)

COMMANDS = (
    'synth', 'import', 'prep', 'train', 'eval', 'latents', 'perturb', 'project', 'klcheck', 'gradcheck',
)
PROG = 'bundlecodec'

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


def setup():
    """Configure Django once for library or command use"""
    if not settings.configured or not apps.ready:
        os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'bundlecodec_project.settings')
        django.setup()


def usage() -> str:
    return f"usage: {PROG} <command> [options]\ncommands: {', '.join(COMMANDS)}\n"


def dispatch(argv: List[str], stdout: Optional[TextIO] = None, stderr: Optional[TextIO] = None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    if not argv or argv[0] in ('-h', '--help'):
        (stdout if argv else stderr).write(usage())
        return EXIT_OK if argv else EXIT_USAGE
    name = argv[0]
    if name not in COMMANDS:
        stderr.write(f"{PROG}: unknown command {name!r}\n{usage()}")
        return EXIT_USAGE

    setup()
    command = load_command_class('bundlecodec', name)
    parser = command.create_parser(PROG, name)
    try:
        options = parser.parse_args(argv[1:])
    except CommandError as exc:
        stderr.write(f"{PROG} {name}: {exc}\n")
        stderr.write(parser.format_usage())
        return EXIT_USAGE
    except SystemExit as exc:
        # argparse exits for --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE

    cmd_options = vars(options)
    args = cmd_options.pop('args', ())
    cmd_options['stdout'] = stdout
    cmd_options['stderr'] = stderr
    try:
        command.execute(*args, **cmd_options)
    except CommandError as exc:
        stderr.write(f"{PROG} {name}: {exc}\n")
        return exc.returncode
    return EXIT_OK


def main():
    threads = os.environ.get('BUNDLECODEC_THREADS', '1')
    for var in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS'):
        os.environ.setdefault(var, threads)
    sys.exit(dispatch(sys.argv[1:]))
