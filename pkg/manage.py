#!/usr/bin/env python
"""Django's command-line utility for bundlecodec tasks."""
import os
import sys


def main():
    """Run bundlecodec management commands."""
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'bundlecodec_project.settings')
    # BLAS pools must be sized before numpy is first imported
    threads = os.environ.get('BUNDLECODEC_THREADS', '1')
    for var in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS'):
        os.environ.setdefault(var, threads)
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Are you sure it's installed and "
            "available on your PYTHONPATH environment variable? Did you "
            "forget to activate a virtual environment?"
        ) from exc
    execute_from_command_line(sys.argv)


if __name__ == '__main__':
    main()
