"""
pytest bootstrap: configure Django so the SimpleTestCase suites in
bundlecodec/tests collect without manage.py.
"""

import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'bundlecodec_project.settings')
django.setup()
