import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "memorySite.settings")
django.setup()
