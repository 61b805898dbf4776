import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'sepbn.settings')
django.setup()
