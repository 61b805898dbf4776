import os

import celery

# set the default Django settings module for the 'celery' program.
os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'sepbn.settings')

app = celery.Celery('sepbn')
app.config_from_object('django.conf:settings', namespace='CELERY')
app.autodiscover_tasks()
