from pathlib import Path
import logging.config

import environ
import sentry_sdk
from sentry_sdk.integrations.celery import CeleryIntegration
from sentry_sdk.integrations.logging import LoggingIntegration

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

env = environ.Env(
    DEBUG=(bool, False),
    LOG_LEVEL=(str, 'INFO'),
    SEPBN_THREADS=(int, 1),
    SEPBN_GRADCHECK_SAMPLES=(int, 200),
    SEPBN_LEARNABILITY_NME_THRESHOLD=(float, 10.0),
)

DEBUG = env('DEBUG')

# Nothing is served over HTTP; the key only satisfies Django's startup checks.
SECRET_KEY = env.str('SECRET_KEY', 'sepbn-local')
ALLOWED_HOSTS = []

INSTALLED_APPS = [
    'rest_framework',

    'core.apps.CoreConfig',
]

# Experiments are file based, no database is configured.
DATABASES = {}

USE_I18N = False
USE_TZ = True
TIME_ZONE = 'UTC'

# Worker threads used to augment samples while a batch is assembled.
# One thread keeps wall clock reproducible; results never depend on it.
SEPBN_THREADS = max(1, env('SEPBN_THREADS'))

# Elements sampled per parameter tensor during gradient checking.
SEPBN_GRADCHECK_SAMPLES = env('SEPBN_GRADCHECK_SAMPLES')

# Test NME (percent) a trained desk network must reach in the learnability benchmark,
# on top of halving the untrained error. Fixed before any tuning run.
SEPBN_LEARNABILITY_NME_THRESHOLD = env('SEPBN_LEARNABILITY_NME_THRESHOLD')

LOG_LEVEL = env('LOG_LEVEL').upper()

# https://lincolnloop.com/blog/django-logging-right-way/
# Disable Django's logging setup
LOGGING_CONFIG = None
LOGGER_HANDLERS = ['console']
logging.config.dictConfig({
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'default': {
            'format': '%(asctime)s %(name)-12s %(levelname)-8s %(message)s',
        },
        'verbose': {
            'format': '%(levelname)s %(asctime)s %(name)-12s %(module)s '
                      '%(process)d %(thread)d %(message)s'
        },
    },
    'handlers': {
        'console': {
            'level': 'DEBUG',
            'class': 'logging.StreamHandler',  # STDERR
            'formatter': 'verbose' if DEBUG else 'default',
        },
    },
    'loggers': {
        '': {
            'level': 'WARNING',
            'handlers': LOGGER_HANDLERS,
        },
        'core': {
            'level': 'DEBUG' if DEBUG else LOG_LEVEL,
            'handlers': LOGGER_HANDLERS,
            'propagate': False,
        },
        'sepbn': {
            'level': 'DEBUG' if DEBUG else LOG_LEVEL,
            'handlers': LOGGER_HANDLERS,
            'propagate': False,
        },
    },
})

SENTRY_DSN = env.str('SENTRY_DSN', None)

if SENTRY_DSN:
    sentry_logging = LoggingIntegration(
        level=logging.INFO,
        event_level=logging.WARNING
    )
    sentry_sdk.init(
        dsn=SENTRY_DSN,
        integrations=[sentry_logging, CeleryIntegration()],
        release=env.str('GIT_COMMIT', None),
        traces_sample_rate=0.0,
    )

# Datadog
DATADOG_SETTINGS = {
    'host_name': env.str('DD_AGENT_HOST', None),
    'api_key': env.str('DATADOG_API_KEY', None),
    'app_key': env.str('DATADOG_APP_KEY', None),
}

# Celery
CELERY_BROKER_URL = env.str('CELERY_BROKER_URL', None)
CELERY_RESULT_BACKEND = env.str('CELERY_RESULT_BACKEND', None)

# Seed sweeps run in-process unless a broker is configured
CELERY_TASK_ALWAYS_EAGER = env.bool('CELERY_TASK_ALWAYS_EAGER', CELERY_BROKER_URL is None)
CELERY_TASK_EAGER_PROPAGATES = True

CELERY_ACCEPT_CONTENT = ['application/json']
CELERY_RESULT_SERIALIZER = 'json'
CELERY_TASK_SERIALIZER = 'json'
CELERY_TIMEZONE = 'UTC'

CELERY_TASK_SEND_SENT_EVENT = True
CELERY_TRACK_STARTED = True

# Rest framework serializers validate run configs only
REST_FRAMEWORK = {
    'DEFAULT_RENDERER_CLASSES': (
        'rest_framework.renderers.JSONRenderer',
    ),
    'COERCE_DECIMAL_TO_STRING': False,
}
