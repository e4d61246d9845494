"""
Django settings for the camsim project.

The simulator has no database and no HTTP surface; Django provides the
settings layer, the management-command entry point and the test runner,
and Django REST framework provides config validation and report rendering.
"""

import os
from pathlib import Path
from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Load environment variables from .env file
load_dotenv(BASE_DIR / '.env')

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.getenv('SECRET_KEY', 'django-insecure-camsim-dev-key')

DEBUG = os.getenv('DEBUG', 'True') == 'True'

ALLOWED_HOSTS = []

# Application definition
INSTALLED_APPS = [
    'rest_framework',
    'tcam.apps.TcamConfig',
]

# No persistence: every run is computed from its config.
DATABASES = {}

LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Django REST Framework settings
REST_FRAMEWORK = {
    'DEFAULT_RENDERER_CLASSES': [
        'rest_framework.renderers.JSONRenderer',
    ],
    'DEFAULT_PARSER_CLASSES': [
        'rest_framework.parsers.JSONParser',
    ],
    'COERCE_DECIMAL_TO_STRING': False,
    'UNAUTHENTICATED_USER': None,
}

# Simulator settings
CAMSIM_OUT = Path(os.getenv('CAMSIM_OUT', BASE_DIR / 'camsim_out'))
CAMSIM_JOBS = int(os.getenv('CAMSIM_JOBS', '1'))
CAMSIM_LOG_LEVEL = os.getenv('CAMSIM_LOG_LEVEL', 'INFO')
CAMSIM_REPORT_SCHEMA = 'camsim-report/1'

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'keyvalue': {
            'format': 'ts=%(asctime)s level=%(levelname)s logger=%(name)s %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'keyvalue',
        },
    },
    'loggers': {
        'tcam': {
            'handlers': ['console'],
            'level': CAMSIM_LOG_LEVEL,
            'propagate': False,
        },
    },
}
