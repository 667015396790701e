"""
Django settings for bundlecodec_project project.

The project hosts no web surface; Django provides the management-command CLI,
the settings layer and the test runner for the bundlecodec app.
"""

from pathlib import Path
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Not used for signing anything; Django refuses to start without one.
SECRET_KEY = 'bundlecodec-offline-key'

DEBUG = os.environ.get('BUNDLECODEC_DEBUG', '0') == '1'

ALLOWED_HOSTS = []

# Application definition
INSTALLED_APPS = [
    'bundlecodec',  # Streamline bundle codecs
]

# No models, so no database
DATABASES = {}

# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Logging
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'bundlecodec': {
            'handlers': ['console'],
            'level': os.environ.get('BUNDLECODEC_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
    },
}

# Custom settings for bundlecodec
BUNDLECODEC_SEED = 0
BUNDLECODEC_GROUP_SIZE = 64
BUNDLECODEC_POINT_COUNT = 64
BUNDLECODEC_BUAN_THRESHOLD = 0.05
BUNDLECODEC_THREADS = int(os.environ.get('BUNDLECODEC_THREADS', '1'))
BUNDLECODEC_DEBUG_NUMERICS = os.environ.get('BUNDLECODEC_DEBUG_NUMERICS', '0') == '1'

# Desk-scale training defaults; full-scale runs use iterations=15000, batch_size=256
BUNDLECODEC_TRAIN_DEFAULTS = {
    'arch': 'vqdiff',
    'iterations': 2000,
    'batch_size': 16,
    'learning_rate': 1e-3,
    'seed': BUNDLECODEC_SEED,
    'beta_temp': 10.0,
    'sigma_codebook': 2.0,
    'latent_dim': 32,
    'codebook_size': 128,
    'channels': 32,
    'res_blocks': 2,
    'kl_weight': 1.0,
    'commitment': 0.25,
    'ema_decay': 0.99,
    'ema_eps': 1e-5,
    'checkpoint_path': 'checkpoint.bnc',
    'log_path': 'loss.csv',
    'eval_every': 500,
    'log_every': 50,
    'activation': 'relu',
}

BUNDLECODEC_PERTURB_DEFAULTS = {
    'eps_grid': [0.0, 0.1, 0.25, 0.5, 1.0],
    'trials': 10,
}
