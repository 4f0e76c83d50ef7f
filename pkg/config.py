import os


class Config:
    # Paths
    DATA_DIR = os.environ.get('SMATE_DATA_DIR') or 'data'
    RUNS_DIR = os.environ.get('SMATE_RUNS_DIR') or 'runs'
    LOG_DIR = os.environ.get('SMATE_LOG_DIR') or 'logs'

    # Logging
    LOG_LEVEL = (os.environ.get('SMATE_LOG_LEVEL') or 'INFO').upper()

    # UEA archive
    UEA_ARCHIVE_URL = os.environ.get('UEA_ARCHIVE_URL') or 'https://www.timeseriesclassification.com/aeon-toolkit'
    UEA_TIMEOUT = int(os.environ.get('UEA_TIMEOUT') or 60)

    # Hyperparameter defaults; a JSON config file and command-line flags override them
    DEFAULTS = {
        'dataset': None,
        'ratio': 1.0,
        'seed': 0,
        'epochs': 300,
        'lr': 1e-3,
        'pool': None,
        'embed_dim': 64,
        'gru_dim': 64,
        'conv_filters': 64,
        'window': 3,
        'smb_window': 3,
        'lam': 1.0,
        'normalize': True,
        'use_smb': True,
        'batch_size': 0,
        'min_score': None,
        'method': 'centroid',
        'k': 1,
    }

    @staticmethod
    def threads():
        # read at call time
        try:
            return max(1, int(os.environ.get('SMATE_THREADS') or 1))
        except ValueError:
            return 1

    @staticmethod
    def log_dir():
        return os.environ.get('SMATE_LOG_DIR') or Config.LOG_DIR
