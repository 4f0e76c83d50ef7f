from datetime import datetime
import json
import logging
import os

from config import Config

logger = logging.getLogger(__name__)


class RunLogger:
    @staticmethod
    def log_action(action, entity_type, entity_id, details=None):
        """
        Appends one entry to the run log

        Args:
            action (str): TRAIN_START, TRAIN_DONE, TRAIN_ABORTED, EVAL, EXPORT, GRADCHECK, FETCH, SWEEP
            entity_type (str): Dataset, Checkpoint, Suite, ...
            entity_id (str): dataset name or artifact path
            details (dict): free-form details of the action
        """
        try:
            log_entry = {
                'timestamp': datetime.now().isoformat(),
                'action': action,
                'entity_type': entity_type,
                'entity_id': entity_id,
                'pid': os.getpid(),
                'details': details or {}
            }

            log_dir = Config.log_dir()
            os.makedirs(log_dir, exist_ok=True)

            # One file per day
            log_filename = f"runs_{datetime.now().strftime('%Y%m%d')}.log"
            log_path = os.path.join(log_dir, log_filename)

            with open(log_path, 'a', encoding='utf-8') as f:
                f.write(json.dumps(log_entry, ensure_ascii=False, default=str) + '\n')

        except Exception as e:
            logger.error(f'Run log error: {e}')

    @staticmethod
    def log_train(action, dataset, details=None):
        RunLogger.log_action(action, 'Dataset', dataset, details)

    @staticmethod
    def log_eval(dataset, accuracy, details=None):
        RunLogger.log_action('EVAL', 'Dataset', dataset, dict(details or {}, accuracy=accuracy))

    @staticmethod
    def log_artifact(action, path, details=None):
        RunLogger.log_action(action, 'Artifact', str(path), details)

    @staticmethod
    def get_logs(start_date=None, end_date=None, action=None, limit=1000):
        """
        Reads run log entries, most recent files first
        """
        try:
            logs = []
            log_dir = Config.log_dir()

            if not os.path.exists(log_dir):
                return logs

            log_files = [f for f in os.listdir(log_dir) if f.startswith('runs_') and f.endswith('.log')]
            log_files.sort(reverse=True)

            for log_file in log_files:
                log_path = os.path.join(log_dir, log_file)

                with open(log_path, 'r', encoding='utf-8') as f:
                    for line in f:
                        try:
                            log_entry = json.loads(line.strip())
                        except json.JSONDecodeError:
                            continue

                        log_date = datetime.fromisoformat(log_entry['timestamp']).date()
                        if start_date and log_date < start_date:
                            continue
                        if end_date and log_date > end_date:
                            continue
                        if action and log_entry.get('action') != action:
                            continue

                        logs.append(log_entry)

            return logs[:limit]

        except Exception as e:
            logger.error(f'Error reading run logs: {e}')
            return []
