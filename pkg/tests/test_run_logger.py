from datetime import date, timedelta

from run_logger import RunLogger


def test_entries_are_appended_and_read_back(tmp_path):
    RunLogger.log_train('TRAIN_START', 'Toy', {'ratio': 0.5})
    RunLogger.log_eval('Toy', 0.75, {'split': 'test'})

    logs = RunLogger.get_logs()
    assert [entry['action'] for entry in logs] == ['TRAIN_START', 'EVAL']
    assert logs[1]['details'] == {'split': 'test', 'accuracy': 0.75}
    assert logs[0]['entity_type'] == 'Dataset'
    assert logs[0]['entity_id'] == 'Toy'
    assert list((tmp_path / 'logs').glob('runs_*.log'))


def test_filters():
    RunLogger.log_action('FETCH', 'Dataset', 'A')
    RunLogger.log_action('GRADCHECK', 'Suite', 'default')
    RunLogger.log_artifact('EXPORT', '/tmp/x.csv')

    assert [e['entity_id'] for e in RunLogger.get_logs(action='EXPORT')] == ['/tmp/x.csv']
    assert len(RunLogger.get_logs(limit=2)) == 2
    assert RunLogger.get_logs(start_date=date.today() + timedelta(days=1)) == []


def test_no_log_directory_yet():
    assert RunLogger.get_logs() == []


def test_logging_failures_do_not_raise(monkeypatch, tmp_path):
    blocker = tmp_path / 'file'
    blocker.write_text('not a directory')
    monkeypatch.setenv('SMATE_LOG_DIR', str(blocker))
    RunLogger.log_action('EVAL', 'Dataset', 'Toy')
