import os

TS_EXTENSIONS = {'ts'}


def is_ts_file(filename):
    return '.' in filename and \
           filename.rsplit('.', 1)[1].lower() in TS_EXTENSIONS


def get_file_size(file_path):
    """Get file size in bytes"""
    try:
        return os.path.getsize(file_path)
    except OSError:
        return 0


def format_duration(seconds):
    """Format elapsed seconds as 1h02m03s / 2m03s / 3.4s"""
    if seconds < 60:
        return f"{seconds:.1f}s"
    minutes, secs = divmod(int(round(seconds)), 60)
    if minutes < 60:
        return f"{minutes}m{secs:02d}s"
    hours, minutes = divmod(minutes, 60)
    return f"{hours}h{minutes:02d}m{secs:02d}s"


def format_ratio(ratio):
    """Supervision ratio as a percentage label, e.g. 0.2 -> '20%'"""
    return f"{ratio * 100:g}%"
