import io
import logging
import os
import zipfile

import requests

from config import Config
from tensor import SmateError
from utils import get_file_size, is_ts_file

logger = logging.getLogger(__name__)


class DownloadError(SmateError):
    pass


class UeaArchiveClient:
    def __init__(self, base_url=None, timeout=None):
        self.base_url = (base_url or Config.UEA_ARCHIVE_URL).rstrip('/')
        self.timeout = timeout or Config.UEA_TIMEOUT

    def archive_url(self, name):
        return f'{self.base_url}/{name}.zip'

    def download(self, name, data_dir):
        """
        Downloads <name>.zip and extracts <name>_TRAIN.ts / <name>_TEST.ts into <data_dir>/<name>/
        """
        url = self.archive_url(name)
        try:
            response = requests.get(url, timeout=self.timeout)
            response.raise_for_status()
        except requests.exceptions.RequestException as e:
            raise DownloadError(f"Error downloading {url}: {str(e)}") from e

        target_dir = os.path.join(data_dir, name)
        os.makedirs(target_dir, exist_ok=True)
        wanted = {f'{name}_TRAIN.ts', f'{name}_TEST.ts'}
        written = []
        try:
            with zipfile.ZipFile(io.BytesIO(response.content)) as archive:
                for member in archive.namelist():
                    filename = os.path.basename(member)
                    if not is_ts_file(filename) or filename not in wanted:
                        continue
                    path = os.path.join(target_dir, filename)
                    with archive.open(member) as src, open(path, 'wb') as dst:
                        dst.write(src.read())
                    written.append(path)
        except zipfile.BadZipFile as e:
            raise DownloadError(f"{url} did not return a zip archive") from e

        if not written:
            raise DownloadError(f"{url} contains no {name}_TRAIN.ts / {name}_TEST.ts")
        for path in written:
            logger.info(f"Extracted {path} ({get_file_size(path)} bytes)")
        return sorted(written)
