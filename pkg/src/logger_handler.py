import json
import logging
import sys
import traceback
from pathlib import Path

from src.config import Config

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class RunErrorHandler(logging.Handler):
    """
    Logging handler that appends error records of a run to <run_dir>/errors.jsonl.
    """
    def __init__(self, path):
        super().__init__()
        self.path = Path(path)
        # Only ERROR and CRITICAL, the console already carries the rest
        self.setLevel(logging.ERROR)

    def emit(self, record):
        try:
            stack_trace = None
            if record.exc_info:
                stack_trace = "".join(traceback.format_exception(*record.exc_info))

            entry = {
                'level': record.levelname,
                'message': record.getMessage(),
                'meta': {
                    'module': record.name,
                    'dtype': Config.FLOAT_DTYPE,
                    'stack_trace': stack_trace,
                    'file': record.filename,
                    'line': record.lineno,
                    'func': record.funcName
                }
            }

            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open('a', encoding='utf-8') as fh:
                fh.write(json.dumps(entry) + "\n")

        except Exception:
            # A broken error sink must never take the run down with it
            pass


def setup_logging(level=None, run_dir=None):
    """Configure the root logger on stderr; attach a RunErrorHandler when a run dir is given."""
    logging.basicConfig(
        format=LOG_FORMAT,
        level=getattr(logging, (level or Config.LOG_LEVEL).upper()),
        stream=sys.stderr,
        force=True
    )

    if run_dir is not None:
        logging.getLogger().addHandler(RunErrorHandler(Path(run_dir) / 'errors.jsonl'))
