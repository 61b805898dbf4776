import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
from django.core.management.base import BaseCommand, CommandError

from core.exceptions import CheckpointError, ConfigurationError, DatasetLoadError, RoutingError, SepBNError, \
    TrainingDivergenceError
from core.utils import write_json

logger = logging.getLogger(__name__)

RUN_ECHO_NAME = 'run.json'


class ExitCode:
    Failure = 1
    Configuration = 2
    MissingInput = 3
    Divergence = 4


def exit_code(error: Exception) -> int:
    if isinstance(error, (ConfigurationError, RoutingError)):
        return ExitCode.Configuration
    if isinstance(error, (DatasetLoadError, CheckpointError, OSError)):
        return ExitCode.MissingInput
    if isinstance(error, TrainingDivergenceError):
        return ExitCode.Divergence
    return ExitCode.Failure


def error_message(error: Exception) -> str:
    return json.dumps({'error': type(error).__name__, 'detail': str(error)}, separators=(',', ':'))


class ExperimentCommand(BaseCommand):
    """
    Runs ``execute_command`` and turns kernel errors into a ``CommandError`` whose
    message is one JSON line and whose return code tells the failure kind apart.
    """

    def execute_command(self, **options) -> Optional[str]:
        raise NotImplementedError

    def handle(self, *args, **options):
        try:
            return self.execute_command(**options)
        except (SepBNError, OSError) as e:
            logger.debug('%s failed', self.__module__, exc_info=True)
            raise CommandError(error_message(e), returncode=exit_code(e)) from e

    def command_name(self) -> str:
        return self.__module__.rsplit('.', 1)[-1]

    def write_run_echo(self, out_dir: Union[str, Path], arguments: Dict[str, Any], config: dict,
                       seed: Optional[int] = None) -> Path:
        path = Path(out_dir) / RUN_ECHO_NAME
        write_json(path, {
            'command': self.command_name(),
            'arguments': {name: _plain(value) for name, value in arguments.items()},
            'config': config,
            'seed': config.get('seed') if seed is None else seed,
        })
        return path


def _plain(value):
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, np.generic):
        return value.item()
    return value
