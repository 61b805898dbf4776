import json
import math
import time
from pathlib import Path
from typing import Any, List, Optional, Union

import datadog
import numpy as np
from django.conf import settings


def format_float(value: float) -> str:
    """Lossless decimal representation of a double."""
    return format(float(value), '.17g')


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def child_seeds(rng: np.random.Generator, count: int) -> List[int]:
    return [int(s) for s in rng.integers(0, 2 ** 63 - 1, size=count, dtype=np.int64)]


def rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    # uint128 state does not survive every JSON reader as a number
    return {
        'bit_generator': state['bit_generator'],
        'state': {k: str(v) for k, v in state['state'].items()},
        'has_uint32': state['has_uint32'],
        'uinteger': state['uinteger'],
    }


def rng_from_state(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = {
        'bit_generator': state['bit_generator'],
        'state': {k: int(v) for k, v in state['state'].items()},
        'has_uint32': state['has_uint32'],
        'uinteger': state['uinteger'],
    }
    return rng


def lossless_json(value: Any, indent: int = 2, sort_keys: bool = False, _level: int = 0) -> str:
    """JSON text like ``json.dumps(value, indent=indent)``, with every float written by ``format_float``."""
    if isinstance(value, float) and math.isfinite(value):
        return format_float(value)
    if isinstance(value, np.generic):
        return lossless_json(value.item(), indent, sort_keys, _level)
    if isinstance(value, dict):
        if not value:
            return '{}'
        items = sorted(value.items()) if sort_keys else value.items()
        pad = '\n' + ' ' * (indent * (_level + 1))
        body = ','.join(f'{pad}{json.dumps(str(key))}: {lossless_json(item, indent, sort_keys, _level + 1)}'
                        for key, item in items)
        return '{' + body + '\n' + ' ' * (indent * _level) + '}'
    if isinstance(value, (list, tuple)):
        if not value:
            return '[]'
        pad = '\n' + ' ' * (indent * (_level + 1))
        body = ','.join(pad + lossless_json(item, indent, sort_keys, _level + 1) for item in value)
        return '[' + body + '\n' + ' ' * (indent * _level) + ']'
    return json.dumps(value)


def write_json(path: Union[str, Path], payload: Any):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(lossless_json(payload, sort_keys=True) + '\n')


class Datadog:
    class __DatadogSingleton:
        def __init__(self):
            self.enabled = bool(settings.DATADOG_SETTINGS.get('api_key'))
            if self.enabled:
                datadog.initialize(**settings.DATADOG_SETTINGS)

    instance = None

    def __init__(self):
        if not Datadog.instance:
            Datadog.instance = Datadog.__DatadogSingleton()

    def __getattr__(self, name):
        return getattr(self.instance, name)

    def gauge(self, metric_name: str, value: Union[int, float], tags: Optional[List[str]] = None):
        if not self.instance.enabled:
            return None

        options = {
            'metric': metric_name,
            'points': [(int(time.time()), value)],
            'type': 'gauge',
        }

        if tags:
            options['tags'] = tags

        return datadog.api.Metric.send(**options)
