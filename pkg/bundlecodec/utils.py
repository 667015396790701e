"""
Utility functions for bundlecodec commands.
This module contains config-file loading, option merging, run records and
argument parsing helpers shared by the management commands.
"""

import argparse
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np

from .exceptions import ConfigError

logger = logging.getLogger(__name__)


def load_json_config(path: Optional[str]) -> Dict[str, Any]:
    """Read a --config file; an absent path gives an empty layer"""
    if not path:
        return {}
    try:
        with open(path, encoding='utf-8') as handle:
            data = json.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def check_keys(layer: Dict[str, Any], allowed: Iterable[str], source: str = 'config'):
    unknown = sorted(set(layer) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {source} keys: {', '.join(unknown)}")


def merge_options(*layers: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    """Later layers win; None values never override"""
    merged: Dict[str, Any] = {}
    for layer in layers:
        for key, value in (layer or {}).items():
            if value is not None:
                merged[key] = value
    return merged


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return value


def run_record_path(artifact) -> Path:
    """<artifact>.run.json next to a file, run.json inside a directory"""
    artifact = Path(artifact)
    if artifact.is_dir():
        return artifact / 'run.json'
    return artifact.with_name(artifact.name + '.run.json')


def write_run_record(artifact, command: str, options: Dict[str, Any]) -> Path:
    """Deterministic JSON record of the command and its effective options"""
    path = run_record_path(artifact)
    record = {'command': command, 'options': _jsonable(options)}
    path.write_text(json.dumps(record, sort_keys=True, indent=2) + '\n', encoding='utf-8')
    logger.debug(f"Wrote run record {path}")
    return path


def float_list(text: str) -> List[float]:
    """argparse type for "0,0.1,0.5" style lists"""
    try:
        return [float(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return value


def format_float(value: float, digits: int = 6) -> str:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return 'n/a'
    return f"{value:.{digits}f}"
