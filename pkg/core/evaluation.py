from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from django.db import models

from core.data import LandmarkDataset, NormRule, ProtocolSpec, apply_affine, crop_resize, denormalize_landmarks, \
    to_network_input
from core.exceptions import ConfigurationError, UndefinedRateError, ZeroNormalizerError
from core.networks import LandmarkNetwork
from core.utils import format_float, lossless_json

logger = logging.getLogger(__name__)

DEFAULT_FAILURE_THRESHOLD = 10.0
EVAL_BATCH_SIZE = 32
REPORT_CSV_HEADER = ['metric', 'value', 'domain']


class ReportFormat(models.TextChoices):
    Json = "json"
    Csv = "csv"


def normalizer(gt: np.ndarray, protocol: ProtocolSpec, bbox: Sequence[float]) -> float:
    if protocol.norm_rule == NormRule.InterOcular:
        left, right = protocol.eye_indices
        d = float(np.linalg.norm(gt[left] - gt[right]))
        if d == 0:
            raise ZeroNormalizerError(f'Eye landmarks {left} and {right} coincide')
        return d

    _, _, w, h = bbox
    if w * h <= 0:
        raise ZeroNormalizerError(f'Bounding box {tuple(bbox)} has no area')
    return math.sqrt(w * h)


def nme(pred: np.ndarray, gt: np.ndarray, protocol: ProtocolSpec, bbox: Sequence[float]) -> float:
    """Mean point-to-point error over the normalizer, in percent."""
    d = normalizer(gt, protocol, bbox)
    return float(np.linalg.norm(pred - gt, axis=1).mean() / d * 100.0)


def failure_rate(nmes: Sequence[float], threshold_percent: float = DEFAULT_FAILURE_THRESHOLD) -> float:
    if threshold_percent <= 0:
        raise ConfigurationError(f'Failure threshold must be positive, got {threshold_percent}')
    if len(nmes) == 0:
        raise UndefinedRateError('Failure rate of an empty set is undefined')

    return 100.0 * int(np.count_nonzero(np.asarray(nmes) > threshold_percent)) / len(nmes)


@dataclass
class EvalReport:
    nme: float
    failure_rate: float
    per_domain_nme: Dict[str, float]
    per_domain_count: Dict[str, int]
    sample_count: int
    failure_threshold: float
    oracle_assisted: bool = False
    branch_nme: Dict[str, float] = field(default_factory=dict)
    sample_nmes: List[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)


def predict(network: LandmarkNetwork, dataset: LandmarkDataset, head_id: Optional[str] = None,
            forced_branch: Optional[int] = None, batch_size: int = EVAL_BATCH_SIZE) -> List[np.ndarray]:
    """Landmarks per sample in original image coordinates, using running statistics."""
    was_training = network.training
    network.eval()
    size = network.config.input_size
    routed = bool(network.brute_force_layers())

    predictions = []
    try:
        for start in range(0, len(dataset), batch_size):
            crops = [crop_resize(sample, size) for sample in dataset.samples[start:start + batch_size]]

            if routed:
                if forced_branch is not None:
                    network.set_routing(forced_branch=forced_branch)
                else:
                    network.set_routing(domains=[crop.domain for crop in crops])

            out = network.forward(to_network_input(crops), head_id)
            for crop, coordinates in zip(crops, out):
                in_crop = denormalize_landmarks(coordinates.reshape(-1, 2), size)
                predictions.append(apply_affine(np.linalg.inv(crop.affine), in_crop))
    finally:
        network.train(was_training)

    return predictions


def _check_protocol(network: LandmarkNetwork, dataset: LandmarkDataset, protocol: Optional[ProtocolSpec],
                    head_id: Optional[str]) -> ProtocolSpec:
    if protocol is not None and protocol != dataset.protocol:
        raise ConfigurationError(f'Dataset uses protocol {dataset.protocol.id}, evaluation asked for {protocol.id}')
    protocol = dataset.protocol

    expected = network.landmarks_for(head_id)
    if expected != protocol.landmarks:
        raise ConfigurationError(
            f'Network predicts {expected} landmarks, protocol {protocol.id} has {protocol.landmarks}')

    return protocol


def _aggregate(dataset: LandmarkDataset, sample_nmes: Sequence[float], failure_threshold: float,
               config: Optional[dict], oracle_assisted: bool = False,
               branch_nme: Optional[Dict[str, float]] = None) -> EvalReport:
    per_domain: Dict[str, List[float]] = {}
    for sample, value in zip(dataset.samples, sample_nmes):
        if sample.domain is not None:
            per_domain.setdefault(str(sample.domain), []).append(value)

    return EvalReport(
        nme=float(np.mean(sample_nmes)),
        failure_rate=failure_rate(sample_nmes, failure_threshold),
        per_domain_nme={domain: float(np.mean(values)) for domain, values in sorted(per_domain.items())},
        per_domain_count={domain: len(values) for domain, values in sorted(per_domain.items())},
        sample_count=len(sample_nmes),
        failure_threshold=failure_threshold,
        oracle_assisted=oracle_assisted,
        branch_nme=branch_nme or {},
        sample_nmes=[float(v) for v in sample_nmes],
        config=config or {},
    )


def sample_errors(network: LandmarkNetwork, dataset: LandmarkDataset, protocol: ProtocolSpec,
                  head_id: Optional[str] = None, forced_branch: Optional[int] = None) -> List[float]:
    predictions = predict(network, dataset, head_id=head_id, forced_branch=forced_branch)
    return [nme(pred, sample.landmarks, protocol, sample.bbox) for pred, sample in zip(predictions, dataset.samples)]


def evaluate(network: LandmarkNetwork, dataset: LandmarkDataset, protocol: Optional[ProtocolSpec] = None,
             head_id: Optional[str] = None, failure_threshold: float = DEFAULT_FAILURE_THRESHOLD,
             config: Optional[dict] = None) -> EvalReport:
    protocol = _check_protocol(network, dataset, protocol, head_id)
    report = _aggregate(dataset, sample_errors(network, dataset, protocol, head_id), failure_threshold, config)

    logger.info('Evaluated %d samples of %s: NME %.4f%%, failure rate %.2f%%',
                report.sample_count, protocol.id, report.nme, report.failure_rate)

    return report


def bruteforce_best_of_k(network: LandmarkNetwork, dataset: LandmarkDataset,
                         protocol: Optional[ProtocolSpec] = None, head_id: Optional[str] = None,
                         failure_threshold: float = DEFAULT_FAILURE_THRESHOLD,
                         config: Optional[dict] = None) -> EvalReport:
    """
    Forwards every sample once per branch, forcing that branch in all brute-force
    layers, and keeps the smallest error. Uses ground truth, so the report is
    flagged oracle-assisted.
    """
    layers = network.brute_force_layers()
    if not layers:
        raise ConfigurationError('Best-of-K evaluation needs brute-force SepBN layers')

    branches = {layer.k for layer in layers}
    if len(branches) != 1:
        raise ConfigurationError(f'Brute-force layers disagree on branch count: {sorted(branches)}')
    k = branches.pop()

    protocol = _check_protocol(network, dataset, protocol, head_id)
    errors = np.array([
        sample_errors(network, dataset, protocol, head_id, forced_branch=branch) for branch in range(k)
    ])

    report = _aggregate(
        dataset, errors.min(axis=0).tolist(), failure_threshold, config, oracle_assisted=True,
        branch_nme={str(branch): float(errors[branch].mean()) for branch in range(k)},
    )

    logger.info('Best of %d on %d samples of %s: NME %.4f%% (single branches %s)',
                k, report.sample_count, protocol.id, report.nme, report.branch_nme)

    return report


def report_format(path: Union[str, Path], format: Optional[str] = None) -> str:
    format = format or Path(path).suffix.lstrip('.').lower()
    if format not in ReportFormat.values:
        raise ConfigurationError(f'Unknown report format {format!r}, use one of {ReportFormat.values}')
    return format


def report_rows(report: EvalReport) -> List[List[str]]:
    rows = [
        ['nme', format_float(report.nme), ''],
        ['failure_rate', format_float(report.failure_rate), ''],
        ['sample_count', str(report.sample_count), ''],
        ['failure_threshold', format_float(report.failure_threshold), ''],
        ['oracle_assisted', str(int(report.oracle_assisted)), ''],
    ]
    for domain, value in report.per_domain_nme.items():
        rows.append(['nme', format_float(value), domain])
        rows.append(['sample_count', str(report.per_domain_count[domain]), domain])
    for branch, value in report.branch_nme.items():
        rows.append([f'branch{branch}_nme', format_float(value), ''])
    return rows


def emit_report(report: EvalReport, path: Union[str, Path], format: Optional[str] = None) -> Path:
    path = Path(path)
    format = report_format(path, format)
    path.parent.mkdir(parents=True, exist_ok=True)

    if format == ReportFormat.Json:
        path.write_text(lossless_json(dataclasses.asdict(report)) + '\n')
    else:
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(REPORT_CSV_HEADER)
            writer.writerows(report_rows(report))

    logger.info('Report written to %s', path)

    return path


def read_report(path: Union[str, Path]) -> EvalReport:
    return EvalReport(**json.loads(Path(path).read_text()))
