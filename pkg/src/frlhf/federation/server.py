"""Synchronous federation rounds: broadcast, barrier, aggregate."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from frlhf.core import as_params, check_finite
from frlhf.federation.aggregation import AggregationStrategy, DimensionMismatchError, aggregate
from frlhf.federation.transport import RoundAbortedError
from frlhf.local import ClientUpdate

log = logging.getLogger(__name__)


@dataclass
class RoundRecord:
    round: int
    theta_before: np.ndarray
    theta_after: np.ndarray
    clients: list[dict]  # client_id, n_samples, update_norm
    duration_s: float = 0.0

    def to_json(self, include_timing: bool = False) -> dict:
        doc = {
            "round": self.round,
            "theta_norm_before": float(np.linalg.norm(self.theta_before)),
            "theta_norm_after": float(np.linalg.norm(self.theta_after)),
            "clients": self.clients,
        }
        if include_timing:
            doc["duration_s"] = self.duration_s
        return doc


@dataclass
class FederationResult:
    theta_final: np.ndarray
    theta_avg: np.ndarray  # mean of theta_0 .. theta_{T-1}
    thetas: list[np.ndarray]  # theta_0 .. theta_T
    records: list[RoundRecord] = field(default_factory=list)

    def write_records(self, path: str | Path, include_timing: bool = False) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_json(include_timing), sort_keys=True) + "\n")


def run_federation(
    theta0,
    clients: Sequence,
    rounds: int,
    strategy: AggregationStrategy | str = AggregationStrategy.FEDAVG_UNIFORM,
    on_round: Callable[[RoundRecord, list[ClientUpdate]], None] | None = None,
    close_clients: bool = True,
) -> FederationResult:
    """Run ``rounds`` synchronous rounds over client handles.

    Each handle needs ``client_id``, ``begin_round(t, theta)``,
    ``finish_round() -> ClientUpdate`` and ``close()``.  A failing client
    aborts the round before anything is aggregated.
    """
    if rounds < 1:
        raise ValueError("need at least one round")
    if len(clients) < 1:
        raise ValueError("need at least one client")
    strategy = AggregationStrategy(strategy)
    theta = as_params(theta0)
    thetas = [theta.copy()]
    records = []
    running_sum = np.zeros_like(theta)
    try:
        for t in range(rounds):
            start = time.perf_counter()
            for c in clients:
                c.begin_round(t, theta)
            updates = [c.finish_round() for c in clients]
            for u, c in zip(updates, clients):
                if u.round != t or u.client_id != c.client_id:
                    raise RoundAbortedError(f"round {t}: stale or misrouted update from client {u.client_id}")
                if u.delta.shape != theta.shape:
                    raise DimensionMismatchError(
                        f"round {t}: client {u.client_id} sent dimension {u.delta.size}, expected {theta.size}"
                    )
            delta = aggregate(updates, strategy)
            running_sum += theta
            new_theta = check_finite(theta + delta, f"theta after round {t}")
            rec = RoundRecord(
                round=t,
                theta_before=theta,
                theta_after=new_theta,
                clients=[
                    {"client_id": u.client_id, "n_samples": int(u.n_samples), "update_norm": u.norm}
                    for u in sorted(updates, key=lambda u: u.client_id)
                ],
                duration_s=time.perf_counter() - start,
            )
            records.append(rec)
            log.info("round %d done in %.3fs |theta|=%.6g", t, rec.duration_s, np.linalg.norm(new_theta))
            theta = new_theta
            thetas.append(theta.copy())
            if on_round is not None:
                on_round(rec, updates)
    finally:
        if close_clients:
            for c in clients:
                c.close()
    return FederationResult(theta, running_sum / rounds, thetas, records)
