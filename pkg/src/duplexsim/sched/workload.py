"""Requests and synthetic workload generation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument


@dataclass
class Request:
    id: int
    arrival_time: float
    l_in: int
    l_out: int
    generated: int = 0
    token_timestamps: list = field(default_factory=list)
    admit_time: float | None = None

    @property
    def ctx_len(self) -> int:
        return self.l_in + self.generated

    @property
    def done(self) -> bool:
        return self.generated >= self.l_out

    def emit_token(self, t: float) -> None:
        if self.generated >= self.l_out:
            raise InvalidArgument(f"request {self.id} already complete")
        self.generated += 1
        self.token_timestamps.append(t)


def _lengths(rng: np.random.Generator, mean: float, cv: float, n: int) -> np.ndarray:
    if cv == 0:
        return np.full(n, int(round(mean)), dtype=np.int64)
    draws = np.rint(rng.normal(mean, cv * mean, size=n)).astype(np.int64)
    return np.maximum(draws, 1)


def gen_workload(seed: int, n_requests: int, mean_l_in: float, mean_l_out: float,
                 cv: float = 0.25, qps: float | None = None) -> list[Request]:
    """Gaussian input/output lengths; Poisson arrivals when ``qps`` is given.

    Without ``qps`` every request arrives at t=0 and the run is closed-loop:
    a request is issued when a batch slot frees up.
    """
    if mean_l_in < 1 or mean_l_out < 1:
        raise InvalidArgument("mean lengths must be >= 1")
    if cv < 0:
        raise InvalidArgument("cv must be >= 0")
    rng = np.random.default_rng(seed)
    l_in = _lengths(rng, mean_l_in, cv, n_requests)
    l_out = _lengths(rng, mean_l_out, cv, n_requests)
    if qps:
        arrivals = np.cumsum(rng.exponential(1.0 / qps, size=n_requests))
    else:
        arrivals = np.zeros(n_requests)
    return [Request(i, float(arrivals[i]), int(l_in[i]), int(l_out[i]))
            for i in range(n_requests)]


def is_closed_loop(requests: list[Request]) -> bool:
    return all(r.arrival_time == 0.0 for r in requests)
