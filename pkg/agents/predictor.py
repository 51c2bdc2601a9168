"""Stand-ins for the learned request-characteristic predictor.

Each predictor maps the true (output length, call duration) of one round to
the values the scheduler sees. Error levels are parameters so that runs can
match a target accuracy (length buckets) and mean squared error (duration).
"""

import logging
from typing import Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

PREDICTOR_KINDS = ("oracle", "noisy_duration", "bucket_length", "combined", "trace")
DEFAULT_BUCKET_EDGES = (0, 16, 64, 256, 1024)


def bucket_index(value: float, edges: Sequence[float]) -> int:
    """Index of the ``(edges[i], edges[i + 1]]`` bucket holding ``value``.

    Values at or below the first edge land in bucket 0, values above the last
    edge in the last bucket.
    """
    last = len(edges) - 2
    for index in range(last + 1):
        if value <= edges[index + 1]:
            return index
    return last


def bucket_midpoint(index: int, edges: Sequence[float]) -> float:
    return (edges[index] + edges[index + 1]) / 2.0


class Predictor:
    def __init__(
        self,
        kind: str = "oracle",
        mse_target: float = 0.16,
        edges: Sequence[float] = DEFAULT_BUCKET_EDGES,
        accuracy: float = 0.85,
        seed: int = 0,
    ):
        if kind not in PREDICTOR_KINDS:
            raise ValueError(f"unknown predictor kind {kind!r}, expected one of {PREDICTOR_KINDS}")
        if not 0.0 <= accuracy <= 1.0:
            raise ValueError(f"accuracy must lie in [0, 1], got {accuracy}")
        if mse_target < 0:
            raise ValueError(f"mse_target must be >= 0, got {mse_target}")
        if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError(f"bucket edges must be strictly increasing, got {list(edges)}")

        self.kind = kind
        self.mse_target = mse_target
        self.edges = tuple(edges)
        self.accuracy = accuracy
        self.seed = seed

    @property
    def uses_buckets(self) -> bool:
        return self.kind in ("bucket_length", "combined")

    @property
    def uses_noise(self) -> bool:
        return self.kind in ("noisy_duration", "combined")

    def rng_for(self, request_id: int, round_index: int) -> np.random.Generator:
        """Generator keyed by request and round, independent of event order."""
        return np.random.default_rng([self.seed, request_id, round_index])

    def predict(
        self,
        l_out: float,
        t_api: float,
        rng: np.random.Generator,
        recorded: Tuple[Optional[float], Optional[float]] = (None, None),
    ) -> Tuple[float, float]:
        if self.kind == "trace":
            l_rec, t_rec = recorded
            return (
                float(l_out if l_rec is None else l_rec),
                float(t_api if t_rec is None else t_rec),
            )

        l_pred = self._predict_length(l_out, rng) if self.uses_buckets else float(l_out)
        t_pred = self._predict_duration(t_api, rng) if self.uses_noise else float(t_api)
        return l_pred, t_pred

    def predict_round(
        self,
        request_id: int,
        round_index: int,
        l_out: float,
        t_api: float,
        recorded: Tuple[Optional[float], Optional[float]] = (None, None),
    ) -> Tuple[float, float]:
        return self.predict(l_out, t_api, self.rng_for(request_id, round_index), recorded)

    def _predict_length(self, l_out: float, rng: np.random.Generator) -> float:
        n_buckets = len(self.edges) - 1
        true_index = bucket_index(l_out, self.edges)
        if n_buckets == 1 or rng.random() < self.accuracy:
            return bucket_midpoint(true_index, self.edges)
        # uniform over the other buckets
        wrong = int(rng.integers(n_buckets - 1))
        if wrong >= true_index:
            wrong += 1
        return bucket_midpoint(wrong, self.edges)

    def _predict_duration(self, t_api: float, rng: np.random.Generator) -> float:
        noisy = t_api + rng.normal(0.0, np.sqrt(self.mse_target))
        return max(0.0, float(noisy))
