"""MLaaS query boundary: posteriors plus optional counterfactuals.

This is the only surface the attack code is allowed to touch. The wrapped
model and its reference set are private attributes.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from typing import IO, Iterable

import numpy as np

from .counterfactual import Counterfactual, HeomSpace, NiceExplainer
from .data import Dataset


class QuotaExceeded(RuntimeError):
    pass


@dataclass
class ServiceConfig:
    cf_enabled: bool = True
    query_budget: int | None = None
    log_queries: bool = False
    reward: str = "proximity"

    def __post_init__(self):
        if self.query_budget is not None and self.query_budget < 1:
            raise ValueError("query_budget must be >= 1")


@dataclass
class QueryResponse:
    posterior: np.ndarray
    counterfactual: Counterfactual | None = None
    cf_unavailable: bool = False

    def to_wire(self) -> dict:
        cf = None
        if self.counterfactual is not None:
            cf = {"features": self.counterfactual.explanation.tolist(), "class": self.counterfactual.cf_class}
        return {"posterior": self.posterior.tolist(), "cf": cf, "cf_unavailable": self.cf_unavailable}


class MlaasService:
    """Serves ``model`` with NICE explanations drawn from ``reference`` (its training set)."""

    def __init__(self, model, reference: Dataset, config: ServiceConfig | None = None):
        self._model = model
        self._config = config or ServiceConfig()
        self._explainer = None
        if self._config.cf_enabled:
            self._explainer = NiceExplainer(model, HeomSpace.from_dataset(reference), reference, self._config.reward)
        self._lock = threading.Lock()
        self._remaining = self._config.query_budget
        self.query_log: list[list[float]] = []
        self.num_features = reference.n_features

    @property
    def cf_enabled(self) -> bool:
        return self._config.cf_enabled

    def _charge(self, n: int) -> None:
        with self._lock:
            if self._remaining is not None:
                if self._remaining < n:
                    raise QuotaExceeded("query budget exhausted")
                self._remaining -= n

    def query(self, x) -> QueryResponse:
        return self.query_many(np.asarray(x, dtype=float)[None, :])[0]

    def query_many(self, X, with_cf: bool = True) -> list[QueryResponse]:
        """Batched queries; each row costs one unit of budget."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.num_features:
            raise ValueError(f"expected {self.num_features} features")
        self._charge(len(X))
        if self._config.log_queries:
            self.query_log.extend(X.tolist())
        post = self._model.predict_proba(X)
        if self._explainer is None or not with_cf:
            return [QueryResponse(p) for p in post]
        cfs = self._explainer.explain_batch(X)
        return [QueryResponse(p, cf, cf_unavailable=cf is None) for p, cf in zip(post, cfs)]

    def posteriors(self, X) -> np.ndarray:
        """Posterior-only batch query (no explanation requested)."""
        return np.array([r.posterior for r in self.query_many(X, with_cf=False)])


def serve_lines(service: MlaasService, lines: Iterable[str], out: IO[str]) -> int:
    """Newline-delimited JSON loop; returns the number of answered requests."""
    answered = 0
    for line in lines:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
            if not isinstance(req, dict) or "features" not in req:
                raise ValueError("request must be an object with a 'features' array")
            resp = service.query(req["features"]).to_wire()
        except QuotaExceeded as exc:
            resp = {"error": str(exc)}
        except (ValueError, TypeError) as exc:
            resp = {"error": str(exc)}
        out.write(json.dumps(resp) + "\n")
        out.flush()
        answered += 1
    return answered
