"""
Run telemetry.
Gauges live in a per-run registry and are written in node-exporter textfile format.
"""

import logging
from pathlib import Path

from prometheus_client import CollectorRegistry, Gauge, write_to_textfile

from src.core.errors import ArtifactIOError

logger = logging.getLogger(__name__)


class RunMetrics:
    """Collects gauges for one CLI invocation."""

    def __init__(self):
        self.registry = CollectorRegistry()
        self.utterances_featurized = Gauge(
            "langsim_utterances_featurized",
            "Utterances converted to Mel spectrograms",
            registry=self.registry,
        )
        self.epoch_loss = Gauge(
            "langsim_epoch_loss",
            "Mean training loss per epoch",
            ["epoch"],
            registry=self.registry,
        )
        self.train_accuracy = Gauge(
            "langsim_train_accuracy",
            "Seen-language accuracy on the training split after training",
            registry=self.registry,
        )
        self.languages_embedded = Gauge(
            "langsim_languages_embedded",
            "Languages written to the embedding store",
            registry=self.registry,
        )
        self.kmeans_inertia = Gauge(
            "langsim_kmeans_inertia",
            "Final k-means inertia",
            registry=self.registry,
        )
        self.spearman_rho = Gauge(
            "langsim_spearman_rho",
            "Spearman correlation between a measure and a downstream score",
            ["measure", "anchor_lang"],
            registry=self.registry,
        )
        self.family_accuracy = Gauge(
            "langsim_family_accuracy",
            "Zero-shot language family accuracy",
            ["split"],
            registry=self.registry,
        )

    def write(self, path: str | Path | None) -> None:
        """Write the registry to `path`; no-op when path is None."""
        if path is None:
            return
        try:
            write_to_textfile(str(path), self.registry)
        except OSError as e:
            raise ArtifactIOError(f"cannot write metrics to {path}: {e}") from e
        logger.info(f"Wrote metrics to {path}")
