"""Desk-scale lab for dynamic thought compression in autoregressive decoding.

Subpackages:

* corpus: synthetic reasoning corpus, segmentation, augmented layouts.
* masks: attention visibility matrices per mask mode.
* model: numpy decoder-only transformer with manual gradients and KV caches.
* training: masked-NLL training loop, schedule, checkpoints.
* engine: generation policies (vanilla / compression / heavy-hitter) and traces.
* metrics: dependency, peak, and compression-ratio metrics.
* bench: experiment orchestration (prepare / train / eval / longgen).
"""
from . import bench, corpus, engine, masks, metrics, model, training  # noqa: F401

__version__ = "0.1.0"
