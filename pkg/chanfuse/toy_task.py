import logging
from typing import List

import numpy as np
from pydantic import BaseModel, ConfigDict

from chanfuse.errors import ShapeError

logger = logging.getLogger(__name__)

TOY_INPUT_DIM = 16
TOY_COSIPD_BINS = 9
TOY_LABELS = 3


class ToyUtterance(BaseModel):
    """
    One synthetic training example in the shape the encoder consumes.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    features: np.ndarray
    ref_features: np.ndarray
    cosipd: np.ndarray
    labels: List[int]


def _label_sequence(rng: np.random.Generator, vocab_size: int, count: int) -> List[int]:
    labels: List[int] = []
    while len(labels) < count:
        symbol = int(rng.integers(1, vocab_size + 1))
        if not labels or symbol != labels[-1] or vocab_size == 1:
            labels.append(symbol)
    return labels


def _render(labels: List[int], frames: int, embeddings: np.ndarray) -> np.ndarray:
    # each label sits in the middle of its own span, blanks around it
    clean = np.repeat(embeddings[0][None], frames, axis=0)
    span = frames // len(labels)
    for i, symbol in enumerate(labels):
        start = i * span + span // 4
        stop = max(start + 1, i * span + (3 * span) // 4)
        clean[start:stop] = embeddings[symbol]
    return clean


def make_toy_task(
    seed: int = 0,
    utterances: int = 20,
    channels: int = 3,
    frames: int = 30,
    vocab_size: int = 5,
    input_dim: int = TOY_INPUT_DIM,
    cosipd_bins: int = TOY_COSIPD_BINS,
    labels_per_utterance: int = TOY_LABELS,
) -> List[ToyUtterance]:
    """
    Synthetic multi-channel utterances with known CTC labels.

    Labels are rendered as symbol-embedding frames separated by blank frames. Each
    channel sees the clean frames with its own gain and noise level; the reference is
    nearly clean; cosIPD frames are noisier for noisier channels.

    Args:
        seed (int): Generator seed; equal seeds give equal tasks.
        utterances (int): Number of examples.
        channels (int): K.
        frames (int): T.
        vocab_size (int): V, symbols 1..V.
        input_dim (int): Din.
        cosipd_bins (int): F of the cosIPD frames.
        labels_per_utterance (int): U.

    Returns:
        List[ToyUtterance]: CTC-feasible examples.
    """
    if frames < 2 * labels_per_utterance + 1 or frames // labels_per_utterance < 2:
        raise ShapeError(f"{frames} frames cannot hold {labels_per_utterance} separated labels")
    rng = np.random.default_rng(seed)
    embeddings = rng.normal(size=(vocab_size + 1, input_dim))
    embeddings[0] *= 0.2
    gains = rng.uniform(0.5, 1.5, size=channels)
    noise = rng.uniform(0.1, 0.8, size=channels)
    phases = rng.uniform(-np.pi, np.pi, size=(channels, cosipd_bins))
    phases[0] = 0.0
    task = []
    for _ in range(utterances):
        labels = _label_sequence(rng, vocab_size, labels_per_utterance)
        clean = _render(labels, frames, embeddings)
        features = gains[:, None, None] * clean[None] + noise[:, None, None] * rng.normal(
            size=(channels, frames, input_dim)
        )
        ref_features = clean[None] + 0.05 * rng.normal(size=(1, frames, input_dim))
        jitter = noise[:, None, None] * rng.normal(size=(channels, frames, cosipd_bins))
        cosipd = np.cos(phases[:, None, :] + jitter)
        cosipd[0] = 1.0
        task.append(
            ToyUtterance(features=features, ref_features=ref_features, cosipd=cosipd, labels=labels)
        )
    logger.debug("Toy task: %d utterances, K=%d, T=%d, V=%d", utterances, channels, frames, vocab_size)
    return task
