import logging
from typing import List, Sequence

import numpy as np
from pydantic import BaseModel

from chanfuse.config import EncoderConfig
from chanfuse.kernels import (
    ctc_loss_backward,
    ctc_loss_forward,
    log_softmax_backward,
    log_softmax_forward,
)
from chanfuse.model import encode, model_backward
from chanfuse.params import (
    ParamStore,
    gru_stack_backward,
    gru_stack_forward,
    init_linear,
    linear_accumulate,
    linear_apply,
)
from chanfuse.toy_task import ToyUtterance

logger = logging.getLogger(__name__)

AFE_CTC_HEAD = "afe_ctc"


class TrainReport(BaseModel):
    """Pre-update loss of every step."""

    losses: List[float]

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def batch_loss(store: ParamStore, config: EncoderConfig, batch: Sequence[ToyUtterance], backward: bool = True) -> float:
    """
    Mean CTC loss over `batch`; with `backward`, adds its gradient to the store.
    """
    total = 0.0
    scale = 1.0 / len(batch)
    for utterance in batch:
        trace, cache = encode(store, config, utterance.features, utterance.ref_features, utterance.cosipd)
        loss, ctc_cache = ctc_loss_forward(trace.log_probs, utterance.labels)
        total += scale * loss
        if backward:
            model_backward(store, config, ctc_loss_backward(scale, ctc_cache), cache)
    return total


def toy_train_step(
    store: ParamStore,
    config: EncoderConfig,
    batch: Sequence[ToyUtterance],
    learning_rate: float,
) -> float:
    """
    One full-batch gradient-descent step on the mean CTC loss.

    Args:
        store (ParamStore): Parameters, updated in place.
        config (EncoderConfig): Model topology.
        batch (Sequence[ToyUtterance]): Examples with feasible labels.
        learning_rate (float): Step size.

    Returns:
        float: The loss before the update.
    """
    store.zero_grad()
    loss = batch_loss(store, config, batch)
    store.sgd_step(learning_rate)
    return loss


def train_toy(
    store: ParamStore,
    config: EncoderConfig,
    batch: Sequence[ToyUtterance],
    learning_rate: float,
    steps: int,
) -> TrainReport:
    losses = []
    for step in range(steps):
        losses.append(toy_train_step(store, config, batch, learning_rate))
        logger.info("step %d: loss %.4f", step, losses[-1])
    return TrainReport(losses=losses)


# ----------------------------------------------------------------------------
# AFE pre-training
# ----------------------------------------------------------------------------


def init_afe_head(store: ParamStore, hidden: int, vocab_size: int, rng: np.random.Generator) -> None:
    if f"{AFE_CTC_HEAD}.W" not in store:
        init_linear(store, AFE_CTC_HEAD, 2 * hidden, vocab_size + 1, rng)


def afe_ctc_loss(store: ParamStore, config: EncoderConfig, utterance: ToyUtterance, backward: bool = True) -> float:
    """CTC loss of the AFE's last-layer states through the `afe_ctc` head."""
    states, _, gru_cache = gru_stack_forward(store, "afe.gru", utterance.ref_features, config.afe_layers)
    logits, head_cache = linear_apply(store, AFE_CTC_HEAD, states[0])
    log_probs, ls_cache = log_softmax_forward(logits)
    loss, ctc_cache = ctc_loss_forward(log_probs, utterance.labels)
    if backward:
        dlogits = log_softmax_backward(ctc_loss_backward(1.0, ctc_cache), ls_cache)
        dstates = linear_accumulate(store, AFE_CTC_HEAD, dlogits, head_cache)
        gru_stack_backward(store, "afe.gru", dstates[None], None, gru_cache)
    return loss


def afe_pretrain(
    store: ParamStore,
    config: EncoderConfig,
    batch: Sequence[ToyUtterance],
    learning_rate: float = 0.005,
    steps: int = 100,
    rng: np.random.Generator = None,
) -> TrainReport:
    """
    Trains the AFE GRU with its own CTC head on the reference streams.

    Only `afe.gru.*` and `afe_ctc.*` receive gradients; the rest of the store is untouched.

    Args:
        store (ParamStore): Must hold the `afe.gru` stack.
        config (EncoderConfig): Supplies AFE depth, width and vocabulary.
        batch (Sequence[ToyUtterance]): Training examples.
        learning_rate (float): Step size.
        steps (int): Full-batch steps.
        rng (np.random.Generator): Initialises the head if missing.

    Returns:
        TrainReport: Mean loss per step.
    """
    init_afe_head(store, config.afe_hidden, config.vocab_size, rng or np.random.default_rng(0))
    losses = []
    for step in range(steps):
        store.zero_grad()
        total = 0.0
        for utterance in batch:
            total += afe_ctc_loss(store, config, utterance)
        for name in store.names("afe.gru") + store.names(AFE_CTC_HEAD):
            param = store[name]
            param.value -= learning_rate * param.grad / len(batch)
        losses.append(total / len(batch))
        logger.info("afe step %d: loss %.4f", step, losses[-1])
    return TrainReport(losses=losses)
