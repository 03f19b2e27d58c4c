import logging
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from pydantic import BaseModel

from chanfuse.config import RunConfig
from chanfuse.io_manifest import write_json
from chanfuse.model import init_model
from chanfuse.tensor_container import save_tensors
from chanfuse.toy_task import TOY_COSIPD_BINS, TOY_INPUT_DIM, make_toy_task
from chanfuse.training import AFE_CTC_HEAD, afe_pretrain, train_toy

logger = logging.getLogger(__name__)


class TrainToyResponse(BaseModel):
    """
    Response model summarising a toy training run and where its artefacts went.
    """

    weights_path: str
    report_path: str
    initial_loss: float
    final_loss: float
    afe_initial_loss: Optional[float] = None
    afe_final_loss: Optional[float] = None
    losses: List[float]


def train(out_dir: Union[str, Path], config: RunConfig, pretrain_afe: bool = False) -> TrainToyResponse:
    """
    Trains the encoder on the seeded synthetic task with full-batch gradient descent.

    Args:
        out_dir (Union[str, Path]): Receives `weights.cftn` and `train_report.json`.
        config (RunConfig): Topology, `learning_rate`, `train_steps`, toy task size and `seed`.
        pretrain_afe (bool): Run `afe_pretrain` first (AFE query pooling only).

    Returns:
        TrainToyResponse: Loss curve and output paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    encoder = config.encoder_config(TOY_INPUT_DIM, TOY_COSIPD_BINS)
    rng = np.random.default_rng(config.seed)
    task = make_toy_task(
        seed=config.seed,
        utterances=config.toy_utterances,
        channels=config.toy_channels,
        frames=config.toy_frames,
        vocab_size=config.vocab_size,
    )
    store = init_model(encoder, rng)
    afe_report = None
    if pretrain_afe and encoder.query_pooling == "afe":
        afe_report = afe_pretrain(store, encoder, task, config.afe_learning_rate, config.afe_steps, rng)
    report = train_toy(store, encoder, task, config.learning_rate, config.train_steps)
    weights = {name: value for name, value in store.arrays().items() if not name.startswith(AFE_CTC_HEAD)}
    weights_path = save_tensors(out_dir / "weights.cftn", weights)
    summary = {
        "losses": report.losses,
        "afe_losses": None if afe_report is None else afe_report.losses,
        "config": config.model_dump(mode="json"),
    }
    report_path = write_json(summary, out_dir / "train_report.json")
    logger.info("Toy training: loss %.4f -> %.4f", report.initial_loss, report.final_loss)
    return TrainToyResponse(
        weights_path=str(weights_path),
        report_path=str(report_path),
        initial_loss=report.initial_loss,
        final_loss=report.final_loss,
        afe_initial_loss=None if afe_report is None else afe_report.initial_loss,
        afe_final_loss=None if afe_report is None else afe_report.final_loss,
        losses=report.losses,
    )
