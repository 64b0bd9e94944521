"""
Training workflows: pretraining on video-level labels and fine-tuning on
segment verdicts, with Adam and an exponentially decaying learning rate

    lr(examples) = lr0 * decay ** (examples / decay_examples)
"""

from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError
from tqdm import tqdm

from src.data.features import FrameFeatureSequence
from src.data.labels import SegmentLabel, ground_truth
from src.data.manifest import DatasetManifest
from src.data.sampling import SamplingMode, extract_segment, sample_frames
from src.models.base import VideoModel
from src.models.registry import build_model
from src.pipeline.inference import check_model_dims, load_model, predict_table
from src.tensor.checkpoint import save_checkpoint
from src.tensor.core import backward, tape, zero_grad
from src.tensor.random import make_rng
from src.utils.config import (
    ADAM_BETAS, ADAM_EPS, BATCH_SIZE, DEFAULT_SEED, LEARNING_RATE, LR_DECAY,
    LR_DECAY_EXAMPLES, MAP_TOP_K, PRETRAIN_STEPS, SYNTH_FRAMES,
)
from src.utils.errors import ConfigError, FormatError
from src.utils.logging import logger

Family = Literal["netvlad", "nextvlad_mix", "bert", "bert_cross"]
DEFAULT_FAMILY = "netvlad"
LOSS_LOG_COLUMNS = ["step", "examples", "lr", "loss"]


class TrainConfig(BaseModel):
    """One training run"""
    family: Optional[Family] = None
    pooling: Optional[str] = None
    model: Dict[str, Any] = Field(default_factory=dict)
    batch_size: int = Field(default=BATCH_SIZE, ge=1)
    learning_rate: float = Field(default=LEARNING_RATE, gt=0)
    lr_decay: float = Field(default=LR_DECAY, gt=0, le=1)
    decay_examples: int = Field(default=LR_DECAY_EXAMPLES, ge=1)
    steps: int = Field(default=PRETRAIN_STEPS, ge=0)
    seed: int = DEFAULT_SEED
    temperature: Optional[float] = Field(default=None, gt=0)
    frames: int = Field(default=SYNTH_FRAMES, ge=1)
    sampling: SamplingMode = "subsequence"
    eval_every: int = Field(default=50, ge=1)
    top_k: int = Field(default=MAP_TOP_K, ge=1)
    segment_fraction: float = Field(default=1.0, gt=0, le=1)

    def model_family(self) -> str:
        return self.family or DEFAULT_FAMILY

    def model_overrides(self) -> Dict[str, Any]:
        overrides = dict(self.model)
        if self.pooling is not None:
            overrides["pooling"] = self.pooling
        if self.temperature is not None:
            overrides["temperature"] = self.temperature
        return overrides


def make_train_config(**values) -> TrainConfig:
    try:
        return TrainConfig(**{k: v for k, v in values.items() if v is not None})
    except ValidationError as exc:
        raise ConfigError(f"invalid training config: {exc}") from exc


def learning_rate(config: TrainConfig, examples_seen: int) -> float:
    return config.learning_rate * config.lr_decay ** (examples_seen / config.decay_examples)


class Adam:
    """Adam on the parameters' numpy buffers."""

    def __init__(self, params, betas: Tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for i, (param, grad) in enumerate(zip(self.params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad * grad
            m_hat = self.m[i] / correction1
            v_hat = self.v[i] / correction2
            param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


Batch = Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]


def train_loop(model: VideoModel, next_batch: Callable[[np.random.Generator], Batch], config: TrainConfig,
               steps: int, desc: str, on_step: Optional[Callable[[int], None]] = None) -> List[Dict[str, float]]:
    """Run ``steps`` Adam updates; returns the loss log rows."""
    params = model.parameters()
    optimizer = Adam(params)
    rng = make_rng(config.seed, "train")
    examples = 0
    rows: List[Dict[str, float]] = []
    for step in tqdm(range(steps), desc=desc, leave=False):
        frames, labels, mask = next_batch(rng)
        lr = learning_rate(config, examples)
        zero_grad(params)
        with tape() as graph:
            loss = model.loss(frames, labels, mask)
        grads = backward(graph, loss, params)
        optimizer.step(grads, lr)
        rows.append({"step": step, "examples": examples, "lr": lr, "loss": loss.item()})
        examples += frames.shape[0]
        logger.debug(f"{desc} step {step}: loss {loss.item():.6f} lr {lr:.3e}")
        if on_step is not None:
            on_step(step + 1)
    return rows


def write_loss_log(rows: List[Dict[str, float]], path) -> Path:
    path = Path(path)
    pd.DataFrame(rows, columns=LOSS_LOG_COLUMNS).to_csv(path, sep="\t", index=False, float_format="%.17g")
    return path


def loss_log_path(checkpoint) -> Path:
    checkpoint = Path(checkpoint)
    return checkpoint.with_name(checkpoint.name + ".loss.tsv")


def _model_meta(model: VideoModel, config: TrainConfig, stage: str) -> Dict[str, Any]:
    meta = model.describe()
    meta.update({"stage": stage, "seed": config.seed})
    return meta


class TrainResult(BaseModel):
    """Outcome of a training stage"""
    checkpoint: str
    losses: List[float]
    best_step: Optional[int] = None
    best_map: Optional[float] = None
    history: List[Tuple[int, float]] = Field(default_factory=list)


def pretrain(manifest: DatasetManifest, config: TrainConfig, checkpoint) -> TrainResult:
    """Train a fresh model on video-level labels of the pretrain split."""
    sequences = manifest.load_features("pretrain")
    if not sequences:
        raise FormatError("pretrain split is empty")
    model = build_model(config.model_family(), manifest.visual_dim, manifest.audio_dim, manifest.num_classes,
                        config.model_overrides(), config.seed)
    frames_per_example = model.fixed_length or config.frames
    logger.info(
        f"Pretraining {config.model_family()} on {len(sequences)} videos for {config.steps} steps "
        f"({model.num_parameters()} parameters, {frames_per_example} frames/example)"
    )
    targets = np.stack([seq.label_vector(manifest.num_classes) for seq in sequences])

    def next_batch(rng: np.random.Generator) -> Batch:
        picks = rng.integers(0, len(sequences), size=config.batch_size)
        frames = np.stack([sample_frames(sequences[i], frames_per_example, config.sampling, rng) for i in picks])
        return frames, targets[picks], None

    rows = train_loop(model, next_batch, config, config.steps, "pretrain")
    save_checkpoint(checkpoint, model.state_dict(), _model_meta(model, config, "pretrain"))
    write_loss_log(rows, loss_log_path(checkpoint))
    logger.info(f"Pretraining done; final loss {rows[-1]['loss'] if rows else float('nan'):.6f}")
    return TrainResult(checkpoint=str(checkpoint), losses=[row["loss"] for row in rows])


def segment_examples(labels: Sequence[SegmentLabel], sequences: Dict[str, FrameFeatureSequence],
                     num_classes: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, List[Tuple[str, int]]]:
    """
    One example per labeled window: frames, targets and a mask that is 1
    only for the classes with a verdict at that window.
    """
    by_location: Dict[Tuple[str, int], List[SegmentLabel]] = {}
    for label in labels:
        by_location.setdefault((label.video_id, label.start), []).append(label)
    locations = sorted(by_location)
    if not locations:
        raise FormatError("no labeled segments")
    frames = np.stack([extract_segment(sequences[video], start) for video, start in locations])
    targets = np.zeros((len(locations), num_classes))
    mask = np.zeros((len(locations), num_classes))
    for row, location in enumerate(locations):
        for label in by_location[location]:
            targets[row, label.class_id] = float(label.positive)
            mask[row, label.class_id] = 1.0
    return frames, targets, mask, locations


def select_best(history: Sequence[Tuple[int, float]]) -> int:
    """Index of the highest MAP; the earliest wins ties."""
    if not history:
        raise ConfigError("no evaluated checkpoints to select from")
    return int(np.argmax([value for _, value in history]))


def evaluate_split(model: VideoModel, manifest: DatasetManifest, split: str, top_k: int,
                   sequences: Optional[List[FrameFeatureSequence]] = None,
                   labels: Optional[List[SegmentLabel]] = None) -> float:
    """Untransformed (no TTA) MAP@K on a labeled split."""
    sequences = sequences if sequences is not None else manifest.load_features(split)
    labels = labels if labels is not None else manifest.load_labels(split, sequences)
    return predict_table(model, sequences, labels, top_k=top_k).map_at_k(ground_truth(labels), top_k)


def _check_checkpoint_config(model: VideoModel, config: TrainConfig) -> None:
    """A resumed model keeps its own family and hyperparameters."""
    if config.family is not None and config.family != model.family:
        raise ConfigError(f"checkpoint holds a {model.family} model, not {config.family}")
    stored = model.config_dict()
    ignored = {key: value for key, value in config.model_overrides().items() if stored.get(key) != value}
    if ignored:
        kept = {key: stored.get(key) for key in ignored}
        logger.warning(f"Ignoring model settings {ignored}; the checkpoint keeps {kept}")


def finetune(manifest: DatasetManifest, config: TrainConfig, checkpoint_out,
             checkpoint_in=None) -> TrainResult:
    """
    Continue training on segment verdicts of the finetune split and keep the
    parameters with the best holdout MAP. Without ``checkpoint_in`` the model
    starts from a fresh initialization.
    """
    if checkpoint_in is not None:
        model = load_model(checkpoint_in)
        check_model_dims(model, manifest)
        _check_checkpoint_config(model, config)
    else:
        model = build_model(config.model_family(), manifest.visual_dim, manifest.audio_dim, manifest.num_classes,
                            config.model_overrides(), config.seed)

    sequences = manifest.load_features("finetune")
    labels = manifest.load_labels("finetune", sequences)
    frames, targets, mask, locations = segment_examples(labels, {s.video_id: s for s in sequences},
                                                        manifest.num_classes)
    if config.segment_fraction < 1.0:
        keep = max(1, int(round(config.segment_fraction * len(locations))))
        chosen = np.sort(make_rng(config.seed, "split").choice(len(locations), size=keep, replace=False))
        frames, targets, mask = frames[chosen], targets[chosen], mask[chosen]
    holdout = manifest.load_features("holdout")
    holdout_labels = manifest.load_labels("holdout", holdout)
    logger.info(
        f"Fine-tuning {model.family} on {len(frames)} labeled windows for {config.steps} steps"
        f"{'' if checkpoint_in is not None else ' from scratch'}"
    )

    history: List[Tuple[int, float]] = []
    best_state = {"state": model.state_dict()}

    def evaluate(step: int) -> None:
        value = evaluate_split(model, manifest, "holdout", config.top_k, holdout, holdout_labels)
        history.append((step, value))
        if select_best(history) == len(history) - 1:
            best_state["state"] = model.state_dict()
        logger.info(f"Holdout MAP@{config.top_k} at step {step}: {value:.6f}")

    def next_batch(rng: np.random.Generator) -> Batch:
        picks = rng.integers(0, len(frames), size=config.batch_size)
        return frames[picks], targets[picks], mask[picks]

    def on_step(step: int) -> None:
        if step % config.eval_every == 0 or step == config.steps:
            evaluate(step)

    evaluate(0)
    rows = train_loop(model, next_batch, config, config.steps, "finetune", on_step)
    best = select_best(history)
    model.load_state_dict(best_state["state"])
    meta = _model_meta(model, config, "finetune")
    meta.update({"best_step": history[best][0], "holdout_map": history[best][1]})
    save_checkpoint(checkpoint_out, model.state_dict(), meta)
    write_loss_log(rows, loss_log_path(checkpoint_out))
    logger.info(f"Selected step {history[best][0]} with holdout MAP {history[best][1]:.6f}")
    return TrainResult(
        checkpoint=str(checkpoint_out), losses=[row["loss"] for row in rows],
        best_step=history[best][0], best_map=history[best][1], history=history,
    )
