"""
MSE/Adam training in normalized space, plus freeze-and-finetune transfer.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Set

import numpy as np
import pandas as pd

from climnorm import NormalizedDataset
from core import TrainConfig
from exceptions import ConfigurationError, ContractError, DimensionError, NumericFault
from interfaces import INormalizer, ITrainableCorrector
from model import ModelState, ReSAConvLSTM
from monitoring import PerformanceMonitor
from tensor import Tape, Tensor, backward, mean_all, mul, sub

logger = logging.getLogger(__name__)

DEFAULT_FINETUNE_FREEZE = ("convlstm",)
LOSS_CURVE_COLUMNS = ["epoch", "train_loss", "val_loss"]


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise DimensionError("mse_loss: prediction and target shapes differ",
                             {"pred": pred.shape, "target": target.shape})
    diff = sub(pred, target)
    return mean_all(mul(diff, diff))


@dataclass
class AdamState:
    """First/second moments per parameter, aligned with the parameter list"""
    first: List[np.ndarray]
    second: List[np.ndarray]
    step: int = 0

    @staticmethod
    def create(params: Sequence[Tensor]) -> "AdamState":
        return AdamState([np.zeros_like(p.data) for p in params],
                         [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], state: AdamState, config: TrainConfig,
              frozen: Optional[Set[int]] = None, grads: Optional[Sequence[np.ndarray]] = None) -> None:
    """Bias-corrected Adam update; parameters whose id() is in ``frozen`` are skipped"""
    if len(state.first) != len(params):
        raise ContractError("AdamState was built for a different parameter list")
    frozen = frozen or set()
    missing = [p.name or str(i) for i, p in enumerate(params)
               if id(p) not in frozen and (grads[i] if grads is not None else p.grad) is None]
    if missing:
        raise ContractError("Missing gradients for trainable parameters", {"parameters": missing[:5]})

    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for i, p in enumerate(params):
        if id(p) in frozen:
            continue
        g = grads[i] if grads is not None else p.grad
        state.first[i] = b1 * state.first[i] + (1.0 - b1) * g
        state.second[i] = b2 * state.second[i] + (1.0 - b2) * g * g
        m_hat = state.first[i] / c1
        v_hat = state.second[i] / c2
        p.apply_update(config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon))


def resolve_frozen(model: ITrainableCorrector, freeze_spec: Sequence[str]) -> Set[int]:
    """Ids of the tensors in the named groups; accepts 'all' and 'none'"""
    groups = model.parameter_groups()
    names = set(freeze_spec)
    if "all" in names:
        names = set(groups)
    names.discard("none")
    unknown = names - set(groups)
    if unknown:
        raise ConfigurationError(f"Unknown parameter groups: {sorted(unknown)}", {"known": sorted(groups)})
    return {id(t) for name in names for t in groups[name]}


@dataclass
class LossRow:
    epoch: int
    train_loss: float
    val_loss: Optional[float]


@dataclass
class TrainingResult:
    """Trained model (restored to its best epoch) plus the full loss curve"""
    model: ITrainableCorrector
    loss_curve: List[LossRow]
    best_epoch: int
    epochs_run: int
    stopped_early: bool
    seconds: float
    epochs_to_target: Optional[int] = None
    frozen_groups: List[str] = field(default_factory=list)

    @property
    def final_train_loss(self) -> float:
        return self.loss_curve[-1].train_loss

    @property
    def best_val_loss(self) -> Optional[float]:
        return self.loss_curve[self.best_epoch].val_loss

    def loss_frame(self) -> pd.DataFrame:
        return pd.DataFrame([[r.epoch, r.train_loss, r.val_loss] for r in self.loss_curve],
                            columns=LOSS_CURVE_COLUMNS)


def write_loss_curve(result: TrainingResult, path) -> None:
    result.loss_frame().to_csv(path, index=False)


def evaluate_loss(model: ITrainableCorrector, dataset: Optional[NormalizedDataset], batch_size: int) -> Optional[float]:
    """Inference-mode MSE averaged over all samples"""
    if dataset is None or len(dataset) == 0:
        return None
    total = 0.0
    for start in range(0, len(dataset), batch_size):
        pred = model.forward(Tensor(dataset.forecast[start:start + batch_size]), training=False).data
        err = pred - dataset.truth[start:start + batch_size]
        total += float(np.sum(err * err))
    return total / dataset.truth.size


def _snapshot(model):
    return model.state() if hasattr(model, "state") else [p.data.copy() for p in model.parameters()]


def _restore(model, snapshot):
    if hasattr(model, "load_state"):
        model.load_state(snapshot)
    else:
        for p, values in zip(model.parameters(), snapshot):
            p.assign(values)


def train(model: ITrainableCorrector, dataset: NormalizedDataset, config: TrainConfig,
          normalizer: Optional[INormalizer] = None, validation: Optional[NormalizedDataset] = None,
          target_loss: Optional[float] = None, monitor: Optional[PerformanceMonitor] = None,
          run_id: str = "train", frozen_groups: Sequence[str] = ()) -> TrainingResult:
    """Train in place and return the model restored to its best epoch.

    The last training year is held out for validation unless ``validation``
    is given or ``hold_out_last_year`` is off. Epoch 0 of the curve is the
    untrained model.
    """
    if len(dataset) == 0:
        raise ContractError("Training dataset is empty")
    if validation is None and config.hold_out_last_year:
        train_set, val_set = dataset.hold_out_last_year()
    else:
        train_set, val_set = dataset, validation

    frozen = resolve_frozen(model, frozen_groups or config.freeze_spec)
    norm_group = model.parameter_groups().get("norm", [])
    # a frozen norm group also keeps its running statistics
    hold_stats = (hasattr(model, "freeze_running_stats") and bool(norm_group)
                  and all(id(t) in frozen for t in norm_group))
    params = model.parameters()
    adam = AdamState.create(params)
    rng = np.random.default_rng(config.seed)
    started = time.perf_counter()

    curve = [LossRow(0, evaluate_loss(model, train_set, config.batch_size),
                     evaluate_loss(model, val_set, config.batch_size))]

    def score(row: LossRow) -> float:
        return row.val_loss if row.val_loss is not None else row.train_loss

    best_score, best_epoch, best_state = score(curve[0]), 0, _snapshot(model)
    epochs_to_target = 0 if target_loss is not None and best_score <= target_loss else None
    stale, stopped_early = 0, False

    if hold_stats:
        model.freeze_running_stats = True
    try:
        for epoch in range(1, config.epochs + 1):
            epoch_start = time.perf_counter()
            order = rng.permutation(len(train_set))
            total = 0.0
            for batch, start in enumerate(range(0, len(train_set), config.batch_size)):
                idx = order[start:start + config.batch_size]
                with Tape():
                    pred = model.forward(Tensor(train_set.forecast[idx]), training=True)
                    loss = mse_loss(pred, Tensor(train_set.truth[idx]))
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericFault("Training loss is not finite", {"epoch": epoch, "batch": batch})
                backward(loss, params)
                adam_step(params, adam, config, frozen)
                total += value * idx.size

            row = LossRow(epoch, total / len(train_set), evaluate_loss(model, val_set, config.batch_size))
            curve.append(row)
            seconds = time.perf_counter() - epoch_start
            logger.info("epoch %d train %.6g val %s (%.2fs)", epoch, row.train_loss,
                        "-" if row.val_loss is None else f"{row.val_loss:.6g}", seconds)
            if monitor is not None:
                monitor.record_epoch(run_id, epoch, seconds, len(train_set), row.train_loss, row.val_loss)

            current = score(row)
            if epochs_to_target is None and target_loss is not None and current <= target_loss:
                epochs_to_target = epoch
            if current < best_score:
                best_score, best_epoch, best_state, stale = current, epoch, _snapshot(model), 0
            else:
                stale += 1
                if stale >= config.patience:
                    stopped_early = True
                    logger.info("early stop after epoch %d (best epoch %d)", epoch, best_epoch)
                    break
    finally:
        if hold_stats:
            model.freeze_running_stats = False

    _restore(model, best_state)
    elapsed = time.perf_counter() - started
    frozen_names = sorted(g for g, ts in model.parameter_groups().items() if ts and all(id(t) in frozen for t in ts))
    if hasattr(model, "metadata"):
        model.metadata.update({
            "epochs_run": len(curve) - 1,
            "best_epoch": best_epoch,
            "loss_curve": [[r.epoch, r.train_loss, r.val_loss] for r in curve],
            "frozen_groups": frozen_names,
        })
    if normalizer is not None and hasattr(model, "clim_reference"):
        model.clim_reference = normalizer.identifier
        model.normalization = normalizer.mode.value
    if monitor is not None:
        monitor.record_run(run_id, elapsed, len(curve) - 1, best_epoch, curve[-1].train_loss, curve[-1].val_loss)
    return TrainingResult(model, curve, best_epoch, len(curve) - 1, stopped_early, elapsed,
                          epochs_to_target, frozen_names)


def finetune(pretrained, dataset: NormalizedDataset, config: TrainConfig,
             normalizer: Optional[INormalizer] = None, validation: Optional[NormalizedDataset] = None,
             target_loss: Optional[float] = None, monitor: Optional[PerformanceMonitor] = None) -> TrainingResult:
    """Copy a pretrained model, freeze groups and train it on a new variable.

    An empty freeze spec freezes the ConvLSTM kernels; ``("none",)`` trains
    everything, which is plain warm-started training.
    """
    state = pretrained if isinstance(pretrained, ModelState) else pretrained.state()
    grid = (state.config.grid_lat, state.config.grid_lon)
    if dataset.forecast.shape[2:] != grid:
        raise ConfigurationError("Fine-tuning data grid does not match the pretrained model",
                                 {"data": dataset.forecast.shape[2:], "model": grid})
    model = ReSAConvLSTM.from_state(state)
    freeze = tuple(config.freeze_spec) or DEFAULT_FINETUNE_FREEZE
    logger.info("fine-tuning with frozen groups %s", list(freeze))
    return train(model, dataset, config, normalizer=normalizer, validation=validation,
                 target_loss=target_loss, monitor=monitor, run_id="finetune", frozen_groups=freeze)
