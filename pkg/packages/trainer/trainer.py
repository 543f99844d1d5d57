import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import BEST_CHECKPOINT_NAME, LAST_CHECKPOINT_NAME, METRICS_FILE_NAME
from packages.data_storage.bag_io import Bag
from packages.data_storage.manifest import Manifest, load_split_bags
from packages.experts.routing import average_stats, load_balance_loss
from packages.helpers.errors import ContractError, DataIOError, NumericError
from packages.model.moe_mamba_mil import ForwardOutput, MoEMambaMILModel, forward
from packages.numerics import functional as F
from packages.numerics.tensor import Tensor, no_grad
from packages.trainer.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from packages.trainer.metrics import METRIC_NAMES, compute_metrics
from packages.trainer.optimizer import OptimizerState, adam_step, init_state
from packages.trainer.train_config import TrainConfig

logger = logging.getLogger("Trainer")


def loss_terms(out: ForwardOutput, label: int, lambda_balance: float, n_experts: int) -> Tuple[Tensor, Tensor, Tensor]:
    """(total, task, balance); with lambda 0 the total is the task loss itself."""
    task = F.cross_entropy(out.logits, label)
    balance = load_balance_loss(out.moe_stats, n_experts)
    if lambda_balance == 0:
        return task, task, balance
    return F.add(task, F.scale(balance, lambda_balance)), task, balance


def total_loss(out: ForwardOutput, label: int, lambda_balance: float) -> Tensor:
    n_experts = out.moe_stats[0].importance.shape[0]
    total, _, _ = loss_terms(out, label, lambda_balance, n_experts)
    return total


@dataclass
class EvalResult:
    labels: np.ndarray
    probs: np.ndarray
    loss_task: float
    loss_balance: float
    expert_stats: np.ndarray          # [2, E]: importance, load


def evaluate(model: MoEMambaMILModel, bags: Sequence[Bag]) -> EvalResult:
    if not bags:
        raise ContractError("cannot evaluate on an empty set of bags")
    n_experts = model.config.effective_experts
    labels, probs, task_losses, balance_losses, stats = [], [], [], [], []
    with no_grad():
        for bag in bags:
            out = forward(model, bag)
            _, task, balance = loss_terms(out, bag.label, 0.0, n_experts)
            labels.append(bag.label)
            probs.append(out.probs.astype(np.float64))
            task_losses.append(task.item())
            balance_losses.append(balance.item())
            stats.append(average_stats(out.moe_stats))
    return EvalResult(labels=np.asarray(labels), probs=np.stack(probs), loss_task=float(np.mean(task_losses)),
                      loss_balance=float(np.mean(balance_losses)), expert_stats=np.mean(stats, axis=0))


def metrics_row(epoch: int, split: str, result: EvalResult, n_classes: int) -> Dict[str, Any]:
    report = compute_metrics(result.labels, result.probs, n_classes)
    row = {"epoch": epoch, "split": split, "loss_task": result.loss_task, "loss_balance": result.loss_balance}
    row.update(report.to_dict())
    for e, value in enumerate(result.expert_stats[0]):
        row[f"imp_{e}"] = float(value)
    for e, value in enumerate(result.expert_stats[1]):
        row[f"load_{e}"] = float(value)
    return row


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: pd.DataFrame
    best_f1: float
    best_epoch: int
    epoch_losses: List[float] = field(default_factory=list)


def _snapshot(model: MoEMambaMILModel, st: OptimizerState, cfg: TrainConfig, epoch: int,
              rng: np.random.Generator, best_f1: float, best_epoch: int, history: List[Dict[str, Any]]) -> Checkpoint:
    return Checkpoint(
        model_config=model.config,
        params=model.state_dict(),
        optimizer=OptimizerState(step=st.step, m={k: v.copy() for k, v in st.m.items()},
                                 v={k: v.copy() for k, v in st.v.items()}),
        train_config=cfg.to_dict(),
        epoch=epoch,
        rng_state=rng.bit_generator.state,
        best_f1=best_f1,
        best_epoch=best_epoch,
        history=[dict(row) for row in history],
    )


def _resumed_best(ckpt: Checkpoint, resume_from: str) -> Optional[Checkpoint]:
    """The best-so-far state of a resumed run: the checkpoint itself or the best.mckp saved beside it."""
    if ckpt.best_epoch == ckpt.epoch:
        return ckpt
    best_path = os.path.join(os.path.dirname(resume_from), BEST_CHECKPOINT_NAME)
    if os.path.exists(best_path):
        best = load_checkpoint(best_path)
        if best.epoch == ckpt.best_epoch:
            return best
    logger.warning(f"No checkpoint of best epoch {ckpt.best_epoch} next to {resume_from}; "
                   f"the final state stands in unless a later epoch improves")
    return None


def fit(model: MoEMambaMILModel, train_bags: Sequence[Bag], val_bags: Sequence[Bag], cfg: TrainConfig,
        out_dir: Optional[str] = None, resume_from: Optional[str] = None) -> TrainResult:
    """
    Batch-1 Adam training with per-epoch validation.

    Each epoch visits the training bags in a seeded random order, appends a
    ``train`` and a ``val`` row to the metrics history and keeps the state
    with the best validation macro-F1. With ``out_dir`` the metrics CSV,
    ``last.mckp`` and ``best.mckp`` are written there after every epoch.
    """
    if not train_bags:
        raise ContractError("the training split is empty")
    n_experts = model.config.effective_experts
    n_classes = model.config.n_classes
    params = dict(model.named_parameters())
    rng = np.random.default_rng(cfg.seed)
    st = init_state(params.items())
    history: List[Dict[str, Any]] = []
    best_f1, best_epoch, start_epoch = float("-inf"), 0, 0
    best_ckpt: Optional[Checkpoint] = None

    if resume_from:
        ckpt = load_checkpoint(resume_from)
        model.load_state_dict(ckpt.params)
        st = OptimizerState(step=ckpt.optimizer.step, m={k: v.copy() for k, v in ckpt.optimizer.m.items()},
                            v={k: v.copy() for k, v in ckpt.optimizer.v.items()})
        rng.bit_generator.state = ckpt.rng_state
        history = list(ckpt.history)
        best_f1, best_epoch, start_epoch = ckpt.best_f1, ckpt.best_epoch, ckpt.epoch
        best_ckpt = _resumed_best(ckpt, resume_from)
        logger.info(f"Resuming from {resume_from} after epoch {start_epoch} (step {st.step})")

    epoch_losses = []
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        order = rng.permutation(len(train_bags))
        task_losses, balance_losses, probs, labels, stats = [], [], [], [], []
        for i in order:
            bag = train_bags[int(i)]
            out = forward(model, bag)
            total, task, balance = loss_terms(out, bag.label, cfg.lambda_balance, n_experts)
            if not np.isfinite(total.item()):
                logger.error(f"Non-finite loss on slide {bag.slide_id} in epoch {epoch}")
                raise NumericError(f"non-finite loss on slide {bag.slide_id} in epoch {epoch}")
            model.zero_grad()
            total.backward()
            adam_step(params, st, cfg)
            task_losses.append(task.item())
            balance_losses.append(balance.item())
            probs.append(out.probs.astype(np.float64))
            labels.append(bag.label)
            stats.append(average_stats(out.moe_stats))
            logger.debug(f"epoch {epoch} step {st.step} slide {bag.slide_id}: loss {total.item():.5f}")

        train_result = EvalResult(labels=np.asarray(labels), probs=np.stack(probs),
                                  loss_task=float(np.mean(task_losses)), loss_balance=float(np.mean(balance_losses)),
                                  expert_stats=np.mean(stats, axis=0))
        history.append(metrics_row(epoch, "train", train_result, n_classes))
        selection = history[-1]
        if val_bags:
            history.append(metrics_row(epoch, "val", evaluate(model, val_bags), n_classes))
            selection = history[-1]
        epoch_losses.append(train_result.loss_task + cfg.lambda_balance * train_result.loss_balance)
        logger.info(f"Epoch {epoch}/{cfg.epochs}: train loss {train_result.loss_task:.4f}, "
                    f"{selection['split']} F1 {selection['f1']:.4f}, ACC {selection['acc']:.4f}")

        improved = selection["f1"] > best_f1
        if improved:
            best_f1, best_epoch = selection["f1"], epoch
        last = _snapshot(model, st, cfg, epoch, rng, best_f1, best_epoch, history)
        if improved:
            best_ckpt = last
        if out_dir:
            save_checkpoint(last, os.path.join(out_dir, LAST_CHECKPOINT_NAME))
            if improved:
                save_checkpoint(last, os.path.join(out_dir, BEST_CHECKPOINT_NAME))
            write_history(history, os.path.join(out_dir, METRICS_FILE_NAME))

    if best_ckpt is None:
        best_ckpt = _snapshot(model, st, cfg, max(start_epoch, cfg.epochs), rng, best_f1, best_epoch, history)
    logger.info(f"Training finished; best {('val' if val_bags else 'train')} F1 {best_f1:.4f} at epoch {best_epoch}")
    return TrainResult(checkpoint=best_ckpt, history=pd.DataFrame(history), best_f1=best_f1,
                       best_epoch=best_epoch, epoch_losses=epoch_losses)


def train(model: MoEMambaMILModel, manifest: Manifest, cfg: TrainConfig, out_dir: Optional[str] = None,
          resume_from: Optional[str] = None) -> TrainResult:
    train_bags = load_split_bags(manifest, "train")
    val_bags = load_split_bags(manifest, "val")
    logger.info(f"Training {model.config.variant} on {len(train_bags)} bags, validating on {len(val_bags)}")
    return fit(model, train_bags, val_bags, cfg, out_dir=out_dir, resume_from=resume_from)


def write_history(history: List[Dict[str, Any]], path: str) -> None:
    columns = ["epoch", "split", "loss_task", "loss_balance", *METRIC_NAMES]
    df = pd.DataFrame(history)
    df = df[columns + [c for c in df.columns if c not in columns]]
    try:
        df.to_csv(path, index=False)
    except OSError as e:
        logger.error(f"Could not write metrics {path}: {e}")
        raise DataIOError(f"could not write metrics {path}: {e}") from e
