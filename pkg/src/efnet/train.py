"""Optimization loop, evaluation metrics, and the head-count sweep."""

from __future__ import annotations

import dataclasses
from types import SimpleNamespace

import numpy as np

from .data import InputError, encode_sample, make_batches
from .model import EFNetParams, InternalError, ModelConfig, forward, save_checkpoint
from .model import loss as batch_loss
from .tensor import Tape, Tensor

METRICS_HEADER = "epoch,split,loss,accuracy,macro_f1"
SWEEP_HEADER = "heads,accuracy,macro_f1"


class TrainError(RuntimeError):
    """Optimization aborted, e.g. the loss stopped being finite."""


@dataclasses.dataclass
class OptimizerState:
    """Adaptive-moment descent state; one moment pair per parameter name.

    Accumulators always shape-match their parameters; ``t`` strictly
    increases, one tick per step.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = dataclasses.field(default_factory=dict)
    v: dict = dataclasses.field(default_factory=dict)


@dataclasses.dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    precision: list
    recall: list
    f1: list
    confusion: list

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def adam_step(params: EFNetParams, grads, state: OptimizerState) -> None:
    """Apply one bias-corrected moment update to every named parameter.

    The padding embedding row is re-zeroed afterwards so index 0 never
    drifts away from zero.
    """
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.named_parameters():
        g = grads.get(p)
        if g is None:
            raise InternalError(f"missing gradient for parameter {name}")
        if g.shape != p.data.shape:
            raise InternalError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name} with shape {p.data.shape}"
            )
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        # epsilon sits outside the square root
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.embed.data[0] = 0.0


def _release(params: EFNetParams) -> None:
    # Drop tape links after a step so evaluation forwards (and the next
    # batch's fresh tape) do not keep recording onto a dead tape.
    for _, p in params.named_parameters():
        p.tape = None
        p.node = None


def metrics_from_pairs(truths, predictions) -> EvalReport:
    """Confusion-matrix metrics over the three polarity classes.

    Per-class precision or recall with an empty denominator counts as 0,
    and a zero precision+recall sum gives F1 = 0.
    """
    if len(truths) != len(predictions):
        raise InputError("metrics: truth/prediction length mismatch")
    if len(truths) == 0:
        raise InputError("metrics: empty dataset")
    confusion = [[0, 0, 0], [0, 0, 0], [0, 0, 0]]
    for t, p in zip(truths, predictions):
        confusion[int(t)][int(p)] += 1
    total = len(truths)
    correct = confusion[0][0] + confusion[1][1] + confusion[2][2]
    precision, recall, f1 = [], [], []
    for c in range(3):
        col = confusion[0][c] + confusion[1][c] + confusion[2][c]
        row = confusion[c][0] + confusion[c][1] + confusion[c][2]
        p = confusion[c][c] / col if col else 0.0
        r = confusion[c][c] / row if row else 0.0
        f = 2.0 * p * r / (p + r) if p + r else 0.0
        precision.append(p)
        recall.append(r)
        f1.append(f)
    return EvalReport(
        accuracy=correct / total,
        macro_f1=(f1[0] + f1[1] + f1[2]) / 3.0,
        precision=precision,
        recall=recall,
        f1=f1,
        confusion=confusion,
    )


def evaluate(params: EFNetParams, table, samples, config: ModelConfig) -> EvalReport:
    """Argmax predictions over ``samples`` and score them.

    Samples are encoded one at a time without padding, so evaluation is
    independent of any batching choice.
    """
    if not samples:
        raise InputError("evaluate: empty dataset")
    truths = []
    preds = []
    for sample in samples:
        enc = encode_sample(sample, table, config.max_len, not config.text_only)
        out = forward(enc, params, config, train=False)
        truths.append(enc.label)
        preds.append(int(np.argmax(out.probs.data)))
    return metrics_from_pairs(truths, preds)


def train(params: EFNetParams, table, train_samples, val_samples,
          config: ModelConfig, *, epochs: int, lr: float = 1e-3,
          batch_size: int = 128, checkpoint_path=None, log_path=None,
          on_epoch=None, stop_accuracy=None):
    """Optimize on the train split, scoring the val split once per epoch.

    Appends one metrics row per epoch (train loss with the validation
    accuracy and macro-F1) and retains the checkpoint with the best
    validation accuracy. Returns the best validation report, or None when
    no epoch ran. ``on_epoch``, when given, receives each formatted row;
    ``stop_accuracy`` ends the run early once validation accuracy reaches
    the threshold.
    """
    if epochs < 0:
        raise InputError(f"train: negative epoch count {epochs}")
    rng = np.random.default_rng(config.seed)
    state = OptimizerState(lr=lr)
    batch_cfg = SimpleNamespace(
        batch_size=batch_size, max_len=config.max_len, text_only=config.text_only
    )
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params)
    rows = []
    best = None
    best_accuracy = -1.0
    for epoch in range(1, epochs + 1):
        batches = make_batches(train_samples, table, batch_cfg, rng)
        total = 0.0
        seen = 0
        for at, batch in enumerate(batches):
            tape = Tape()
            for _, p in params.named_parameters():
                tape.watch(p)
            probs = [
                forward(batch.item(i), params, config, train=True, rng=rng).probs
                for i in range(len(batch))
            ]
            value = batch_loss(probs, [int(y) for y in batch.labels], params,
                               config.l2_lambda)
            if not np.isfinite(value.data):
                raise TrainError(f"non-finite loss at epoch {epoch}, batch {at}")
            grads = tape.backward(value)
            adam_step(params, grads, state)
            _release(params)
            total += float(value.data) * len(batch)
            seen += len(batch)
        report = evaluate(params, table, val_samples, config)
        row = (f"{epoch},val,{total / seen:.6f},"
               f"{report.accuracy:.6f},{report.macro_f1:.6f}")
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if report.accuracy > best_accuracy:
            best_accuracy = report.accuracy
            best = report
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, params)
        if stop_accuracy is not None and report.accuracy >= stop_accuracy:
            break
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write(METRICS_HEADER + "\n")
            for row in rows:
                fh.write(row + "\n")
    return best


def head_sweep(table, train_samples, val_samples, base_config: ModelConfig,
               head_list, *, epochs: int, lr: float = 1e-3,
               batch_size: int = 128, out_path=None, on_epoch=None):
    """Train one model per head count with a shared seed and data.

    Every head count is validated against the model widths before any
    training starts. Returns (heads, accuracy, macro_f1) tuples and
    optionally writes them as a CSV table.
    """
    if not head_list:
        raise InputError("head_sweep: empty head list")
    configs = []
    for h in head_list:
        cfg = dataclasses.replace(base_config, head_count=int(h))
        cfg.validate()
        configs.append(cfg)
    rows = []
    for cfg in configs:
        rng = np.random.default_rng(cfg.seed)
        embed = Tensor(table.matrix.data.copy(), requires_grad=True)
        params = EFNetParams.create(cfg, rng, embed)
        report = train(params, table, train_samples, val_samples, cfg,
                       epochs=epochs, lr=lr, batch_size=batch_size,
                       on_epoch=on_epoch)
        if report is None:
            report = evaluate(params, table, val_samples, cfg)
        rows.append((cfg.head_count, report.accuracy, report.macro_f1))
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(SWEEP_HEADER + "\n")
            for heads, accuracy, macro_f1 in rows:
                fh.write(f"{heads},{accuracy:.6f},{macro_f1:.6f}\n")
    return rows
