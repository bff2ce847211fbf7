"""Training loops: base risk minimization, distillation fine-tuning, and the
Lagrangian-dual fairness fine-tuning.

All loops share one batch schedule (group-stratified, seeded) and one
first-order step, so runs differing only in the objective are directly
comparable.  Networks are immutable; each loop returns a new one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Array, NumericError, Tensor
from .data import GroupedDataset, stratified_batches
from .model import GatedNetwork, logits_graph, plain_logits


class TrainingError(RuntimeError):
    """Non-finite loss or an infeasible training request."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 128
    learning_rate: float = 0.05
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("sgd", "sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class KDConfig:
    temperature: float = 4.0
    distill_weight: float = 0.9

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ValueError("temperature must be > 0")
        if not 0.0 <= self.distill_weight <= 1.0:
            raise ValueError("distill_weight must lie in [0, 1]")


@dataclass
class LagrangianState:
    multipliers: Array
    multiplier_step: float
    epoch: int = 0

    def __post_init__(self):
        self.multipliers = np.asarray(self.multipliers, dtype=np.float64)
        if np.any(self.multipliers < 0.0):
            raise ValueError("multipliers must be nonnegative")
        if self.multiplier_step < 0.0:
            raise ValueError("multiplier_step must be >= 0")


@dataclass
class History:
    """Per-epoch rows of (epoch, split, group, loss, accuracy, lambdas)."""

    group_names: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)

    def record(self, epoch: int, split: str, group: str, loss: float,
               accuracy: float, lambdas: Array | None = None) -> None:
        lam = np.zeros(len(self.group_names)) if lambdas is None else lambdas
        self.rows.append({"epoch": epoch, "split": split, "group": group,
                          "loss": float(loss), "accuracy": float(accuracy),
                          "lambdas": [float(v) for v in lam]})

    def to_csv(self, path: str) -> None:
        import csv
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "split", "group", "loss", "accuracy",
                             *(f"lambda_{g}" for g in self.group_names)])
            for r in self.rows:
                writer.writerow([r["epoch"], r["split"], r["group"],
                                 repr(r["loss"]), repr(r["accuracy"]),
                                 *(repr(v) for v in r["lambdas"])])


# -- losses -------------------------------------------------------------------

def _log_softmax(logits: Array) -> Array:
    z = np.atleast_2d(logits)
    m = z.max(axis=1, keepdims=True)
    return z - (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))


def cross_entropy(logits, y: int) -> float:
    """Negative log softmax probability of the true class."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    return float(-_log_softmax(z)[0, y])


def kd_loss(student_logits, teacher_logits, y: int, kd: KDConfig) -> float:
    """Distillation objective for a single sample.

    distill_weight * T^2 * KL(softmax(teacher/T) || softmax(student/T))
    plus (1 - distill_weight) * cross_entropy(student_logits, y).
    """
    s = student_logits.data if isinstance(student_logits, Tensor) else np.asarray(student_logits, dtype=np.float64)
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError("student and teacher logits must have equal length")
    T = kd.temperature
    log_pt = _log_softmax(t / T)
    log_ps = _log_softmax(s / T)
    kl = float((np.exp(log_pt) * (log_pt - log_ps)).sum())
    return kd.distill_weight * T * T * kl + (1.0 - kd.distill_weight) * cross_entropy(s, y)


def _onehot(y: Array, num_classes: int) -> Array:
    out = np.zeros((len(y), num_classes))
    out[np.arange(len(y)), y] = 1.0
    return out


def _ce_persample_graph(logits: Tensor, y: Array, num_classes: int) -> Tensor:
    lse = ad.logsumexp(logits, axis=1)
    picked = ad.tsum(ad.mul(logits, Tensor(_onehot(y, num_classes))), axis=1)
    return ad.sub(lse, picked)


def _kd_persample_graph(student_logits: Tensor, teacher_logits: Array, y: Array,
                        num_classes: int, kd: KDConfig) -> Tensor:
    T = kd.temperature
    log_pt = _log_softmax(np.asarray(teacher_logits) / T)
    pt = np.exp(log_pt)
    scaled = ad.mul(student_logits, Tensor(1.0 / T))
    log_ps = ad.sub(scaled, ad.logsumexp(scaled, axis=1, keepdims=True))
    kl = ad.tsum(ad.mul(Tensor(pt), ad.sub(Tensor(log_pt), log_ps)), axis=1)
    ce = _ce_persample_graph(student_logits, y, num_classes)
    return ad.add(ad.mul(Tensor(kd.distill_weight * T * T), kl),
                  ad.mul(Tensor(1.0 - kd.distill_weight), ce))


def _kd_persample_values(student: GatedNetwork, teacher: GatedNetwork,
                         ds: GroupedDataset, kd: KDConfig) -> Array:
    """Graph-free per-sample KD losses (for multiplier updates and history)."""
    s = plain_logits(student, ds.features)
    t = plain_logits(teacher, ds.features)
    T = kd.temperature
    log_pt = _log_softmax(t / T)
    log_ps = _log_softmax(s / T)
    kl = (np.exp(log_pt) * (log_pt - log_ps)).sum(axis=1)
    ce = -np.take_along_axis(_log_softmax(s), ds.labels[:, None], axis=1)[:, 0]
    return kd.distill_weight * T * T * kl + (1.0 - kd.distill_weight) * ce


# -- shared loop machinery ----------------------------------------------------

class _Stepper:
    """First-order update rule over the flat parameter vector."""

    def __init__(self, cfg: TrainConfig, dim: int):
        self.cfg = cfg
        self.v = np.zeros(dim)
        self.m = np.zeros(dim)
        self.t = 0

    def step(self, theta: Array, g: Array) -> Array:
        cfg = self.cfg
        if cfg.optimizer == "sgd":
            return theta - cfg.learning_rate * g
        if cfg.optimizer == "sgd_momentum":
            self.v = cfg.momentum * self.v + g
            return theta - cfg.learning_rate * self.v
        self.t += 1
        self.m = cfg.adam_beta1 * self.m + (1.0 - cfg.adam_beta1) * g
        self.v = cfg.adam_beta2 * self.v + (1.0 - cfg.adam_beta2) * g * g
        mhat = self.m / (1.0 - cfg.adam_beta1 ** self.t)
        vhat = self.v / (1.0 - cfg.adam_beta2 ** self.t)
        return theta - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)


def _batches(ds: GroupedDataset, cfg: TrainConfig, rng: np.random.Generator) -> list[Array]:
    if cfg.shuffle:
        return stratified_batches(ds.groups, cfg.batch_size, rng)
    n = len(ds)
    return [np.arange(s, min(s + cfg.batch_size, n)) for s in range(0, n, cfg.batch_size)]


def mean_loss_and_accuracy(net: GatedNetwork, ds: GroupedDataset,
                           indices: Array | None = None) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over the rows (all by default)."""
    idx = np.arange(len(ds)) if indices is None else np.asarray(indices)
    logits = plain_logits(net, ds.features[idx])
    y = ds.labels[idx]
    ce = -np.take_along_axis(_log_softmax(logits), y[:, None], axis=1)[:, 0]
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    return float(ce.mean()), acc


def _record_epoch(history: History | None, net: GatedNetwork, ds: GroupedDataset,
                  epoch: int, lambdas: Array | None = None,
                  kd_values: Array | None = None) -> None:
    if history is None:
        return
    loss, acc = mean_loss_and_accuracy(net, ds)
    if kd_values is not None:
        loss = float(kd_values.mean())
    history.record(epoch, "train", "global", loss, acc, lambdas)
    for a, name in enumerate(ds.group_names):
        rows = ds.group_indices(a)
        loss_a, acc_a = mean_loss_and_accuracy(net, ds, rows)
        if kd_values is not None:
            loss_a = float(kd_values[rows].mean())
        history.record(epoch, "train", name, loss_a, acc_a, lambdas)


# -- public training entry points ----------------------------------------------

def train_base(net: GatedNetwork, data: GroupedDataset,
               cfg: TrainConfig) -> tuple[GatedNetwork, History]:
    """Mini-batch training of weights and biases on mean cross-entropy."""
    if net.gate_mode != "frozen":
        raise TrainingError("train_base expects frozen gates")
    history = History(data.group_names)
    if cfg.epochs == 0:
        return net.copy(), history
    theta = net.params_flat()
    gates = Tensor(net.gates_flat())
    stepper = _Stepper(cfg, theta.size)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    shape = net.shape
    x_all, y_all = data.features, data.labels
    for epoch in range(cfg.epochs):
        for bi, idx in enumerate(_batches(data, cfg, rng)):
            def objective(t: Tensor) -> Tensor:
                logits = logits_graph(t, gates, shape, Tensor(x_all[idx]))
                return ad.mean(_ce_persample_graph(logits, y_all[idx], shape.num_classes))

            try:
                g = ad.grad(objective, theta)
            except NumericError as err:
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {bi}: {err}") from err
            theta = stepper.step(theta, g)
        _record_epoch(history, net.with_params(theta), data, epoch)
    return net.with_params(theta), history


def polish(net: GatedNetwork, data: GroupedDataset, tol: float = 1e-3,
           max_steps: int = 5000, learning_rate: float = 0.01) -> tuple[GatedNetwork, float]:
    """Full-batch descent on mean cross-entropy until ||grad|| < tol.

    Mini-batch training stalls at a gradient-noise floor, but stationarity
    statements (e.g. the group decomposition of the global gradient) only
    bite once the full-batch gradient is actually small.  Adam steps with
    the learning rate halved every 400 steps without a new best norm.
    Returns the best iterate and its gradient norm; the caller decides
    whether the norm is small enough.
    """
    if net.gate_mode != "frozen":
        raise TrainingError("polish expects frozen gates")
    theta = net.params_flat()
    gates = Tensor(net.gates_flat())
    shape = net.shape
    x, y = data.features, data.labels

    def objective(t: Tensor) -> Tensor:
        logits = logits_graph(t, gates, shape, Tensor(x))
        return ad.mean(_ce_persample_graph(logits, y, shape.num_classes))

    cfg = TrainConfig(epochs=1, learning_rate=learning_rate, optimizer="adam")
    stepper = _Stepper(cfg, theta.size)
    best_theta, best_norm, since_best = theta, np.inf, 0
    for _ in range(max_steps):
        try:
            g = ad.grad(objective, theta)
        except NumericError as err:
            raise TrainingError(f"non-finite loss during polish: {err}") from err
        norm = float(np.linalg.norm(g))
        if norm < best_norm:
            best_theta, best_norm, since_best = theta, norm, 0
        else:
            since_best += 1
            if since_best >= 400:
                cfg = TrainConfig(epochs=1, optimizer="adam",
                                  learning_rate=max(cfg.learning_rate / 2.0, 1e-5))
                stepper.cfg = cfg
                since_best = 0
        if norm < tol:
            break
        theta = stepper.step(theta, g)
    return net.with_params(best_theta), best_norm


def finetune_kd(student: GatedNetwork, teacher: GatedNetwork, data: GroupedDataset,
                cfg: TrainConfig, kd: KDConfig,
                history: History | None = None) -> GatedNetwork:
    """Distillation fine-tuning of the student against a fixed teacher."""
    out, _ = _finetune(student, teacher, data, cfg, kd, mu=0.0, fair=False,
                       history=history)
    return out


def finetune_fair(student: GatedNetwork, teacher: GatedNetwork, data: GroupedDataset,
                  cfg: TrainConfig, kd: KDConfig, mu: float,
                  history: History | None = None) -> tuple[GatedNetwork, Array]:
    """Distillation fine-tuning with the Lagrangian group-loss penalty.

    Multipliers start at zero; each mini-batch step descends the KD loss plus
    lambda . rho where rho_a is the absolute gap between the batch KD loss and
    the group-a batch KD loss (0 for groups absent from the batch).  After
    every epoch each multiplier grows by mu times the same gap measured on the
    full training set.  Returns the fine-tuned network and the (epochs+1) x M
    multiplier trajectory, initial zeros included.
    """
    if mu < 0.0:
        raise TrainingError("mu must be nonnegative")
    return _finetune(student, teacher, data, cfg, kd, mu=mu, fair=True,
                     history=history)


def _finetune(student: GatedNetwork, teacher: GatedNetwork, data: GroupedDataset,
              cfg: TrainConfig, kd: KDConfig, mu: float, fair: bool,
              history: History | None) -> tuple[GatedNetwork, Array]:
    if student.shape != teacher.shape:
        raise TrainingError("student and teacher must share a NetworkShape")
    if student.gate_mode != "frozen" or teacher.gate_mode != "frozen":
        raise TrainingError("fine-tuning expects frozen gates on both networks")
    missing = [data.group_names[a] for a in range(data.num_groups)
               if len(data.group_indices(a)) == 0]
    if missing:
        raise TrainingError(f"groups absent from the training set: {missing}")

    num_groups = data.num_groups
    lambdas = np.zeros(num_groups)
    trajectory = [lambdas.copy()]
    theta = student.params_flat()
    teacher_before = teacher.params_flat()
    gates = Tensor(student.gates_flat())
    shape = student.shape
    stepper = _Stepper(cfg, theta.size)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    x_all, y_all, groups_all = data.features, data.labels, data.groups

    for epoch in range(cfg.epochs):
        for bi, idx in enumerate(_batches(data, cfg, rng)):
            # Order the batch by group so each group is a contiguous slice.
            idx = idx[np.argsort(groups_all[idx], kind="stable")]
            bgroups = groups_all[idx]
            teacher_logits = plain_logits(teacher, x_all[idx])

            def objective(t: Tensor) -> Tensor:
                logits = logits_graph(t, gates, shape, Tensor(x_all[idx]))
                per = _kd_persample_graph(logits, teacher_logits, y_all[idx],
                                          shape.num_classes, kd)
                total = ad.mean(per)
                if not fair:
                    return total
                penalty = Tensor(0.0)
                for a in range(num_groups):
                    lo = int(np.searchsorted(bgroups, a, side="left"))
                    hi = int(np.searchsorted(bgroups, a, side="right"))
                    if lo == hi:
                        continue
                    gap = ad.absolute(ad.sub(total, ad.mean(ad.segment(per, lo, hi))))
                    penalty = ad.add(penalty, ad.mul(Tensor(lambdas[a]), gap))
                return ad.add(total, penalty)

            try:
                g = ad.grad(objective, theta)
            except NumericError as err:
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {bi}: {err}") from err
            theta = stepper.step(theta, g)

        current = student.with_params(theta)
        kd_values = _kd_persample_values(current, teacher, data, kd)
        if fair:
            overall = kd_values.mean()
            for a in range(num_groups):
                rows = data.group_indices(a)
                lambdas[a] += mu * abs(overall - kd_values[rows].mean())
            trajectory.append(lambdas.copy())
        _record_epoch(history, current, data, epoch,
                      lambdas if fair else None, kd_values)

    if not np.array_equal(teacher.params_flat(), teacher_before):
        raise TrainingError("teacher parameters changed during fine-tuning")
    return student.with_params(theta), np.asarray(trajectory)
