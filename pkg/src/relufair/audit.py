"""Fairness measurement and curvature-bound verification.

Per-group accuracy, loss, gradient norms and Hessian sharpness; the
second-order residual-loss bound; the boundary-proximity decomposition of
the group Hessian for binary soft classifiers; and first-order decision
boundary distances.  Everything here is read-only over models and data.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array, ParameterVector, PowerIterationResult, Tensor
from .data import GroupedDataset
from .model import (GatedNetwork, checkpoint_document, checkpoint_hash,
                    logits_graph, mean_cross_entropy_graph, parameter_distance,
                    plain_logits)
from .trainer import _log_softmax


class AuditError(RuntimeError):
    """Violated precondition or a mathematically impossible measurement."""


class BoundViolation(AuditError):
    """A bound that must hold analytically failed numerically."""


# -- eigenvalue helpers -------------------------------------------------------

def lambda_extremes(hvp_oracle, dim: int, tol: float = 1e-6, max_iters: int = 500,
                    seed: int = 0) -> tuple[float, bool]:
    """Largest (signed) eigenvalue of a symmetric operator, and convergence.

    Plain power iteration finds the largest-magnitude eigenvalue; when that
    is negative the operator is re-run shifted by its magnitude, turning the
    largest eigenvalue into the dominant one of H + |lambda| I.
    """
    first = ad.max_eigenvalue(hvp_oracle, dim, tol=tol, max_iters=max_iters, seed=seed)
    if not first.negative_dominant:
        return first.value, first.converged
    shift = abs(first.value)
    shifted = ad.max_eigenvalue(lambda v: hvp_oracle(v) + shift * v, dim,
                                tol=tol, max_iters=max_iters, seed=seed)
    return shifted.value - shift, first.converged and shifted.converged


def lambda_abs(hvp_oracle, dim: int, tol: float = 1e-6, max_iters: int = 500,
               seed: int = 0) -> tuple[float, bool]:
    """Largest absolute eigenvalue via power iteration on the squared operator.

    H^2 is positive semidefinite, so the iteration is free of the +/- lambda
    oscillation that stalls plain power iteration on symmetric spectra.
    """
    sq = ad.max_eigenvalue(lambda v: hvp_oracle(hvp_oracle(v)), dim,
                           tol=tol, max_iters=max_iters, seed=seed)
    return float(np.sqrt(max(sq.value, 0.0))), sq.converged


# -- per-group measurement ----------------------------------------------------

@dataclass(frozen=True)
class GroupMetrics:
    """Parallel per-group records; index order follows data.group_names."""

    group_names: tuple[str, ...]
    sizes: tuple[int, ...]
    accuracies: tuple[float, ...]
    losses: tuple[float, ...]
    grad_norms: tuple[float, ...]
    hessian_lambdas: tuple[float, ...]
    hessian_converged: tuple[bool, ...]
    boundary_distances: tuple[float, ...]

    def __post_init__(self):
        for a in self.accuracies:
            if not 0.0 <= a <= 1.0:
                raise AuditError(f"accuracy {a} outside [0, 1]")

    def row(self, a: int) -> dict:
        return {
            "group": self.group_names[a],
            "size": self.sizes[a],
            "accuracy": self.accuracies[a],
            "loss": self.losses[a],
            "grad_norm": self.grad_norms[a],
            "hessian_lambda": self.hessian_lambdas[a],
            "hessian_converged": self.hessian_converged[a],
            "mean_boundary_distance": self.boundary_distances[a],
        }


def _ce_values(net: GatedNetwork, ds: GroupedDataset, idx: Array) -> Array:
    logits = plain_logits(net, ds.features[idx])
    return -np.take_along_axis(_log_softmax(logits), ds.labels[idx][:, None], axis=1)[:, 0]


def _group_loss_graph(net: GatedNetwork, ds: GroupedDataset, idx: Array):
    """Objective builder: mean cross-entropy of the group as a graph of theta."""
    x, y = ds.features[idx], ds.labels[idx]
    gates = Tensor(net.gates_flat())

    def objective(theta: Tensor) -> Tensor:
        return mean_cross_entropy_graph(theta, gates, net.shape, x, y)

    return objective


def group_gradient_norm(net: GatedNetwork, ds: GroupedDataset, a: int) -> float:
    """Euclidean norm of the gradient of the group-a mean loss."""
    idx = ds.group_indices(a)
    if len(idx) == 0:
        raise AuditError(f"group {ds.group_names[a]!r} is empty")
    g = ad.grad(_group_loss_graph(net, ds, idx), net.params_flat())
    return float(np.linalg.norm(g))


def group_hessian_lambda(net: GatedNetwork, ds: GroupedDataset, a: int,
                         tol: float = 1e-6, max_iters: int = 500,
                         seed: int = 0) -> tuple[float, bool]:
    """Largest eigenvalue of the group-a loss Hessian (matrix-free)."""
    idx = ds.group_indices(a)
    if len(idx) == 0:
        raise AuditError(f"group {ds.group_names[a]!r} is empty")
    theta = net.params_flat()
    objective = _group_loss_graph(net, ds, idx)
    return lambda_extremes(lambda v: ad.hvp(objective, theta, v), theta.size,
                           tol=tol, max_iters=max_iters, seed=seed)


def group_metrics(net: GatedNetwork, data: GroupedDataset, loss: str = "cross_entropy",
                  compute_hessian: bool = True,
                  compute_boundary: bool = True) -> GroupMetrics:
    """Deterministic per-group evaluation at the current parameters."""
    if loss != "cross_entropy":
        raise AuditError(f"unsupported loss {loss!r}")
    pred = np.argmax(plain_logits(net, data.features), axis=1)
    names, sizes, accs, losses, gnorms, hlam, hconv, bdist = [], [], [], [], [], [], [], []
    if compute_boundary:
        dists, _ = boundary_distances(net, data.features, data.labels)
    for a, name in enumerate(data.group_names):
        idx = data.group_indices(a)
        if len(idx) == 0:
            raise AuditError(f"group {name!r} is empty")
        names.append(name)
        sizes.append(int(len(idx)))
        accs.append(float(np.mean(pred[idx] == data.labels[idx])))
        losses.append(float(_ce_values(net, data, idx).mean()))
        gnorms.append(group_gradient_norm(net, data, a))
        if compute_hessian:
            lam, conv = group_hessian_lambda(net, data, a)
        else:
            lam, conv = float("nan"), False
        hlam.append(lam)
        hconv.append(conv)
        finite = np.isfinite(dists[idx]) if compute_boundary else np.array([False])
        bdist.append(float(dists[idx][finite].mean()) if compute_boundary and finite.any()
                     else float("nan"))
    if sum(sizes) != len(data):
        raise AuditError("group sizes do not partition the dataset")
    return GroupMetrics(tuple(names), tuple(sizes), tuple(accs), tuple(losses),
                        tuple(gnorms), tuple(hlam), tuple(hconv), tuple(bdist))


def relative_accuracy_drop(base_acc: float, new_acc: float) -> float:
    """Percent drop (base - new) / base * 100; negative means improvement."""
    if base_acc <= 0.0:
        raise AuditError("relative drop undefined for base accuracy <= 0")
    return (base_acc - new_acc) / base_acc * 100.0


def residual_loss(original: GatedNetwork, linearized: GatedNetwork,
                  group_data: GroupedDataset, loss: str = "cross_entropy") -> float:
    """Mean group loss of the linearized model minus that of the original."""
    if loss != "cross_entropy":
        raise AuditError(f"unsupported loss {loss!r}")
    if original.shape != linearized.shape:
        raise AuditError("networks must share a NetworkShape")
    if len(group_data) == 0:
        raise AuditError("empty group")
    idx = np.arange(len(group_data))
    return float(_ce_values(linearized, group_data, idx).mean()
                 - _ce_values(original, group_data, idx).mean())


# -- second-order residual bound ----------------------------------------------

def taylor_bound_objective(objective, theta: ParameterVector,
                           theta_tilde: ParameterVector, tol: float = 1e-6,
                           max_iters: int = 500, seed: int = 0) -> dict:
    """Bound terms for an explicit objective f(theta) -> scalar graph.

    lhs is f(theta_tilde) - f(theta); the right side expands around theta:
    ||grad|| * ||delta|| + 0.5 * lambda_max(H) * ||delta||^2.
    """
    theta = np.asarray(theta, dtype=np.float64)
    theta_tilde = np.asarray(theta_tilde, dtype=np.float64)
    delta = float(np.linalg.norm(theta_tilde - theta))
    lhs = float(objective(Tensor(theta_tilde)).item() - objective(Tensor(theta)).item())
    gnorm = float(np.linalg.norm(ad.grad(objective, theta)))
    lam, converged = lambda_extremes(lambda v: ad.hvp(objective, theta, v),
                                     theta.size, tol=tol, max_iters=max_iters, seed=seed)
    linear = gnorm * delta
    quadratic = 0.5 * lam * delta * delta
    return {
        "lhs": lhs,
        "grad_norm": gnorm,
        "hessian_lambda": lam,
        "param_distance": delta,
        "rhs_linear_term": linear,
        "rhs_quadratic_term": quadratic,
        "rhs_total": linear + quadratic,
        "reliable": converged,
    }


def taylor_bound(original: GatedNetwork, linearized: GatedNetwork,
                 group_data: GroupedDataset, loss: str = "cross_entropy") -> dict:
    """Residual-loss bound for one group: R(a) vs gradient/sharpness terms.

    The expansion is taken at the original parameters; the linearized model
    enters only through the parameter displacement and the left side.  Gates
    are the original model's (the loss surface being expanded is the original
    network's), so the bound speaks about parameter movement, not the gate
    swap itself.
    """
    if loss != "cross_entropy":
        raise AuditError(f"unsupported loss {loss!r}")
    if original.shape != linearized.shape:
        raise AuditError("networks must share a NetworkShape")
    if len(group_data) == 0:
        raise AuditError("empty group")
    idx = np.arange(len(group_data))
    objective = _group_loss_graph(original, group_data, idx)
    return taylor_bound_objective(objective, original.params_flat(),
                                  linearized.params_flat())


# -- binary boundary-proximity bound -------------------------------------------

def _score_graph(theta: Tensor, net: GatedNetwork, x: Array) -> Tensor:
    """Pre-sigmoid score s(x) = logit_1 - logit_0 as a graph of theta."""
    logits = logits_graph(theta, Tensor(net.gates_flat()), net.shape,
                          Tensor(np.atleast_2d(x)))
    n = logits.shape[0]
    flat = ad.reshape(ad.transpose(logits), (2 * n,))
    return ad.sub(ad.segment(flat, n, 2 * n), ad.segment(flat, 0, n))


def hessian_bound_z1z2(net: GatedNetwork, group_data: GroupedDataset,
                       tol: float = 1e-6, max_iters: int = 500,
                       bound_tol: float = 1e-6) -> dict:
    """Weyl split of the binary-loss group Hessian sharpness.

    For h = sigmoid(s) and binary cross-entropy, each sample's Hessian is
    h(1-h) grad s grad s^T + (h - y) hess s, so the largest eigenvalue of the
    group Hessian is at most

        Z1 = mean h(1-h) ||grad_theta s||^2   (boundary proximity weight)
      + Z2 = mean |h - y| lambda_abs(hess_theta s)  (error-weighted curvature).

    Derivatives are of the score s, the quantity whose sigmoid is the soft
    classifier.  Raises BoundViolation if the inequality fails numerically.
    """
    if net.shape.num_classes != 2:
        raise AuditError("the boundary-proximity bound is binary-only")
    theta = net.params_flat()
    if theta.size > 2000:
        raise AuditError("per-sample curvature is limited to 2000 parameters")
    n = len(group_data)
    if n == 0:
        raise AuditError("empty group")
    x, y = group_data.features, group_data.labels.astype(np.float64)

    logits = plain_logits(net, x)
    s = logits[:, 1] - logits[:, 0]
    h = 1.0 / (1.0 + np.exp(-np.clip(s, -500, 500)))

    def score_i(i):
        def f(t: Tensor) -> Tensor:
            return ad.reshape(_score_graph(t, net, x[i:i + 1]), ())
        return f

    z1 = 0.0
    z2 = 0.0
    for i in range(n):
        f = score_i(i)
        gs = ad.grad(f, theta)
        z1 += h[i] * (1.0 - h[i]) * float(gs @ gs)
        lam_i, _ = lambda_abs(lambda v: ad.hvp(f, theta, v), theta.size,
                              tol=tol, max_iters=max_iters)
        z2 += abs(h[i] - y[i]) * lam_i
    z1 /= n
    z2 /= n

    idx = np.arange(n)
    objective = _group_loss_graph(net, group_data, idx)
    lam, _ = lambda_extremes(lambda v: ad.hvp(objective, theta, v), theta.size,
                             tol=tol, max_iters=max_iters)
    if lam > z1 + z2 + bound_tol:
        raise BoundViolation(
            f"lambda(H_a)={lam:.6g} exceeds Z1+Z2={z1 + z2:.6g} by more than {bound_tol}")
    return {"lambda_H": lam, "Z1": float(z1), "Z2": float(z2)}


# -- decision boundary distance -------------------------------------------------

def boundary_distances(net: GatedNetwork, x: Array, y: Array) -> tuple[Array, Array]:
    """First-order signed distances for a batch; returns (distances, degenerate).

    distance = margin / ||grad_x margin|| with margin = logit_y - best rival
    logit; negative for misclassified samples.  Where the input gradient
    vanishes (below 1e-12) the distance is +/- infinity and flagged.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    logits = plain_logits(net, x)
    rival = logits.copy()
    rival[np.arange(n), y] = -np.inf
    j = np.argmax(rival, axis=1)

    pick = np.zeros_like(logits)
    pick[np.arange(n), y] = 1.0
    pick[np.arange(n), j] = -1.0

    xt = Tensor(x, requires_grad=True)
    out = logits_graph(Tensor(net.params_flat()), Tensor(net.gates_flat()),
                       net.shape, xt)
    margins_graph = ad.tsum(ad.mul(out, Tensor(pick)), axis=1)
    (gx,) = ad.backward(ad.tsum(margins_graph), [xt])
    margins = margins_graph.data
    gnorm = np.linalg.norm(gx.data, axis=1)

    degenerate = gnorm < 1e-12
    dist = np.empty(n)
    safe = ~degenerate
    dist[safe] = margins[safe] / gnorm[safe]
    dist[degenerate] = np.where(margins[degenerate] >= 0, np.inf, -np.inf)
    return dist, degenerate


def boundary_distance(net: GatedNetwork, x: Array, y: int) -> float:
    """Single-sample signed distance estimate (see boundary_distances)."""
    d, _ = boundary_distances(net, np.atleast_2d(x), np.array([y]))
    return float(d[0])


def normalized_distances(dist: Array) -> Array:
    """Distances scaled by the 90th percentile of |distance|, clamped to [-1, 1]."""
    finite = np.isfinite(dist)
    if not finite.any():
        return np.zeros_like(dist)
    scale = np.percentile(np.abs(dist[finite]), 90)
    if scale <= 0:
        scale = 1.0
    return np.clip(dist / scale, -1.0, 1.0)


# -- report assembly -------------------------------------------------------------

AUDIT_SCHEMA = "audit/1"


@dataclass(frozen=True, eq=False)
class AuditReport:
    document: dict

    def to_json_bytes(self) -> bytes:
        return json.dumps(self.document, sort_keys=True,
                          separators=(",", ":")).encode("utf-8")

    def sha256(self) -> str:
        return hashlib.sha256(self.to_json_bytes()).hexdigest()

    def save(self, path: str) -> str:
        payload = self.to_json_bytes()
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return self.sha256()

    def save_csv(self, path: str) -> None:
        rows = []
        for cand in self.document["candidates"]:
            for row in cand["groups"]:
                rows.append({"candidate": cand["name"], **row})
        fields = ["candidate", "group", "size", "accuracy", "loss", "grad_norm",
                  "hessian_lambda", "hessian_converged", "mean_boundary_distance",
                  "relative_drop_pct"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
            writer.writeheader()
            for row in rows:
                writer.writerow(row)


def build_report(base: GatedNetwork, candidates: list[tuple[str, GatedNetwork]],
                 data_eval: GroupedDataset, data_train: GroupedDataset,
                 include_taylor: bool = True,
                 include_hessian_bound: bool = False) -> AuditReport:
    """Assemble the audit document: base metrics plus one entry per candidate.

    Accuracy, parity and boundary distances come from the evaluation split;
    gradient norms, Hessian sharpness and residual losses from the training
    split (they are statements about the trained optimum).  The binary Z1/Z2
    decomposition costs a per-sample eigensolve and is opt-in.
    """
    for name, net in candidates:
        if net.shape != base.shape:
            raise AuditError(f"candidate {name!r} has a different shape")

    def entry(name: str, net: GatedNetwork, with_drops: bool) -> dict:
        ev = group_metrics(net, data_eval, compute_hessian=False)
        trm = group_metrics(net, data_train, compute_boundary=False)
        pred = np.argmax(plain_logits(net, data_eval.features), axis=1)
        global_acc = float(np.mean(pred == data_eval.labels))
        global_loss = float(_ce_values(net, data_eval, np.arange(len(data_eval))).mean())
        parity_gap = max(abs(a - global_acc) for a in ev.accuracies)
        groups = []
        for a in range(len(ev.group_names)):
            row = ev.row(a)
            row["grad_norm"] = trm.grad_norms[a]
            row["hessian_lambda"] = trm.hessian_lambdas[a]
            row["hessian_converged"] = trm.hessian_converged[a]
            row["train_loss"] = trm.losses[a]
            if with_drops:
                base_acc = base_entry["groups"][a]["accuracy"]
                row["relative_drop_pct"] = (relative_accuracy_drop(base_acc, row["accuracy"])
                                            if base_acc > 0 else None)
                sub = data_train.subset(data_train.group_indices(a))
                row["residual_loss"] = residual_loss(base, net, sub)
                if include_taylor:
                    row["taylor"] = taylor_bound(base, net, sub)
                if include_hessian_bound and base.shape.num_classes == 2:
                    row["hessian_bound"] = hessian_bound_z1z2(net, sub)
                else:
                    row["hessian_bound"] = None
            groups.append(row)
        doc = {
            "name": name,
            "checkpoint_sha256": checkpoint_hash(checkpoint_document(net)),
            "relu_count": net.relu_count(),
            "relu_total": net.shape.total_hidden_units,
            "global": {"accuracy": global_acc, "loss": global_loss,
                       "parity_gap": parity_gap},
            "groups": groups,
        }
        return doc

    base_entry = entry("base", base, with_drops=False)
    cand_entries = [entry(name, net, with_drops=True) for name, net in candidates]
    document = {
        "schema": AUDIT_SCHEMA,
        "baseline": base_entry,
        "candidates": cand_entries,
    }
    return AuditReport(document)
