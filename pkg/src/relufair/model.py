"""Dense feed-forward classifiers with per-unit gated activations.

Each hidden unit carries a gate c in [0, 1]; its activation on a
pre-activation z is c*max(z, 0) + (1 - c)*z, so c = 1 is an ordinary ReLU
and c = 0 is the identity.  Frozen networks hold gates at exactly 0 or 1;
the learnable mode exists only inside the budgeted linearization routine.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array, ParameterVector, Tensor


class GateModeError(RuntimeError):
    """Operation requires the other gate mode (frozen vs learnable)."""


@dataclass(frozen=True)
class NetworkShape:
    input_dim: int
    hidden_widths: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        if self.input_dim < 1 or self.num_classes < 1:
            raise ValueError("input_dim and num_classes must be >= 1")
        if len(self.hidden_widths) < 1 or any(w < 1 for w in self.hidden_widths):
            raise ValueError("need at least one hidden layer, all widths >= 1")
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))

    @property
    def total_hidden_units(self) -> int:
        return sum(self.hidden_widths)

    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per affine layer, output head included."""
        dims = [self.input_dim, *self.hidden_widths, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class ReluBudget:
    """Number of rectified units retained out of the network total."""

    retained_fraction: float
    retained_count: int
    total: int

    @staticmethod
    def from_fraction(fraction: float, total: int) -> "ReluBudget":
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"budget fraction must be in (0, 1], got {fraction}")
        r = int(np.floor(fraction * total + 0.5))  # round half up
        if r < 1 or r > total:
            raise ValueError(f"budget of {r} ReLUs out of {total} is out of range")
        return ReluBudget(fraction, r, total)


class GatedNetwork:
    """Weights, biases and one gate per hidden unit.

    Instances are treated as values: training and linearization routines
    return new networks and never mutate their inputs.
    """

    def __init__(self, shape: NetworkShape, weights: list[Array], biases: list[Array],
                 gates: list[Array], gate_mode: str = "frozen"):
        if gate_mode not in ("frozen", "learnable"):
            raise ValueError(f"unknown gate_mode {gate_mode!r}")
        dims = shape.layer_dims()
        if len(weights) != len(dims) or len(biases) != len(dims):
            raise ValueError("wrong number of layers")
        for (fi, fo), w, b in zip(dims, weights, biases):
            if w.shape != (fi, fo) or b.shape != (fo,):
                raise ValueError(f"layer shape mismatch: expected {(fi, fo)}, got {w.shape}")
        if len(gates) != len(shape.hidden_widths):
            raise ValueError("one gate vector per hidden layer required")
        for width, g in zip(shape.hidden_widths, gates):
            if g.shape != (width,):
                raise ValueError("gate vector width mismatch")
            if np.any(g < 0.0) or np.any(g > 1.0):
                raise ValueError("gates must lie in [0, 1]")
            if gate_mode == "frozen" and not np.all((g == 0.0) | (g == 1.0)):
                raise ValueError("frozen gates must be exactly 0 or 1")
        self.shape = shape
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        self.gates = [np.array(g, dtype=np.float64) for g in gates]
        self.gate_mode = gate_mode

    # -- construction ---------------------------------------------------
    @staticmethod
    def init(shape: NetworkShape, seed: int) -> "GatedNetwork":
        """He-initialized all-ReLU network (all gates 1, frozen)."""
        rng = np.random.Generator(np.random.PCG64(seed))
        weights, biases = [], []
        for fi, fo in shape.layer_dims():
            weights.append(rng.standard_normal((fi, fo)) * np.sqrt(2.0 / fi))
            biases.append(np.zeros(fo))
        gates = [np.ones(w) for w in shape.hidden_widths]
        return GatedNetwork(shape, weights, biases, gates)

    def copy(self) -> "GatedNetwork":
        return GatedNetwork(self.shape, self.weights, self.biases, self.gates, self.gate_mode)

    # -- parameter vector view -------------------------------------------
    # Stable ordering: W0.ravel(), b0, W1.ravel(), b1, ...  Gates are a
    # separate vector (layer 0 units first) and are not model parameters.
    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params_flat(self) -> ParameterVector:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def with_params(self, flat: ParameterVector) -> "GatedNetwork":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.num_params,):
            raise ValueError("parameter vector length mismatch")
        weights, biases, o = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(flat[o:o + w.size].reshape(w.shape)); o += w.size
            biases.append(flat[o:o + b.size]); o += b.size
        return GatedNetwork(self.shape, weights, biases, self.gates, self.gate_mode)

    def gates_flat(self) -> Array:
        return np.concatenate(self.gates)

    def with_gates(self, flat: Array, gate_mode: str | None = None) -> "GatedNetwork":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.shape.total_hidden_units,):
            raise ValueError("gate vector length mismatch")
        gates, o = [], 0
        for w in self.shape.hidden_widths:
            gates.append(flat[o:o + w]); o += w
        return GatedNetwork(self.shape, self.weights, self.biases, gates,
                            gate_mode or self.gate_mode)

    # -- evaluation -------------------------------------------------------
    def forward(self, x) -> Tensor:
        """Logits for one sample (d,) or a batch (N, d)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.shape.input_dim:
            raise ValueError(f"input dim {x.shape[1]} != {self.shape.input_dim}")
        out = logits_graph(Tensor(self.params_flat()), Tensor(self.gates_flat()),
                           self.shape, Tensor(x))
        return ad.reshape(out, (self.shape.num_classes,)) if single else out

    def predict(self, x) -> Array:
        """Hard labels; argmax with ties broken toward the smallest index."""
        logits = self.forward(np.atleast_2d(np.asarray(x, dtype=np.float64))).data
        return np.argmax(logits, axis=1)

    def relu_count(self) -> int:
        if self.gate_mode != "frozen":
            raise GateModeError("relu_count is defined only for frozen gates")
        return int(sum(int((g == 1.0).sum()) for g in self.gates))


def plain_logits(net: GatedNetwork, x: Array) -> Array:
    """Graph-free batch logits; used for metrics and teacher outputs."""
    a = np.atleast_2d(np.asarray(x, dtype=np.float64))
    last = len(net.weights) - 1
    for li, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w + b
        if li < last:
            g = net.gates[li]
            a = g * np.maximum(z, 0.0) + (1.0 - g) * z
        else:
            a = z
    return a


def logits_graph(theta: Tensor, gates: Tensor, shape: NetworkShape, x: Tensor) -> Tensor:
    """Differentiable forward pass from flat parameter and gate tensors."""
    a = x
    off = 0
    goff = 0
    dims = shape.layer_dims()
    for li, (fi, fo) in enumerate(dims):
        w = ad.reshape(ad.segment(theta, off, off + fi * fo), (fi, fo))
        off += fi * fo
        b = ad.segment(theta, off, off + fo)
        off += fo
        z = ad.add(ad.matmul(a, w), b)
        if li < len(dims) - 1:
            c = ad.segment(gates, goff, goff + fo)
            goff += fo
            a = ad.add(ad.mul(c, ad.relu(z)), ad.mul(ad.sub(Tensor(1.0), c), z))
        else:
            a = z
    return a


def mean_cross_entropy_graph(theta: Tensor, gates: Tensor, shape: NetworkShape,
                             x: Array, y: Array) -> Tensor:
    """Mean softmax cross-entropy of the network on (x, y)."""
    logits = logits_graph(theta, gates, shape, Tensor(np.atleast_2d(x)))
    onehot = np.zeros((len(y), shape.num_classes))
    onehot[np.arange(len(y)), y] = 1.0
    lse = ad.logsumexp(logits, axis=1)
    picked = ad.tsum(ad.mul(logits, Tensor(onehot)), axis=1)
    return ad.mean(ad.sub(lse, picked))


def parameter_distance(a: GatedNetwork, b: GatedNetwork) -> float:
    """Euclidean distance between weight+bias vectors (gates excluded)."""
    if a.shape != b.shape:
        raise ValueError("networks must share a NetworkShape")
    return float(np.linalg.norm(a.params_flat() - b.params_flat()))


# -- linearization schemes -------------------------------------------------

def linearize_dr(net: GatedNetwork, linear_layers: set[int]) -> GatedNetwork:
    """Layer-granular linearization: listed hidden layers become identity.

    Gates in the listed layers are set to 0 and all others to 1; weights are
    untouched.  Linearizing every layer is rejected (the result would be an
    affine network).
    """
    k = len(net.shape.hidden_widths)
    bad = [i for i in linear_layers if not 0 <= i < k]
    if bad:
        raise ValueError(f"layer indices out of range: {sorted(bad)}")
    if len(set(linear_layers)) == k:
        raise ValueError("cannot linearize every hidden layer; at least one must stay rectified")
    gates = [np.zeros(w) if i in linear_layers else np.ones(w)
             for i, w in enumerate(net.shape.hidden_widths)]
    return GatedNetwork(net.shape, net.weights, net.biases, gates, "frozen")


def linearize_alternating(net: GatedNetwork) -> GatedNetwork:
    """Linearize every other unit in each hidden layer (gate pattern 1,0,1,0...).

    Keeps the layer structure while halving the rectified units per layer
    (the ceiling half when a width is odd); the seed-free counterpart to the
    learned schemes, used for like-for-like trained-from-scratch comparisons.
    """
    gates = []
    for w in net.shape.hidden_widths:
        g = np.zeros(w)
        g[::2] = 1.0
        gates.append(g)
    return GatedNetwork(net.shape, net.weights, net.biases, gates, "frozen")


def linearize_snl(net: GatedNetwork, budget: ReluBudget, gate_l1_weight: float = 1e-3,
                  epochs: int = 10, data=None, seed: int = 0,
                  learning_rate: float = 0.05, batch_size: int = 128,
                  stop_at_budget: bool = False) -> GatedNetwork:
    """Budgeted data-driven linearization via a learned gate mask.

    Phase 1 unfreezes the gates (all initialized at 1), then jointly trains
    weights and gates on the task loss plus gate_l1_weight * sum(c) with
    plain SGD, clamping gates to [0, 1] after each step.  Phase 2 freezes
    the budget.retained_count largest gates to 1 and the rest to 0 (ties by
    (layer, unit) ascending).  KD fine-tuning is the trainer's job.

    With stop_at_budget the mask is trained only until the total gate mass
    fits the budget (epochs then acts as a cap), so tighter budgets train
    longer and the weights co-adapt more before the freeze.
    """
    if net.gate_mode != "frozen" or net.relu_count() != net.shape.total_hidden_units:
        raise ValueError("linearize_snl expects a frozen all-ReLU network")
    if budget.total != net.shape.total_hidden_units:
        raise ValueError("budget total does not match the network")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if epochs > 0 and data is None:
        raise ValueError("gate training needs data")

    theta = net.params_flat()
    gates = np.ones(net.shape.total_hidden_units)
    n_theta = theta.size

    if epochs > 0:
        x, y = np.asarray(data.features), np.asarray(data.labels)
        rng = np.random.Generator(np.random.PCG64(seed))
        n = len(y)
        joint = np.concatenate([theta, gates])
        for _ in range(epochs):
            if stop_at_budget and joint[n_theta:].sum() <= budget.retained_count:
                break
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]

                def objective(t: Tensor) -> Tensor:
                    th = ad.segment(t, 0, n_theta)
                    c = ad.segment(t, n_theta, n_theta + gates.size)
                    task = mean_cross_entropy_graph(th, c, net.shape, x[idx], y[idx])
                    return ad.add(task, ad.mul(Tensor(gate_l1_weight), ad.tsum(c)))

                joint = joint - learning_rate * ad.grad(objective, joint)
                np.clip(joint[n_theta:], 0.0, 1.0, out=joint[n_theta:])
        theta, gates = joint[:n_theta], joint[n_theta:]

    frozen = np.zeros_like(gates)
    frozen[top_gate_indices(gates, budget.retained_count)] = 1.0
    return net.with_params(theta).with_gates(frozen, "frozen")


def top_gate_indices(gates: Array, r: int) -> Array:
    """Indices of the r largest gates; ties go to (layer, unit) ascending."""
    order = np.lexsort((np.arange(gates.size), -gates))
    return np.sort(order[:r])


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_SCHEMA = "checkpoint/1"


def checkpoint_document(net: GatedNetwork, metadata: dict | None = None) -> dict:
    meta = {"seed": None, "created_by": "relufair", "budget": None}
    meta.update(metadata or {})
    return {
        "schema": CHECKPOINT_SCHEMA,
        "shape": {
            "input_dim": net.shape.input_dim,
            "hidden_widths": list(net.shape.hidden_widths),
            "num_classes": net.shape.num_classes,
        },
        "weights": [{"w": w.tolist(), "b": b.tolist()}
                    for w, b in zip(net.weights, net.biases)],
        "gates": [g.tolist() for g in net.gates],
        "gate_mode": net.gate_mode,
        "metadata": meta,
    }


def canonical_json_bytes(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_hash(doc: dict) -> str:
    return hashlib.sha256(canonical_json_bytes(doc)).hexdigest()


def save_checkpoint(net: GatedNetwork, path: str, metadata: dict | None = None) -> str:
    """Atomically write the checkpoint JSON; returns its SHA-256 hash."""
    doc = checkpoint_document(net, metadata)
    payload = canonical_json_bytes(doc)
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
    return checkpoint_hash(doc)


def load_checkpoint(path: str) -> tuple[GatedNetwork, dict]:
    with open(path, "rb") as fh:
        doc = json.load(fh)
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {doc.get('schema')!r}")
    shape = NetworkShape(doc["shape"]["input_dim"],
                         tuple(doc["shape"]["hidden_widths"]),
                         doc["shape"]["num_classes"])
    weights = [np.asarray(layer["w"], dtype=np.float64) for layer in doc["weights"]]
    biases = [np.asarray(layer["b"], dtype=np.float64) for layer in doc["weights"]]
    gates = [np.asarray(g, dtype=np.float64) for g in doc["gates"]]
    net = GatedNetwork(shape, weights, biases, gates, doc["gate_mode"])
    return net, doc["metadata"]
