"""Amortised smoothing: a ReLU network from observations to controls.

The network output is read row-major as an ``(n_intervals, n_controls)``
control path. Training minimises the summed objective ``J`` of every
sample, with ``dJ/du`` from the adjoint chained into the network's
reverse pass. Model parameters stay fixed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NonFiniteLoss, NumericalError, ValidationError
from .ode import TimeGrid
from .variational import ControlPath, ControlSpec, ObservationSet, adjoint_from, evaluate, gradient

__all__ = [
    "InferenceNet",
    "TrainingConfig",
    "geometric_widths",
    "flatten_observations",
    "net_forward",
    "net_backward",
    "sample_loss_and_grad",
    "train_amortized",
    "save_net",
    "load_net",
    "FORMAT_VERSION",
]

FORMAT_VERSION = 1


def geometric_widths(n_in, n_out, n_layers=6):
    """Layer widths growing geometrically from ``n_in`` to ``n_out``.

    Returns ``n_layers + 1`` sizes (input, hidden..., output).
    """
    if n_layers < 1:
        raise ConfigError("need at least one layer")
    r = np.arange(n_layers + 1) / n_layers
    w = np.rint(n_in * (n_out / n_in) ** r).astype(int)
    w[0], w[-1] = n_in, n_out
    return [int(max(v, 1)) for v in w]


class InferenceNet:
    """Affine/ReLU stack; the last layer is affine only.

    ``weights[l]`` has shape ``(sizes[l+1], sizes[l])``. Initialisation
    is uniform on ``+-1/sqrt(fan_in)`` for weights and biases.
    """

    def __init__(self, sizes: Sequence[int], weights=None, biases=None, seed: Optional[int] = 0):
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise DimensionError(f"invalid layer sizes {self.sizes}")
        if weights is None:
            rng = np.random.default_rng(seed)
            weights, biases = [], []
            for a, b in zip(self.sizes[:-1], self.sizes[1:]):
                lim = 1.0 / math.sqrt(a)
                weights.append(rng.uniform(-lim, lim, (b, a)))
                biases.append(rng.uniform(-lim, lim, b))
        self.weights = [np.array(W, dtype=float) for W in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        self.seed = seed
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.sizes[l + 1], self.sizes[l]) or b.shape != (self.sizes[l + 1],):
                raise DimensionError(f"layer {l} has shapes {W.shape}, {b.shape}")
        self._cache = None

    @classmethod
    def for_problem(cls, n_inputs, grid: TimeGrid, spec: ControlSpec, n_layers=6, seed=0):
        return cls(geometric_widths(n_inputs, grid.n_steps * spec.n_controls, n_layers), seed=seed)

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def n_weights(self):
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def params(self):
        """All weights and biases as one flat vector (layer by layer, W then b)."""
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)])

    def set_params(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_weights:
            raise DimensionError("parameter vector has the wrong length")
        i = 0
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[l] = flat[i:i + W.size].reshape(W.shape).copy()
            i += W.size
            self.biases[l] = flat[i:i + b.size].copy()
            i += b.size
        self._cache = None

    def standardize_inputs(self, Y):
        """Data-dependent init: the first layer sees standardised inputs.

        Rescales the first-layer weights by ``1/sd`` of the sample rows
        ``Y`` and shifts the bias so that, at this point, the network acts
        on ``(y - mean) / sd``. Afterwards all weights train as usual.
        """
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if Y.shape[1] != self.sizes[0]:
            raise DimensionError("samples do not match the input size")
        sd = Y.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        W = self.weights[0] / sd
        self.biases[0] = self.biases[0] - W @ Y.mean(axis=0)
        self.weights[0] = W
        self._cache = None
        return self

    def copy(self):
        return InferenceNet(self.sizes, [W.copy() for W in self.weights], [b.copy() for b in self.biases], self.seed)

    def __call__(self, y):
        z = np.asarray(y, dtype=float)
        if z.shape[-1] != self.sizes[0]:
            raise DimensionError(f"input of length {z.shape[-1]}, network expects {self.sizes[0]}")
        acts = [z]
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = z @ W.T + b
            if l < self.n_layers - 1:
                z = np.maximum(z, 0.0)
            acts.append(z)
        self._cache = acts
        return z


def flatten_observations(obs: ObservationSet):
    return np.asarray(obs.values, dtype=float).ravel()


def net_forward(net: InferenceNet, y, grid: TimeGrid, spec: ControlSpec) -> ControlPath:
    """Control path predicted for flattened observations ``y``."""
    out = net(np.ravel(y))
    if out.size != grid.n_steps * spec.n_controls:
        raise DimensionError(
            f"network output {out.size} does not reshape to {grid.n_steps} x {spec.n_controls} controls"
        )
    return ControlPath(grid, out.reshape(grid.n_steps, spec.n_controls), spec.n)


def net_backward(net: InferenceNet, y, upstream):
    """Weight and bias gradients for ``upstream = dloss/d(output)``.

    Uses the activations cached by the last forward pass on ``y`` (it is
    recomputed when the cache belongs to another input). Returns
    ``(dW, db)`` lists. The ReLU derivative at 0 is taken as 0.
    """
    y = np.ravel(np.asarray(y, dtype=float))
    if net._cache is None or net._cache[0].shape != y.shape or not np.array_equal(net._cache[0], y):
        net(y)
    acts = net._cache
    g = np.ravel(np.asarray(getattr(upstream, "u", upstream), dtype=float))
    if g.size != net.sizes[-1]:
        raise DimensionError("upstream gradient does not match the output size")
    dW = [None] * net.n_layers
    db = [None] * net.n_layers
    for l in range(net.n_layers - 1, -1, -1):
        if l < net.n_layers - 1:
            g = g * (acts[l + 1] > 0.0)
        dW[l] = np.outer(g, acts[l])
        db[l] = g.copy()
        g = net.weights[l].T @ g
    return dW, db


def _flat(dW, db):
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(dW, db)])


@dataclass(frozen=True)
class TrainingConfig:
    """Mini-batch training settings; ``optimizer`` is ``"adam"`` or ``"sgd"``."""

    epochs: int = 50
    batch_size: int = 15
    lr: float = 1e-3
    weight_decay: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError("epochs must be a positive integer")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError("batch_size must be a positive integer")
        if not (self.lr > 0 and self.weight_decay >= 0 and self.eps > 0):
            raise ConfigError("lr and eps must be positive, weight_decay non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam decay rates must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


def sample_loss_and_grad(net: InferenceNet, model, spec, phi0, obs: ObservationSet, grid: TimeGrid,
                         backend=None):
    """``J`` of one sample and its gradient with respect to the flat net weights."""
    y = flatten_observations(obs)
    u = net_forward(net, y, grid, spec)
    ev = evaluate(model, spec, u, phi0, obs, backend)
    eta = adjoint_from(model, spec, ev, backend)
    dJdu = gradient(model, spec, u, ev.traj, eta) * grid.dt
    dW, db = net_backward(net, y, dJdu)
    return ev.J, _flat(dW, db)


def _check_design(dataset):
    ref = dataset[0]
    for k, o in enumerate(dataset[1:], 1):
        if (o.values.shape != ref.values.shape or not np.array_equal(o.times, ref.times)
                or not np.array_equal(o.H, ref.H) or not np.array_equal(o.noise_cov, ref.noise_cov)):
            raise ValidationError(f"observation set {k} differs in design from set 0")


def train_amortized(model, spec, phi0, dataset: Sequence[ObservationSet], net: InferenceNet,
                    tcfg: Optional[TrainingConfig] = None, grid: Optional[TimeGrid] = None,
                    backend=None):
    """Train ``net`` (in place on a copy) on the summed per-sample objective.

    Returns ``(net, loss_trace)`` where ``loss_trace[e]`` is the mean
    sample objective seen during epoch ``e``. L2 weight decay enters the
    gradient as ``weight_decay * w``.
    """
    tcfg = TrainingConfig() if tcfg is None else tcfg
    spec = ControlSpec.for_model(model) if spec is None else spec
    if not dataset:
        raise ValidationError("empty training set")
    if grid is None:
        raise ValidationError("train_amortized needs the control grid")
    _check_design(dataset)
    net = net.copy()
    w = net.params()
    m1 = np.zeros_like(w)
    m2 = np.zeros_like(w)
    step = 0
    rng = np.random.default_rng(tcfg.seed)
    trace, batches = [], []
    order = np.arange(len(dataset))
    for epoch in range(int(tcfg.epochs)):
        if tcfg.shuffle:
            order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), int(tcfg.batch_size)):
            idx = order[start:start + int(tcfg.batch_size)]
            total = np.zeros_like(w)
            bl = 0.0
            for i in idx:
                try:
                    J, g = sample_loss_and_grad(net, model, spec, phi0, dataset[i], grid, backend)
                except NumericalError as exc:
                    raise NonFiniteLoss(f"sample {int(i)} failed in epoch {epoch + 1}: {exc}") from exc
                if not (math.isfinite(J) and np.all(np.isfinite(g))):
                    raise NonFiniteLoss(f"non-finite loss or gradient for sample {int(i)} in epoch {epoch + 1}")
                total += g
                bl += J
                losses.append(J)
            batches.append(bl)
            grad = total + tcfg.weight_decay * w
            step += 1
            if tcfg.optimizer == "sgd":
                w = w - tcfg.lr * grad
            else:
                m1 = tcfg.beta1 * m1 + (1 - tcfg.beta1) * grad
                m2 = tcfg.beta2 * m2 + (1 - tcfg.beta2) * grad * grad
                mh = m1 / (1 - tcfg.beta1 ** step)
                vh = m2 / (1 - tcfg.beta2 ** step)
                w = w - tcfg.lr * mh / (np.sqrt(vh) + tcfg.eps)
            net.set_params(w)
        trace.append(float(np.mean(losses)))
    return net, trace


def save_net(net: InferenceNet, path):
    """Write sizes and row-major weights to an ``.npz`` archive."""
    arrays = {"format_version": np.array(FORMAT_VERSION), "sizes": np.array(net.sizes, dtype=np.int64)}
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"W{l}"] = np.ascontiguousarray(W)
        arrays[f"b{l}"] = b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_net(path) -> InferenceNet:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != FORMAT_VERSION:
            raise ValidationError(f"unsupported network file version {version}")
        sizes = [int(s) for s in data["sizes"]]
        L = len(sizes) - 1
        W = [data[f"W{l}"] for l in range(L)]
        b = [data[f"b{l}"] for l in range(L)]
    return InferenceNet(sizes, W, b, seed=None)
