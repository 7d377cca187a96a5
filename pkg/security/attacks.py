"""
Semi-honest privacy attacks.

  cafe_invert  - white-box feature inversion of a known passive model
  mi_blackbox  - shadow-model regression from probe queries, then inversion
  pmc_attack   - label inference with an attack head on auxiliary labels
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from config.experiment_config import AttackConfig
from core.errors import AttackError, NonFiniteError
from core.layers import Flatten, Linear
from core.losses import cross_entropy_loss, mse_loss
from core.metrics import label_error, per_sample_mse
from core.network import Network, backward, forward
from core.optimizer import sgd_step
from core.passport import PassportKey, PassportLayer
from core.tensor import Tensor
from security.attacker_view import PassiveModelView

MIN_STEP = 1e-16
STEP_GROWTH = 1.25


@dataclass
class AttackReport:
    kind: str
    per_sample: np.ndarray
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def aggregate(self) -> float:
        return float(np.mean(self.per_sample)) if len(self.per_sample) else 0.0


@dataclass
class Inversion:
    x_hat: Tensor
    loss: float
    restarts_used: int
    failed_restarts: int
    accepted_steps: int
    loss_trace: List[float]
    guessed_keys: Optional[Dict[int, PassportKey]] = None
    shadow: Optional["ShadowModel"] = None

    def report(self, kind: str, x_true: Tensor) -> AttackReport:
        return AttackReport(kind, per_sample_mse(x_true, self.x_hat), {
            "restarts_used": self.restarts_used, "failed_restarts": self.failed_restarts,
            "accepted_steps": self.accepted_steps, "best_loss": self.loss,
        })


@dataclass
class ShadowModel:
    model: Network
    pairs: int
    residual: float


@dataclass
class AuxiliaryDataset:
    """The attacker's small labeled set: (embedding or feature, label) pairs."""

    samples: List[Tuple[Tensor, int]]

    def __post_init__(self):
        if len(self.samples) < 1:
            raise AttackError("auxiliary dataset is empty", {"n_a": 0})

    @property
    def n_a(self) -> int:
        return len(self.samples)

    @property
    def X(self) -> np.ndarray:
        return np.stack([np.asarray(h, dtype=np.float64).ravel() for h, _ in self.samples])

    @property
    def y(self) -> np.ndarray:
        return np.array([int(label) for _, label in self.samples], dtype=np.int64)


def tv_regularizer(x: Tensor, shape: Optional[Tuple[int, ...]] = None) -> Tuple[float, Tensor]:
    """Squared anisotropic total variation over the trailing spatial axes (two if x.ndim >= 3, else one).
    With `shape`, each sample is viewed as `shape` first (flattened images)."""
    x = np.asarray(x, dtype=np.float64)
    view = x.reshape((-1,) + tuple(shape)) if shape is not None else x
    axes = (-2, -1) if view.ndim >= 3 else (-1,)
    value = 0.0
    grad = np.zeros_like(view)
    for axis in axes:
        if view.shape[axis] < 2:
            continue
        d = np.diff(view, axis=axis)
        value += float(np.sum(d ** 2))
        head = [slice(None)] * view.ndim
        tail = [slice(None)] * view.ndim
        head[axis] = slice(None, -1)
        tail[axis] = slice(1, None)
        grad[tuple(head)] -= 2.0 * d
        grad[tuple(tail)] += 2.0 * d
    return value, grad.reshape(x.shape)


def _backward_with_keys(net: Network, trace, out_grad: Tensor) -> Tuple[Tensor, Dict[int, Tuple[Tensor, Tensor]]]:
    """Input gradient plus gradients w.r.t. each slot's (per-batch) passport pair."""
    g = out_grad
    key_grads = {}
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if isinstance(layer, PassportLayer):
            paths = layer.gradient_paths(trace.caches[i], g)
            key_grads[i] = (paths["s_gamma"].sum(axis=0), paths["s_beta"].sum(axis=0))
            g = paths["input"]
        else:
            g, _ = layer.backward(trace.caches[i], g)
    return g, key_grads


class _InversionObjective:
    """||G(x') - H||^2 summed, plus lambda * TV(x'), optionally over guessed passports too."""

    def __init__(self, net: Network, target_H: Tensor, cfg: AttackConfig):
        self.net = net
        self.target_H = np.asarray(target_H, dtype=np.float64)
        self.cfg = cfg

    def __call__(self, x: Tensor, keys: Dict[int, PassportKey]):
        trace = forward(self.net, x, keys)
        residual = trace.output - self.target_H
        tv, tv_grad = tv_regularizer(x, self.cfg.tv_shape)
        loss = float(np.sum(residual ** 2)) + self.cfg.tv_lambda * tv
        if not np.isfinite(loss):
            raise NonFiniteError("inversion objective")
        g_x, g_keys = _backward_with_keys(self.net, trace, 2.0 * residual)
        return loss, g_x + self.cfg.tv_lambda * tv_grad, g_keys


def _descend(objective: _InversionObjective, x: Tensor, keys: Dict[int, PassportKey], optimize_keys: bool,
             cfg: AttackConfig):
    """Gradient descent with backtracking: halve the step on any loss increase, so accepted losses never rise."""
    loss, g_x, g_keys = objective(x, keys)
    trace = [loss]
    step = cfg.step_size
    accepted = 0
    for _ in range(cfg.iterations):
        grad_norm = float(np.sum(g_x ** 2))
        if optimize_keys:
            grad_norm += sum(float(np.sum(a ** 2) + np.sum(b ** 2)) for a, b in g_keys.values())
        if grad_norm < 1e-28:
            break
        while step >= MIN_STEP:
            x_new = x - step * g_x
            keys_new = keys
            if optimize_keys:
                keys_new = {slot: PassportKey(k.s_gamma - step * g_keys[slot][0], k.s_beta - step * g_keys[slot][1],
                                              k.channel_means) for slot, k in keys.items()}
            try:
                new = objective(x_new, keys_new)
            except NonFiniteError:
                new = None
            if new is not None and new[0] <= loss:
                break
            step /= 2.0
        else:
            break
        x, keys = x_new, keys_new
        improvement = loss - new[0]
        loss, g_x, g_keys = new
        trace.append(loss)
        accepted += 1
        step *= STEP_GROWTH
        if improvement <= 1e-15 * max(1.0, loss):
            break
    return x, keys, loss, trace, accepted


def _invert(net: Network, target_H: Tensor, cfg: AttackConfig, keys: Optional[Mapping[int, PassportKey]] = None,
            optimize_keys: bool = False, tag: str = "CAFE") -> Inversion:
    target_H = np.asarray(target_H, dtype=np.float64)
    shape = (target_H.shape[0],) + tuple(net.input_shape)
    objective = _InversionObjective(net, target_H, cfg)
    best = None
    failed = 0
    diagnostics = []
    for restart in range(cfg.restarts):
        rng = np.random.default_rng([cfg.seed, restart])
        x0 = rng.normal(0.0, cfg.init_std, size=shape)
        try:
            x, k, loss, trace, accepted = _descend(objective, x0, dict(keys or {}), optimize_keys, cfg)
        except NonFiniteError as e:
            failed += 1
            diagnostics.append({"restart": restart, "error": str(e)})
            logger.warning(f"[Attack:{tag}] restart {restart} aborted: {e}")
            continue
        logger.debug(f"[Attack:{tag}] restart {restart}: loss={loss:.6g} after {accepted} accepted steps")
        if best is None or loss < best[2]:
            best = (x, k, loss, trace, accepted)
    if best is None:
        raise AttackError(f"all {cfg.restarts} restarts produced non-finite losses", {"restarts": diagnostics})
    x, k, loss, trace, accepted = best
    return Inversion(x_hat=x, loss=loss, restarts_used=cfg.restarts, failed_restarts=failed, accepted_steps=accepted,
                     loss_trace=trace, guessed_keys=k or None)


def cafe_invert(view: PassiveModelView, target_H: Tensor, cfg: AttackConfig,
                guess_keys: Optional[Mapping[int, PassportKey]] = None) -> Inversion:
    """White-box inversion of a passive model whose passports the attacker does not know.
    Without `guess_keys` the passport slots are taken as neutral (gamma = 1, beta = 0) unless
    `cfg.optimize_passports` asks to guess them jointly with x'."""
    if guess_keys is not None:
        net, keys = view.network(), dict(guess_keys)
    elif cfg.optimize_passports and view.passport_slots:
        net = view.network()
        keys = {slot: PassportKey(np.zeros(net.layers[slot].config.shape), np.zeros(net.layers[slot].config.shape),
                                  ()) for slot in view.passport_slots}
    else:
        net, keys = view.neutral_network(), {}
    optimize = cfg.optimize_passports and bool(keys)
    result = _invert(net, target_H, cfg, keys, optimize_keys=optimize, tag="CAFE")
    logger.info(f"[Attack:CAFE] inverted {len(target_H)} embeddings, best loss={result.loss:.6g}")
    return result


def _is_single_linear(net: Network) -> bool:
    kinds = [type(layer) for layer in net.layers]
    return kinds in ([Linear], [Flatten, Linear])


def fit_shadow_model(aux_pairs: Sequence[Tuple[Tensor, Tensor]], cfg: AttackConfig,
                     skeleton: Optional[Network] = None) -> ShadowModel:
    """MSE regression of a surrogate G' on probe pairs (x, H)."""
    if not aux_pairs:
        raise AttackError("no auxiliary probe pairs", {"pairs": 0})
    X = np.stack([np.asarray(x, dtype=np.float64) for x, _ in aux_pairs])
    Y = np.stack([np.asarray(h, dtype=np.float64) for _, h in aux_pairs])
    if skeleton is None:
        flat = int(np.prod(X.shape[1:]))
        layers = ([Flatten()] if X.ndim > 2 else []) + [Linear(flat, Y.shape[1], rng=np.random.default_rng(cfg.seed))]
        skeleton = Network(layers, input_shape=X.shape[1:])
    net = skeleton

    if _is_single_linear(net):
        linear = net.layers[-1]
        A = np.hstack([X.reshape(len(X), -1), np.ones((len(X), 1))])
        sol, *_ = np.linalg.lstsq(A, Y, rcond=None)
        if not np.all(np.isfinite(sol)):
            raise AttackError("shadow regression produced non-finite weights", {"pairs": len(X)})
        linear.params["weight"][...] = sol[:-1].T
        linear.params["bias"][...] = sol[-1]
        residual = mse_loss(forward(net, X).output, Y)[0]
    else:
        residual = np.inf
        first = None
        for it in range(cfg.shadow_iterations):
            try:
                trace = forward(net, X)
                residual, grad = mse_loss(trace.output, Y)
                sgd_step(net, backward(net, trace, grad), cfg.shadow_lr)
            except NonFiniteError as e:
                raise AttackError("shadow model training diverged", {"iteration": it, "last_residual": residual}) from e
            first = residual if first is None else first
            if residual > 1e6 * max(first, 1e-12):
                raise AttackError("shadow model training diverged", {"iteration": it, "residual": residual, "initial": first})
        residual = mse_loss(forward(net, X).output, Y)[0]
    logger.info(f"[Attack:MI] shadow fitted on {len(X)} probes, residual={residual:.6g}")
    return ShadowModel(model=net, pairs=len(X), residual=float(residual))


def mi_blackbox(aux_pairs: Sequence[Tuple[Tensor, Tensor]], target_H: Tensor, cfg: AttackConfig,
                skeleton: Optional[Network] = None) -> Inversion:
    """Fit a shadow model from probe queries, then invert it like the white-box attack."""
    shadow = fit_shadow_model(aux_pairs, cfg, skeleton)
    result = _invert(shadow.model, target_H, cfg, tag="MI")
    result.shadow = shadow
    return result


@dataclass
class AttackHead:
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def logits(self, H: np.ndarray) -> np.ndarray:
        Z = (H.reshape(len(H), -1) - self.mean) / self.scale
        return Z @ self.weight.T + self.bias

    def predict(self, H: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(H), axis=1)


def fit_attack_head(aux: AuxiliaryDataset, cfg: AttackConfig, classes: Optional[int] = None) -> AttackHead:
    X, y = aux.X, aux.y
    classes = classes or int(y.max()) + 1
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Z = (X - mean) / scale
    if cfg.pmc_mode == "least_squares":
        A = np.hstack([Z, np.ones((len(Z), 1))])
        sol, *_ = np.linalg.lstsq(A, np.eye(classes)[y], rcond=None)
        return AttackHead(sol[:-1].T, sol[-1], mean, scale)
    W = np.zeros((classes, Z.shape[1]))
    b = np.zeros(classes)
    for _ in range(cfg.pmc_iterations):
        _, g = cross_entropy_loss(Z @ W.T + b, y)
        W -= cfg.pmc_lr * (g.T @ Z)
        b -= cfg.pmc_lr * g.sum(axis=0)
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
        raise AttackError("attack head training diverged", {"n_a": aux.n_a, "lr": cfg.pmc_lr})
    return AttackHead(W, b, mean, scale)


def pmc_attack(aux: AuxiliaryDataset, test_H: Sequence[Tensor], cfg: AttackConfig,
               classes: Optional[int] = None) -> np.ndarray:
    """Passive model completion: train a head on (H_i, y_i) and label the test embeddings."""
    if not isinstance(aux, AuxiliaryDataset):
        aux = AuxiliaryDataset(list(aux))
    head = fit_attack_head(aux, cfg, classes)
    H = np.stack([np.asarray(h, dtype=np.float64).ravel() for h in test_H])
    pred = head.predict(H)
    logger.info(f"[Attack:PMC] n_a={aux.n_a}, labelled {len(pred)} test embeddings")
    return pred


def label_report(pred: Sequence[int], truth: Sequence[int], n_a: int) -> AttackReport:
    wrong = (np.asarray(pred) != np.asarray(truth)).astype(np.float64)
    return AttackReport("pmc", wrong, {"n_a": n_a, "label_error": label_error(pred, truth)})
