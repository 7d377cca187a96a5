"""
Passport layers: adaptive obfuscation of a Linear/Conv2d layer.

    g_W(x, s) = gamma * (W x) + beta
    gamma     = Avg(D(E(W s_gamma)))
    beta      = Avg(D(E(W s_beta)))

E and D form a small fully-connected autoencoder (the W' parameters) trained
jointly with the main loss. Passport elements of channel j are drawn from
Normal(mu_j, sigma2) with mu_j ~ Uniform(-N, 0), all mu_j distinct.

E first rescales W s by input_scale(law): the passport law has RMS
R = sqrt(N^2/3 + sigma2) and the rescaled input has RMS log1p(R)/2, so the
passport paths' curvature grows with log R instead of R^2 while wider or
noisier laws still give larger, more random gamma and beta.
"""
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from core.errors import PassportError, ShapeMismatchError
from core.layers import Conv2d, Layer, Linear, WeightedLayer
from core.tensor import Tensor, ensure_finite, glorot_uniform

MEAN_COLLISION_EPS = 1e-9


class PassportLaw(BaseModel):
    """N, sigma2 and sampling scope, before a slot's shape is known."""

    model_config = ConfigDict(frozen=True)

    N: float = Field(gt=0)
    sigma2: float = Field(ge=0)
    scope: Literal["per_batch", "per_sample"] = "per_batch"
    inference: Literal["resample", "frozen"] = "resample"

    def for_shape(self, shape: Tuple[int, ...]) -> "PassportConfig":
        return PassportConfig(shape=tuple(shape), **self.model_dump())


class PassportConfig(PassportLaw):
    """Sampling law of one passport slot. `shape` follows the wrapped layer's input contract:
    (in_dim,) for Linear (every input coordinate is a channel), (in_ch, h, w) for Conv2d."""

    shape: Tuple[int, ...]

    @property
    def channels(self) -> int:
        return self.shape[0]

    @property
    def m(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class PassportKey:
    """Secret obfuscation material. s_gamma/s_beta have `config.shape`, or
    (batch, *config.shape) when drawn per sample."""

    s_gamma: Tensor
    s_beta: Tensor
    channel_means: Tuple[float, ...]
    per_sample: bool = False

    def stacked(self) -> Tuple[Tensor, Tensor]:
        if self.per_sample:
            return self.s_gamma, self.s_beta
        return self.s_gamma[None], self.s_beta[None]

    @property
    def count(self) -> int:
        return self.s_gamma.shape[0] if self.per_sample else 1


def draw_channel_means(config: PassportConfig, rng: np.random.Generator) -> np.ndarray:
    """mu_j ~ Uniform(-N, 0), resampling any value that collides with another or sits on -N."""
    means = rng.uniform(-config.N, 0.0, size=config.channels)
    while True:
        order = np.argsort(means, kind="stable")
        gaps = np.diff(means[order])
        bad = np.zeros(config.channels, dtype=bool)
        bad[order[1:][gaps <= MEAN_COLLISION_EPS]] = True
        bad |= means <= -config.N
        if not bad.any():
            return means
        means[bad] = rng.uniform(-config.N, 0.0, size=int(bad.sum()))


def draw_passport_elements(config: PassportConfig, means: np.ndarray, rng: np.random.Generator,
                           batch: Optional[int] = None) -> PassportKey:
    per_sample = config.scope == "per_sample" and batch is not None
    shape = ((batch,) if per_sample else ()) + tuple(config.shape)
    centers = means.reshape((-1,) + (1,) * (len(config.shape) - 1))
    if per_sample:
        centers = centers[None]
    scale = math.sqrt(config.sigma2)

    def draw() -> Tensor:
        if scale == 0.0:
            return np.array(np.broadcast_to(centers, shape), dtype=np.float64)
        return centers + scale * rng.standard_normal(shape)

    s_gamma = draw()
    s_beta = draw()
    return PassportKey(s_gamma=s_gamma, s_beta=s_beta, channel_means=tuple(float(m) for m in means), per_sample=per_sample)


def sample_passport(config: PassportConfig, rng: np.random.Generator, batch: Optional[int] = None) -> PassportKey:
    """Draws fresh channel means and passport elements."""
    return draw_passport_elements(config, draw_channel_means(config, rng), rng, batch)


class PassportSampler:
    """A party's passport source: channel means fixed for the party's lifetime,
    elements redrawn for every round (or every sample)."""

    def __init__(self, config: PassportConfig, rng: np.random.Generator):
        self.config = config
        train_seq, infer_seq = np.random.SeedSequence(int(rng.integers(2 ** 63))).spawn(2)
        self._rng = np.random.default_rng(train_seq)
        self._inference_rng = np.random.default_rng(infer_seq)
        self.channel_means = draw_channel_means(config, self._rng)
        self.last_key: Optional[PassportKey] = None

    def next_key(self, batch: int) -> PassportKey:
        self.last_key = draw_passport_elements(self.config, self.channel_means, self._rng, batch)
        return self.last_key

    def inference_key(self, batch: int, rng: Optional[np.random.Generator] = None) -> PassportKey:
        """Frozen mode replays the last training key; resample draws from `rng`, else the inference stream."""
        if self.config.inference == "resample" or self.last_key is None:
            return draw_passport_elements(self.config, self.channel_means, rng or self._inference_rng, batch)
        key = self.last_key
        if not key.per_sample:
            return key
        rows = np.resize(np.arange(key.count), batch)
        return PassportKey(key.s_gamma[rows], key.s_beta[rows], key.channel_means, per_sample=True)

    def observation_key(self, batch: int, rng: np.random.Generator) -> PassportKey:
        """A training-time draw from an outside stream; leaves last_key and the party's streams alone."""
        return draw_passport_elements(self.config, self.channel_means, rng, batch)


def input_scale(law: PassportLaw) -> float:
    """Factor E applies to W s: maps the law's RMS R to log1p(R) / 2."""
    rms = math.sqrt(law.N ** 2 / 3.0 + law.sigma2)
    return math.log1p(rms) / (2.0 * rms)


class PassportAutoencoder:
    """Encoder E: out_dim -> hidden, decoder D: hidden -> out_dim, identity activations."""

    def __init__(self, out_dim: int, hidden: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                 input_scale: float = 1.0):
        if not (input_scale > 0 and math.isfinite(input_scale)):
            raise PassportError(f"autoencoder input scale must be positive, got {input_scale}")
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = hidden if hidden is not None else max(1, math.ceil(out_dim / 4))
        self.out_dim = out_dim
        self.hidden = hidden
        self.input_scale = float(input_scale)
        self.params: Dict[str, Tensor] = {
            "enc_w": glorot_uniform(rng, (hidden, out_dim), out_dim, hidden),
            "enc_b": np.zeros(hidden),
            "dec_w": glorot_uniform(rng, (out_dim, hidden), hidden, out_dim),
            "dec_b": np.ones(out_dim),
        }

    @classmethod
    def identity(cls, out_dim: int) -> "PassportAutoencoder":
        ae = cls(out_dim, hidden=out_dim)
        ae.params["enc_w"][...] = np.eye(out_dim)
        ae.params["dec_w"][...] = np.eye(out_dim)
        ae.params["enc_b"][...] = 0.0
        ae.params["dec_b"][...] = 0.0
        return ae

    def forward(self, p: Tensor) -> Tuple[Tensor, Tuple[Tensor, Tensor]]:
        q = p * self.input_scale
        e = q @ self.params["enc_w"].T + self.params["enc_b"]
        d = e @ self.params["dec_w"].T + self.params["dec_b"]
        return d, (q, e)

    def backward(self, cache: Tuple[Tensor, Tensor], grad_d: Tensor) -> Tuple[Tensor, Dict[str, Tensor]]:
        q, e = cache
        flat_g = grad_d.reshape(-1, self.out_dim)
        flat_e = e.reshape(-1, self.hidden)
        flat_q = q.reshape(-1, self.out_dim)
        grad_e = flat_g @ self.params["dec_w"]
        grads = {
            "dec_w": flat_g.T @ flat_e,
            "dec_b": flat_g.sum(axis=0),
            "enc_w": grad_e.T @ flat_q,
            "enc_b": grad_e.sum(axis=0),
        }
        grad_p = self.input_scale * (grad_e @ self.params["enc_w"]).reshape(q.shape)
        return grad_p, grads


@dataclass
class _DerivedCache:
    s: Tensor
    ae_cache: Any
    spatial: Tuple[int, ...]


@dataclass
class PassportCache:
    x: Tensor
    wx: Tensor
    gamma: Tensor
    beta: Tensor
    gamma_cache: _DerivedCache
    beta_cache: _DerivedCache


class PassportLayer(Layer):
    """Wraps a Linear/Conv2d base; the base bias is dropped, beta plays its role."""

    kind = "passport"

    def __init__(self, base: WeightedLayer, config: PassportConfig, autoencoder: Optional[PassportAutoencoder] = None,
                 rng: Optional[np.random.Generator] = None, hidden: Optional[int] = None):
        super().__init__()
        if not isinstance(base, (Linear, Conv2d)):
            raise PassportError(f"Passport slots wrap Linear/Conv2d layers only, got {type(base).__name__}")
        if isinstance(base, Linear) and tuple(config.shape) != (base.in_dim,):
            raise ShapeMismatchError("Linear passport shape", expected=(base.in_dim,), actual=tuple(config.shape))
        if isinstance(base, Conv2d):
            if len(config.shape) != 3 or config.shape[0] != base.in_ch or min(config.shape[1:]) < base.kernel:
                raise ShapeMismatchError("Conv2d passport shape", expected=(base.in_ch, f">={base.kernel}", f">={base.kernel}"),
                                         actual=tuple(config.shape))
        base.drop_bias()
        self.base = base
        self.config = config
        if autoencoder is None:
            autoencoder = PassportAutoencoder(base.out_channels, hidden=hidden, rng=rng, input_scale=input_scale(config))
        if autoencoder.out_dim != base.out_channels:
            raise ShapeMismatchError("autoencoder width", expected=base.out_channels, actual=autoencoder.out_dim)
        self.autoencoder = autoencoder
        self.params = {"weight": base.params["weight"], **autoencoder.params}

    def set_autoencoder(self, autoencoder: PassportAutoencoder):
        self.autoencoder = autoencoder
        self.params = {"weight": self.base.params["weight"], **autoencoder.params}

    def output_shape(self, input_shape):
        return self.base.output_shape(input_shape)

    def check_key(self, key: PassportKey):
        expected = tuple(self.config.shape)
        actual = key.s_gamma.shape[1:] if key.per_sample else key.s_gamma.shape
        if tuple(actual) != expected or key.s_beta.shape != key.s_gamma.shape:
            raise ShapeMismatchError("passport key does not match the layer's passport config", expected=expected,
                                     actual=tuple(key.s_gamma.shape))

    def _derive(self, s: Tensor) -> Tuple[Tensor, _DerivedCache]:
        p = self.base.apply_weight(s)
        if p.ndim == 4:
            q = p.transpose(0, 2, 3, 1)
            d, ae_cache = self.autoencoder.forward(q)
            return d.mean(axis=(1, 2)), _DerivedCache(s, ae_cache, q.shape[1:3])
        d, ae_cache = self.autoencoder.forward(p)
        return d, _DerivedCache(s, ae_cache, ())

    def _derive_backward(self, cache: _DerivedCache, grad_derived: Tensor) -> Tuple[Tensor, Dict[str, Tensor], Tensor]:
        """Returns (dW, autoencoder grads, d passport)."""
        if cache.spatial:
            h, w = cache.spatial
            grad_d = np.broadcast_to(grad_derived[:, None, None, :] / (h * w),
                                     (grad_derived.shape[0], h, w, grad_derived.shape[1]))
            grad_q, ae_grads = self.autoencoder.backward(cache.ae_cache, grad_d)
            grad_p = grad_q.transpose(0, 3, 1, 2)
        else:
            grad_p, ae_grads = self.autoencoder.backward(cache.ae_cache, grad_derived)
        grad_w = self.base.weight_grad(cache.s, grad_p)
        grad_s = self.base.input_grad(grad_p, cache.s.shape)
        return grad_w, ae_grads, grad_s

    def scale_bias(self, key: PassportKey) -> Tuple[Tensor, Tensor, _DerivedCache, _DerivedCache]:
        self.check_key(key)
        s_gamma, s_beta = key.stacked()
        gamma, gamma_cache = self._derive(s_gamma)
        beta, beta_cache = self._derive(s_beta)
        return gamma, beta, gamma_cache, beta_cache

    def forward(self, x: Tensor, key: Optional[PassportKey] = None) -> Tuple[Tensor, PassportCache]:
        if key is None:
            raise PassportError("passport slot evaluated without a passport key")
        self.base.check_input(x)
        gamma, beta, gamma_cache, beta_cache = self.scale_bias(key)
        if gamma.shape[0] not in (1, x.shape[0]):
            raise ShapeMismatchError("per-sample passport count", expected=x.shape[0], actual=gamma.shape[0])
        wx = self.base.apply_weight(x)
        tail = (1,) * (wx.ndim - 2)
        out = gamma.reshape(gamma.shape + tail) * wx + beta.reshape(beta.shape + tail)
        return out, PassportCache(x, wx, gamma, beta, gamma_cache, beta_cache)

    def gradient_paths(self, cache: PassportCache, grad_out: Tensor) -> Dict[str, Any]:
        """Separate backpropagation paths via W, gamma and beta."""
        if grad_out.shape != cache.wx.shape:
            raise ShapeMismatchError("passport out_grad", expected=cache.wx.shape, actual=grad_out.shape)
        tail = (1,) * (grad_out.ndim - 2)
        spatial_axes = tuple(range(2, grad_out.ndim))
        per_sample = cache.gamma.shape[0] > 1 or grad_out.shape[0] == 1
        reduce_axes = spatial_axes if per_sample else (0,) + spatial_axes
        grad_gamma = (grad_out * cache.wx).sum(axis=reduce_axes)
        grad_beta = grad_out.sum(axis=reduce_axes)
        if not per_sample:
            grad_gamma, grad_beta = grad_gamma[None], grad_beta[None]

        grad_wx = grad_out * cache.gamma.reshape(cache.gamma.shape + tail)
        w_path = self.base.weight_grad(cache.x, grad_wx)
        grad_x = self.base.input_grad(grad_wx, cache.x.shape)
        gamma_w, gamma_ae, grad_s_gamma = self._derive_backward(cache.gamma_cache, grad_gamma)
        beta_w, beta_ae, grad_s_beta = self._derive_backward(cache.beta_cache, grad_beta)
        return {
            "w_path": w_path,
            "gamma_path": gamma_w,
            "beta_path": beta_w,
            "ae_gamma_path": gamma_ae,
            "ae_beta_path": beta_ae,
            "input": grad_x,
            "s_gamma": grad_s_gamma,
            "s_beta": grad_s_beta,
        }

    def backward(self, cache: PassportCache, grad_out: Tensor) -> Tuple[Tensor, Dict[str, Tensor]]:
        paths = self.gradient_paths(cache, grad_out)
        grads = {"weight": paths["w_path"] + paths["gamma_path"] + paths["beta_path"]}
        for name in self.autoencoder.params:
            grads[name] = paths["ae_gamma_path"][name] + paths["ae_beta_path"][name]
        return paths["input"], grads

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "base": self.base.describe(), "hidden": self.autoencoder.hidden,
                "passport": self.config.model_dump(mode="json")}


def derive_scale_bias(layer: PassportLayer, key: PassportKey) -> Tuple[Tensor, Tensor]:
    """gamma, beta with one scalar per output channel (leading axis: 1, or batch for per-sample keys)."""
    gamma, beta, _, _ = layer.scale_bias(key)
    return ensure_finite(gamma, "derive_scale_bias"), ensure_finite(beta, "derive_scale_bias")


def passport_forward(layer: PassportLayer, x_in: Tensor, key: PassportKey) -> Tuple[Tensor, PassportCache]:
    out, cache = layer.forward(x_in, key)
    return ensure_finite(out, "passport_forward"), cache


def passport_backward(layer: PassportLayer, cache: PassportCache, out_grad: Tensor) -> Tuple[Tensor, Dict[str, Tensor]]:
    """Returns (input gradient, parameter gradients for W and the autoencoder W')."""
    if not isinstance(cache, PassportCache):
        raise ShapeMismatchError("trace was not produced by passport_forward", expected="PassportCache",
                                 actual=type(cache).__name__)
    return layer.backward(cache, out_grad)


def passport_gradient_paths(layer: PassportLayer, cache: PassportCache, out_grad: Tensor) -> Dict[str, Any]:
    return layer.gradient_paths(cache, out_grad)


def neutral_key_for_linear(layer: PassportLayer) -> PassportKey:
    """Engineered key giving gamma = 1, beta = 0 through an identity autoencoder on a square invertible base."""
    w = layer.base.weight
    s_gamma = np.linalg.solve(w, np.ones(w.shape[0]))
    return PassportKey(s_gamma=s_gamma, s_beta=np.zeros(w.shape[1]), channel_means=tuple(np.zeros(w.shape[1])))


def passport_slots(layers: List[Layer]) -> List[int]:
    return [i for i, layer in enumerate(layers) if isinstance(layer, PassportLayer)]
