"""Convolutional variational autoencoder for canonical plume images.

All layer sizes come from :class:`ArchSpec`.  The encoder is a stack of
3x3 convolutions (padding 1), each followed by selu and 2x2 max pooling,
then a flatten and two dense heads with leaky relu giving the latent mean and
log-variance.  The decoder is one dense layer reshaped to a small image, then
stride-2 transposed convolutions that double the side each time, selu on all
but the last (linear) layer.

Training minimises, summed over a batch,

    (1/L) sum_l |b - d(u_l)|^2 + lam * KL(q(u|b) || N(0, I))

with ``u_l`` drawn by the reparameterisation ``mean + exp(logvar/2) * eps``.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError
from .plume import Plume, PlumeSet

log = logging.getLogger(__name__)

MAGIC = b"CVAE1"


@dataclass(frozen=True)
class ArchSpec:
    input_side: int = 64
    r: int = 20
    enc_channels: tuple[int, ...] = (8, 16, 32, 32, 64, 64)
    dec_channels: tuple[int, ...] = (64, 32, 32, 16, 8, 1)
    kernel: int = 3
    leaky_slope: float = 0.3

    def __post_init__(self):
        if self.r < 1 or self.kernel % 2 == 0:
            raise ConfigError("latent size must be >= 1 and the kernel side odd")
        if self.dec_channels[-1] != 1:
            raise ConfigError("the last decoder layer must produce one channel")
        side = self.input_side
        for _ in self.enc_channels:
            if side % 2:
                raise ConfigError(f"input side {self.input_side} cannot be halved "
                                  f"{len(self.enc_channels)} times")
            side //= 2
        if side * 2 ** len(self.dec_channels) != self.input_side:
            raise ConfigError("decoder layers must double the bottleneck back to the input side")

    @property
    def bottleneck_side(self) -> int:
        return self.input_side >> len(self.enc_channels)

    @property
    def flat_size(self) -> int:
        return self.enc_channels[-1] * self.bottleneck_side ** 2

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in storage order."""
        k = self.kernel
        out = []
        c_in = 1
        for i, c in enumerate(self.enc_channels):
            out += [(f"enc{i}.w", (c, c_in, k, k)), (f"enc{i}.b", (c,))]
            c_in = c
        out += [("mean.w", (self.r, self.flat_size)), ("mean.b", (self.r,)),
                ("logvar.w", (self.r, self.flat_size)), ("logvar.b", (self.r,)),
                ("dec_in.w", (self.flat_size, self.r)), ("dec_in.b", (self.flat_size,))]
        c_in = self.enc_channels[-1]
        for i, c in enumerate(self.dec_channels):
            out += [(f"dec{i}.w", (c_in, c, k, k)), (f"dec{i}.b", (c,))]
            c_in = c
        return out

    def to_text(self) -> str:
        return (f"input_side={self.input_side}\nr={self.r}\n"
                f"enc_channels={','.join(map(str, self.enc_channels))}\n"
                f"dec_channels={','.join(map(str, self.dec_channels))}\n"
                f"kernel={self.kernel}\nleaky_slope={self.leaky_slope!r}\n")

    @classmethod
    def from_text(cls, text: str) -> "ArchSpec":
        kv = dict(line.split("=", 1) for line in text.strip().splitlines())
        return cls(int(kv["input_side"]), int(kv["r"]),
                   tuple(int(c) for c in kv["enc_channels"].split(",")),
                   tuple(int(c) for c in kv["dec_channels"].split(",")),
                   int(kv["kernel"]), float(kv["leaky_slope"]))


@dataclass(frozen=True)
class LatentCode:
    mean: np.ndarray
    log_variance: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise DimensionError("latent code", expected=self.mean.shape, got=self.log_variance.shape)
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.log_variance))):
            raise ValueError("latent code must be finite")

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_variance)


@dataclass(frozen=True, eq=False)
class CvaeModel:
    arch: ArchSpec
    params: dict[str, np.ndarray] = field(repr=False)
    lam: float = 1e-9
    input_scale: float = 1.0   # the network sees b * input_scale; outputs are divided back

    @property
    def r(self) -> int:
        return self.arch.r

    @property
    def input_side(self) -> int:
        return self.arch.input_side

    def param_list(self) -> list[np.ndarray]:
        return [self.params[name] for name, _ in self.arch.shapes()]

    def with_params(self, arrays) -> "CvaeModel":
        names = [name for name, _ in self.arch.shapes()]
        return replace(self, params=dict(zip(names, arrays)))


def init_model(arch: ArchSpec, rng: np.random.Generator, lam: float = 1e-9,
               input_scale: float = 1.0) -> CvaeModel:
    """Glorot-uniform weights, zero biases."""
    params = {}
    for name, shape in arch.shapes():
        params[name] = np.zeros(shape) if name.endswith(".b") else ad.glorot_uniform(shape, rng)
    return CvaeModel(arch, params, lam, input_scale)


# forward graphs ----------------------------------------------------------------

def _encoder(arch: ArchSpec, P: dict, x: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
    h = x
    pad = arch.kernel // 2
    for i in range(len(arch.enc_channels)):
        h = ad.selu(ad.conv2d(h, P[f"enc{i}.w"], P[f"enc{i}.b"], padding=pad))
        h = ad.max_pool2d(h, 2)
    h = ad.flatten(h)
    mean = ad.leaky_relu(ad.dense(h, P["mean.w"], P["mean.b"]), arch.leaky_slope)
    logvar = ad.leaky_relu(ad.dense(h, P["logvar.w"], P["logvar.b"]), arch.leaky_slope)
    return mean, logvar


def _decoder(arch: ArchSpec, P: dict, u: ad.Tensor) -> ad.Tensor:
    n = u.shape[0]
    s = arch.bottleneck_side
    h = ad.reshape(ad.dense(u, P["dec_in.w"], P["dec_in.b"]), (n, arch.enc_channels[-1], s, s))
    pad = arch.kernel // 2
    last = len(arch.dec_channels) - 1
    for i in range(len(arch.dec_channels)):
        h = ad.conv2d_transpose(h, P[f"dec{i}.w"], P[f"dec{i}.b"], stride=2, padding=pad,
                                output_padding=1)
        if i < last:
            h = ad.selu(h)
    return h


def _images(model: CvaeModel, b) -> np.ndarray:
    """Stack plume(s) into an (N, S, S) float array checked against the input side."""
    if isinstance(b, PlumeSet):
        arr = b.images()
    elif isinstance(b, Plume):
        arr = b.values[None]
    else:
        arr = np.asarray(b, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
    s = model.input_side
    if arr.ndim != 3 or arr.shape[1:] != (s, s):
        raise DimensionError("cvae input", expected=(s, s), got=arr.shape[-2:])
    return arr


def encode_batch(model: CvaeModel, images, chunk: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Latent means and log-variances, each (N, r)."""
    arr = _images(model, images)
    P = {k: ad.Tensor(v) for k, v in model.params.items()}
    means, logvars = [], []
    for start in range(0, len(arr), chunk):
        x = ad.Tensor(arr[start:start + chunk, None] * model.input_scale)
        m, lv = _encoder(model.arch, P, x)
        means.append(m.data)
        logvars.append(lv.data)
    if not means:
        return np.zeros((0, model.r)), np.zeros((0, model.r))
    return np.concatenate(means), np.concatenate(logvars)


def encode(model: CvaeModel, b) -> LatentCode:
    """Variational mean and log-variance of one image (or a batch, with leading axis)."""
    single = isinstance(b, Plume) or np.ndim(b) == 2
    m, lv = encode_batch(model, b)
    return LatentCode(m[0], lv[0]) if single else LatentCode(m, lv)


def decode(model: CvaeModel, u, chunk: int = 64) -> np.ndarray:
    """Decoder mean image(s): (S, S) for one code, (N, S, S) for a batch."""
    U = np.asarray(u, dtype=np.float64)
    single = U.ndim == 1
    U = np.atleast_2d(U)
    if U.shape[1] != model.r:
        raise DimensionError("latent vector", expected=model.r, got=U.shape[1])
    P = {k: ad.Tensor(v) for k, v in model.params.items()}
    out = []
    for start in range(0, len(U), chunk):
        out.append(_decoder(model.arch, P, ad.Tensor(U[start:start + chunk])).data[:, 0])
    s = model.input_side
    imgs = np.concatenate(out) / model.input_scale if out else np.zeros((0, s, s))
    return imgs[0] if single else imgs


def sample_latent(code: LatentCode, rng_seed) -> np.ndarray:
    """Reparameterised draw ``mean + exp(logvar/2) * eps``."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    eps = rng.standard_normal(code.mean.shape)
    return code.mean + np.exp(0.5 * code.log_variance) * eps


def kl_term(code: LatentCode) -> float:
    """KL divergence from N(mean, diag(exp(logvar))) to N(0, I)."""
    lv, m = code.log_variance, code.mean
    return float(-0.5 * np.sum(lv + 1.0 - np.exp(lv) - m * m))


# loss ----------------------------------------------------------------------------

def loss_graph(model: CvaeModel, P: dict, batch: np.ndarray, noise: np.ndarray,
               lam: float | None = None) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """Total loss, reconstruction term and KL term as graph nodes.

    ``batch`` is (N, S, S) in physical units and ``noise`` (L, N, r) standard
    normal draws, so the loss is a deterministic function of the weights.
    """
    lam = model.lam if lam is None else lam
    n = len(batch)
    if n == 0:
        raise ValueError("loss needs a nonempty batch")
    draws = noise.shape[0]
    x = ad.Tensor(batch[:, None] * model.input_scale)
    mean, logvar = _encoder(model.arch, P, x)
    target = ad.Tensor(batch.reshape(n, -1))
    std = ad.exp(logvar * 0.5)
    recon = None
    for l in range(draws):
        u = mean + std * ad.Tensor(noise[l])
        out = ad.reshape(_decoder(model.arch, P, u), (n, -1)) * (1.0 / model.input_scale)
        term = ad.tsum(ad.square(target - out))
        recon = term if recon is None else recon + term
    recon = recon * (1.0 / draws)
    kl = ad.tsum(logvar + 1.0 - ad.exp(logvar) - ad.square(mean)) * -0.5
    return recon + kl * lam, recon, kl


def loss(model: CvaeModel, batch, L: int = 1, lam: float | None = None,
         rng: np.random.Generator | int | None = 0) -> float:
    arr = _images(model, batch)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    noise = rng.standard_normal((L, len(arr), model.r))
    P = {k: ad.Tensor(v) for k, v in model.params.items()}
    return loss_graph(model, P, arr, noise, lam)[0].item()


def loss_and_grads(model: CvaeModel, batch: np.ndarray, noise: np.ndarray,
                   lam: float | None = None) -> tuple[float, float, float, list[np.ndarray]]:
    """Loss, reconstruction, KL and gradients for every parameter in storage order."""
    names = [name for name, _ in model.arch.shapes()]
    P = {k: ad.parameter(model.params[k]) for k in names}
    total, recon, kl = loss_graph(model, P, batch, noise, lam)
    grads = ad.grad(total, [P[k] for k in names])
    return total.item(), recon.item(), kl.item(), grads


def reconstruction_mse(model: CvaeModel, images) -> np.ndarray:
    """Per-image mean squared error of decode(encode mean)."""
    arr = _images(model, images)
    means, _ = encode_batch(model, arr)
    rec = decode(model, means)
    if rec.ndim == 2:
        rec = rec[None]
    return np.mean((rec - arr) ** 2, axis=(1, 2))


# training --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    restarts: int = 10
    batch_size: int = 64
    L: int = 1
    lam: float = 1e-9
    seed: int = 0
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.epochs < 0 or self.restarts < 1 or self.batch_size < 1 or self.L < 1:
            raise ConfigError("epochs must be >= 0 and restarts, batch_size, L >= 1")
        if self.lam < 0 or self.learning_rate <= 0:
            raise ConfigError("lambda must be >= 0 and the learning rate > 0")


@dataclass
class TrainHistory:
    epoch_loss: list[list[float]] = field(default_factory=list)        # per restart
    validation_mse: list[list[float]] = field(default_factory=list)    # per restart, monitoring only
    final_train_mse: list[float] = field(default_factory=list)         # nan for aborted restarts
    chosen: int = -1


def _input_scale(images: np.ndarray) -> float:
    peak = float(np.max(np.abs(images))) if images.size else 0.0
    return 1.0 / peak if peak > 0 else 1.0


def train_once(images: np.ndarray, arch: ArchSpec, cfg: TrainConfig, rng: np.random.Generator,
               validation: np.ndarray | None = None) -> tuple[CvaeModel | None, list[float], list[float]]:
    """One training run.  Returns ``(None, ...)`` if the loss turns non-finite."""
    model = init_model(arch, rng, cfg.lam, _input_scale(images))
    params = model.param_list()
    state = ad.AdamState.for_params(params, learning_rate=cfg.learning_rate)
    n = len(images)
    losses, val = [], []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            noise = rng.standard_normal((cfg.L, len(idx), arch.r))
            value, _, _, grads = loss_and_grads(model, images[idx], noise)
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
                log.warning("non-finite loss at epoch %d; restart aborted", epoch)
                return None, losses, val
            total += value
            params, state = ad.adam_step(params, grads, state)
            model = model.with_params(params)
        losses.append(total / n)
        if validation is not None and len(validation):
            val.append(float(np.mean(reconstruction_mse(model, validation))))
    return model, losses, val


def train(dataset, cfg: TrainConfig = TrainConfig(), arch: ArchSpec | None = None,
          validation=None) -> tuple[CvaeModel, TrainHistory]:
    """Independent restarts; keeps the one with the lowest final training reconstruction MSE."""
    images = dataset.images() if isinstance(dataset, PlumeSet) else np.asarray(dataset, dtype=float)
    if len(images) == 0:
        raise ValueError("training set is empty")
    arch = arch or ArchSpec(input_side=images.shape[-1])
    if images.shape[1:] != (arch.input_side, arch.input_side):
        raise DimensionError("training images", expected=(arch.input_side,) * 2,
                             got=images.shape[1:])
    if validation is not None:
        validation = validation.images() if isinstance(validation, PlumeSet) else np.asarray(validation)
    history = TrainHistory()
    best, best_mse = None, math.inf
    for k, seq in enumerate(np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)):
        rng = np.random.default_rng(seq)
        model, losses, val = train_once(images, arch, cfg, rng, validation)
        history.epoch_loss.append(losses)
        history.validation_mse.append(val)
        if model is None:
            history.final_train_mse.append(float("nan"))
            continue
        mse = float(np.mean(reconstruction_mse(model, images)))
        history.final_train_mse.append(mse)
        log.info("restart %d: final loss %s, training mse %.6g", k,
                 f"{losses[-1]:.6g}" if losses else "n/a", mse)
        if mse < best_mse:
            best, best_mse, history.chosen = model, mse, k
    if best is None:
        raise ArithmeticError("every training restart diverged")
    return best, history


def split_train_validation(dataset: PlumeSet, fraction: float = 0.7, seed: int = 0
                           ) -> tuple[PlumeSet, PlumeSet]:
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    n = len(dataset)
    n_train = int(round(fraction * n))
    if n_train < 1 or n - n_train < 1:
        raise ValueError(f"{n} plumes cannot be split into two nonempty parts at {fraction}")
    order = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(order[:n_train])), dataset.subset(np.sort(order[n_train:]))


# persistence -------------------------------------------------------------------------

def save_model(path: str | os.PathLike, model: CvaeModel) -> None:
    header = model.arch.to_text() + f"lambda={model.lam!r}\ninput_scale={model.input_scale!r}\n"
    with open(path, "wb") as fh:
        fh.write(MAGIC + b"\n" + header.encode("ascii") + b"END\n")
        for arr in model.param_list():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path: str | os.PathLike) -> CvaeModel:
    with open(path, "rb") as fh:
        if fh.readline().rstrip(b"\n") != MAGIC:
            raise ValueError(f"{path}: not a {MAGIC.decode()} checkpoint")
        lines = []
        while (line := fh.readline()) != b"END\n":
            if not line:
                raise ValueError(f"{path}: truncated header")
            lines.append(line.decode("ascii"))
        blob = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    kv = dict(line.strip().split("=", 1) for line in lines)
    arch = ArchSpec.from_text("".join(l for l in lines if not l.startswith(("lambda", "input_scale"))))
    params, pos = {}, 0
    for name, shape in arch.shapes():
        size = int(np.prod(shape))
        if pos + size > blob.size:
            raise ValueError(f"{path}: truncated weights")
        params[name] = blob[pos:pos + size].reshape(shape)
        pos += size
    if pos != blob.size:
        raise ValueError(f"{path}: trailing data after weights")
    return CvaeModel(arch, params, float(kv["lambda"]), float(kv["input_scale"]))
