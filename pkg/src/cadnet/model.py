"""The context-conditioned VAE: encoder, context subnetwork, decoder, loss and checkpoints.

Data flow for a batch (``B`` samples)::

    x (B,S,S,C) -> conv3x3 stack (ReLU) -> flatten -> FC (ReLU) -> e
    time (sin,cos) -> FC 32 -> FC -> FC -> c_t     (each ReLU)
    gps  (lat,lon) -> FC 32 -> FC -> FC -> c_l
    frame (F)      -> FC -> FC -> c_f
    c = [c_t, c_l, c_f]          (disabled branches are left out)
    d = [e, c] -> mu, logvar heads -> z = mu + exp(logvar/2) * eps
    h2 = ReLU(FC([z, c]))        (c only when skip_context)
    h3 = reshape(h2, S,S,C)
    x_hat = sigmoid(conv3x3([h3, x]))   (x only when skip_main)

The main-input skip concatenates the untouched ``x`` onto ``h3`` along channels;
the two already have the same spatial extent, so no cropping is needed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, BinaryIO, Mapping

import numpy as np

from cadnet.errors import CheckpointError, ConfigurationError, VersionError
from cadnet.grid import DEFAULT_CLASSES, DEFAULT_F, DEFAULT_S, Batch, gps_features, time_features
from cadnet.numerics import ParameterStore, Tape, Var

TIME_EMBED = 32
GPS_EMBED = 32


@dataclass(frozen=True)
class AblationFlags:
    use_gps: bool = True
    use_time: bool = True
    use_frame: bool = True
    skip_main: bool = True
    skip_context: bool = True

    @property
    def any_context(self) -> bool:
        return self.use_gps or self.use_time or self.use_frame


VARIANTS: dict[str, AblationFlags] = {
    "full": AblationFlags(),
    "wo-gps-time": AblationFlags(use_gps=False, use_time=False),
    "wo-time": AblationFlags(use_time=False),
    "wo-gps": AblationFlags(use_gps=False),
    "wo-frame": AblationFlags(use_frame=False),
    "wo-skip": AblationFlags(skip_main=False, skip_context=False),
    "wo-skip-m": AblationFlags(skip_main=False),
    "wo-skip-c": AblationFlags(skip_context=False),
}


@dataclass(frozen=True)
class ModelConfig:
    S: int = DEFAULT_S
    C: int = len(DEFAULT_CLASSES)
    F: int = DEFAULT_F
    conv_channels: tuple[int, ...] = (16, 32)
    kernel: int = 3
    encoder_fc: int = 128
    context_time: int = 32
    context_gps: int = 32
    context_frame: int = 64
    frame_hidden: int = 64
    latent: int = 32
    ablation: AblationFlags = AblationFlags()
    variational: bool = True
    gps_bounds: tuple[float, float, float, float] = (-90.0, 90.0, -180.0, 180.0)
    skip_gain: float = 4.0  # initial centre-tap weight of the main-input skip

    def __post_init__(self) -> None:
        if min(self.S, self.C, self.F, self.encoder_fc, self.latent) < 1:
            raise ConfigurationError("all extents must be positive")
        if self.kernel % 2 != 1:
            raise ConfigurationError("kernel extent must be odd")

    @property
    def h2_width(self) -> int:
        return self.S * self.S * self.C

    @property
    def context_width(self) -> int:
        a = self.ablation
        return a.use_time * self.context_time + a.use_gps * self.context_gps + a.use_frame * self.context_frame

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["gps_bounds"] = list(self.gps_bounds)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelConfig":
        d = dict(d)
        d["ablation"] = AblationFlags(**d.get("ablation", {}))
        d["conv_channels"] = tuple(d.get("conv_channels", (16, 32)))
        d["gps_bounds"] = tuple(d.get("gps_bounds", (-90.0, 90.0, -180.0, 180.0)))
        return cls(**d)


def variant_config(name: str, base: ModelConfig | None = None) -> ModelConfig:
    """Config for a named ablation row, or ``"autoencoder"`` for the deterministic baseline."""
    base = base or ModelConfig()
    if name == "autoencoder":
        flags = AblationFlags(use_gps=False, use_time=False, use_frame=False, skip_main=True, skip_context=False)
        return replace(base, ablation=flags, variational=False)
    if name not in VARIANTS:
        raise ConfigurationError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS) + ['autoencoder']}")
    return replace(base, ablation=VARIANTS[name], variational=True)


@dataclass
class ForwardTrace:
    """Every named activation of one forward pass (as Vars on the tape)."""

    e: Var
    c_t: Var | None
    c_l: Var | None
    c_f: Var | None
    c: Var | None
    d: Var
    mu: Var
    logvar: Var | None
    z: Var
    h2: Var
    h3: Var
    logits: Var
    xhat: Var

    def value(self, name: str) -> np.ndarray | None:
        v = getattr(self, name)
        return None if v is None else v.value

    @property
    def reconstruction(self) -> np.ndarray:
        """x_hat clamped into [1e-6, 1 - 1e-6], the range the loss and scorer see."""
        return np.clip(self.xhat.value, 1e-6, 1 - 1e-6)


@dataclass
class Inputs:
    """Network-ready arrays for a batch."""

    x: np.ndarray
    time: np.ndarray  # (B, 2) cyclic features
    gps: np.ndarray  # (B, 2) normalised
    frame: np.ndarray  # (B, F)

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx: np.ndarray | slice) -> "Inputs":
        return Inputs(self.x[idx], self.time[idx], self.gps[idx], self.frame[idx])

    def astype(self, dtype: np.dtype | type) -> "Inputs":
        return Inputs(*(a.astype(dtype) for a in (self.x, self.time, self.gps, self.frame)))


def make_inputs(batch: Batch, config: ModelConfig, dtype: np.dtype | type = np.float32) -> Inputs:
    if batch.x.shape[1:] != (config.S, config.S, config.C):
        raise ConfigurationError(f"grid shape {batch.x.shape[1:]} does not match model ({config.S},{config.S},{config.C})")
    if batch.frame.shape[1] != config.F:
        raise ConfigurationError(f"frame length {batch.frame.shape[1]} does not match model F={config.F}")
    return Inputs(
        x=np.ascontiguousarray(batch.x, dtype=dtype),
        time=time_features(batch.time).astype(dtype),
        gps=gps_features(batch.lat, batch.lon, config.gps_bounds).astype(dtype),
        frame=np.ascontiguousarray(batch.frame, dtype=dtype),
    )


class CADNet:
    """Parameters plus the forward graph for one :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, params: ParameterStore | None = None, seed: int = 0,
                 dtype: np.dtype | type = np.float32) -> None:
        self.config = config
        if params is None:
            params = init_params(config, seed, dtype)
        else:
            check_shapes(params, config)
        self.params = params

    # -- forward ----------------------------------------------------------

    def _fc(self, tape: Tape, x: Var, name: str, relu: bool = True) -> Var:
        p = self.params
        out = tape.fc(x, p.var(f"{name}.w"), p.var(f"{name}.b"))
        return tape.relu(out) if relu else out

    def context_forward(self, tape: Tape, inp: Inputs) -> tuple[Var | None, Var | None, Var | None, Var | None]:
        a = self.config.ablation
        c_t = c_l = c_f = None
        if a.use_time:
            h = Var(inp.time)
            for layer in ("embed", "fc0", "fc1"):
                h = self._fc(tape, h, f"context.time.{layer}")
            c_t = h
        if a.use_gps:
            h = Var(inp.gps)
            for layer in ("embed", "fc0", "fc1"):
                h = self._fc(tape, h, f"context.gps.{layer}")
            c_l = h
        if a.use_frame:
            h = Var(inp.frame)
            for layer in ("fc0", "fc1"):
                h = self._fc(tape, h, f"context.frame.{layer}")
            c_f = h
        parts = [v for v in (c_t, c_l, c_f) if v is not None]
        c = tape.concat(parts) if parts else None
        return c_t, c_l, c_f, c

    def encode(self, tape: Tape, x: np.ndarray) -> Var:
        cfg = self.config
        if x.shape[1:] != (cfg.S, cfg.S, cfg.C):
            raise ConfigurationError(f"encoder expects (B,{cfg.S},{cfg.S},{cfg.C}), got {x.shape}")
        h = Var(x)
        for i in range(len(cfg.conv_channels)):
            h = tape.relu(tape.conv2d(h, self.params.var(f"encoder.conv{i}.w"), self.params.var(f"encoder.conv{i}.b")))
        h = tape.reshape(h, (x.shape[0], -1))
        return self._fc(tape, h, "encoder.fc")

    def forward(self, tape: Tape, inp: Inputs, eps: np.ndarray | None = None) -> ForwardTrace:
        """Full pass; ``eps=None`` means zero noise (``z = mu``)."""
        cfg = self.config
        B = inp.x.shape[0]
        e = self.encode(tape, inp.x)
        c_t, c_l, c_f, c = self.context_forward(tape, inp)
        d = tape.concat([e, c]) if c is not None else e
        mu = self._fc(tape, d, "decoder.mu", relu=False)
        logvar = None
        if cfg.variational:
            logvar = self._fc(tape, d, "decoder.sigma", relu=False)
            noise = np.zeros_like(mu.value) if eps is None else np.asarray(eps, dtype=mu.value.dtype)
            z = tape.reparameterize(mu, logvar, noise)
        else:
            z = mu
        dec_in = tape.concat([z, c]) if (cfg.ablation.skip_context and c is not None) else z
        h2 = self._fc(tape, dec_in, "decoder.h2")
        h3 = tape.reshape(h2, (B, cfg.S, cfg.S, cfg.C))
        out_in = tape.concat([h3, Var(inp.x)], axis=-1) if cfg.ablation.skip_main else h3
        logits = tape.conv2d(out_in, self.params.var("decoder.outconv.w"), self.params.var("decoder.outconv.b"))
        xhat = tape.sigmoid(logits)
        return ForwardTrace(e, c_t, c_l, c_f, c, d, mu, logvar, z, h2, h3, logits, xhat)

    def loss(self, tape: Tape, inp: Inputs, trace: ForwardTrace, kl_weight: float = 1.0) -> Var:
        """Batch mean of summed BCE plus ``kl_weight`` times the closed-form KL."""
        bce = tape.bce_sum(inp.x, trace.xhat)
        terms = [(1.0, bce)]
        if self.config.variational and kl_weight != 0:
            assert trace.logvar is not None
            terms.append((kl_weight, tape.kl_normal(trace.mu, trace.logvar)))
        return tape.weighted_mean(terms)

    def reconstruct(self, inp: Inputs, batch_size: int = 256) -> np.ndarray:
        """Deterministic (z = mu) reconstructions, clamped like the loss sees them."""
        out = np.empty_like(inp.x)
        for start in range(0, len(inp), batch_size):
            sl = slice(start, start + batch_size)
            trace = self.forward(Tape(), inp.subset(sl))
            out[sl] = trace.reconstruction
        self.params.release()
        return out

    def noise(self, rng: np.random.Generator, batch: int) -> np.ndarray:
        return rng.standard_normal((batch, self.config.latent)).astype(self.params.dtype)


# -- parameters -------------------------------------------------------------


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in checkpoint order."""
    cfg = config
    a = cfg.ablation
    shapes: dict[str, tuple[int, ...]] = {}

    def fc(name: str, n_in: int, n_out: int) -> None:
        shapes[f"{name}.w"] = (n_in, n_out)
        shapes[f"{name}.b"] = (n_out,)

    cin = cfg.C
    for i, ch in enumerate(cfg.conv_channels):
        shapes[f"encoder.conv{i}.w"] = (cfg.kernel, cfg.kernel, cin, ch)
        shapes[f"encoder.conv{i}.b"] = (ch,)
        cin = ch
    fc("encoder.fc", cfg.S * cfg.S * cin, cfg.encoder_fc)
    if a.use_time:
        fc("context.time.embed", 2, TIME_EMBED)
        fc("context.time.fc0", TIME_EMBED, cfg.context_time)
        fc("context.time.fc1", cfg.context_time, cfg.context_time)
    if a.use_gps:
        fc("context.gps.embed", 2, GPS_EMBED)
        fc("context.gps.fc0", GPS_EMBED, cfg.context_gps)
        fc("context.gps.fc1", cfg.context_gps, cfg.context_gps)
    if a.use_frame:
        fc("context.frame.fc0", cfg.F, cfg.frame_hidden)
        fc("context.frame.fc1", cfg.frame_hidden, cfg.context_frame)
    d = cfg.encoder_fc + cfg.context_width
    fc("decoder.mu", d, cfg.latent)
    if cfg.variational:
        fc("decoder.sigma", d, cfg.latent)
    dec_in = cfg.latent + (cfg.context_width if a.skip_context else 0)
    fc("decoder.h2", dec_in, cfg.h2_width)
    out_in = cfg.C * (2 if a.skip_main else 1)
    shapes["decoder.outconv.w"] = (cfg.kernel, cfg.kernel, out_in, cfg.C)
    shapes["decoder.outconv.b"] = (cfg.C,)
    return shapes


# Output conv starts near an empty-grid prior; with the main-input skip, the
# centre tap from x channel k to output k starts as a soft identity of gain
# ``config.skip_gain``.
OUTPUT_BIAS_INIT = -6.0


def init_params(config: ModelConfig, seed: int, dtype: np.dtype | type = np.float32) -> ParameterStore:
    """He-normal weights for ReLU layers, small Glorot weights for the latent heads, zero biases."""
    from cadnet.world.generate import derive_rng

    rng = derive_rng(seed, "init")
    store = ParameterStore(dtype)
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            value = np.zeros(shape)
            if name == "decoder.outconv.b":
                value[:] = OUTPUT_BIAS_INIT
        else:
            fan_in = int(np.prod(shape[:-1]))
            if name.startswith(("decoder.mu", "decoder.sigma")):
                std = np.sqrt(1.0 / (fan_in + shape[-1]))
            elif name.startswith("decoder.outconv"):
                std = np.sqrt(1.0 / fan_in)
            else:
                std = np.sqrt(2.0 / fan_in)
            value = rng.normal(0.0, std, shape)
            if name == "decoder.outconv.w" and config.ablation.skip_main:
                centre = config.kernel // 2
                for k in range(config.C):
                    value[centre, centre, config.C + k, k] += config.skip_gain
        store.add(name, value)
    return store


def check_shapes(store: ParameterStore, config: ModelConfig) -> None:
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in store:
            raise CheckpointError(f"parameter {name!r} missing (expected shape {shape})")
        if store[name].shape != shape:
            raise CheckpointError(f"parameter {name!r}: expected shape {shape}, got {store[name].shape}")
    extra = [n for n in store if n not in expected]
    if extra:
        raise CheckpointError(f"unexpected parameters {extra}")


# -- checkpoints ------------------------------------------------------------

MAGIC = b"CADNETCK"
CHECKPOINT_VERSION = 1
CACHE_PREFIX = "rmsprop.cache:"


def _write_tensor(fh: BinaryIO, name: str, a: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)) + raw)
    fh.write(struct.pack("<B", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
    fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def save_checkpoint(path: str | Path, model: CADNet, state: Mapping[str, Any] | None = None) -> None:
    """Binary checkpoint, all integers little-endian:

    ``magic[8] | u32 version | u32 n, config JSON[n] | u32 n, state JSON[n] | u32 tensor count |``
    then per tensor ``u16 n, name[n] | u8 ndim | u32 dims[ndim] | float32 data``.
    Parameters come first in model order, followed by their RMSProp caches.
    """
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    st = json.dumps(dict(state or {}), sort_keys=True).encode("utf-8")
    store = model.params
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg)) + cfg)
        fh.write(struct.pack("<I", len(st)) + st)
        fh.write(struct.pack("<I", 2 * len(store)))
        for name in store:
            _write_tensor(fh, name, store[name])
        for name in store:
            _write_tensor(fh, CACHE_PREFIX + name, store.caches[name])


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> tuple[CADNet, dict[str, Any]]:
    """Load a checkpoint; if ``config`` is given, shapes are validated against it instead of the embedded one."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != MAGIC:
            raise CheckpointError(f"{path}: not a cadnet checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise VersionError(f"{path}: checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        embedded = ModelConfig.from_dict(json.loads(_read_exact(fh, n)))
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        state = json.loads(_read_exact(fh, n))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (ln,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, ln).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            size = int(np.prod(dims)) if ndim else 1
            tensors[name] = np.frombuffer(_read_exact(fh, 4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    cfg = config or embedded
    store = ParameterStore(np.float32)
    for name, shape in param_shapes(cfg).items():
        if name not in tensors:
            raise CheckpointError(f"parameter {name!r} missing from checkpoint (expected shape {shape})")
        if tensors[name].shape != shape:
            raise CheckpointError(f"parameter {name!r}: expected shape {shape}, checkpoint has {tensors[name].shape}")
        store.add(name, tensors[name])
        cache = tensors.get(CACHE_PREFIX + name)
        if cache is not None:
            store.caches[name][...] = cache
    return CADNet(cfg, store), state


# -- gradient verification --------------------------------------------------


def toy_config(variant: str = "full") -> ModelConfig:
    """A 4x4 grid, 4 classes and narrow layers: small enough to finite-difference every weight."""
    base = ModelConfig(S=4, C=4, F=8, conv_channels=(4, 4), encoder_fc=8, context_time=4, context_gps=4,
                       context_frame=4, frame_hidden=4, latent=4, gps_bounds=(0.0, 1.0, 0.0, 1.0))
    return variant_config(variant, base)


def random_inputs(config: ModelConfig, batch: int, seed: int, dtype: np.dtype | type = np.float64) -> Inputs:
    """Sparse random grids with matching context features, for tests and probes."""
    from cadnet.world.generate import derive_rng

    rng = derive_rng(seed, "probe")
    S, C = config.S, config.C
    x = np.where(rng.random((batch, S, S, C)) < 0.2, rng.uniform(0.6, 1.0, (batch, S, S, C)), 0.0)
    angle = rng.uniform(0, 2 * np.pi, batch)
    return Inputs(
        x=x.astype(dtype),
        time=np.stack([np.sin(angle), np.cos(angle)], axis=1).astype(dtype),
        gps=rng.random((batch, 2)).astype(dtype),
        frame=rng.standard_normal((batch, config.F)).astype(dtype),
    )


def check_gradients(config: ModelConfig | None = None, seed: int = 0, batch: int = 3, h: float = 1e-5,
                    tol: float = 1e-3, kl_weight: float = 1.0):
    """Finite-difference check of the full loss (reconstruction + KL) with frozen noise, in float64.

    Biases get small random offsets first. With zero biases a unit whose inputs
    are all dead sits exactly on the ReLU kink, where central differences and
    the subgradient legitimately disagree.
    """
    from cadnet.numerics import gradcheck
    from cadnet.world.generate import derive_rng

    config = config or toy_config()
    model = CADNet(config, seed=seed, dtype=np.float64)
    jitter = derive_rng(seed, "gradcheck")
    for name in model.params.names():
        if name.endswith(".b"):
            arr = model.params[name]
            arr += jitter.uniform(-0.1, 0.1, arr.shape)
    inp = random_inputs(config, batch, seed)
    eps = derive_rng(seed, "noise").standard_normal((batch, config.latent)) if config.variational else None

    def loss_fn(store: ParameterStore, tape: Tape) -> Var:
        m = CADNet(config, store)
        trace = m.forward(tape, inp, eps)
        return m.loss(tape, inp, trace, kl_weight)

    return gradcheck(loss_fn, model.params, h=h, tol=tol)
