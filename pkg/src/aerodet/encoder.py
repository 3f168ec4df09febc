"""Toy-scale bidirectional-SSM image encoder.

Patch embedding with a class token and learned position embeddings, a
stack of pre-norm residual blocks that run a selective scan over the
token axis in both directions, a normalized class-token head, and an
exact parameter / FLOP counter.

Forward passes are pure functions of (weights, input) and are written
dtype-generically so complex-step differentiation can reuse the same
code path for gradient checking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .errors import ContractError

_NORM_EPS = 1e-6
_INIT_SCALE = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    image_h: int
    image_w: int
    channels: int
    patch_mode: str = "conv"       # "nonoverlap" or "conv"
    patch_size: int = 16           # S, nonoverlap mode
    kernel: int = 16               # k, conv mode
    stride: int = 8                # s, conv mode
    embed_dim: int = 64            # D
    inner_dim: int = 128           # expanded width inside each block
    state_dim: int = 8             # N
    depth: int = 2                 # L
    num_classes: int = 16
    conv_width: int = 4            # causal 1-D conv taps per channel
    seed: int = 0

    def __post_init__(self):
        for name in ("image_h", "image_w", "channels", "embed_dim", "inner_dim",
                     "state_dim", "depth", "num_classes", "conv_width"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.patch_mode == "nonoverlap":
            if self.image_h % self.patch_size or self.image_w % self.patch_size:
                raise ContractError("patch_size must divide both image dimensions")
        elif self.patch_mode == "conv":
            if (self.image_h - self.kernel) % self.stride or (self.image_w - self.kernel) % self.stride:
                raise ContractError("(image - kernel) must be divisible by stride")
            if self.kernel > self.image_h or self.kernel > self.image_w:
                raise ContractError("kernel larger than image")
        else:
            raise ContractError(f"unknown patch_mode {self.patch_mode!r}")

    @property
    def num_patches(self):
        if self.patch_mode == "nonoverlap":
            return (self.image_h // self.patch_size) * (self.image_w // self.patch_size)
        rows = (self.image_h - self.kernel) // self.stride + 1
        cols = (self.image_w - self.kernel) // self.stride + 1
        return rows * cols

    @property
    def patch_len(self):
        side = self.patch_size if self.patch_mode == "nonoverlap" else self.kernel
        return side * side * self.channels


@dataclass
class DirectionWeights:
    conv_w: np.ndarray    # (inner, conv_width) causal taps, newest first
    w_delta: np.ndarray   # (inner, inner)
    w_f: np.ndarray       # (inner, state_dim)
    w_g: np.ndarray       # (inner, state_dim)


@dataclass
class SoarBlockWeights:
    norm_scale: np.ndarray   # (D,)
    norm_offset: np.ndarray  # (D,)
    w_x: np.ndarray          # (D, inner)
    w_z: np.ndarray          # (D, inner)
    fwd: DirectionWeights
    bwd: DirectionWeights
    E: np.ndarray            # (inner, state_dim), shared between directions
    w_out: np.ndarray        # (inner, D)


@dataclass
class EncoderWeights:
    patch_proj: np.ndarray   # (patch_len, D)
    cls: np.ndarray          # (D,)
    pos: np.ndarray          # (J+1, D)
    blocks: List[SoarBlockWeights]
    head_norm_scale: np.ndarray   # (D,)
    head_norm_offset: np.ndarray  # (D,)
    mlp_w1: np.ndarray       # (D, D)
    mlp_w2: np.ndarray       # (D, num_classes)


@dataclass(frozen=True)
class ComputeBudget:
    params: int
    gflops: float
    breakdown: Tuple[Tuple[str, int, float], ...]  # (item, params, gflops)


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _softplus(x):
    if np.iscomplexobj(x):
        return np.log1p(np.exp(x))
    return np.logaddexp(0.0, x)


def _layernorm(x, scale, offset, eps=_NORM_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * scale + offset


def _zoh_phi(dE):
    # (exp(x) - 1)/x with the x -> 0 limit; complex-safe
    small = np.abs(dE) < 1e-8
    safe = np.where(small, 1.0, dE)
    return np.where(small, 1.0, (np.exp(safe) - 1.0) / safe)


def patchify(image: np.ndarray, config: EncoderConfig) -> np.ndarray:
    """Flatten the image into J patches of length patch_len, row-major."""
    if image.shape != (config.image_h, config.image_w, config.channels):
        raise ContractError(
            f"image shape {image.shape} does not match config "
            f"({config.image_h}, {config.image_w}, {config.channels})")
    if config.patch_mode == "nonoverlap":
        S = config.patch_size
        rows, cols = config.image_h // S, config.image_w // S
        side = S
        step = S
    else:
        side = config.kernel
        step = config.stride
        rows = (config.image_h - side) // step + 1
        cols = (config.image_w - side) // step + 1
    out = np.empty((rows * cols, side * side * config.channels), dtype=image.dtype)
    idx = 0
    for r in range(rows):
        for c in range(cols):
            y, x = r * step, c * step
            out[idx] = image[y:y + side, x:x + side, :].reshape(-1)
            idx += 1
    return out


def embed_tokens(patches: np.ndarray, proj: np.ndarray, cls: np.ndarray,
                 pos: np.ndarray) -> np.ndarray:
    """Project patches to D, prepend the class token, add position embeddings."""
    J = patches.shape[0]
    D = proj.shape[1]
    if patches.shape[1] != proj.shape[0]:
        raise ContractError("patch length does not match projection rows")
    if cls.shape != (D,) or pos.shape != (J + 1, D):
        raise ContractError("class token / position embedding shape mismatch")
    tokens = np.empty((J + 1, D), dtype=np.result_type(patches, proj, cls, pos))
    tokens[0] = cls
    tokens[1:] = patches @ proj
    return tokens + pos


def _causal_conv(x, conv_w):
    """Per-channel causal convolution over the token axis, leading-side pad.

    x: (T, C); conv_w: (C, W) with tap 0 applied to the current token.
    """
    T = x.shape[0]
    out = x * conv_w[:, 0]
    for j in range(1, conv_w.shape[1]):
        out[j:] += x[:T - j] * conv_w[:, j]
    return out


def _direction_scan(x_conv, dw: DirectionWeights, E):
    """Selective scan of all channels of one direction, vectorized per step.

    x_conv: (T, inner) post-conv activations; returns (T, inner).
    """
    T, C = x_conv.shape
    delta = _softplus(x_conv @ dw.w_delta)        # (T, C)
    F = x_conv @ dw.w_f                           # (T, N)
    G = x_conv @ dw.w_g                           # (T, N)
    z = np.zeros((C, E.shape[1]), dtype=x_conv.dtype)
    out = np.empty((T, C), dtype=x_conv.dtype)
    for t in range(T):
        dE = delta[t][:, None] * E                # (C, N)
        a = np.exp(dE)
        b = _zoh_phi(dE) * delta[t][:, None] * F[t][None, :]
        z = a * z + b * x_conv[t][:, None]
        out[t] = z @ G[t]
    return out


def soar_block(tokens: np.ndarray, w: SoarBlockWeights) -> np.ndarray:
    """One pre-norm residual block with forward and backward token scans."""
    if tokens.shape[1] != w.w_x.shape[0]:
        raise ContractError("token width does not match block weights")
    y = _layernorm(tokens, w.norm_scale, w.norm_offset)
    x = y @ w.w_x
    z = y @ w.w_z
    xf = _silu(_causal_conv(x, w.fwd.conv_w))
    v_fwd = _direction_scan(xf, w.fwd, w.E)
    xb = _silu(_causal_conv(x[::-1], w.bwd.conv_w))
    v_bwd = _direction_scan(xb, w.bwd, w.E)[::-1]
    gated = (v_fwd + v_bwd) * _silu(z)
    return tokens + gated @ w.w_out


def init_weights(config: EncoderConfig) -> EncoderWeights:
    """Seeded initialization: normal(0, 0.02) projections, unit norms,
    stable negative diagonal state matrix E[c, n] = -(n+1)."""
    rng = np.random.default_rng(config.seed)
    D, C, N = config.embed_dim, config.inner_dim, config.state_dim

    def w(*shape):
        return rng.normal(0.0, _INIT_SCALE, shape)

    blocks = []
    for _ in range(config.depth):
        def direction():
            return DirectionWeights(conv_w=w(C, config.conv_width),
                                    w_delta=w(C, C), w_f=w(C, N), w_g=w(C, N))
        blocks.append(SoarBlockWeights(
            norm_scale=np.ones(D), norm_offset=np.zeros(D),
            w_x=w(D, C), w_z=w(D, C),
            fwd=direction(), bwd=direction(),
            E=-np.tile(np.arange(1.0, N + 1.0), (C, 1)),
            w_out=w(C, D)))
    return EncoderWeights(
        patch_proj=w(config.patch_len, D),
        cls=w(D),
        pos=w(config.num_patches + 1, D),
        blocks=blocks,
        head_norm_scale=np.ones(D), head_norm_offset=np.zeros(D),
        mlp_w1=w(D, D), mlp_w2=w(D, config.num_classes))


def encode(image: np.ndarray, weights: EncoderWeights,
           config: EncoderConfig) -> np.ndarray:
    """Full forward pass: class scores of length num_classes."""
    patches = patchify(image, config)
    tokens = embed_tokens(patches, weights.patch_proj, weights.cls, weights.pos)
    for bw in weights.blocks:
        tokens = soar_block(tokens, bw)
    q = _layernorm(tokens[0], weights.head_norm_scale, weights.head_norm_offset)
    return _silu(q @ weights.mlp_w1) @ weights.mlp_w2


def named_weights(weights: EncoderWeights) -> Dict[str, np.ndarray]:
    """Flat name -> array view of every learned tensor, in a stable order."""
    out = {
        "patch_proj": weights.patch_proj,
        "cls": weights.cls,
        "pos": weights.pos,
    }
    for i, b in enumerate(weights.blocks):
        p = f"block{i}."
        out[p + "norm_scale"] = b.norm_scale
        out[p + "norm_offset"] = b.norm_offset
        out[p + "w_x"] = b.w_x
        out[p + "w_z"] = b.w_z
        for dname, d in (("fwd", b.fwd), ("bwd", b.bwd)):
            out[p + dname + ".conv_w"] = d.conv_w
            out[p + dname + ".w_delta"] = d.w_delta
            out[p + dname + ".w_f"] = d.w_f
            out[p + dname + ".w_g"] = d.w_g
        out[p + "E"] = b.E
        out[p + "w_out"] = b.w_out
    out["head_norm_scale"] = weights.head_norm_scale
    out["head_norm_offset"] = weights.head_norm_offset
    out["mlp_w1"] = weights.mlp_w1
    out["mlp_w2"] = weights.mlp_w2
    return out


def weights_from_named(named: Dict[str, np.ndarray], config: EncoderConfig) -> EncoderWeights:
    """Rebuild the structured weights from a flat name -> array mapping."""
    def direction(p):
        return DirectionWeights(conv_w=named[p + ".conv_w"], w_delta=named[p + ".w_delta"],
                                w_f=named[p + ".w_f"], w_g=named[p + ".w_g"])
    blocks = []
    for i in range(config.depth):
        p = f"block{i}."
        blocks.append(SoarBlockWeights(
            norm_scale=named[p + "norm_scale"], norm_offset=named[p + "norm_offset"],
            w_x=named[p + "w_x"], w_z=named[p + "w_z"],
            fwd=direction(p + "fwd"), bwd=direction(p + "bwd"),
            E=named[p + "E"], w_out=named[p + "w_out"]))
    return EncoderWeights(
        patch_proj=named["patch_proj"], cls=named["cls"], pos=named["pos"],
        blocks=blocks,
        head_norm_scale=named["head_norm_scale"], head_norm_offset=named["head_norm_offset"],
        mlp_w1=named["mlp_w1"], mlp_w2=named["mlp_w2"])


def scan_macs(T: int, C: int, N: int) -> int:
    """Multiply-adds of a T-step selective scan over C channels, N states:
    6 per (token, channel, state) covering discretization, recurrence and
    the output contraction."""
    return 6 * T * C * N


def count_params_gflops(config: EncoderConfig) -> ComputeBudget:
    """Exact stored-weight count and a 2*MAC FLOP estimate per layer.

    FLOP accounting: every matrix product counts 2 flops per
    multiply-add; the per-step scan counts 6 multiply-adds per
    (token, channel, state) for discretization, recurrence, and output
    contraction; normalization and gating count 2 flops per element.
    """
    D, C, N = config.embed_dim, config.inner_dim, config.state_dim
    J = config.num_patches
    T = J + 1
    W = config.conv_width
    rows: List[Tuple[str, int, float]] = []

    def add(name, params, macs):
        rows.append((name, params, 2.0 * macs / 1e9))

    add("patch_embedding", config.patch_len * D + D + T * D, J * config.patch_len * D)
    per_block_params = (2 * D                      # norm
                        + 2 * D * C                # w_x, w_z
                        + 2 * (C * W + C * C + 2 * C * N)   # two directions
                        + C * N                    # E
                        + C * D)                   # w_out
    per_block_macs = (T * D                        # norm (~1 MAC/elem)
                      + 2 * T * D * C              # x, z projections
                      + 2 * (T * C * W             # conv
                             + T * C * C           # delta projection
                             + 2 * T * C * N       # F, G projections
                             + scan_macs(T, C, N))
                      + T * C                      # gating
                      + T * C * D)                 # output projection
    for i in range(config.depth):
        add(f"block{i}", per_block_params, per_block_macs)
    add("head", 2 * D + D * D + D * config.num_classes,
        D + D * D + D * config.num_classes)

    params = sum(r[1] for r in rows)
    gflops = sum(r[2] for r in rows)
    return ComputeBudget(params=params, gflops=gflops, breakdown=tuple(rows))


# ---------------------------------------------------------------------------
# flat config file (key=value) round-trip

_CONFIG_INT_KEYS = ("image_h", "image_w", "channels", "patch_size", "kernel",
                    "stride", "embed_dim", "inner_dim", "state_dim", "depth",
                    "num_classes", "conv_width", "seed")


def config_to_text(config: EncoderConfig) -> str:
    lines = [f"patch_mode={config.patch_mode}"]
    lines += [f"{k}={getattr(config, k)}" for k in _CONFIG_INT_KEYS]
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> EncoderConfig:
    kv = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractError(f"config line {ln}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    kwargs = {}
    if "patch_mode" in kv:
        kwargs["patch_mode"] = kv.pop("patch_mode")
    for k, v in kv.items():
        if k not in _CONFIG_INT_KEYS:
            raise ContractError(f"unknown config key {k!r}")
        kwargs[k] = int(v)
    return EncoderConfig(**kwargs)
