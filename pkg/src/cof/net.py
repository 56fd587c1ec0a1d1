"""Velocity-field network: per-frame patch tokens, additive frame-index
embedding, sinusoidal timestep embedding, conditioning projection, two
token-mixing blocks, linear output head.

Plain numpy with explicit forward/backward so gradients are fully auditable;
the finite-difference check in flow.grad_check is the ground truth for the
backward pass. Parameters live in a flat dict of arrays; dtype follows the
parameter arrays (float32 for training, float64 inside gradient checking).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .codec import CodecMode
from .errors import ShapeIncompatible

# fixed affine normalization per latent channel (codec pixel units -> O(1));
# generic channel counts fall back to identity
_CODEC_MU = np.array(
    [128.0, 128.0, 128.0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 16.0, 0, 0], dtype=np.float64
)
_CODEC_SIGMA = np.array(
    [64.0, 64.0, 64.0, 4, 4, 4, 4, 4, 4, 8, 8, 8, 8, 16.0, 1, 1], dtype=np.float64
)

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 3
    channels: int = 16
    height: int = 16
    width: int = 16
    token_patch: int = 4
    d_model: int = 192
    token_hidden: int = 64
    channel_hidden: int = 384
    n_blocks: int = 2
    t_embed: int = 32
    cond_dim: int = 64
    mode: CodecMode = CodecMode.FRAMEWISE
    norm_mu: tuple = field(default=None)
    norm_sigma: tuple = field(default=None)

    def __post_init__(self):
        if self.height % self.token_patch or self.width % self.token_patch:
            raise ShapeIncompatible("token_patch must divide the latent grid")
        if self.norm_mu is None:
            mu = _CODEC_MU if self.channels == 16 else np.zeros(self.channels)
            object.__setattr__(self, "norm_mu", tuple(float(v) for v in mu))
        if self.norm_sigma is None:
            sg = _CODEC_SIGMA if self.channels == 16 else np.ones(self.channels)
            object.__setattr__(self, "norm_sigma", tuple(float(v) for v in sg))

    @property
    def tokens_per_frame(self) -> int:
        return (self.height // self.token_patch) * (self.width // self.token_patch)

    @property
    def n_tokens(self) -> int:
        return self.frames * self.tokens_per_frame

    @property
    def token_dim(self) -> int:
        return self.channels * self.token_patch**2

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "channels": self.channels,
            "height": self.height,
            "width": self.width,
            "token_patch": self.token_patch,
            "d_model": self.d_model,
            "token_hidden": self.token_hidden,
            "channel_hidden": self.channel_hidden,
            "n_blocks": self.n_blocks,
            "t_embed": self.t_embed,
            "cond_dim": self.cond_dim,
            "mode": self.mode.value,
            "norm_mu": list(self.norm_mu),
            "norm_sigma": list(self.norm_sigma),
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["mode"] = CodecMode(d["mode"])
        d["norm_mu"] = tuple(d["norm_mu"])
        d["norm_sigma"] = tuple(d["norm_sigma"])
        return ModelConfig(**d)


def param_spec(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    """Canonical (name, shape) order; checkpoints and flattening rely on it."""
    T, P, D = cfg.n_tokens, cfg.token_dim, cfg.d_model
    spec = [
        ("w_in", (P, D)),
        ("b_in", (D,)),
        ("frame_emb", (cfg.frames, D)),
        ("w_t", (cfg.t_embed, D)),
        ("b_t", (D,)),
        ("w_y", (cfg.cond_dim, D)),
        ("b_y", (D,)),
    ]
    for i in range(cfg.n_blocks):
        spec += [
            (f"ln{i}a_g", (D,)),
            (f"ln{i}a_b", (D,)),
            (f"tok{i}_w1", (T, cfg.token_hidden)),
            (f"tok{i}_b1", (cfg.token_hidden,)),
            (f"tok{i}_w2", (cfg.token_hidden, T)),
            (f"tok{i}_b2", (T,)),
            (f"ln{i}b_g", (D,)),
            (f"ln{i}b_b", (D,)),
            (f"ch{i}_w1", (D, cfg.channel_hidden)),
            (f"ch{i}_b1", (cfg.channel_hidden,)),
            (f"ch{i}_w2", (cfg.channel_hidden, D)),
            (f"ch{i}_b2", (D,)),
        ]
    spec += [("w_out", (D, P)), ("b_out", (P,))]
    return spec


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_spec(cfg))


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence((seed & (2**64 - 1), 0x11E7)))
    params: dict[str, np.ndarray] = {}
    for name, shape in param_spec(cfg):
        if name.startswith(("ln", "b_")) or name.endswith(("_b1", "_b2", "emb_b")):
            arr = np.ones(shape) if name.endswith("_g") else np.zeros(shape)
        elif name == "frame_emb":
            arr = rng.normal(0, 0.02, size=shape)
        else:
            fan_in = shape[0]
            scale = 0.02 if name == "w_out" else 1.0 / math.sqrt(fan_in)
            arr = rng.normal(0, scale, size=shape)
        params[name] = arr.astype(np.float32)
    return params


def flatten_params(params: dict[str, np.ndarray], cfg: ModelConfig) -> np.ndarray:
    return np.concatenate([params[n].ravel() for n, _ in param_spec(cfg)])


def unflatten_params(flat: np.ndarray, cfg: ModelConfig) -> dict[str, np.ndarray]:
    out = {}
    i = 0
    for name, shape in param_spec(cfg):
        n = int(np.prod(shape))
        out[name] = flat[i : i + n].reshape(shape).copy()
        i += n
    if i != flat.size:
        raise ShapeIncompatible("flat parameter vector has the wrong length")
    return out


# ------------------------------------------------------------------ pieces


def timestep_embedding(t: np.ndarray, dim: int, dtype) -> np.ndarray:
    """Sinusoidal features of t in [0, 1]; t is (B,)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(t, dtype=np.float64)[:, None] * 1000.0 * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return emb.astype(dtype)


def _gelu(x):
    x2 = x * x
    th = np.tanh(_GELU_C * (x + _GELU_A * x * x2))
    return 0.5 * x * (1.0 + th)


def _gelu_fwd(x):
    """GELU plus the (x^2, tanh) intermediates reused by the backward pass."""
    x2 = x * x
    th = np.tanh(_GELU_C * (x + _GELU_A * x * x2))
    return 0.5 * x * (1.0 + th), x2, th


def _gelu_grad(x, x2=None, th=None):
    if x2 is None:
        x2 = x * x
    if th is None:
        th = np.tanh(_GELU_C * (x + _GELU_A * x * x2))
    return 0.5 * (1.0 + th) + (0.5 * _GELU_C) * x * (1.0 - th * th) * (
        1.0 + 3.0 * _GELU_A * x2
    )


_LN_EPS = 1e-5


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _ln_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def patchify(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(B, F, C, h, w) -> (B, T, P) with per-frame raster-ordered patches."""
    B, F, C, h, w = x.shape
    p = cfg.token_patch
    x = x.reshape(B, F, C, h // p, p, w // p, p)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(B, F * (h // p) * (w // p), C * p * p)


def unpatchify(tok: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    B = tok.shape[0]
    p = cfg.token_patch
    F, C, h, w = cfg.frames, cfg.channels, cfg.height, cfg.width
    x = tok.reshape(B, F, h // p, w // p, C, p, p)
    x = x.transpose(0, 1, 4, 2, 5, 3, 6)
    return x.reshape(B, F, C, h, w)


def _norm_vectors(cfg: ModelConfig, dtype):
    """mu/sigma expanded to token-dim vectors (per P position)."""
    p2 = cfg.token_patch**2
    mu = np.repeat(np.asarray(cfg.norm_mu, dtype=np.float64), p2)
    sg = np.repeat(np.asarray(cfg.norm_sigma, dtype=np.float64), p2)
    return mu.astype(dtype), sg.astype(dtype)


# ------------------------------------------------------------------ forward


def forward(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    x: np.ndarray,
    t,
    y: np.ndarray,
    want_cache: bool = False,
):
    """Velocity prediction for chains x (B, F, C, h, w) at timesteps t (scalar
    or (B,)) under conditioning y (B, cond_dim). Output shape equals input."""
    dtype = params["w_in"].dtype
    B = x.shape[0]
    if x.shape[1:] != (cfg.frames, cfg.channels, cfg.height, cfg.width):
        raise ShapeIncompatible(f"chain shape {x.shape[1:]} does not match the model")
    t_arr = np.broadcast_to(np.asarray(t, dtype=dtype), (B,))
    y = np.asarray(y, dtype=dtype)

    mu_p, sg_p = _norm_vectors(cfg, dtype)
    x_tok = patchify(x.astype(dtype, copy=False), cfg)
    xn = (x_tok - mu_p) / sg_p

    temb = timestep_embedding(t_arr, cfg.t_embed, dtype)
    tproj = temb @ params["w_t"] + params["b_t"]
    yproj = y @ params["w_y"] + params["b_y"]

    tpf = cfg.tokens_per_frame
    frame_idx = np.repeat(np.arange(cfg.frames), tpf)
    h = (
        xn @ params["w_in"]
        + params["b_in"]
        + params["frame_emb"][frame_idx][None, :, :]
        + tproj[:, None, :]
        + yproj[:, None, :]
    )

    cache = {"xn": xn, "temb": temb, "y": y, "frame_idx": frame_idx, "blocks": []}
    T, D = cfg.n_tokens, cfg.d_model
    for i in range(cfg.n_blocks):
        u, lnc = _ln_forward(h, params[f"ln{i}a_g"], params[f"ln{i}a_b"])
        # token mixing as one (B*D, T) GEMM
        v = np.ascontiguousarray(u.transpose(0, 2, 1)).reshape(B * D, T)
        z1 = v @ params[f"tok{i}_w1"] + params[f"tok{i}_b1"]
        a1, z1_sq, z1_th = _gelu_fwd(z1)
        z2 = a1 @ params[f"tok{i}_w2"] + params[f"tok{i}_b2"]
        h = h + z2.reshape(B, D, T).transpose(0, 2, 1)

        u2, lnc2 = _ln_forward(h, params[f"ln{i}b_g"], params[f"ln{i}b_b"])
        u2f = u2.reshape(B * T, D)
        z3 = u2f @ params[f"ch{i}_w1"] + params[f"ch{i}_b1"]
        a2, z3_sq, z3_th = _gelu_fwd(z3)
        z4 = a2 @ params[f"ch{i}_w2"] + params[f"ch{i}_b2"]
        h = h + z4.reshape(B, T, D)
        cache["blocks"].append(
            (lnc, v, (z1, z1_sq, z1_th), a1, lnc2, u2f, (z3, z3_sq, z3_th), a2)
        )

    out = (h.reshape(-1, cfg.d_model) @ params["w_out"]).reshape(
        B, cfg.n_tokens, cfg.token_dim
    ) + params["b_out"]
    v_tok = out * sg_p + mu_p
    v = unpatchify(v_tok, cfg)

    if want_cache:
        cache["h_final"] = h
        return v, cache
    return v


def backward(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    cache: dict,
    dv: np.ndarray,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss wrt all parameters, given dL/d(output)."""
    dtype = params["w_in"].dtype
    _, sg_p = _norm_vectors(cfg, dtype)
    dout = patchify(dv.astype(dtype, copy=False), cfg) * sg_p

    grads = {}
    B, T, D = dout.shape[0], cfg.n_tokens, cfg.d_model
    hf = cache["h_final"].reshape(B * T, D)
    dout2 = dout.reshape(B * T, cfg.token_dim)
    grads["w_out"] = hf.T @ dout2
    grads["b_out"] = dout2.sum(axis=0)
    dh = (dout2 @ params["w_out"].T).reshape(B, T, D)

    for i in reversed(range(cfg.n_blocks)):
        lnc, v, (z1, z1_sq, z1_th), a1, lnc2, u2f, (z3, z3_sq, z3_th), a2 = cache["blocks"][i]
        # channel MLP (rows = B*T)
        dz4 = dh.reshape(B * T, D)
        grads[f"ch{i}_w2"] = a2.T @ dz4
        grads[f"ch{i}_b2"] = dz4.sum(axis=0)
        da2 = dz4 @ params[f"ch{i}_w2"].T
        dz3 = da2 * _gelu_grad(z3, z3_sq, z3_th)
        grads[f"ch{i}_w1"] = u2f.T @ dz3
        grads[f"ch{i}_b1"] = dz3.sum(axis=0)
        du2 = (dz3 @ params[f"ch{i}_w1"].T).reshape(B, T, D)
        dh2, grads[f"ln{i}b_g"], grads[f"ln{i}b_b"] = _ln_backward(
            du2, params[f"ln{i}b_g"], lnc2
        )
        dh = dh + dh2

        # token MLP (rows = B*D)
        dz2 = np.ascontiguousarray(dh.transpose(0, 2, 1)).reshape(B * D, T)
        grads[f"tok{i}_w2"] = a1.T @ dz2
        grads[f"tok{i}_b2"] = dz2.sum(axis=0)
        da1 = dz2 @ params[f"tok{i}_w2"].T
        dz1 = da1 * _gelu_grad(z1, z1_sq, z1_th)
        grads[f"tok{i}_w1"] = v.T @ dz1
        grads[f"tok{i}_b1"] = dz1.sum(axis=0)
        du = (dz1 @ params[f"tok{i}_w1"].T).reshape(B, D, T).transpose(0, 2, 1)
        dh2, grads[f"ln{i}a_g"], grads[f"ln{i}a_b"] = _ln_backward(
            du, params[f"ln{i}a_g"], lnc
        )
        dh = dh + dh2

    dhf = dh.reshape(B * T, D)
    grads["w_in"] = cache["xn"].reshape(B * T, cfg.token_dim).T @ dhf
    grads["b_in"] = dhf.sum(axis=0)
    grads["frame_emb"] = np.zeros_like(params["frame_emb"])
    fsum = dh.sum(axis=0)  # (T, D)
    np.add.at(grads["frame_emb"], cache["frame_idx"], fsum)
    dsum = dh.sum(axis=1)  # (B, D)
    grads["w_t"] = cache["temb"].T @ dsum
    grads["b_t"] = dsum.sum(axis=0)
    grads["w_y"] = cache["y"].T @ dsum
    grads["b_y"] = dsum.sum(axis=0)
    return grads
