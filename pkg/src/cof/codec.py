"""Analytic, training-free causal latent codec.

Compression law: 8x spatial, 4x temporal. A frame of H x W pixels maps to a
(1, 16, H/8, W/8) tensor; a chain of F frames maps to F' = (F - 1)/4 + 1
temporal slots in continuous mode. Each 8x8 patch emits a fixed 16-feature
vector:

    0-2   per-channel mean
    3-5   per-channel least-squares horizontal gradient
    6-8   per-channel least-squares vertical gradient
    9-12  luminance means of the four 4x4 quadrants, re-centered on the
          patch luminance mean (TL, TR, BL, BR)
    13    luminance range (max - min); the one non-linear feature
    14-15 reserved, always zero

Frame-wise mode encodes every frame independently (the training default);
continuous mode jointly compresses 4-frame chunks after the first frame,
mixing in the previous slot with a fixed beta so that temporal entanglement
is observable. Solid patch-aligned renders round-trip exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import PadUnsupported, ShapeIncompatible
from .scenes import Raster

LATENT_CHANNELS = 16
COFL_MAGIC = b"COFL"


class CodecMode(Enum):
    FRAMEWISE = "framewise"
    CONTINUOUS = "continuous"


@dataclass(frozen=True)
class CodecConfig:
    patch: int = 8
    channels: int = LATENT_CHANNELS
    temporal_factor: int = 4
    mode: CodecMode = CodecMode.FRAMEWISE
    beta: float = 0.25  # causal mixing weight for continuous slots

    def __post_init__(self):
        if self.channels != LATENT_CHANNELS:
            raise ShapeIncompatible("the feature list is fixed at 16 channels")
        if self.temporal_factor != 4:
            raise ShapeIncompatible("temporal factor is fixed at 4")


@dataclass
class FrameChain:
    frames: list[Raster]
    prompt_id: str = ""

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a chain needs at least one frame")
        h, w = self.frames[0].height, self.frames[0].width
        for f in self.frames:
            if (f.height, f.width) != (h, w):
                raise ShapeIncompatible("all frames must share dimensions")


@dataclass
class LatentChain:
    mode: CodecMode
    latents: list[np.ndarray] = field(default_factory=list)  # each (F', C, h, w) float32

    def stacked(self) -> np.ndarray:
        """(F, C, h, w) view: frame-wise chains stack their per-frame tensors."""
        if self.mode is CodecMode.FRAMEWISE:
            return np.concatenate(self.latents, axis=0)
        return self.latents[0]


def latent_shape(frames: int, height: int, width: int, cfg: CodecConfig = CodecConfig()):
    """(F', C, h, w) for a chain; F' = (F - 1)/4 + 1."""
    if frames < 1:
        raise ShapeIncompatible("need at least one frame")
    if (frames - 1) % cfg.temporal_factor:
        raise ShapeIncompatible(
            f"frame count {frames} violates the 1 + 4n temporal layout"
        )
    if height % cfg.patch or width % cfg.patch:
        raise ShapeIncompatible("patch size must divide the frame dimensions")
    fp = (frames - 1) // cfg.temporal_factor + 1
    return (fp, cfg.channels, height // cfg.patch, width // cfg.patch)


def _as_float_image(frame) -> np.ndarray:
    if isinstance(frame, Raster):
        return frame.pixels.astype(np.float64)
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeIncompatible("expected an HxWx3 image")
    return arr


# least-squares plane offsets for an 8x8 patch
_OFFSETS = np.arange(8, dtype=np.float64) - 3.5
_DENOM = float((_OFFSETS**2).sum() * 8)  # 336


def encode_frame(frame, cfg: CodecConfig = CodecConfig()) -> np.ndarray:
    """Encode one frame (Raster or float HxWx3 array) to (1, 16, h, w) float32."""
    img = _as_float_image(frame)
    H, W, _ = img.shape
    if H % cfg.patch or W % cfg.patch:
        raise ShapeIncompatible("patch size must divide the frame dimensions")
    p = cfg.patch
    h, w = H // p, W // p
    # (h, w, p, p, 3)
    patches = img.reshape(h, p, w, p, 3).transpose(0, 2, 1, 3, 4)

    mean = patches.mean(axis=(2, 3))  # (h, w, 3)
    gh = (patches * _OFFSETS[None, None, None, :, None]).sum(axis=(2, 3)) / _DENOM
    gv = (patches * _OFFSETS[None, None, :, None, None]).sum(axis=(2, 3)) / _DENOM

    lum = patches.mean(axis=4)  # (h, w, p, p)
    lum_mean = lum.mean(axis=(2, 3))
    half = p // 2
    quads = [
        lum[:, :, :half, :half].mean(axis=(2, 3)),
        lum[:, :, :half, half:].mean(axis=(2, 3)),
        lum[:, :, half:, :half].mean(axis=(2, 3)),
        lum[:, :, half:, half:].mean(axis=(2, 3)),
    ]
    rng_feat = lum.max(axis=(2, 3)) - lum.min(axis=(2, 3))

    feats = np.zeros((LATENT_CHANNELS, h, w), dtype=np.float64)
    for c in range(3):
        feats[c] = mean[:, :, c]
        feats[3 + c] = gh[:, :, c]
        feats[6 + c] = gv[:, :, c]
    for q in range(4):
        feats[9 + q] = quads[q] - lum_mean
    feats[13] = rng_feat
    return feats[None].astype(np.float32)


def encode_framewise(chain: FrameChain, cfg: CodecConfig = CodecConfig()) -> LatentChain:
    """Slide the encoder along the chain: latent i depends only on frame i."""
    return LatentChain(
        mode=CodecMode.FRAMEWISE,
        latents=[encode_frame(f, cfg) for f in chain.frames],
    )


def pad_chain(chain: FrameChain) -> FrameChain:
    """(F1, F2, F3) -> (F1, F2, F3, F3, F3) so the 1 + 4n layout applies."""
    if len(chain.frames) != 3:
        raise PadUnsupported(f"padding is defined for 3-frame chains, got {len(chain.frames)}")
    f = chain.frames
    return FrameChain(frames=[f[0], f[1], f[2], f[2], f[2]], prompt_id=chain.prompt_id)


def encode_continuous(chain: FrameChain, cfg: CodecConfig = CodecConfig()) -> LatentChain:
    """Causal joint compression: slot 0 encodes frame 1 alone; slot k >= 1
    encodes the pixel-mean of frames 4k-2 .. 4k+1 minus beta * slot k-1."""
    frames = chain.frames
    if len(frames) == 3:
        frames = pad_chain(chain).frames
    F = len(frames)
    fp, C, h, w = latent_shape(F, frames[0].height, frames[0].width, cfg)
    slots = [encode_frame(frames[0], cfg)[0]]
    tf = cfg.temporal_factor
    for k in range(1, fp):
        chunk = frames[1 + (k - 1) * tf : 1 + k * tf]
        mean_img = np.mean([_as_float_image(f) for f in chunk], axis=0)
        slots.append(encode_frame(mean_img, cfg)[0] - cfg.beta * slots[k - 1])
    tensor = np.stack(slots).astype(np.float32)
    assert tensor.shape == (fp, C, h, w)
    return LatentChain(mode=CodecMode.CONTINUOUS, latents=[tensor])


def decode_frame(latent: np.ndarray, cfg: CodecConfig = CodecConfig()) -> Raster:
    """Reconstruct a frame from a (1, 16, h, w) tensor: per-channel plane plus
    quadrant luminance corrections shared across channels, clamped to [0, 255]."""
    lat = np.asarray(latent, dtype=np.float64)
    if lat.ndim != 4 or lat.shape[0] != 1 or lat.shape[1] != LATENT_CHANNELS:
        raise ShapeIncompatible(f"expected (1, 16, h, w), got {lat.shape}")
    _, _, h, w = lat.shape
    p = cfg.patch
    out = np.zeros((h, w, p, p, 3), dtype=np.float64)
    for c in range(3):
        plane = (
            lat[0, c][:, :, None, None]
            + lat[0, 3 + c][:, :, None, None] * _OFFSETS[None, None, None, :]
            + lat[0, 6 + c][:, :, None, None] * _OFFSETS[None, None, :, None]
        )
        out[..., c] = plane
    half = p // 2
    quad_slices = [
        (slice(None, half), slice(None, half)),
        (slice(None, half), slice(half, None)),
        (slice(half, None), slice(None, half)),
        (slice(half, None), slice(half, None)),
    ]
    for q, (sr, sc) in enumerate(quad_slices):
        out[:, :, sr, sc, :] += lat[0, 9 + q][:, :, None, None, None]
    pixels = out.transpose(0, 2, 1, 3, 4).reshape(h * p, w * p, 3)
    return Raster(np.clip(np.rint(pixels), 0, 255).astype(np.uint8))


def decode_chain_final(chain: LatentChain, cfg: CodecConfig = CodecConfig()) -> Raster:
    """Decode only the terminal state. In continuous mode the previous slot is
    mixed back in (inverse of the beta subtraction) before decoding."""
    if chain.mode is CodecMode.FRAMEWISE:
        return decode_frame(chain.latents[-1], cfg)
    tensor = chain.latents[0]
    last = tensor[-1]
    if tensor.shape[0] >= 2:
        last = last + cfg.beta * tensor[-2]
    return decode_frame(last[None], cfg)


# --------------------------------------------------------------------------
# COFL persistence: 4-byte magic + F', C, h, w as little-endian u32 + float32
# --------------------------------------------------------------------------


def write_latents(path, tensor: np.ndarray) -> None:
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    if arr.ndim != 4:
        raise ShapeIncompatible("latent tensors are (F', C, h, w)")
    with open(path, "wb") as f:
        f.write(COFL_MAGIC)
        f.write(struct.pack("<4I", *arr.shape))
        f.write(arr.tobytes())


def read_latents(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != COFL_MAGIC:
            raise ShapeIncompatible(f"bad magic {magic!r}")
        shape = struct.unpack("<4I", f.read(16))
        payload = f.read()
    arr = np.frombuffer(payload, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise ShapeIncompatible("payload size does not match header")
    return arr.reshape(shape).copy()


# --------------------------------------------------------------------------
# Invariant suite (used by the codec-check CLI command)
# --------------------------------------------------------------------------


def run_codec_checks(cfg: CodecConfig = CodecConfig(), seed: int = 0) -> list[tuple[str, bool]]:
    """Four codec properties; returns (name, passed) pairs."""
    from . import scenes as sc

    rng = np.random.default_rng(seed)
    results = []

    ok = True
    for F in (1, 5, 9):
        for hw in (64, 128):
            got = latent_shape(F, hw, hw, cfg)
            ok &= got == ((F - 1) // 4 + 1, 16, hw // 8, hw // 8)
    results.append(("shape-law", ok))

    ok = True
    for _ in range(20):
        frames = [
            Raster(rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8).astype(np.uint8))
            for _ in range(3)
        ]
        chain = FrameChain(frames=frames)
        base = encode_framewise(chain, cfg)
        k = int(rng.integers(3))
        mod = [f.pixels.copy() for f in frames]
        mod[k][0, 0, 0] ^= 0xFF
        got = encode_framewise(FrameChain(frames=[Raster(m) for m in mod]), cfg)
        ok &= all(
            np.array_equal(base.latents[i], got.latents[i]) == (i != k) for i in range(3)
        )
    results.append(("framewise-independence", ok))

    ok = True
    for _ in range(20):
        frames = [
            Raster(rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8).astype(np.uint8))
            for _ in range(3)
        ]
        base = encode_continuous(FrameChain(frames=frames), cfg)
        mod = [f.pixels.copy() for f in frames]
        mod[1][3, 3] ^= 0x77
        got = encode_continuous(FrameChain(frames=[Raster(m) for m in mod]), cfg)
        ok &= not np.array_equal(base.latents[0][1], got.latents[0][1])
    results.append(("continuous-entanglement", ok))

    ok = True
    for i in range(20):
        srng = np.random.default_rng(seed + i)
        n = int(srng.integers(0, 4))
        shapes = [sc.SHAPES[j] for j in srng.integers(0, 4, n)]
        anchors = (
            sc.pick_placement([sc.SHAPE_FOOTPRINT[s] for s in shapes], srng) if n else ()
        )
        scene = sc.Scene(
            objects=[
                sc.SceneObject(s, sc.COLORS[int(srng.integers(8))], a)
                for s, a in zip(shapes, anchors)
            ],
            background=sc.BACKGROUNDS[int(srng.integers(6))],
            aesthetic_level=1.0,
        )
        r = sc.rasterize(scene, int(srng.integers(2**32)))
        rec = decode_frame(encode_frame(r, cfg), cfg)
        ok &= np.array_equal(rec.pixels, r.pixels)
    results.append(("lossless-subdomain", ok))

    return results
