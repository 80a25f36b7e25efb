"""Transmitter-side semantics: feature-map importance, ILFM ranking, threshold
compression and the on-air frame.

Frame layout (version 1, little-endian)::

    offset  size          field
    0       4             magic b"SEMX"
    4       1             version (1)
    5       2             K, number of feature maps
    7       2             H
    9       2             W
    11      ceil(K/8)     kept bitmap, bit k%8 of byte k//8 set iff map k is kept
    ...     4*H*W*kept    kept maps in ascending index order, float32, row-major

Header overhead is ``8 * (11 + ceil(K/8))`` bits; the remainder is exactly
the compressed payload when the uncompressed payload is taken as ``32*K*H*W``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

FRAME_MAGIC = b"SEMX"
FRAME_VERSION = 1
_FRAME_HEADER = struct.Struct("<4sBHHH")


@dataclass
class FeatureMapStack:
    maps: np.ndarray                 # (K, H, W)
    class_context: int | None = None
    gradients: np.ndarray | None = None   # d(class score)/d(map), same shape as maps

    def __post_init__(self):
        self.maps = np.asarray(self.maps)
        if self.maps.ndim != 3 or self.maps.shape[0] < 1:
            raise ValueError(f"feature maps must have shape (K>=1, H, W), got {self.maps.shape}")
        if self.gradients is not None and np.shape(self.gradients) != self.maps.shape:
            raise ValueError("gradient maps must match the feature maps' shape")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.maps.shape


def stack_from_features(features: np.ndarray, map_shape: tuple[int, int], class_context: int | None = None,
                        head_weights: np.ndarray | None = None) -> FeatureMapStack:
    """Reshape one sample's feature vector into K maps of ``map_shape``.

    With ``head_weights`` (width x classes) and a class, the gradient of that
    class score w.r.t. each feature is attached for gradient weighting.
    """
    h, w = map_shape
    features = np.asarray(features, dtype=np.float64).ravel()
    if h < 1 or w < 1 or features.size % (h * w):
        raise ValueError(f"feature width {features.size} is not divisible into {h}x{w} maps")
    maps = features.reshape(-1, h, w)
    grads = None
    if head_weights is not None and class_context is not None:
        grads = np.asarray(head_weights)[:, class_context].reshape(maps.shape)
    return FeatureMapStack(maps, class_context, grads)


def feature_map_weights(stack: FeatureMapStack, mode: str = "activation") -> np.ndarray:
    """Per-map importance: spatial mean of activations, or of class-score gradients."""
    k, h, w = stack.shape
    if h * w == 0:
        raise ValueError("feature maps are empty")
    if mode == "activation":
        return stack.maps.reshape(k, -1).mean(axis=1)
    if mode == "gradient":
        if stack.gradients is None:
            raise ValueError("gradient weighting needs gradient maps")
        return np.asarray(stack.gradients).reshape(k, -1).mean(axis=1)
    raise ValueError(f"unknown weighting mode {mode!r}")


def build_ilfm(weights) -> list[int]:
    """Map indices by decreasing |w|; equal magnitudes keep ascending index order."""
    mags = np.abs(np.asarray(weights, dtype=np.float64).ravel())
    return sorted(range(mags.size), key=lambda k: (-mags[k], k))


@dataclass
class CompressedSemantics:
    maps: np.ndarray          # (K, H, W), zeroed where dropped
    kept: list[int]
    zeroed: int
    ratio: float              # zeroed / K
    payload_bits: float       # uncompressed D_u
    compressed_bits: int      # (1 - ratio) * D_u

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.maps.shape


def compress(stack: FeatureMapStack, threshold: float, payload_bits: float | None = None,
             mode: str = "activation") -> CompressedSemantics:
    """Keep map k iff |w_k| >= threshold, zero the rest.

    ``payload_bits`` defaults to the raw float32 size of the stack.
    """
    if not 0.0 <= threshold < 1.0:
        raise ValueError(f"compression threshold must lie in [0, 1), got {threshold}")
    k, h, w = stack.shape
    weights = feature_map_weights(stack, mode)
    keep = np.abs(weights) >= threshold
    maps = np.where(keep[:, None, None], stack.maps, 0.0).astype(stack.maps.dtype)
    zeroed = int(k - keep.sum())
    if payload_bits is None:
        payload_bits = 32 * k * h * w
    exact = Fraction(payload_bits) * Fraction(k - zeroed, k)
    return CompressedSemantics(
        maps=maps,
        kept=[int(i) for i in np.flatnonzero(keep)],
        zeroed=zeroed,
        ratio=zeroed / k,
        payload_bits=payload_bits,
        compressed_bits=round(exact),
    )


def header_bits(num_maps: int) -> int:
    return 8 * (_FRAME_HEADER.size + (num_maps + 7) // 8)


def channel_encode(cs: CompressedSemantics) -> bytes:
    k, h, w = cs.shape
    if max(k, h, w) > 0xFFFF:
        raise ValueError("frame dimensions exceed 16 bits")
    bitmap = bytearray((k + 7) // 8)
    for idx in cs.kept:
        bitmap[idx // 8] |= 1 << (idx % 8)
    body = np.ascontiguousarray(cs.maps[cs.kept], dtype="<f4").tobytes()
    return _FRAME_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, k, h, w) + bytes(bitmap) + body


def channel_decode(frame: bytes) -> tuple[np.ndarray, list[int]]:
    """Inverse of :func:`channel_encode`: float32 maps (zeros where dropped) and kept indices."""
    if len(frame) < _FRAME_HEADER.size:
        raise ValueError("frame truncated")
    magic, version, k, h, w = _FRAME_HEADER.unpack_from(frame)
    if magic != FRAME_MAGIC:
        raise ValueError("not a semantic frame")
    if version != FRAME_VERSION:
        raise ValueError(f"unsupported frame version {version}")
    pos = _FRAME_HEADER.size
    bitmap = frame[pos:pos + (k + 7) // 8]
    kept = [i for i in range(k) if bitmap[i // 8] >> (i % 8) & 1]
    pos += (k + 7) // 8
    body = np.frombuffer(frame[pos:], dtype="<f4")
    if body.size != len(kept) * h * w:
        raise ValueError("frame body length does not match its bitmap")
    maps = np.zeros((k, h, w), dtype=np.float32)
    maps[kept] = body.reshape(len(kept), h, w)
    return maps, kept
