"""Analytic optical flow over a planar scene, noise augmentation, .flo I/O.

Flow fields are generated from a known relative camera motion and a
fronto-parallel plane, which gives exact state/observation pairs.  Real flow
computed elsewhere (e.g. OpenCV Farneback with pyr_scale=0.5, levels=3,
winsize=15, poly_n=5, poly_sigma=1.2, cropped to 224x224) can be ingested
through :func:`read_flo`.

All randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence``; per-sample streams are spawned from ``(seed, index)`` so
results do not depend on generation order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    DegenerateGeometryError,
    DimensionOverflowError,
    ShapeMismatchError,
    TruncatedFileError,
)
from .pose import EulerPose6D, euler_to_transform

FLO_MAGIC = 202021.25
MAX_FLO_DIM = 100_000
MIN_DEPTH = 0.1


@dataclass(frozen=True, eq=False)
class FlowField:
    data: np.ndarray  # (H, W, 2) float32, channels (u, v)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[2] != 2:
            raise ShapeMismatchError(f"flow must be HxWx2, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeMismatchError("flow must be at least 1x1")
        if not np.all(np.isfinite(data)):
            raise ValueError("flow contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FlowField):
            return NotImplemented
        return self.data.shape == other.data.shape and self.data.tobytes() == other.data.tobytes()


@dataclass(frozen=True)
class SceneConfig:
    focal_length: float = 40.0
    principal_point: tuple = (15.5, 15.5)
    plane_depth: float = 10.0
    width: int = 32
    height: int = 32

    def __post_init__(self):
        if not self.focal_length > 0:
            raise ValueError("focal_length must be positive")
        if not self.plane_depth > MIN_DEPTH:
            raise ValueError(f"plane_depth must exceed {MIN_DEPTH} m")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    def intrinsics(self) -> np.ndarray:
        cx, cy = self.principal_point
        f = self.focal_length
        return np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class MotionSample:
    state: EulerPose6D
    flow: FlowField
    augmented_flow: Optional[FlowField] = None


def pixel_grid(scene: SceneConfig) -> tuple:
    """Pixel-centre coordinates ``(u, v)``, each of shape (H, W)."""
    return np.meshgrid(
        np.arange(scene.width, dtype=np.float64),
        np.arange(scene.height, dtype=np.float64),
    )


def generate_flow(motion: EulerPose6D, scene: SceneConfig) -> FlowField:
    """Exact flow induced on the plane Z = plane_depth by ``motion``.

    ``motion`` is the pose of the second camera in the first camera's frame.
    """
    t = euler_to_transform(motion)
    f = scene.focal_length
    cx, cy = scene.principal_point
    u, v = pixel_grid(scene)
    # normalized coordinates on the Z = 1 plane; P = plane_depth * rays
    rays = np.stack([((u - cx) / f).ravel(), ((v - cy) / f).ravel(), np.ones(u.size)])
    moved = t.rotation.T @ (rays - t.translation[:, None] / scene.plane_depth)
    depth = scene.plane_depth * moved[2]
    if np.any(depth <= MIN_DEPTH):
        raise DegenerateGeometryError(
            f"plane behind or too close to the second camera (min depth {depth.min():.4g} m)"
        )
    flow = f * np.stack([moved[0] / moved[2] - rays[0], moved[1] / moved[2] - rays[1]], axis=-1)
    return FlowField(flow.reshape(scene.height, scene.width, 2))


def augment(flow: FlowField, sigma: float, seed: int) -> FlowField:
    """Add iid N(0, sigma^2) noise to every component."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return FlowField(flow.data.copy())
    rng = np.random.Generator(np.random.PCG64(seed))
    noise = rng.normal(0.0, sigma, size=flow.data.shape)
    return FlowField((flow.data.astype(np.float64) + noise).astype(np.float32))


def derive_seed(*keys: int) -> int:
    """Deterministic 64-bit seed from a tuple of non-negative integer keys."""
    ss = np.random.SeedSequence([int(k) for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def sample_seed(seed: int, index: int, stream: int = 0) -> int:
    return derive_seed(seed, index, stream)


def sample_dataset(
    n: int,
    state_ranges: Sequence[Sequence[float]],
    scene: SceneConfig,
    sigma: float,
    seed: int,
) -> list:
    """Draw ``n`` motions uniformly per DoF and render their (augmented) flows.

    ``state_ranges`` holds six ``(lo, hi)`` intervals in the order
    x, y, z, roll, pitch, yaw.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    ranges = np.asarray(state_ranges, dtype=np.float64)
    if ranges.shape != (6, 2) or not np.all(np.isfinite(ranges)):
        raise ValueError("state_ranges must be six finite (lo, hi) pairs")
    if np.any(ranges[:, 1] < ranges[:, 0]):
        raise ValueError("state range with hi < lo")
    samples = []
    for i in range(n):
        rng = np.random.Generator(np.random.PCG64(sample_seed(seed, i, 0)))
        state = EulerPose6D.from_array(rng.uniform(ranges[:, 0], ranges[:, 1]))
        flow = generate_flow(state, scene)
        aug = augment(flow, sigma, sample_seed(seed, i, 1))
        samples.append(MotionSample(state, flow, aug))
    return samples


def write_flo(flow: FlowField) -> bytes:
    header = struct.pack("<fii", FLO_MAGIC, flow.width, flow.height)
    return header + flow.data.astype("<f4").tobytes()


def read_flo(buf: bytes) -> FlowField:
    if len(buf) < 12:
        raise TruncatedFileError(f"header needs 12 bytes, got {len(buf)}")
    magic, w, h = struct.unpack("<fii", buf[:12])
    if magic != FLO_MAGIC:
        raise BadMagicError(f"bad .flo magic {magic!r}")
    if w < 1 or h < 1:
        raise ShapeMismatchError(f"invalid .flo dimensions {w}x{h}")
    if w > MAX_FLO_DIM or h > MAX_FLO_DIM:
        raise DimensionOverflowError(f".flo dimensions {w}x{h} exceed {MAX_FLO_DIM}")
    need = 12 + 8 * w * h
    if len(buf) < need:
        raise TruncatedFileError(f"expected {need} bytes, got {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", count=2 * w * h, offset=12)
    return FlowField(data.reshape(h, w, 2).astype(np.float32))


def save_dataset(samples: Sequence[MotionSample], directory) -> Path:
    """Write flows as .flo files plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        flow_name = f"{i:06d}.flo"
        (directory / flow_name).write_bytes(write_flo(s.flow))
        aug_name = None
        if s.augmented_flow is not None:
            aug_name = f"{i:06d}_aug.flo"
            (directory / aug_name).write_bytes(write_flo(s.augmented_flow))
        records.append(
            {"state": [float(v) for v in s.state.as_array()], "flow_file": flow_name, "aug_flow_file": aug_name}
        )
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps(records, indent=1) + "\n")
    return manifest


def load_dataset(directory) -> list:
    directory = Path(directory)
    manifest = directory / "manifest.json"
    records = json.loads(manifest.read_text())
    samples = []
    for rec in records:
        flow = read_flo((directory / rec["flow_file"]).read_bytes())
        aug = None
        if rec.get("aug_flow_file"):
            aug = read_flo((directory / rec["aug_flow_file"]).read_bytes())
        samples.append(MotionSample(EulerPose6D.from_array(rec["state"]), flow, aug))
    return samples
