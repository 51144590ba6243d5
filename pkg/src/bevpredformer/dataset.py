"""Training samples and the on-disk dataset format.

File layout (little-endian)::

    b"BPFD" | version u32 | sample count u32 |
    per sample: payload_len u32 | payload | crc32(payload) u32

    payload = config block   (len u32 | utf-8 JSON)
            | calibration    (n_cam u8 | n_cam x 18 f32 | n_pose u8 | n_pose x 12 f32 | bev pose 12 f32)
            | tensors        (count u32 | checkpoint-encoded entries)

A camera record is the row-major rotation, translation, then
``fx fy cx cy width height``; a pose record is rotation then translation.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import checkpoint as ckpt
from .geometry import Camera, Pose

MAGIC = b"BPFD"
VERSION = 1


class DatasetError(Exception):
    pass


class DatasetVersionError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


@dataclass
class GroundTruth:
    """Supervision for the output frames, all in the (augmented) present BEV frame.

    seg [T_out,H,W] in {0,1}; instances [T_out,H,W] int; flow and offset
    [T_out,2,H,W] in cells (col, row); centerness [T_out,1,H,W] in [0,1].
    """

    seg: np.ndarray
    instances: np.ndarray
    flow: np.ndarray
    centerness: np.ndarray
    offset: np.ndarray

    @property
    def t_out(self) -> int:
        return self.seg.shape[0]

    def tensors(self) -> dict:
        return {"gt.seg": self.seg, "gt.instances": self.instances.astype(np.float32),
                "gt.flow": self.flow, "gt.centerness": self.centerness, "gt.offset": self.offset}


@dataclass
class SequenceSample:
    """One training example: ``images`` [T_in, N_cam, 3, H_im, W_im]."""

    images: np.ndarray
    cameras: list
    ego_poses: list
    gt: GroundTruth
    bev_pose: Pose = field(default_factory=Pose.identity)
    config: dict = field(default_factory=dict)

    @property
    def t_in(self) -> int:
        return self.images.shape[0]

    @property
    def n_cams(self) -> int:
        return self.images.shape[1]

    def copy(self, **changes) -> "SequenceSample":
        return replace(self, **changes)


def _f32(arr) -> bytes:
    return np.asarray(arr, dtype="<f4").tobytes()


def encode_sample(s: SequenceSample) -> bytes:
    out = io.BytesIO()
    cfg = json.dumps(s.config, sort_keys=True).encode("utf-8")
    out.write(struct.pack("<I", len(cfg)) + cfg)
    out.write(struct.pack("<B", len(s.cameras)))
    for cam in s.cameras:
        out.write(_f32(cam.to_array()))
    out.write(struct.pack("<B", len(s.ego_poses)))
    for pose in s.ego_poses:
        out.write(_f32(pose.to_array()))
    out.write(_f32(s.bev_pose.to_array()))
    tensors = {"images": s.images, **s.gt.tensors()}
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        out.write(ckpt.encode_entry(name, arr))
    return out.getvalue()


def decode_sample(payload: bytes) -> SequenceSample:
    buf = io.BytesIO(payload)

    def take(n):
        chunk = buf.read(n)
        if len(chunk) != n:
            raise TruncatedFileError("sample payload ended early")
        return chunk

    (clen,) = struct.unpack("<I", take(4))
    config = json.loads(take(clen).decode("utf-8"))
    (ncam,) = struct.unpack("<B", take(1))
    cams = [Camera.from_array(np.frombuffer(take(72), dtype="<f4")) for _ in range(ncam)]
    (npose,) = struct.unpack("<B", take(1))
    poses = [Pose.from_array(np.frombuffer(take(48), dtype="<f4")) for _ in range(npose)]
    bev_pose = Pose.from_array(np.frombuffer(take(48), dtype="<f4"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        try:
            name, arr = ckpt.decode_entry(buf)
        except ckpt.CheckpointError as err:
            raise TruncatedFileError(str(err)) from err
        tensors[name] = arr
    gt = GroundTruth(tensors["gt.seg"], tensors["gt.instances"].astype(np.int32), tensors["gt.flow"],
                     tensors["gt.centerness"], tensors["gt.offset"])
    return SequenceSample(tensors["images"], cams, poses, gt, bev_pose, config)


def write_dataset(path: Union[str, Path], samples: Sequence[SequenceSample]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(samples)))
        for s in samples:
            payload = encode_sample(s)
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
            fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def read_dataset(path: Union[str, Path]) -> list[SequenceSample]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    data = p.read_bytes()
    if len(data) < 12:
        raise TruncatedFileError("file shorter than header")
    if data[:4] != MAGIC:
        raise DatasetError("bad magic; not a BPFD dataset")
    version, count = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise DatasetVersionError(f"dataset version {version}, reader supports {VERSION}")
    pos = 12
    samples = []
    for i in range(count):
        if pos + 4 > len(data):
            raise TruncatedFileError(f"sample {i}: missing length")
        (plen,) = struct.unpack("<I", data[pos:pos + 4])
        pos += 4
        if pos + plen + 4 > len(data):
            raise TruncatedFileError(f"sample {i}: payload truncated")
        payload = data[pos:pos + plen]
        pos += plen
        (crc,) = struct.unpack("<I", data[pos:pos + 4])
        pos += 4
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise ChecksumError(f"sample {i}: CRC32 mismatch")
        samples.append(decode_sample(payload))
    return samples


def validate_sample(s: SequenceSample, t_out: Optional[int] = None) -> None:
    """Raise ``ValueError`` if a sample's arrays are inconsistent."""
    if s.images.ndim != 5 or s.images.shape[2] != 3:
        raise ValueError(f"images must be [T_in,N_cam,3,H,W], got {s.images.shape}")
    if len(s.cameras) != s.n_cams:
        raise ValueError("camera count does not match image tensor")
    if len(s.ego_poses) != s.t_in:
        raise ValueError("one ego pose per input frame required")
    g = s.gt
    t, h, w = g.seg.shape
    if t_out is not None and t != t_out:
        raise ValueError(f"ground truth has {t} frames, expected {t_out}")
    for name, arr, shape in (("instances", g.instances, (t, h, w)), ("flow", g.flow, (t, 2, h, w)),
                             ("centerness", g.centerness, (t, 1, h, w)), ("offset", g.offset, (t, 2, h, w))):
        if arr.shape != shape:
            raise ValueError(f"gt.{name} shape {arr.shape} != {shape}")
