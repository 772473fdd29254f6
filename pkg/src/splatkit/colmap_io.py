"""Readers and writers for sparse SfM reconstructions.

Handles the ``cameras``, ``images`` and ``points3D`` files in both the
binary (little-endian, v3 record layout) and whitespace-separated text
flavours.  Binary layouts::

    cameras.bin   u64 count | {i32 id, i32 model, u64 width, u64 height,
                               f64 params[n_model]}
    images.bin    u64 count | {i32 id, f64 qw qx qy qz, f64 tx ty tz,
                               i32 camera_id, name bytes + NUL,
                               u64 n_obs, {f64 u, f64 v, i64 point3d_id}*}
    points3D.bin  u64 count | {u64 id, f64 x y z, u8 r g b, f64 error,
                               u64 track_len, {i32 image_id, i32 obs_idx}*}
"""
from __future__ import annotations

import enum
import io
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, List, Union

import numpy as np

from .errors import (
    MalformedCamera,
    MalformedPose,
    MalformedText,
    MalformedTrack,
    MissingFile,
    TruncatedFile,
    UnsupportedModel,
)
from .utils.io import atomic_write_bytes

Source = Union[bytes, bytearray, str, os.PathLike, BinaryIO]

QUAT_TOLERANCE = 1e-3
UNIT_EPS = 1e-12


class CameraModel(enum.Enum):
    SIMPLE_PINHOLE = 0
    PINHOLE = 1
    SIMPLE_RADIAL = 2

    @property
    def num_params(self) -> int:
        return _NUM_PARAMS[self]

    @classmethod
    def from_id(cls, model_id: int) -> "CameraModel":
        try:
            return cls(model_id)
        except ValueError:
            raise UnsupportedModel(f"camera model id {model_id} is not supported") from None

    @classmethod
    def from_name(cls, name: str) -> "CameraModel":
        try:
            return cls[name]
        except KeyError:
            raise UnsupportedModel(f"camera model {name!r} is not supported") from None


_NUM_PARAMS = {
    CameraModel.SIMPLE_PINHOLE: 3,
    CameraModel.PINHOLE: 4,
    CameraModel.SIMPLE_RADIAL: 4,
}


@dataclass(frozen=True)
class CameraIntrinsics:
    camera_id: int
    model: CameraModel
    width: int
    height: int
    params: tuple

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if self.width <= 0 or self.height <= 0:
            raise MalformedCamera(f"camera {self.camera_id}: non-positive size {self.width}x{self.height}")
        if len(self.params) != self.model.num_params:
            raise MalformedCamera(
                f"camera {self.camera_id}: {self.model.name} needs {self.model.num_params} params, "
                f"got {len(self.params)}"
            )
        n_focal = 2 if self.model is CameraModel.PINHOLE else 1
        if not all(f > 0 for f in self.params[:n_focal]):
            raise MalformedCamera(f"camera {self.camera_id}: focal length must be > 0")

    @property
    def fx(self) -> float:
        return self.params[0]

    @property
    def fy(self) -> float:
        return self.params[1] if self.model is CameraModel.PINHOLE else self.params[0]

    @property
    def cx(self) -> float:
        return self.params[2] if self.model is CameraModel.PINHOLE else self.params[1]

    @property
    def cy(self) -> float:
        return self.params[3] if self.model is CameraModel.PINHOLE else self.params[2]

    def with_principal_point(self, cx: float, cy: float, width: int, height: int) -> "CameraIntrinsics":
        p = list(self.params)
        if self.model is CameraModel.PINHOLE:
            p[2], p[3] = cx, cy
        else:
            p[1], p[2] = cx, cy
        return CameraIntrinsics(self.camera_id, self.model, width, height, tuple(p))


@dataclass(frozen=True, eq=False)
class ViewPose:
    """World-to-camera pose of one registered image plus its 2D observations."""

    image_id: int
    rotation: tuple  # unit quaternion (w, x, y, z)
    translation: tuple
    camera_id: int
    image_name: str
    xys: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    point3d_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _normalized_quat(self.rotation, self.image_id))
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        xys = np.asarray(self.xys, dtype=np.float64).reshape(-1, 2)
        ids = np.asarray(self.point3d_ids, dtype=np.int64).reshape(-1)
        if len(xys) != len(ids):
            raise MalformedPose(f"image {self.image_id}: {len(xys)} keypoints but {len(ids)} point ids")
        xys.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "xys", xys)
        object.__setattr__(self, "point3d_ids", ids)

    def __eq__(self, other):
        if not isinstance(other, ViewPose):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.rotation == other.rotation
            and self.translation == other.translation
            and self.camera_id == other.camera_id
            and self.image_name == other.image_name
            and np.array_equal(self.xys, other.xys)
            and np.array_equal(self.point3d_ids, other.point3d_ids)
        )

    __hash__ = None

    @property
    def observations(self):
        return [(float(u), float(v), int(i)) for (u, v), i in zip(self.xys, self.point3d_ids)]


@dataclass(frozen=True, eq=False)
class SparsePoint:
    point3d_id: int
    position: tuple
    color: tuple  # 8-bit RGB
    reprojection_error: float
    track_image_ids: np.ndarray
    track_point2d_idxs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(x) for x in self.position))
        color = tuple(int(c) for c in self.color)
        if len(color) != 3 or not all(0 <= c <= 255 for c in color):
            raise MalformedTrack(f"point {self.point3d_id}: color {color} outside [0, 255]")
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "reprojection_error", float(self.reprojection_error))
        img = np.asarray(self.track_image_ids, dtype=np.int64).reshape(-1)
        idx = np.asarray(self.track_point2d_idxs, dtype=np.int64).reshape(-1)
        if len(img) == 0:
            raise MalformedTrack(f"point {self.point3d_id} has an empty track")
        if len(img) != len(idx):
            raise MalformedTrack(f"point {self.point3d_id}: track arrays differ in length")
        img.setflags(write=False)
        idx.setflags(write=False)
        object.__setattr__(self, "track_image_ids", img)
        object.__setattr__(self, "track_point2d_idxs", idx)

    def __eq__(self, other):
        if not isinstance(other, SparsePoint):
            return NotImplemented
        return (
            self.point3d_id == other.point3d_id
            and self.position == other.position
            and self.color == other.color
            and self.reprojection_error == other.reprojection_error
            and np.array_equal(self.track_image_ids, other.track_image_ids)
            and np.array_equal(self.track_point2d_idxs, other.track_point2d_idxs)
        )

    __hash__ = None

    @property
    def track(self):
        return list(zip(self.track_image_ids.tolist(), self.track_point2d_idxs.tolist()))


def _normalized_quat(q, image_id) -> tuple:
    q = tuple(float(c) for c in q)
    if len(q) != 4:
        raise MalformedPose(f"image {image_id}: quaternion needs 4 components")
    norm = math.sqrt(sum(c * c for c in q))
    if not math.isfinite(norm) or abs(norm - 1.0) > QUAT_TOLERANCE:
        raise MalformedPose(f"image {image_id}: quaternion norm {norm} is not within {QUAT_TOLERANCE} of 1")
    if abs(norm - 1.0) <= UNIT_EPS:  # re-normalizing would perturb the last bits
        return q
    return tuple(c / norm for c in q)


# ---------------------------------------------------------------------------
# byte-level helpers

class _ByteReader:
    def __init__(self, data: bytes):
        self._raw = bytes(data)
        self._buf = memoryview(self._raw)
        self._pos = 0

    @property
    def remaining(self) -> int:
        return len(self._buf) - self._pos

    def take(self, n: int) -> memoryview:
        if n < 0 or n > self.remaining:
            raise TruncatedFile(f"need {n} bytes at offset {self._pos}, {self.remaining} left")
        out = self._buf[self._pos:self._pos + n]
        self._pos += n
        return out

    def unpack(self, fmt: str):
        st = struct.Struct("<" + fmt)
        return st.unpack(self.take(st.size))

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        if count > self.remaining // max(dt.itemsize, 1):
            raise TruncatedFile(f"record claims {count} entries, only {self.remaining} bytes left")
        return np.frombuffer(self.take(count * dt.itemsize), dtype=dt).copy()

    def cstring(self) -> str:
        end = self._raw.find(b"\0", self._pos)
        if end < 0:
            raise TruncatedFile("unterminated image name")
        name = self._raw[self._pos:end].decode("utf-8", errors="surrogateescape")
        self._pos = end + 1
        return name


def _read_all(source: Source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        path = Path(source)
        if not path.exists():
            raise MissingFile(f"{path} does not exist")
        return path.read_bytes()
    return source.read()


def _text_lines(source: Source) -> List[str]:
    data = _read_all(source)
    if isinstance(data, str):
        text = data
    else:
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedText(f"text file is not valid UTF-8: {exc}") from None
    return text.splitlines()


def _content_lines(lines):
    for line in lines:
        line = line.strip()
        if line and not line.startswith("#"):
            yield line


def _check_format(fmt: str) -> str:
    if fmt not in ("binary", "text"):
        raise ValueError(f"format must be 'binary' or 'text', got {fmt!r}")
    return fmt


def _int(tok: str, what: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise MalformedText(f"bad integer for {what}: {tok!r}") from None


def _float(tok: str, what: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise MalformedText(f"bad number for {what}: {tok!r}") from None


# ---------------------------------------------------------------------------
# cameras

def parse_cameras(source: Source, format: str = "binary") -> Dict[int, CameraIntrinsics]:
    if _check_format(format) == "text":
        cameras = {}
        for line in _content_lines(_text_lines(source)):
            tok = line.split()
            if len(tok) < 4:
                raise MalformedText(f"camera line has {len(tok)} fields: {line!r}")
            model = CameraModel.from_name(tok[1])
            if len(tok) != 4 + model.num_params:
                raise MalformedText(
                    f"camera line for {model.name} needs {4 + model.num_params} fields, got {len(tok)}"
                )
            cam = CameraIntrinsics(
                camera_id=_int(tok[0], "CAMERA_ID"),
                model=model,
                width=_int(tok[2], "WIDTH"),
                height=_int(tok[3], "HEIGHT"),
                params=tuple(_float(t, "PARAMS") for t in tok[4:]),
            )
            cameras[cam.camera_id] = cam
        return cameras

    r = _ByteReader(_read_all(source))
    (count,) = r.unpack("Q")
    cameras = {}
    for _ in range(count):
        camera_id, model_id, width, height = r.unpack("iiQQ")
        model = CameraModel.from_id(model_id)
        params = r.unpack(f"{model.num_params}d")
        cameras[camera_id] = CameraIntrinsics(camera_id, model, width, height, params)
    return cameras


def write_cameras(cameras: Dict[int, CameraIntrinsics], sink=None, format: str = "binary"):
    """Serialize ``cameras``; returns the bytes when ``sink`` is None."""
    if _check_format(format) == "text":
        out = ["# Camera list with one line of data per camera:",
               "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]",
               f"# Number of cameras: {len(cameras)}"]
        for cam in cameras.values():
            out.append(" ".join([str(cam.camera_id), cam.model.name, str(cam.width), str(cam.height)]
                                + [repr(p) for p in cam.params]))
        return _emit(("\n".join(out) + "\n").encode(), sink)

    buf = io.BytesIO()
    buf.write(struct.pack("<Q", len(cameras)))
    for cam in cameras.values():
        buf.write(struct.pack("<iiQQ", cam.camera_id, cam.model.value, cam.width, cam.height))
        buf.write(struct.pack(f"<{len(cam.params)}d", *cam.params))
    return _emit(buf.getvalue(), sink)


# ---------------------------------------------------------------------------
# images

def parse_images(source: Source, format: str = "binary") -> Dict[int, ViewPose]:
    if _check_format(format) == "text":
        images = {}
        lines = _text_lines(source)
        i = 0
        while i < len(lines):
            line = lines[i].strip()
            i += 1
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if len(tok) != 10:
                raise MalformedText(f"image line needs 10 fields, got {len(tok)}: {line!r}")
            obs_line = lines[i] if i < len(lines) else ""
            i += 1
            obs = obs_line.split()
            if len(obs) % 3:
                raise MalformedText(f"observation line has {len(obs)} fields (not a multiple of 3)")
            xs = np.array([_float(t, "POINTS2D") for t in obs[0::3]], dtype=np.float64)
            ys = np.array([_float(t, "POINTS2D") for t in obs[1::3]], dtype=np.float64)
            ids = np.array([_int(t, "POINT3D_ID") for t in obs[2::3]], dtype=np.int64)
            pose = ViewPose(
                image_id=_int(tok[0], "IMAGE_ID"),
                rotation=tuple(_float(t, "QVEC") for t in tok[1:5]),
                translation=tuple(_float(t, "TVEC") for t in tok[5:8]),
                camera_id=_int(tok[8], "CAMERA_ID"),
                image_name=tok[9],
                xys=np.stack([xs, ys], axis=1) if len(xs) else np.zeros((0, 2)),
                point3d_ids=ids,
            )
            images[pose.image_id] = pose
        return images

    r = _ByteReader(_read_all(source))
    (count,) = r.unpack("Q")
    images = {}
    for _ in range(count):
        image_id, qw, qx, qy, qz, tx, ty, tz, camera_id = r.unpack("i7di")
        name = r.cstring()
        (n_obs,) = r.unpack("Q")
        rec = r.array([("xy", "<f8", 2), ("id", "<i8")], n_obs)
        images[image_id] = ViewPose(
            image_id, (qw, qx, qy, qz), (tx, ty, tz), camera_id, name,
            rec["xy"].reshape(-1, 2), rec["id"],
        )
    return images


def write_images(images: Dict[int, ViewPose], sink=None, format: str = "binary"):
    if _check_format(format) == "text":
        out = ["# Image list with two lines of data per image:",
               "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
               "#   POINTS2D[] as (X, Y, POINT3D_ID)",
               f"# Number of images: {len(images)}"]
        for im in images.values():
            out.append(" ".join([str(im.image_id)] + [repr(c) for c in im.rotation]
                                + [repr(c) for c in im.translation] + [str(im.camera_id), im.image_name]))
            out.append(" ".join(f"{float(u)!r} {float(v)!r} {int(i)}"
                                for (u, v), i in zip(im.xys, im.point3d_ids)))
        return _emit(("\n".join(out) + "\n").encode("utf-8", errors="surrogateescape"), sink)

    buf = io.BytesIO()
    buf.write(struct.pack("<Q", len(images)))
    for im in images.values():
        buf.write(struct.pack("<i7di", im.image_id, *im.rotation, *im.translation, im.camera_id))
        buf.write(im.image_name.encode("utf-8", errors="surrogateescape") + b"\0")
        buf.write(struct.pack("<Q", len(im.point3d_ids)))
        rec = np.empty(len(im.point3d_ids), dtype=[("xy", "<f8", 2), ("id", "<i8")])
        rec["xy"] = im.xys
        rec["id"] = im.point3d_ids
        buf.write(rec.tobytes())
    return _emit(buf.getvalue(), sink)


# ---------------------------------------------------------------------------
# points

def parse_points3d(source: Source, format: str = "binary") -> Dict[int, SparsePoint]:
    if _check_format(format) == "text":
        points = {}
        for line in _content_lines(_text_lines(source)):
            tok = line.split()
            if len(tok) < 8 or (len(tok) - 8) % 2:
                raise MalformedText(f"point line has {len(tok)} fields: {line[:80]!r}")
            track = tok[8:]
            pt = SparsePoint(
                point3d_id=_int(tok[0], "POINT3D_ID"),
                position=tuple(_float(t, "XYZ") for t in tok[1:4]),
                color=tuple(_int(t, "RGB") for t in tok[4:7]),
                reprojection_error=_float(tok[7], "ERROR"),
                track_image_ids=[_int(t, "IMAGE_ID") for t in track[0::2]],
                track_point2d_idxs=[_int(t, "POINT2D_IDX") for t in track[1::2]],
            )
            points[pt.point3d_id] = pt
        return points

    r = _ByteReader(_read_all(source))
    (count,) = r.unpack("Q")
    points = {}
    for _ in range(count):
        point_id, x, y, z, cr, cg, cb, err, track_len = r.unpack("Q3d3BdQ")
        rec = r.array([("img", "<i4"), ("idx", "<i4")], track_len)
        points[point_id] = SparsePoint(point_id, (x, y, z), (cr, cg, cb), err, rec["img"], rec["idx"])
    return points


def write_points3d(points: Dict[int, SparsePoint], sink=None, format: str = "binary"):
    if _check_format(format) == "text":
        out = ["# 3D point list with one line of data per point:",
               "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)",
               f"# Number of points: {len(points)}"]
        for p in points.values():
            out.append(" ".join([str(p.point3d_id)] + [repr(c) for c in p.position]
                                + [str(c) for c in p.color] + [repr(p.reprojection_error)]
                                + [f"{i} {j}" for i, j in zip(p.track_image_ids, p.track_point2d_idxs)]))
        return _emit(("\n".join(out) + "\n").encode(), sink)

    buf = io.BytesIO()
    buf.write(struct.pack("<Q", len(points)))
    for p in points.values():
        buf.write(struct.pack("<Q3d3BdQ", p.point3d_id, *p.position, *p.color,
                              p.reprojection_error, len(p.track_image_ids)))
        rec = np.empty(len(p.track_image_ids), dtype=[("img", "<i4"), ("idx", "<i4")])
        rec["img"] = p.track_image_ids
        rec["idx"] = p.track_point2d_idxs
        buf.write(rec.tobytes())
    return _emit(buf.getvalue(), sink)


def _emit(data: bytes, sink):
    if sink is None:
        return data
    if isinstance(sink, (str, os.PathLike)):
        atomic_write_bytes(sink, data)
    else:
        sink.write(data)
    return None


# ---------------------------------------------------------------------------
# consistency checks

@dataclass(frozen=True)
class DanglingCamera:
    image_id: int
    camera_id: int


@dataclass(frozen=True)
class DanglingPoint:
    image_id: int
    observation_index: int
    point3d_id: int


@dataclass(frozen=True)
class DanglingImage:
    point3d_id: int
    image_id: int


@dataclass
class ValidationReport:
    issues: list = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return not self.issues

    def __len__(self):
        return len(self.issues)

    def __iter__(self):
        return iter(self.issues)

    def of_kind(self, kind):
        return [i for i in self.issues if isinstance(i, kind)]

    def summary(self) -> str:
        if self.is_empty:
            return "consistent"
        counts = {}
        for issue in self.issues:
            counts[type(issue).__name__] = counts.get(type(issue).__name__, 0) + 1
        return ", ".join(f"{n} {k}" for k, n in sorted(counts.items()))


def validate_reconstruction(cameras, poses, points) -> ValidationReport:
    report = ValidationReport()
    for pose in poses.values():
        if pose.camera_id not in cameras:
            report.issues.append(DanglingCamera(pose.image_id, pose.camera_id))
        for k, pid in enumerate(pose.point3d_ids.tolist()):
            if pid != -1 and pid not in points:
                report.issues.append(DanglingPoint(pose.image_id, k, pid))
    for pt in points.values():
        for image_id in pt.track_image_ids.tolist():
            if image_id not in poses:
                report.issues.append(DanglingImage(pt.point3d_id, image_id))
    return report


# ---------------------------------------------------------------------------
# directory-level convenience

@dataclass
class Reconstruction:
    cameras: Dict[int, CameraIntrinsics]
    images: Dict[int, ViewPose]
    points: Dict[int, SparsePoint]

    def validate(self) -> ValidationReport:
        return validate_reconstruction(self.cameras, self.images, self.points)


_FILES = ("cameras", "images", "points3D")


def detect_format(directory) -> str:
    directory = Path(directory)
    for fmt, ext in (("binary", ".bin"), ("text", ".txt")):
        if all((directory / f"{name}{ext}").exists() for name in _FILES):
            return fmt
    missing = [f"{n}.bin|.txt" for n in _FILES
               if not ((directory / f"{n}.bin").exists() or (directory / f"{n}.txt").exists())]
    raise MissingFile(f"{directory}: missing {', '.join(missing) or 'a consistent set of model files'}")


def read_model(directory, format: str = None) -> Reconstruction:
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingFile(f"{directory} is not a directory")
    format = format or detect_format(directory)
    ext = ".bin" if format == "binary" else ".txt"
    return Reconstruction(
        cameras=parse_cameras(directory / f"cameras{ext}", format),
        images=parse_images(directory / f"images{ext}", format),
        points=parse_points3d(directory / f"points3D{ext}", format),
    )


def write_model(recon: Reconstruction, directory, format: str = "binary") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = ".bin" if format == "binary" else ".txt"
    write_cameras(recon.cameras, directory / f"cameras{ext}", format)
    write_images(recon.images, directory / f"images{ext}", format)
    write_points3d(recon.points, directory / f"points3D{ext}", format)
