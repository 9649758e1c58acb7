"""KITTI odometry dataset access and trajectory file round-tripping.

Layout: <root>/sequences/<seq>/image_0 and image_1 hold the grayscale
stereo frames (000000.png, six digits), calib.txt carries the projection
rows, and <root>/poses/<seq>.txt the ground truth when available.
Trajectory files are one row-major 3x4 pose per line, twelve reals.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose, StereoRig, orthonormality_residual, project_to_rotation
from .metrics import Trajectory


class CalibrationError(ValueError):
    """calib.txt missing a projection line or carrying bad values."""


class PoseFileError(ValueError):
    """Trajectory text with a malformed or non-rigid pose line."""


class ImageFormatError(ValueError):
    """Image file in a format this reader does not handle."""


class DatasetError(ValueError):
    """Sequence directory inconsistent with the expected layout."""


def parse_calibration(text: str, image_size: tuple[int, int] | None = None) -> StereoRig:
    """Build a stereo rig from the P0/P1 projection lines.

    The left projection supplies focal and principal point; the baseline is
    -P1[0][3] / P1[0][0]. Image dimensions are not stored in calib.txt, so
    the rig's image_size stays None unless the caller provides one.
    """
    rows: dict[str, list[float]] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or ":" not in line:
            continue
        name, _, rest = line.partition(":")
        name = name.strip()
        if name in ("P0", "P1"):
            try:
                values = [float(tok) for tok in rest.split()]
            except ValueError as exc:
                raise CalibrationError(f"non-numeric entry on line {name}: {exc}") from None
            if len(values) != 12:
                raise CalibrationError(
                    f"line {name}: expected 12 values, got {len(values)}"
                )
            rows[name] = values
    for name in ("P0", "P1"):
        if name not in rows:
            raise CalibrationError(f"missing line {name}")
    p0, p1 = rows["P0"], rows["P1"]
    focal = p0[0]
    if focal <= 0.0:
        raise CalibrationError(f"line P0: non-positive focal {focal}")
    baseline = -p1[3] / p1[0]
    if baseline <= 0.0:
        raise CalibrationError(f"line P1: non-positive derived baseline {baseline}")
    return StereoRig(
        focal=focal,
        principal_point=(p0[2], p0[6]),
        baseline=baseline,
        image_size=image_size,
    )


def read_poses(text: str) -> Trajectory:
    """Parse a KITTI pose file into a trajectory.

    Each line holds a row-major 3x4 matrix. Rotation blocks drifting from
    orthonormality by more than 1e-3 are rejected; smaller drift above 1e-9
    is re-projected onto the rotation manifold. The first pose must be the
    identity to within 1e-6.
    """
    poses = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            values = np.array([float(tok) for tok in line.split()])
        except ValueError:
            raise PoseFileError(f"line {lineno}: non-numeric entry") from None
        if values.size != 12:
            raise PoseFileError(f"line {lineno}: expected 12 values, got {values.size}")
        mat = values.reshape(3, 4)
        rotation = mat[:, :3]
        drift = orthonormality_residual(rotation)
        if drift > 1e-3:
            raise PoseFileError(
                f"line {lineno}: rotation block off the manifold by {drift:.2e}"
            )
        if drift > 1e-9:
            rotation = project_to_rotation(rotation)
        poses.append(Pose(rotation, mat[:, 3].copy()))
    if not poses:
        raise PoseFileError("no poses in file")
    first = poses[0]
    if (
        np.abs(first.rotation - np.eye(3)).max() > 1e-6
        or np.abs(first.translation).max() > 1e-6
    ):
        raise PoseFileError("line 1: first pose must be the identity")
    return Trajectory(poses)


def write_trajectory(trajectory: Trajectory) -> str:
    """KITTI submission text: 12 space-separated reals per frame."""
    lines = []
    for pose in trajectory.poses:
        flat = np.hstack([pose.rotation, pose.translation[:, None]]).ravel()
        lines.append(" ".join(f"{v:.12g}" for v in flat))
    return "\n".join(lines) + "\n"


def _read_pgm(data: bytes, path) -> np.ndarray:
    tokens = []
    i = 0
    # header tokens with '#' comments; raster follows the single whitespace
    # after maxval
    while len(tokens) < 4:
        if i >= len(data):
            raise ImageFormatError(f"{path}: truncated PGM header")
        c = data[i : i + 1]
        if c == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
                j += 1
            tokens.append(data[i:j])
            i = j
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ImageFormatError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"{path}: bad dimensions {width}x{height}")
    if magic == b"P5":
        raster = data[i + 1 : i + 1 + width * height]
        if len(raster) != width * height:
            raise ImageFormatError(f"{path}: raster size mismatch")
        return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()
    if magic == b"P2":
        values = data[i:].split()
        if len(values) != width * height:
            raise ImageFormatError(f"{path}: raster size mismatch")
        return np.array([int(v) for v in values], dtype=np.uint8).reshape(height, width)
    raise ImageFormatError(f"{path}: unsupported PGM magic {magic!r}")


def load_image(path) -> np.ndarray:
    """Read an 8-bit grayscale image as a (height, width) uint8 array.

    PGM is decoded natively; PNG (and other PIL formats) go through
    Pillow, with color inputs converted by luma. Missing files raise the
    usual OSError.
    """
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in (b"P5", b"P2"):
        return _read_pgm(data, path)
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover
        raise ImageFormatError(f"{path}: Pillow needed for non-PGM images") from exc
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                img = img.convert("L")
            return np.asarray(img, dtype=np.uint8)
    except Exception as exc:
        raise ImageFormatError(f"{path}: {exc}") from None


def save_pgm(path, image: np.ndarray) -> None:
    """Write a uint8 image as binary PGM."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())


@dataclass
class DatasetHandle:
    """One opened sequence: calibrated rig, frame paths, optional truth."""

    root: Path
    sequence: str
    rig: StereoRig
    left_paths: list[Path]
    right_paths: list[Path]
    ground_truth: Trajectory | None = None

    @property
    def frame_count(self) -> int:
        return len(self.left_paths)

    def image_pair(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        return load_image(self.left_paths[index]), load_image(self.right_paths[index])


def _frame_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix in (".png", ".pgm"))


def open_dataset(root, sequence: str) -> DatasetHandle:
    """Open <root>/sequences/<sequence> and its calibration and poses."""
    root = Path(root)
    seq_dir = root / "sequences" / sequence
    left_dir = seq_dir / "image_0"
    right_dir = seq_dir / "image_1"
    calib_path = seq_dir / "calib.txt"
    if not left_dir.is_dir() or not right_dir.is_dir():
        raise DatasetError(f"{seq_dir}: missing image_0/image_1 directories")
    if not calib_path.is_file():
        raise DatasetError(f"{calib_path}: missing calibration")
    left_paths = _frame_files(left_dir)
    right_paths = _frame_files(right_dir)
    if len(left_paths) != len(right_paths):
        raise DatasetError(
            f"{seq_dir}: {len(left_paths)} left frames vs {len(right_paths)} right"
        )
    if not left_paths:
        raise DatasetError(f"{seq_dir}: no frames")
    first = load_image(left_paths[0])
    rig = parse_calibration(
        calib_path.read_text(), image_size=(first.shape[1], first.shape[0])
    )
    ground_truth = None
    pose_path = root / "poses" / f"{sequence}.txt"
    if pose_path.is_file():
        ground_truth = read_poses(pose_path.read_text())
    return DatasetHandle(
        root=root,
        sequence=sequence,
        rig=rig,
        left_paths=left_paths,
        right_paths=right_paths,
        ground_truth=ground_truth,
    )
