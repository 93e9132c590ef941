"""Dataset loading: IDX image containers, array directories, synthetic tasks.

The IDX container is parsed bit-exactly: two zero bytes, a dtype code byte
(0x08 unsigned byte, 0x09 signed byte, 0x0B int16, 0x0C int32, 0x0D float32,
0x0E float64), an ndim byte, ndim big-endian uint32 dimension sizes, then the
raw values in row-major order.  Gzipped files are handled transparently.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arch import InputSpec
from .errors import ParseError

_IDX_DTYPES = {
    0x08: np.uint8,
    0x09: np.int8,
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    input: InputSpec
    train: tuple[np.ndarray, np.ndarray]
    val: tuple[np.ndarray, np.ndarray]
    test: tuple[np.ndarray, np.ndarray] | None = None


def load_idx(path: str | Path) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise ParseError(f"{path}: not an IDX file (bad magic)")
    dtype_code, ndim = data[2], data[3]
    if dtype_code not in _IDX_DTYPES:
        raise ParseError(f"{path}: unknown IDX dtype code 0x{dtype_code:02x}")
    header_len = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    array = np.frombuffer(data, dtype=_IDX_DTYPES[dtype_code], offset=header_len)
    expected = int(np.prod(dims))
    if array.size != expected:
        raise ParseError(f"{path}: expected {expected} values, found {array.size}")
    return array.reshape(dims)


def _find_idx(directory: Path, stem: str) -> Path:
    for suffix in ("", ".gz"):
        candidate = directory / f"{stem}{suffix}"
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{directory}/{stem}[.gz] not found")


def load_idx_image_dir(
    directory: str | Path,
    name: str,
    num_classes: int = 10,
    val_count: int = 5000,
) -> DatasetSpec:
    """Load an MNIST-style directory of four IDX files.

    The last `val_count` training examples become the validation split.
    """
    directory = Path(directory)
    train_x = load_idx(_find_idx(directory, "train-images-idx3-ubyte"))
    train_y = load_idx(_find_idx(directory, "train-labels-idx1-ubyte"))
    test_x = load_idx(_find_idx(directory, "t10k-images-idx3-ubyte"))
    test_y = load_idx(_find_idx(directory, "t10k-labels-idx1-ubyte"))

    def prep(images: np.ndarray) -> np.ndarray:
        return (images.astype(np.float32) / 255.0)[..., None]

    x, y = prep(train_x), train_y.astype(np.int64)
    split = len(x) - val_count
    height, width = x.shape[1], x.shape[2]
    return DatasetSpec(
        name=name,
        input=InputSpec(height=height, width=width, channels=1, num_classes=num_classes),
        train=(x[:split], y[:split]),
        val=(x[split:], y[split:]),
        test=(prep(test_x), test_y.astype(np.int64)),
    )


def load_array_dir(directory: str | Path) -> DatasetSpec:
    """Directory-of-arrays format: meta.json plus {train,val,test}_{x,y}.npy."""
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    input_spec = InputSpec(
        height=meta["height"], width=meta["width"],
        channels=meta["channels"], num_classes=meta["num_classes"])

    def split(prefix: str, required: bool):
        x_path = directory / f"{prefix}_x.npy"
        if not x_path.exists():
            if required:
                raise FileNotFoundError(x_path)
            return None
        x = np.load(x_path).astype(np.float32)
        y = np.load(directory / f"{prefix}_y.npy").astype(np.int64)
        return x, y

    return DatasetSpec(
        name=meta.get("name", directory.name),
        input=input_spec,
        train=split("train", True),
        val=split("val", True),
        test=split("test", False),
    )


def _render_blob(canvas: np.ndarray, cy: float, cx: float, amplitude: float, sigma: float):
    size = canvas.shape[0]
    ys = np.arange(size)[:, None]
    xs = np.arange(size)[None, :]
    canvas += amplitude * np.exp(-(((ys - cy) ** 2) + ((xs - cx) ** 2)) / (2 * sigma ** 2))


def synthetic_blobs(
    seed: int = 0,
    n_train: int = 512,
    n_val: int = 256,
    n_test: int = 256,
    size: int = 8,
) -> DatasetSpec:
    """Two-class separable task: a bright blob in a class-dependent corner."""
    rng = np.random.default_rng(seed)

    def make(n: int):
        x = np.zeros((n, size, size, 1), dtype=np.float32)
        y = rng.integers(0, 2, size=n).astype(np.int64)
        for i in range(n):
            quarter = size / 4
            base = quarter if y[i] == 0 else 3 * quarter
            cy = base + rng.uniform(-1.0, 1.0)
            cx = base + rng.uniform(-1.0, 1.0)
            canvas = np.zeros((size, size), dtype=np.float64)
            _render_blob(canvas, cy, cx, amplitude=1.0, sigma=size / 6)
            canvas += rng.normal(0.0, 0.05, canvas.shape)
            x[i, :, :, 0] = np.clip(canvas, 0.0, 1.5)
        return x, y

    return DatasetSpec(
        name=f"blobs{size}",
        input=InputSpec(height=size, width=size, channels=1, num_classes=2),
        train=make(n_train),
        val=make(n_val),
        test=make(n_test),
    )


def synthetic_xor(
    seed: int = 0,
    n_train: int = 512,
    n_val: int = 256,
    n_test: int = 256,
    size: int = 8,
) -> DatasetSpec:
    """XOR of two patch indicators; not linearly separable in patch space."""
    rng = np.random.default_rng(seed)
    centers = ((size * 0.3, size * 0.3), (size * 0.7, size * 0.7))

    def make(n: int):
        x = np.zeros((n, size, size, 1), dtype=np.float32)
        bits = rng.integers(0, 2, size=(n, 2))
        y = (bits[:, 0] ^ bits[:, 1]).astype(np.int64)
        for i in range(n):
            canvas = np.zeros((size, size), dtype=np.float64)
            for bit, (cy, cx) in zip(bits[i], centers):
                if bit:
                    _render_blob(canvas, cy + rng.uniform(-0.5, 0.5), cx + rng.uniform(-0.5, 0.5),
                                 amplitude=1.0, sigma=size / 8)
            canvas += rng.normal(0.0, 0.05, canvas.shape)
            x[i, :, :, 0] = np.clip(canvas, 0.0, 1.5)
        return x, y

    return DatasetSpec(
        name=f"xor{size}",
        input=InputSpec(height=size, width=size, channels=1, num_classes=2),
        train=make(n_train),
        val=make(n_val),
        test=make(n_test),
    )


def resolve_dataset(name: str, data_root: str | Path = "data") -> DatasetSpec:
    """Map a config dataset name to a loaded DatasetSpec."""
    root = Path(data_root)
    if name == "blobs8":
        return synthetic_blobs(seed=0)
    if name == "xor8":
        return synthetic_xor(seed=0)
    if name in ("mnist", "fashion-mnist"):
        return load_idx_image_dir(root / name, name)
    directory = root / name
    if (directory / "meta.json").exists():
        return load_array_dir(directory)
    raise FileNotFoundError(
        f"dataset {name!r} not found under {root} (expected an IDX or array directory)")
