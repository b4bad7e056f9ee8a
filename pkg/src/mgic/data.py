"""Datasets: the sampled target surface, synthetic feature maps, IDX files."""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .autograd import Tensor
from .errors import ConfigurationError, FormatError

__all__ = [
    "DatasetHandle",
    "target_function",
    "sample_function_dataset",
    "synth_feature_maps",
    "read_idx",
    "write_idx",
    "encode_idx",
    "decode_idx",
    "load_idx",
    "load_idx_dataset",
    "write_digits_idx",
]


@dataclass
class DatasetHandle:
    """Inputs and targets with matching leading extent.

    ``inputs`` is a float array (NCHW for image-like data); ``targets`` is a
    float array for regression or an int array of class labels.
    """

    kind: str
    inputs: np.ndarray
    targets: np.ndarray
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ConfigurationError(
                f"inputs ({len(self.inputs)}) and targets ({len(self.targets)}) disagree"
            )

    def __len__(self):
        return len(self.inputs)

    def subset(self, index, split=None):
        return DatasetHandle(self.kind, self.inputs[index], self.targets[index],
                             split or self.split, dict(self.meta))


def target_function(x, y):
    """f(x, y) = cos(x) * sin(20 y)."""
    return np.cos(x) * np.sin(20.0 * y)


def sample_function_dataset(n, seed, dtype=np.float32):
    """``n`` uniform points of [0, 1]^2 with targets f(x, y).

    Inputs are shaped [n, 2, 1, 1] (the two coordinates act as channels of a
    1x1 image); targets are [n].
    """
    if n < 1:
        raise ConfigurationError("n must be at least 1")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, 1.0, size=(n, 2))
    targets = target_function(pts[:, 0], pts[:, 1])
    return DatasetHandle(
        "function-surface",
        pts.reshape(n, 2, 1, 1).astype(dtype),
        targets.astype(dtype),
        meta={"seed": seed},
    )


def synth_feature_maps(n, c, h, w, seed, rank=None, smooth=1.5, dtype=np.float32):
    """Correlated, compressible c-channel maps.

    Each sample mixes ``rank`` (default ``c // 4``) independent, spatially
    smoothed noise fields through a fixed random c x rank matrix whose
    columns decay in scale, so channels are correlated and the channel
    covariance has rank at most ``rank``.  Output is scaled to unit variance
    and returned as both inputs and targets (reconstruction task).
    """
    rank = max(1, c // 4) if rank is None else rank
    if rank < 1 or rank > c:
        raise ConfigurationError(f"rank must lie in [1, {c}], got {rank}")
    rng = np.random.default_rng(seed)
    mixing = rng.standard_normal((c, rank)) * (1.0 / np.sqrt(1.0 + np.arange(rank)))
    fields = rng.standard_normal((n, rank, h, w))
    if smooth:
        fields = gaussian_filter(fields, sigma=(0, 0, smooth, smooth), mode="wrap")
    fields /= fields.std(axis=(0, 2, 3), keepdims=True)
    maps = np.einsum("cr,nrhw->nchw", mixing, fields)
    maps /= maps.std()
    maps = maps.astype(dtype)
    return DatasetHandle("synthetic-features", maps, maps, meta={"seed": seed, "rank": rank})


# -- IDX -----------------------------------------------------------------------------

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {dt.kind + str(dt.itemsize): code for code, dt in _IDX_TYPES.items()}


def decode_idx(buf):
    """Decode IDX bytes into a numpy array with the stored dtype and dims."""
    if len(buf) < 4:
        raise FormatError("truncated IDX header", offset=len(buf))
    zero, code, ndim = struct.unpack_from(">HBB", buf, 0)
    if zero != 0 or code not in _IDX_TYPES:
        raise FormatError(f"bad IDX magic 0x{int.from_bytes(buf[:4], 'big'):08x}", offset=0)
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError("truncated IDX dimension list", offset=len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    dt = _IDX_TYPES[code]
    need = header + int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) < need:
        raise FormatError(f"truncated IDX payload: expected {need} bytes", offset=len(buf))
    if len(buf) > need:
        raise FormatError("trailing bytes after IDX payload", offset=need)
    return np.frombuffer(buf, dtype=dt, offset=header).reshape(dims)


def encode_idx(array):
    array = np.asarray(array)
    key = array.dtype.kind + str(array.dtype.itemsize)
    if key not in _IDX_CODES:
        raise FormatError(f"dtype {array.dtype} has no IDX type code")
    code = _IDX_CODES[key]
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    return header + array.astype(_IDX_TYPES[code], copy=False).tobytes()


def read_idx(path):
    with open(path, "rb") as fh:
        return decode_idx(fh.read())


def write_idx(path, array):
    with open(path, "wb") as fh:
        fh.write(encode_idx(array))


def load_idx(path, dtype=np.float32):
    """Load an IDX file for training.

    Rank-3 unsigned-byte files (magic 0x00000803) become an image tensor
    [N, 1, H, W] scaled to [0, 1] by dividing by 255.  Rank-1 files (magic
    0x00000801) become an int64 label vector.  Other ranks are returned as
    float tensors of the stored shape.
    """
    raw = read_idx(path)
    if raw.ndim == 1:
        return raw.astype(np.int64)
    data = raw.astype(dtype)
    if raw.dtype.kind == "u" and raw.dtype.itemsize == 1:
        data /= 255.0
    if raw.ndim == 3:
        data = data.reshape(raw.shape[0], 1, raw.shape[1], raw.shape[2])
    return Tensor(data, dtype=dtype)


def load_idx_dataset(images_path, labels_path, split="train", dtype=np.float32):
    images = load_idx(images_path, dtype=dtype)
    labels = load_idx(labels_path)
    return DatasetHandle("idx-images", images.data, labels, split=split)


def write_digits_idx(out_dir, seed=0, copies=4, shift=2):
    """Write the scikit-learn 8x8 handwritten digits as MNIST-style IDX files.

    Images are placed on a (8 + 2*shift)-pixel canvas and rescaled to 0..255.
    The training split receives ``copies`` randomly translated copies of
    each training digit; the test split holds the untranslated held-out
    digits.  Returns a dict with the four file paths.
    """
    import os
    from sklearn.datasets import load_digits

    digits = load_digits()
    images = np.round(digits.images * (255.0 / 16.0)).astype(np.uint8)
    labels = digits.target.astype(np.uint8)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    n_test = len(images) // 5
    test_idx, train_idx = order[:n_test], order[n_test:]
    size = 8 + 2 * shift

    def place(img, dy, dx):
        canvas = np.zeros((size, size), dtype=np.uint8)
        canvas[shift + dy: shift + dy + 8, shift + dx: shift + dx + 8] = img
        return canvas

    train_imgs, train_labels = [], []
    for _ in range(copies):
        for i in train_idx:
            dy, dx = rng.integers(-shift, shift + 1, size=2)
            train_imgs.append(place(images[i], dy, dx))
            train_labels.append(labels[i])
    perm = rng.permutation(len(train_imgs))
    train_imgs = np.stack(train_imgs)[perm]
    train_labels = np.asarray(train_labels, dtype=np.uint8)[perm]
    test_imgs = np.stack([place(images[i], 0, 0) for i in test_idx])
    test_labels = labels[test_idx]

    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "train_images": os.path.join(out_dir, "train-images-idx3-ubyte"),
        "train_labels": os.path.join(out_dir, "train-labels-idx1-ubyte"),
        "test_images": os.path.join(out_dir, "t10k-images-idx3-ubyte"),
        "test_labels": os.path.join(out_dir, "t10k-labels-idx1-ubyte"),
    }
    write_idx(paths["train_images"], train_imgs)
    write_idx(paths["train_labels"], train_labels)
    write_idx(paths["test_images"], test_imgs)
    write_idx(paths["test_labels"], test_labels)
    return paths
