"""Dataset loading (IDX binary format) and synthetic data generators."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Base class for malformed IDX files."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"features has {self.features.shape[0]} rows but labels has {self.labels.shape[0]}"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class LinRegClientData:
    X: np.ndarray
    y: np.ndarray
    true_theta: np.ndarray
    b: float
    sigma: float

    @property
    def theta_hat(self) -> np.ndarray:
        """Least-squares estimate (X^T X)^{-1} X^T y."""
        return np.linalg.solve(self.X.T @ self.X, self.X.T @ self.y)


# --------------------------------------------------------------------------- IDX


def _read_header(buf: bytes, ndims: int, path) -> tuple[int, tuple[int, ...]]:
    need = 4 * (1 + ndims)
    if len(buf) < need:
        raise IdxTruncatedError(f"{path}: header truncated ({len(buf)} bytes)")
    fields = struct.unpack(">" + "I" * (1 + ndims), buf[:need])
    return fields[0], tuple(fields[1:])


def load_idx(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()

    magic = struct.unpack(">I", img[:4])[0] if len(img) >= 4 else None
    if magic != IMAGE_MAGIC:
        raise IdxMagicError(f"{images_path}: bad image magic {magic!r}")
    magic = struct.unpack(">I", lab[:4])[0] if len(lab) >= 4 else None
    if magic != LABEL_MAGIC:
        raise IdxMagicError(f"{labels_path}: bad label magic {magic!r}")

    _, (n_img, rows, cols) = _read_header(img, 3, images_path)
    _, (n_lab,) = _read_header(lab, 1, labels_path)
    if n_img != n_lab:
        raise IdxCountMismatchError(f"{n_img} images but {n_lab} labels")

    payload = img[16:]
    if len(payload) < n_img * rows * cols:
        raise IdxTruncatedError(
            f"{images_path}: expected {n_img * rows * cols} pixel bytes, got {len(payload)}"
        )
    lab_payload = lab[8:]
    if len(lab_payload) < n_lab:
        raise IdxTruncatedError(f"{labels_path}: expected {n_lab} label bytes, got {len(lab_payload)}")

    pixels = np.frombuffer(payload, dtype=np.uint8, count=n_img * rows * cols)
    features = pixels.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab_payload, dtype=np.uint8, count=n_lab).astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if n_lab else 1
    return LabeledDataset(features, labels, num_classes)


def write_idx(dataset: LabeledDataset, images_path, labels_path, shape: tuple[int, int] | None = None):
    """Write features (assumed in [0, 1]) and labels as an IDX pair."""
    n, d = dataset.features.shape
    rows, cols = shape if shape is not None else (1, d)
    if rows * cols != d:
        raise ValueError(f"shape {shape} does not match feature dim {d}")
    pix = np.rint(dataset.features * 255.0)
    if pix.min(initial=0) < 0 or pix.max(initial=0) > 255:
        raise ValueError("features must lie in [0, 1]")
    Path(images_path).write_bytes(
        struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + pix.astype(np.uint8).tobytes()
    )
    Path(labels_path).write_bytes(
        struct.pack(">II", LABEL_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    )


# --------------------------------------------------------------------- synthetic


def _theta_list(theta_gen, m: int, d: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Resolve a truth spec: a list of vectors, ("gaussian", scale) or ("equal_norm", norm)."""
    if isinstance(theta_gen, dict):
        kind = theta_gen.get("kind")
        if kind == "fixed":
            thetas = [np.asarray(t, dtype=float) for t in theta_gen["values"]]
        elif kind == "gaussian":
            mean = np.asarray(theta_gen.get("mean", np.zeros(d)), dtype=float)
            scale = float(theta_gen.get("scale", 1.0))
            thetas = [mean + scale * rng.standard_normal(d) for _ in range(m)]
        elif kind == "equal_norm":
            norm = float(theta_gen.get("norm", 1.0))
            thetas = []
            for _ in range(m):
                v = rng.standard_normal(d)
                thetas.append(norm * v / np.linalg.norm(v))
        else:
            raise ValueError(f"unknown theta_gen kind {kind!r}")
    else:
        thetas = [np.asarray(t, dtype=float) for t in theta_gen]
    if len(thetas) != m or any(t.shape != (d,) for t in thetas):
        raise ValueError(f"theta_gen must yield {m} vectors of dimension {d}")
    return thetas


def orthogonal_design(N: int, d: int, b: float, rng: np.random.Generator) -> np.ndarray:
    """N x d design with X^T X = N b I_d (first d columns of a random orthogonal matrix)."""
    q, r = np.linalg.qr(rng.standard_normal((N, N)))
    q = q * np.sign(np.diag(r))
    return q[:, :d] * np.sqrt(N * b)


def synth_linreg(m: int, N: int, d: int, b: float, sigma: float, theta_gen, seed: int) -> list[LinRegClientData]:
    if N < d:
        raise ValueError(f"need N >= d for an orthogonal design (N={N}, d={d})")
    if b <= 0:
        raise ValueError("design scale b must be positive")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    thetas = _theta_list(theta_gen, m, d, rng)
    clients = []
    for theta in thetas:
        X = orthogonal_design(N, d, b, rng)
        y = X @ theta + sigma * rng.standard_normal(N)
        clients.append(LinRegClientData(X, y, theta, float(b), float(sigma)))
    return clients


def synth_classification(m: int, n: int, d: int, C: int, separation: float, seed: int,
                         noise: float = 1.0) -> LabeledDataset:
    """Balanced Gaussian mixture with class means at distance ~`separation` from the origin."""
    if C < 2:
        raise ValueError("need at least two classes")
    if d < 1:
        raise ValueError("need d >= 1")
    rng = np.random.default_rng(seed)
    total = m * n
    directions = rng.standard_normal((C, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions
    labels = np.arange(total) % C
    rng.shuffle(labels)
    features = means[labels] + noise * rng.standard_normal((total, d))
    return LabeledDataset(features, labels.astype(np.int64), C)


def train_test_split(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Global random split of sample indices."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(test_fraction * n))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# ------------------------------------------------------------ federated container


@dataclass
class ClientSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass
class FederatedDataset:
    """Shared train/test stores plus per-client index lists.

    ``num_classes == 0`` marks a regression problem with real-valued targets.
    """

    train_features: np.ndarray
    train_targets: np.ndarray
    test_features: np.ndarray
    test_targets: np.ndarray
    num_classes: int
    clients: list[ClientSplit]
    meta: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return len(self.clients)

    @property
    def dim(self) -> int:
        return self.train_features.shape[1]

    def client_train(self, i: int):
        idx = self.clients[i].train
        return self.train_features[idx], self.train_targets[idx]

    def client_val(self, i: int):
        idx = self.clients[i].val
        return self.train_features[idx], self.train_targets[idx]

    def client_test(self, i: int):
        idx = self.clients[i].test
        return self.test_features[idx], self.test_targets[idx]


def hold_out(indices: np.ndarray, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Split indices into (kept, held-out); keeps at least one sample on each side when possible."""
    indices = np.asarray(indices, dtype=np.int64)
    n = len(indices)
    k = int(round(fraction * n))
    if n >= 2:
        k = min(max(k, 1), n - 1)
    else:
        k = 0
    perm = rng.permutation(n)
    return np.sort(indices[perm[k:]]), np.sort(indices[perm[:k]])


def linreg_federated(clients: list[LinRegClientData], seed: int) -> FederatedDataset:
    """Stack per-client regression data; test and validation targets are fresh noise draws on the same design."""
    rng = np.random.default_rng(seed)
    X = np.vstack([c.X for c in clients])
    y = np.concatenate([c.y for c in clients])
    y_test = np.concatenate([c.X @ c.true_theta + c.sigma * rng.standard_normal(len(c.y)) for c in clients])
    y_val = np.concatenate([c.X @ c.true_theta + c.sigma * rng.standard_normal(len(c.y)) for c in clients])
    n = len(y)
    # validation rows live after the training rows of the shared store
    train_features = np.vstack([X, X])
    train_targets = np.concatenate([y, y_val])
    splits = []
    start = 0
    for c in clients:
        rows = np.arange(start, start + len(c.y))
        splits.append(ClientSplit(train=rows, val=rows + n, test=rows.copy()))
        start += len(c.y)
    return FederatedDataset(train_features, train_targets, X.copy(), y_test, 0, splits,
                            meta={"kind": "linreg", "b": clients[0].b if clients else None})
