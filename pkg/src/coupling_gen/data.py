"""Dataset ingestion: binarised MNIST from the IDX archives, and synthetic correlated sequences."""

from __future__ import annotations

import gzip
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .oracle.divergence import ExactDistribution, perfect_pair_law

DATA_ENV = "COUPLING_GEN_DATA"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873",
              "train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432"),
    "test": ("t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3",
             "t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"),
}


class MissingDataError(FileNotFoundError):
    pass


class ChecksumError(ValueError):
    pass


def data_dir(root: str | Path | None = None) -> Path:
    if root is not None:
        return Path(root)
    return Path(os.environ.get(DATA_ENV, Path.home() / ".cache" / "coupling_gen"))


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _find(root: Path, name: str) -> Path:
    for cand in (root / name, root / "MNIST" / "raw" / name, root / "mnist" / name):
        if cand.exists():
            return cand
    raise MissingDataError(
        f"{name} not found under {root}; place the MNIST IDX archives there or set {DATA_ENV}"
    )


def read_idx(raw: bytes) -> np.ndarray:
    """Parse an IDX file (unsigned-byte payload)."""
    if raw[:2] != b"\x00\x00" or raw[2] != 0x08:
        raise ValueError("not an unsigned-byte IDX file")
    ndim = raw[3]
    dims = [int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    return data.reshape(dims)


def binarize(images: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """``[0, 255]`` grayscale to ``{0, 1}``: a pixel is 1 when ``value / 255 > threshold``."""
    return (np.asarray(images, dtype=np.float64) / 255.0 > threshold).astype(np.int64)


@dataclass
class BinaryImageDataset:
    tokens: np.ndarray  # (N, 784) in {0, 1}
    labels: np.ndarray
    split: str
    threshold: float
    image_shape: tuple[int, int] = (28, 28)
    digest: str = ""

    def __len__(self) -> int:
        return len(self.tokens)

    def images(self) -> np.ndarray:
        return self.tokens.reshape(-1, *self.image_shape)

    def ones_fraction(self) -> float:
        return float(self.tokens.mean())


def load_mnist_binary(threshold: float = 0.5, split: str = "train", root: str | Path | None = None,
                      verify: bool = True) -> BinaryImageDataset:
    """Load and binarise an MNIST split from local IDX ``.gz`` archives.

    Raises :class:`MissingDataError` when the archives are absent and
    :class:`ChecksumError` when an md5 does not match.
    """
    if split not in MNIST_FILES:
        raise ValueError(f"unknown split {split!r}")
    base = data_dir(root)
    img_name, img_md5, lbl_name, lbl_md5 = MNIST_FILES[split]
    img_path, lbl_path = _find(base, img_name), _find(base, lbl_name)
    if verify:
        for path, want in ((img_path, img_md5), (lbl_path, lbl_md5)):
            got = _md5(path)
            if got != want:
                raise ChecksumError(f"{path}: md5 {got} != {want}")
    images = read_idx(gzip.decompress(img_path.read_bytes()))
    labels = read_idx(gzip.decompress(lbl_path.read_bytes())).astype(np.int64)
    tokens = binarize(images, threshold).reshape(len(images), -1)
    digest = hashlib.sha256(tokens.astype(np.uint8).tobytes()).hexdigest()
    return BinaryImageDataset(tokens, labels, split, threshold, tuple(images.shape[1:]), digest)


@dataclass
class SyntheticCorrelatedSpec:
    """``perfect_pair``: equal mass on the ``V`` constant sequences.
    ``motif``: a mixture of ``k`` fixed random sequences with ``weights``."""

    kind: str = "perfect_pair"
    seq_len: int = 2
    vocab_size: int = 2
    k: int = 4
    weights: list[float] | None = None
    motif_seed: int = 0
    motifs: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in ("perfect_pair", "motif"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.kind == "motif":
            if self.weights is None:
                self.weights = [1.0 / self.k] * self.k
            w = np.asarray(self.weights, dtype=np.float64)
            if len(w) != self.k or (w < 0).any() or w.sum() <= 0:
                raise ValueError("need k non-negative motif weights")
            self.weights = list(w / w.sum())
            if self.motifs is None:
                self.motifs = self._draw_motifs()

    def _draw_motifs(self) -> np.ndarray:
        if self.k > self.vocab_size**self.seq_len:
            raise ValueError("more motifs than distinct sequences")
        rng = np.random.default_rng(self.motif_seed)
        chosen: list[tuple[int, ...]] = []
        while len(chosen) < self.k:
            m = tuple(int(v) for v in rng.integers(0, self.vocab_size, self.seq_len))
            if m not in chosen:
                chosen.append(m)
        return np.asarray(chosen, dtype=np.int64)

    def exact_law(self) -> ExactDistribution:
        if self.kind == "perfect_pair":
            return perfect_pair_law(self.seq_len, self.vocab_size)
        p = np.zeros(self.vocab_size**self.seq_len)
        weights = self.vocab_size ** np.arange(self.seq_len - 1, -1, -1)
        for m, w in zip(self.motifs, self.weights):
            p[m @ weights] += w
        return ExactDistribution(p, self.seq_len, self.vocab_size)

    @classmethod
    def from_config(cls, data_cfg) -> SyntheticCorrelatedSpec:
        return cls(data_cfg.task, data_cfg.seq_len, data_cfg.vocab_size, data_cfg.motif_k,
                   data_cfg.motif_weights, data_cfg.motif_seed)


def synth_correlated(spec: SyntheticCorrelatedSpec, n: int, rng: np.random.Generator | int
                     ) -> tuple[np.ndarray, np.ndarray, ExactDistribution]:
    """``n`` i.i.d. draws from the spec's law.

    Returns ``(tokens (n, T), component labels (n,), exact law)``; the label
    is the constant symbol for ``perfect_pair`` and the motif index otherwise.
    """
    rng = np.random.default_rng(rng)
    law = spec.exact_law()
    if spec.kind == "perfect_pair":
        labels = rng.integers(0, spec.vocab_size, n)
        tokens = np.repeat(labels[:, None], spec.seq_len, axis=1)
    else:
        labels = rng.choice(spec.k, size=n, p=spec.weights)
        tokens = spec.motifs[labels]
    return tokens.astype(np.int64), labels.astype(np.int64), law


def load_task(cfg, seed: int | None = None, split: str = "train"):
    """Tokens, labels and (for synthetic tasks) the exact law named by ``cfg.data``."""
    d = cfg.data
    if d.task == "mnist":
        ds = load_mnist_binary(d.threshold, split)
        n = min(d.n_train, len(ds))
        return ds.tokens[:n], ds.labels[:n], None
    spec = SyntheticCorrelatedSpec.from_config(d)
    tokens, labels, law = synth_correlated(spec, d.n_train, cfg.seed if seed is None else seed)
    return tokens, labels, law
