"""Shared value types.

Arrays are numpy; the torch modules convert at their boundaries. The mask
token lives at index ``vocab_size`` (one past the data vocabulary), so
denoiser embedding tables have ``V + 1`` rows while every logit head emits
``V`` columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np


def _finite(name: str, values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{name} contains non-finite entries")


@dataclass(frozen=True, eq=False)
class TokenSequence:
    tokens: np.ndarray
    vocab_size: int
    mask_index: int | None = None

    def __post_init__(self) -> None:
        tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "tokens", tokens)
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if tokens.size == 0:
            raise ValueError("sequence length must be positive")
        if self.mask_index is None:
            object.__setattr__(self, "mask_index", self.vocab_size)
        ok = (tokens >= 0) & (tokens < self.vocab_size)
        ok |= tokens == self.mask_index
        if not ok.all():
            bad = int(tokens[~ok][0])
            raise ValueError(f"token {bad} outside [0, {self.vocab_size}) and not the mask index")

    @property
    def length(self) -> int:
        return int(self.tokens.size)

    @property
    def masked(self) -> np.ndarray:
        return self.tokens == self.mask_index

    def __len__(self) -> int:
        return self.length

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return (
            self.vocab_size == other.vocab_size
            and self.mask_index == other.mask_index
            and np.array_equal(self.tokens, other.tokens)
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "tokens": self.tokens.tolist(),
            "vocab_size": self.vocab_size,
            "mask_index": self.mask_index,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TokenSequence:
        return cls(np.asarray(d["tokens"]), int(d["vocab_size"]), d.get("mask_index"))


def make_masked_copy(x: TokenSequence, mask: np.ndarray) -> TokenSequence:
    """Return ``x`` with every position where ``mask == 1`` set to the mask token."""
    mask = np.asarray(mask).reshape(-1)
    if mask.size != x.length:
        raise ValueError(f"mask length {mask.size} does not match sequence length {x.length}")
    if x.masked.any():
        raise ValueError("input sequence already contains mask tokens")
    tokens = np.where(mask.astype(bool), x.mask_index, x.tokens)
    return TokenSequence(tokens, x.vocab_size, x.mask_index)


@dataclass(frozen=True, eq=False)
class _RealArray:
    values: np.ndarray
    shape: tuple[int, ...]

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        shape = tuple(int(s) for s in self.shape)
        if values.size != int(np.prod(shape)):
            raise ValueError(f"{values.size} values do not fill declared shape {shape}")
        values = values.reshape(shape)
        _finite(type(self).__name__, values)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "shape", shape)

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def __eq__(self, other: object) -> bool:
        if type(other) is not type(self):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.values, other.values)

    def to_dict(self) -> dict[str, Any]:
        return {"values": self.values.reshape(-1).tolist(), "shape": list(self.shape)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]):
        return cls(np.asarray(d["values"]), tuple(d["shape"]))


class ContinuousRepresentation(_RealArray):
    """Encoder output ``u``; shape is the flow's (positions, channels) layout."""


class GaussianLatent(_RealArray):
    """Flow output ``z``; same shape as the representation it came from."""


@dataclass(frozen=True, eq=False)
class LogitGrid:
    """Per-position unnormalised log-probabilities, shape ``(T, V)``.

    Temperature divides the logits before the softmax.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("logit grid must be 2-D (T, V)")
        _finite("LogitGrid", values)
        object.__setattr__(self, "values", values)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.values.shape[1]

    def probs(self, temperature: float = 1.0) -> np.ndarray:
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        a = self.values / temperature
        a = a - a.max(axis=1, keepdims=True)
        e = np.exp(a)
        return e / e.sum(axis=1, keepdims=True)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LogitGrid):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def to_dict(self) -> dict[str, Any]:
        return {"values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> LogitGrid:
        return cls(np.asarray(d["values"]))


@dataclass(eq=False)
class PairedLatentDataset:
    """Materialised (z, x) supervision pairs.

    ``latents`` is ``(N, *latent_shape)`` and ``tokens`` is ``(N, T)``.
    ``mode`` is ``"frozen"`` for one stored noise draw per example.
    """

    latents: np.ndarray
    tokens: np.ndarray
    vocab_size: int
    latent_shape: tuple[int, ...]
    mode: str = "frozen"
    labels: np.ndarray | None = None
    noise: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.latents = np.asarray(self.latents, dtype=np.float32)
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.latent_shape = tuple(int(s) for s in self.latent_shape)
        n = self.tokens.shape[0]
        if self.latents.shape != (n, *self.latent_shape):
            raise ValueError(
                f"latents {self.latents.shape} do not match ({n}, *{self.latent_shape})"
            )
        if self.tokens.ndim != 2:
            raise ValueError("tokens must be (N, T)")
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.vocab_size):
            raise ValueError("token index out of range")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.noise is not None:
            self.noise = np.asarray(self.noise, dtype=np.float32).reshape(self.latents.shape)

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def count(self) -> int:
        return len(self)

    @property
    def seq_len(self) -> int:
        return int(self.tokens.shape[1])

    def __iter__(self) -> Iterator[tuple[GaussianLatent, TokenSequence]]:
        for z, x in zip(self.latents, self.tokens):
            yield GaussianLatent(z, self.latent_shape), TokenSequence(x, self.vocab_size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PairedLatentDataset):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None
            and other.labels is not None
            and np.array_equal(self.labels, other.labels)
        )
        return (
            self.vocab_size == other.vocab_size
            and self.latent_shape == other.latent_shape
            and self.mode == other.mode
            and np.array_equal(self.latents, other.latents)
            and np.array_equal(self.tokens, other.tokens)
            and same_labels
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "latents": self.latents.reshape(len(self), -1).tolist(),
            "tokens": self.tokens.tolist(),
            "vocab_size": self.vocab_size,
            "latent_shape": list(self.latent_shape),
            "mode": self.mode,
            "labels": None if self.labels is None else self.labels.tolist(),
            "noise": None if self.noise is None else self.noise.reshape(len(self), -1).tolist(),
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PairedLatentDataset:
        shape = tuple(d["latent_shape"])
        tokens = np.asarray(d["tokens"], dtype=np.int64)
        latents = np.asarray(d["latents"], dtype=np.float32).reshape(len(tokens), *shape)
        labels = None if d.get("labels") is None else np.asarray(d["labels"])
        noise = None if d.get("noise") is None else np.asarray(d["noise"], dtype=np.float32)
        return cls(latents, tokens, int(d["vocab_size"]), shape, d.get("mode", "frozen"),
                   labels, noise, dict(d.get("meta", {})))
