"""Input encoders: question text to hidden vectors, images to feature grids.

Image features arrive precomputed. The deterministic synthetic backend
stands in for a real convolutional extractor at desk scale; a file backend
reads grids exported from any external network.
"""

from __future__ import annotations

import string
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError, InputError
from .substrate import (
    Context,
    ParameterStore,
    Tensor,
    constant,
    gru_step,
    hash_seed,
    init_embedding,
    init_gru,
    take_row,
    take_rows,
)

UNK_TOKEN = "<unk>"
UNK_INDEX = 0

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def tokenize(text: str) -> list[str]:
    """Lowercase, replace punctuation with spaces, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


@dataclass
class TokenSequence:
    tokens: list[int]
    raw_text: str

    def __post_init__(self):
        if not self.tokens:
            raise InputError(f"question produced no tokens: {self.raw_text!r}")


class QuestionVocab:
    """Token list where line number equals index; index 0 is <unk>."""

    def __init__(self, tokens: list[str]):
        if not tokens or tokens[0] != UNK_TOKEN:
            raise ConfigurationError("question vocabulary must start with <unk>")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str) -> TokenSequence:
        ids = [self.index.get(t, UNK_INDEX) for t in tokenize(text)]
        return TokenSequence(ids, text)

    @classmethod
    def build(cls, texts: list[str], max_size: int | None = None) -> "QuestionVocab":
        counts = Counter()
        for text in texts:
            counts.update(t for t in tokenize(text) if t != UNK_TOKEN)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if max_size is not None:
            ranked = ranked[: max(0, max_size - 1)]
        return cls([UNK_TOKEN] + [t for t, _ in ranked])

    @classmethod
    def load(cls, path: str | Path) -> "QuestionVocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)

    def save(self, path: str | Path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")


class QuestionEncoder:
    """Embedding lookup plus a GRU; the last hidden state is the encoding."""

    def __init__(self, prefix: str, vocab_size: int, embed_dim: int, hidden_dim: int):
        self.prefix = prefix
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim

    def init_params(self, store: ParameterStore, rng: np.random.Generator):
        init_embedding(store, f"{self.prefix}.embed", self.vocab_size, self.embed_dim, rng)
        init_gru(store, f"{self.prefix}.gru", self.embed_dim, self.hidden_dim, rng)

    def encode(self, ctx: Context, seq: TokenSequence) -> Tensor:
        if not seq.tokens:
            raise InputError("cannot encode an empty token sequence")
        for t in seq.tokens:
            if not 0 <= t < self.vocab_size:
                raise IndexError(f"token index {t} outside vocabulary of {self.vocab_size}")
        table = ctx.param(f"{self.prefix}.embed", (self.vocab_size, self.embed_dim))
        embedded = take_rows(table, seq.tokens)
        h = constant(np.zeros(self.hidden_dim))
        for t in range(len(seq.tokens)):
            h = gru_step(ctx, f"{self.prefix}.gru", take_row(embedded, t), h)
        return h


@dataclass
class FeatureMap:
    """Channel-major grid of region feature vectors, float64."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DimensionError(f"feature map must be (C, H, W) with all dims >= 1, got {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def n_regions(self) -> int:
        return self.height * self.width

    def regions(self) -> np.ndarray:
        """(H*W, C) matrix of per-region feature vectors."""
        return self.data.reshape(self.channels, -1).T


def mean_pool(v: FeatureMap) -> np.ndarray:
    """Per-channel mean over all spatial positions."""
    return v.data.mean(axis=(1, 2))


class SyntheticFeatureProvider:
    """Hash-seeded pseudo features: same image id, same grid, anywhere.

    Values are uniform in [-1, 1], rounded through float32 so a grid
    survives the feature-file format without changing.
    """

    backend = "synthetic"
    deterministic = True

    def __init__(self, shape: tuple[int, int, int]):
        c, h, w = shape
        if min(c, h, w) < 1:
            raise ConfigurationError(f"invalid feature shape {shape}")
        self.shape = (c, h, w)

    def get(self, image_id: str) -> FeatureMap:
        rng = np.random.Generator(np.random.PCG64(hash_seed(f"features:{image_id}")))
        values = rng.uniform(-1.0, 1.0, size=self.shape)
        return FeatureMap(values.astype(np.float32).astype(np.float64))


class FileFeatureProvider:
    """Reads one feature file per image id from a directory."""

    backend = "files"
    deterministic = True

    def __init__(self, directory: str | Path, shape: tuple[int, int, int] | None = None):
        self.directory = Path(directory)
        self.shape = tuple(shape) if shape else None

    def get(self, image_id: str) -> FeatureMap:
        path = self.directory / f"{image_id}.rvqf"
        if not path.exists():
            raise ConfigurationError(f"no feature file for image {image_id!r} at {path}")
        fmap = load_features(path)
        if self.shape and fmap.data.shape != self.shape:
            raise DimensionError(f"feature file {path} has shape {fmap.data.shape}, expected {self.shape}")
        return fmap


def make_feature_provider(spec: dict):
    backend = spec.get("backend", "synthetic")
    if backend == "synthetic":
        return SyntheticFeatureProvider(tuple(spec["shape"]))
    if backend == "files":
        return FileFeatureProvider(spec["dir"], spec.get("shape"))
    raise ConfigurationError(f"unknown feature backend {backend!r}")


FEATURE_MAGIC = b"RVQF"
FEATURE_VERSION = 1


def store_features(fmap: FeatureMap, path: str | Path):
    c, h, w = fmap.data.shape
    out = bytearray()
    out += FEATURE_MAGIC
    out += struct.pack("<H", FEATURE_VERSION)
    out += struct.pack("<III", c, h, w)
    out += fmap.data.astype("<f4").tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


def load_features(path: str | Path) -> FeatureMap:
    buf = Path(path).read_bytes()
    if len(buf) < 18:
        raise FormatError(f"feature file {path} too short for a header", offset=len(buf))
    if buf[0:4] != FEATURE_MAGIC:
        raise FormatError(f"bad feature-file magic in {path}", offset=0)
    version = struct.unpack("<H", buf[4:6])[0]
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature-file version {version}", offset=4)
    c, h, w = struct.unpack("<III", buf[6:18])
    expected = 18 + 4 * c * h * w
    if len(buf) != expected:
        raise FormatError(
            f"feature payload is {len(buf) - 18} bytes, header declares {4 * c * h * w}",
            offset=min(len(buf), expected),
        )
    values = np.frombuffer(buf, dtype="<f4", offset=18).reshape(c, h, w)
    return FeatureMap(values.astype(np.float64))
