"""
Text embeddings: deterministic hash encoder and external embedding files
"""

import hashlib
import logging
import re
from collections.abc import Mapping
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Union

import numpy as np
from pydantic import ValidationError

from textcrystal.core.exceptions import ConfigError, DataError, EmbeddingLookupError
from textcrystal.schemas.config import TextEncoderConfig
from textcrystal.schemas.prompt import EmbeddingRecord
from textcrystal.services.dataset_io import read_jsonl

logger = logging.getLogger(__name__)

MIN_TEXT_DIM = 8
_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> List[str]:
    """Lowercased maximal alphanumeric runs"""
    return _TOKEN.findall(text.lower())


def _features(tokens: List[str]) -> Iterator[str]:
    yield from tokens
    for left, right in zip(tokens, tokens[1:]):
        yield f"{left} {right}"


def encode_text_hash(text: str, d_text: int = 64, seed: int = 0) -> np.ndarray:
    """Signed feature hashing of unigrams and bigrams into ``d_text`` dims, L2-normalized.

    Each feature is hashed with BLAKE2b keyed by the seed and adds ±1 at two
    indices. Text without tokens encodes to the zero vector.
    """
    if d_text < MIN_TEXT_DIM:
        raise ConfigError(f"d_text must be at least {MIN_TEXT_DIM}, got {d_text}")
    key = str(int(seed)).encode("ascii")
    vec = np.zeros(d_text, dtype=np.float64)
    tokens = tokenize(text or "")
    if not tokens:
        logger.warning("⚠️ Empty prompt text encodes to the zero vector")
        return vec
    for feature in _features(tokens):
        digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=16, key=key).digest()
        for offset in (0, 8):
            index = int.from_bytes(digest[offset:offset + 4], "little") % d_text
            sign = 1.0 if digest[offset + 4] & 1 else -1.0
            vec[index] += sign
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        return vec
    return vec / norm


class HashTextEncoder:
    """Callable wrapper around ``encode_text_hash`` with fixed settings"""

    def __init__(self, config: Optional[TextEncoderConfig] = None):
        self.config = config or TextEncoderConfig()
        if self.config.d_text < MIN_TEXT_DIM:
            raise ConfigError(f"d_text must be at least {MIN_TEXT_DIM}")

    @property
    def dim(self) -> int:
        return self.config.d_text

    def encode(self, text: str) -> np.ndarray:
        return encode_text_hash(text, self.config.d_text, self.config.seed)

    def __call__(self, text: str) -> np.ndarray:
        return self.encode(text)


class EmbeddingTable(Mapping):
    """Read-only id -> vector map; absent ids raise ``EmbeddingLookupError``"""

    def __init__(self, vectors: Dict[str, np.ndarray]):
        dims = {v.shape[0] for v in vectors.values()}
        if len(dims) > 1:
            raise DataError(f"Embedding dimensions differ: {sorted(dims)}")
        self._vectors = vectors
        self.dim = dims.pop() if dims else 0

    def __getitem__(self, key: str) -> np.ndarray:
        try:
            return self._vectors[key]
        except KeyError:
            raise EmbeddingLookupError(f"No embedding for id {key!r}")

    def __contains__(self, key) -> bool:
        return key in self._vectors

    def get(self, key, default=None):
        return self._vectors.get(key, default)

    def __iter__(self):
        return iter(self._vectors)

    def __len__(self) -> int:
        return len(self._vectors)


def load_external_embeddings(path: Union[str, Path]) -> EmbeddingTable:
    """Load ``{"id", "vector"}`` JSONL rows into an ``EmbeddingTable``"""
    vectors: Dict[str, np.ndarray] = {}
    dim = None
    for lineno, obj in read_jsonl(path):
        try:
            record = EmbeddingRecord.model_validate(obj)
        except ValidationError as e:
            raise DataError(f"{path}:{lineno}: invalid embedding record ({e.errors()[0].get('msg')})")
        if record.id in vectors:
            raise DataError(f"{path}:{lineno}: duplicate embedding id {record.id!r}")
        vec = np.asarray(record.vector, dtype=np.float64)
        if not np.all(np.isfinite(vec)):
            raise DataError(f"{path}:{lineno}: non-finite embedding values")
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise DataError(f"{path}:{lineno}: embedding dimension {vec.shape[0]} differs from {dim}")
        vec.flags.writeable = False
        vectors[record.id] = vec
    logger.info(f"✅ Loaded {len(vectors)} external embeddings (d={dim}) from {path}")
    return EmbeddingTable(vectors)
