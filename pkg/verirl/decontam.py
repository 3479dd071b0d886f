"""
Train/test decontamination

Stage 1 removes training records that share a word n-gram with a test
question, or that become identical to one once numbers are masked out.
Stage 2 embeds the survivors and removes those whose cosine similarity to
some test record reaches the threshold. Each removal is reported once, with
the earliest stage that caught it.
"""
import hashlib
import logging
import re
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from verirl import config
from verirl.common.jsonl import read_jsonl, write_jsonl
from verirl.models import ConfigError, DataValidationError, Sample, SchemaError

logger = logging.getLogger("verirl")

TOKENIZER_ID = "lowercase-nopunct-whitespace"
NUMBER_PLACEHOLDER = "<num>"

_PUNCT_RE = re.compile(r"[^\w\s]")
_NUMBER_RE = re.compile(r"[-+]?\d+(?:[.,]\d+)*")
_SPACE_RE = re.compile(r"\s+")


class EmptyCorpus(DataValidationError):
    """A corpus that must have records has none"""


class DimensionMismatch(ValueError):
    """Vectors of different dimensions were compared"""


class ZeroVector(ValueError):
    """Cosine similarity is undefined for a zero vector"""


class ProviderError(Exception):
    """The embedding provider failed for a record"""

    def __init__(self, message: str, record_id: Optional[str] = None):
        self.record_id = record_id
        super().__init__(f"record {record_id}: {message}" if record_id else message)


class Stage(Enum):
    """Decontamination stage that removed a record"""
    NGRAM = "ngram"
    NUMERIC = "numeric-exact"
    EMBEDDING = "embedding"

    @property
    def key(self) -> str:
        """Short name used in stage counts"""
        return {"ngram": "ngram", "numeric-exact": "numeric", "embedding": "embedding"}[self.value]


@dataclass(frozen=True)
class DecontamConfig:
    """Gram size and similarity threshold"""
    ngram_size: int = config.NGRAM_SIZE
    threshold: float = config.SIMILARITY_THRESHOLD

    def __post_init__(self):
        if self.ngram_size < 1:
            raise ConfigError("ngram_size must be at least 1")
        if not -1.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [-1, 1], got {self.threshold}")


######################################################################
# S T A G E   1 :   N - G R A M S
######################################################################

def tokenize(text: str) -> List[str]:
    """Lowercase whitespace tokens after punctuation is replaced by spaces"""
    return _PUNCT_RE.sub(" ", text.lower()).split()


def _fingerprint(tokens: Sequence[str]) -> int:
    digest = hashlib.blake2b(" ".join(tokens).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def record_fingerprints(text: str, n: int) -> List[int]:
    """Fingerprints of every n-gram, or of the whole record when it is shorter than n"""
    tokens = tokenize(text)
    if len(tokens) < n:
        return [_fingerprint(tokens)]
    return [_fingerprint(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


class NGramIndex:
    """Fingerprints of the test corpus, each mapped to the first test id that produced it"""

    def __init__(self, n: int, fingerprints: Dict[int, str], tokenizer: str = TOKENIZER_ID):
        if n < 1:
            raise ConfigError("n must be at least 1")
        self.n = n
        self.fingerprints = fingerprints
        self.tokenizer = tokenizer

    def __len__(self):
        return len(self.fingerprints)

    def __contains__(self, fingerprint: int) -> bool:
        return fingerprint in self.fingerprints

    def match(self, text: str) -> Optional[str]:
        """Test id sharing an n-gram with the text, if any"""
        for fingerprint in record_fingerprints(text, self.n):
            if fingerprint in self.fingerprints:
                return self.fingerprints[fingerprint]
        return None


def build_ngram_index(test: Sequence[Sample], n: int = config.NGRAM_SIZE) -> NGramIndex:
    """Indexes every n-gram of every test question"""
    if not test:
        raise EmptyCorpus("Cannot build an n-gram index from an empty test corpus")
    fingerprints: Dict[int, str] = {}
    for sample in test:
        for fingerprint in record_fingerprints(sample.question, n):
            fingerprints.setdefault(fingerprint, sample.id)
    logger.info("Indexed %d distinct %d-grams from %d test records", len(fingerprints), n, len(test))
    return NGramIndex(n, fingerprints)


def ngram_contaminated(record, index: NGramIndex) -> bool:
    """True iff the record shares an n-gram (or whole short record) with the test corpus"""
    text = record.question if isinstance(record, Sample) else record
    return index.match(text) is not None


def numeric_strip_key(text: str) -> str:
    """Masks every number (sign and decimals included) and normalizes whitespace"""
    return _SPACE_RE.sub(" ", _NUMBER_RE.sub(NUMBER_PLACEHOLDER, text)).strip()


######################################################################
# S T A G E   2 :   E M B E D D I N G S
######################################################################

class EmbeddingProvider(ABC):
    """Maps a record's text and image references to a fixed-size vector"""

    provider_id = "abstract"
    dimension = 0

    @abstractmethod
    def embed(self, sample: Sample) -> np.ndarray:
        """Deterministic vector of length `dimension`"""


class HashedBagOfTokensProvider(EmbeddingProvider):
    """Signed feature hashing of question tokens and image references, L2-normalized"""

    provider_id = "hashed-bag-of-tokens"

    def __init__(self, dimension: int = config.EMBEDDING_DIM):
        if dimension < 1:
            raise ConfigError("Embedding dimension must be positive")
        self.dimension = dimension

    def embed(self, sample: Sample) -> np.ndarray:
        vector = np.zeros(self.dimension)
        features = tokenize(sample.question) + [f"img:{ref}" for ref in sample.images]
        for feature in features:
            value = int.from_bytes(hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest(), "big")
            sign = 1.0 if (value >> 63) & 1 else -1.0
            vector[value % self.dimension] += sign
        norm = np.linalg.norm(vector)
        return vector / norm if norm > 0 else vector


class PrecomputedEmbeddingProvider(EmbeddingProvider):
    """Vectors looked up by record id from an embedding JSONL file"""

    provider_id = "precomputed"

    def __init__(self, vectors: Dict[str, np.ndarray]):
        dimensions = {v.shape[0] for v in vectors.values()}
        if len(dimensions) > 1:
            raise ProviderError(f"Embeddings have mixed dimensions {sorted(dimensions)}")
        self.vectors = vectors
        self.dimension = dimensions.pop() if dimensions else 0

    @classmethod
    def from_file(cls, path: str) -> "PrecomputedEmbeddingProvider":
        """Reads {"id", "vector"} records"""
        vectors = {}
        for number, data in read_jsonl(path):
            vector = data.get("vector")
            if "id" not in data or not isinstance(vector, list) or not vector:
                raise SchemaError("Invalid embedding record: expected id and a non-empty vector", "vector", number)
            try:
                vectors[str(data["id"])] = np.asarray(vector, dtype=np.float64)
            except (TypeError, ValueError) as error:
                raise SchemaError("Invalid embedding vector", "vector", number) from error
        logger.info("Loaded %d precomputed embeddings from %s", len(vectors), path)
        return cls(vectors)

    def embed(self, sample: Sample) -> np.ndarray:
        try:
            return self.vectors[sample.id]
        except KeyError as error:
            raise ProviderError("no precomputed embedding", sample.id) from error


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroVector("Cosine similarity is undefined for a zero vector")
    return vectors / norms


def cosine_similarity(u, v) -> float:
    """u.v / (|u| |v|)"""
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionMismatch(f"Dimensions differ: {u.shape} vs {v.shape}")
    return float(_unit_rows(u) @ _unit_rows(v))


def _best_match(unit_vector: np.ndarray, unit_matrix: np.ndarray) -> Tuple[float, int]:
    scores = unit_matrix @ unit_vector
    best = int(np.argmax(scores))
    return float(scores[best]), best


def embedding_contaminated(train_vec, test_vecs, threshold: float = config.SIMILARITY_THRESHOLD,
                           test_ids: Optional[Sequence[str]] = None):
    """(similarity >= threshold, best similarity, best test id or index)

    Ties go to the earliest test vector.
    """
    train_vec = np.asarray(train_vec, dtype=np.float64)
    test_vecs = np.atleast_2d(np.asarray(test_vecs, dtype=np.float64))
    if test_vecs.shape[1] != train_vec.shape[0]:
        raise DimensionMismatch(f"Dimensions differ: {train_vec.shape[0]} vs {test_vecs.shape[1]}")
    score, best = _best_match(_unit_rows(train_vec), _unit_rows(test_vecs))
    best_id = test_ids[best] if test_ids is not None else best
    return score >= threshold, score, best_id


######################################################################
# P I P E L I N E
######################################################################

@dataclass(frozen=True)
class Removal:
    """One removed training record and its earliest cause"""
    id: str
    stage: Stage
    matched_test_id: str
    similarity: Optional[float] = None

    def serialize(self) -> dict:
        """Report line"""
        return {
            "id": self.id,
            "stage": self.stage.value,
            "matched_test_id": self.matched_test_id,
            "similarity": self.similarity,
        }


@dataclass(frozen=True)
class ContaminationReport:
    """Every removal, in training-corpus order"""
    removals: Tuple[Removal, ...] = ()

    def __len__(self):
        return len(self.removals)

    def counts(self) -> Dict[str, int]:
        """Removals per stage, every stage present"""
        counts = {stage.key: 0 for stage in Stage}
        for removal in self.removals:
            counts[removal.stage.key] += 1
        return counts

    def to_records(self) -> List[dict]:
        """Report JSONL records"""
        return [r.serialize() for r in self.removals]

    def write(self, path: str) -> int:
        """Writes the report JSONL"""
        return write_jsonl(self.to_records(), path)


def _embed(provider: EmbeddingProvider, sample: Sample) -> np.ndarray:
    try:
        vector = np.asarray(provider.embed(sample), dtype=np.float64)
    except ProviderError:
        raise
    except Exception as error:  # pylint: disable=broad-except
        raise ProviderError(str(error), sample.id) from error
    if vector.shape != (provider.dimension,):
        raise ProviderError(f"expected dimension {provider.dimension}, got {vector.shape}", sample.id)
    if not np.any(vector):
        raise ProviderError("zero embedding", sample.id)
    return vector


def decontaminate(
    train: Sequence[Sample],
    test: Sequence[Sample],
    provider: Optional[EmbeddingProvider] = None,
    decontam_config: DecontamConfig = DecontamConfig(),
    workers: Optional[int] = None,
) -> Tuple[List[Sample], ContaminationReport]:
    """Filters the training corpus against the test corpus

    Retained records keep their input order. Without a provider only
    stage 1 runs.
    """
    index = build_ngram_index(test, decontam_config.ngram_size)
    numeric_keys: Dict[str, str] = {}
    for sample in test:
        numeric_keys.setdefault(numeric_strip_key(sample.question), sample.id)

    causes: Dict[int, Removal] = {}
    survivors: List[int] = []
    for position, sample in enumerate(train):
        matched = index.match(sample.question)
        if matched is not None:
            causes[position] = Removal(sample.id, Stage.NGRAM, matched)
            continue
        matched = numeric_keys.get(numeric_strip_key(sample.question))
        if matched is not None:
            causes[position] = Removal(sample.id, Stage.NUMERIC, matched)
            continue
        survivors.append(position)
    logger.info("Stage 1 removed %d of %d training records", len(causes), len(train))

    if provider is not None and survivors:
        test_matrix = _unit_rows(np.vstack([_embed(provider, s) for s in test]))

        def check(position: int) -> Tuple[float, int]:
            return _best_match(_unit_rows(_embed(provider, train[position])), test_matrix)

        if workers and workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                matches = list(pool.map(check, survivors))
        else:
            matches = [check(p) for p in survivors]
        before = len(causes)
        for position, (score, best) in zip(survivors, matches):
            if score >= decontam_config.threshold:
                causes[position] = Removal(train[position].id, Stage.EMBEDDING, test[best].id, score)
        logger.info("Stage 2 (%s) removed %d records", provider.provider_id, len(causes) - before)

    retained = [s for position, s in enumerate(train) if position not in causes]
    report = ContaminationReport(tuple(causes[p] for p in sorted(causes)))
    logger.info("Retained %d training records, removed %d", len(retained), len(report))
    return retained, report
