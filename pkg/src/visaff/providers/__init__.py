"""Feature acquisition: remote embedding client, synthetic generator and binary cache."""

from .cache import (CacheError, ChecksumError, DimMismatchError, FeatureCache, KeyConflictError, cache_get,
                    cache_put, open_caches)
from .records import MODALITIES, FeatureKey, FeatureRecord
from .remote import EmbeddingClient, EndpointConfig, RemoteError, extract_dataset, extract_remote
from .synthetic import (CorpusShape, SyntheticSpec, class_centers, generate_dataset, populate_caches,
                        synthesize_features)

__all__ = [
    "CacheError", "ChecksumError", "DimMismatchError", "FeatureCache", "KeyConflictError", "cache_get",
    "cache_put", "open_caches", "MODALITIES", "FeatureKey", "FeatureRecord", "EmbeddingClient",
    "EndpointConfig", "RemoteError", "extract_dataset", "extract_remote", "CorpusShape", "SyntheticSpec",
    "class_centers", "generate_dataset", "populate_caches", "synthesize_features",
]
