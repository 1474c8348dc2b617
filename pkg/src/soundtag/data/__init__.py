"""Dataset plumbing: audio I/O, manifests, taxonomy, feature cache, folds, synthetic data."""
from .audio import decode_wav, pad_or_trim, read_wav, samples_for_frames, write_wav
from .cache import FeatureCache, cache_get_or_compute
from .crossval import CrossValidationResult, FoldResult, cross_validate, fold_partitions, summarize
from .manifest import DatasetManifest, ManifestEntry, ManifestError, load_manifest
from .taxonomy import Taxonomy, grouped_taxonomy, sonyc_ust_taxonomy

__all__ = [
    "decode_wav", "pad_or_trim", "read_wav", "samples_for_frames", "write_wav",
    "FeatureCache", "cache_get_or_compute",
    "CrossValidationResult", "FoldResult", "cross_validate", "fold_partitions", "summarize",
    "DatasetManifest", "ManifestEntry", "ManifestError", "load_manifest",
    "Taxonomy", "grouped_taxonomy", "sonyc_ust_taxonomy",
]
