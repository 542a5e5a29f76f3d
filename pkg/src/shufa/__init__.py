"""Few-shot calligraphy style metric learning toolkit.

Builds a synthetic glyph corpus, trains a triplet embedding network with
style-matrix losses, nine-palace spatial attention and a frozen script-category
prior, and evaluates it with N-way K-shot episodes.
"""

__version__ = "0.1.0"

from shufa.corpus import (
    CATEGORIES,
    DatasetManifest,
    GlyphRecord,
    ManifestError,
    SplitResult,
    Triplet,
    TripletSamplingError,
    load_manifest,
    sample_triplets,
    split_dataset,
    write_manifest,
)
from shufa.style import gram_matrix, style_matrix

__all__ = [
    "CATEGORIES",
    "DatasetManifest",
    "GlyphRecord",
    "ManifestError",
    "SplitResult",
    "Triplet",
    "TripletSamplingError",
    "load_manifest",
    "sample_triplets",
    "split_dataset",
    "write_manifest",
    "gram_matrix",
    "style_matrix",
]
