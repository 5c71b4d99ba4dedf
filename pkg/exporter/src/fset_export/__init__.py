"""Export real-model image features and text embeddings to FSET1 files.

The embedding-debugging pipeline consumes FSET1 containers; this package
produces them from pretrained torchvision extractors and text encoders.
The two codebases share only the file format, never a process.
"""

from .format import ExportError, build_fset_bytes, feature_hash, write_fset
from .images import ImageJob, export_image_features
from .models import FEATURE_DIMS, build_extractor, feature_dim
from .texts import HashedBagOfWords, export_text_embeddings

__version__ = "0.1.0"

__all__ = [
    "ExportError",
    "FEATURE_DIMS",
    "HashedBagOfWords",
    "ImageJob",
    "build_extractor",
    "build_fset_bytes",
    "export_image_features",
    "export_text_embeddings",
    "feature_dim",
    "feature_hash",
    "write_fset",
    "__version__",
]
