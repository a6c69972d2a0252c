"""Native feature extractors and external feature ingestion."""

from .extract import EXTRACTORS, extract_channel, extract_image
from .fvec import FeatureChannel, load_external_channel, write_fvec
from .gist import color_gist
from .histogram import lab_hist_feature, lab_histogram
from .saliency import gbvs_saliency

__all__ = [
    "EXTRACTORS",
    "FeatureChannel",
    "color_gist",
    "extract_channel",
    "extract_image",
    "gbvs_saliency",
    "lab_hist_feature",
    "lab_histogram",
    "load_external_channel",
    "write_fvec",
]
