"""Image style recognition: native features, AdaGrad linear classifiers,
late fusion, class-balanced evaluation and style-filtered search."""

__version__ = "0.1.0"
