"""Multi-detector local feature extraction, matching, and evaluation."""

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor", "model", "losses", "synthwarp", "trainer",
    "extractor", "matcher", "metrics", "cli",
)


def __getattr__(name):
    # submodules are loaded lazily so CLI thread caps can be applied before
    # numpy is imported anywhere in the package
    if name in _SUBMODULES:
        import importlib
        return importlib.import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
