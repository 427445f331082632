from lacrange import errors  # noqa: F401

__version__ = "0.1.0"
