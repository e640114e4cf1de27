"""Cross-modal image / point-cloud descriptor learning on a small numpy autodiff engine."""

__version__ = "0.1.0"
