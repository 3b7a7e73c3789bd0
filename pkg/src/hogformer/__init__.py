"""HOG-guided all-in-one image restoration on a small numpy autodiff core."""

__version__ = "0.1.0"
