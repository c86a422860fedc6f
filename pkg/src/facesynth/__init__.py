"""Face-part compositing for dataset expansion, with a desk-scale recognition pipeline."""

__version__ = "0.1.0"
