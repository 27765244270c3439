"""CNN glaucoma detection on circumpapillary OCT B-scans."""

__version__ = "0.1.0"
