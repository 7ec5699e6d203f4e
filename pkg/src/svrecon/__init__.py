"""Single-view implicit surface reconstruction: numpy autodiff, selective-scan encoder, SDF volume rendering."""

__version__ = "0.1.0"
