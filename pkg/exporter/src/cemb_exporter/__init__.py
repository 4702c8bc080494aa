"""cemb-exporter: encode prompt dumps with a pre-trained sentence encoder
and write CEMB v1 embedding stores."""

__version__ = "0.1.0"

from .export import ExportError, ExportJob, export  # noqa: F401
