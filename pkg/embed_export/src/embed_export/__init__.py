"""Offline text-to-embedding exporter.

Encodes JSON-lines text records with a pretrained transformer
checkpoint and writes three interchange files: human-readable record
lines, a binary EMB1 sentence-embedding matrix, and an optional LBL1
companion of integer class ids.  Downstream consumers read the files;
nothing here imports them.
"""

from embed_export.export import ExportJob, export

__all__ = ["ExportJob", "export"]
