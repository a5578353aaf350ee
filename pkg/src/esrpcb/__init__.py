"""Edge-guided x4 super-resolution for PCB defect inspection, with detection
ensembling (NMS, Soft-NMS, WBF) and image/detection quality metrics."""

__version__ = "0.1.0"
