"""Desk-scale object detection for urine-sediment microscopy.

Two detector families (two-stage region-proposal and single-shot multibox,
plus multi-depth fusion, hard-example-mined, and trimmed variants), a seeded
synthetic scene generator standing in for clinical data, and a VOC-style
evaluation kit with recall analyses and detection overlays.
"""

__version__ = "0.1.0"

CLASS_NAMES = ("eryth", "leuko", "epith", "cryst", "cast", "mycete", "epithn")
NOISE_CLASS = "noise"
NUM_CLASSES = len(CLASS_NAMES)

# class id 0 is background everywhere; targets are 1-based
CLASS_IDS = {name: i + 1 for i, name in enumerate(CLASS_NAMES)}
NOISE_CLASS_ID = NUM_CLASSES + 1
CLASS_IDS[NOISE_CLASS] = NOISE_CLASS_ID
ID_TO_NAME = {i: n for n, i in CLASS_IDS.items()}
