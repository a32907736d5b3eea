"""Toolkit for part-aware panoptic segmentation.

Data model and codecs (``model``, ``codec``), the class hierarchy
(``taxonomy``), the joint object/part head and its assembly (``jops``),
matching and losses (``matcher``, ``losses``), evaluation (``metrics``), the
separate-prediction merging baseline (``merging``) and synthetic scenes
(``synth``).
"""

from .jops import AssemblyConfig, HeadWeights, QueryBundle, QueryPrediction, assemble_pps, head_forward
from .matcher import Assignment, MatchCostWeights, hungarian, match_queries
from .metrics import EvalReport, evaluate
from .model import (VOID, LabelMap, ObjectSegment, PartSegment, SegmentSet, label_map_from_segments,
                    pack_uid, segments_from_label_map, unpack_uid, validate_pps)
from .taxonomy import Taxonomy, bundled_taxonomy, compatible_parts, load_taxonomy, load_taxonomy_file

__version__ = "0.1.0"

__all__ = [
    "VOID", "AssemblyConfig", "Assignment", "EvalReport", "HeadWeights", "LabelMap", "MatchCostWeights",
    "ObjectSegment", "PartSegment", "QueryBundle", "QueryPrediction", "SegmentSet", "Taxonomy",
    "assemble_pps", "bundled_taxonomy", "compatible_parts", "evaluate", "head_forward", "hungarian",
    "label_map_from_segments", "load_taxonomy", "load_taxonomy_file", "match_queries", "pack_uid",
    "segments_from_label_map", "unpack_uid", "validate_pps",
]
