"""UAV geo-localization engine operating on file-ingested feature maps and dense matches.

The pipeline runs coarse tile retrieval over a satellite map, semantic
viewport alignment of each candidate crop, cascaded correspondence
filtering, physically constrained pose refinement, and consensus-driven
position selection.  A synthetic scenario generator makes every stage
verifiable without external model inference.
"""

__version__ = "0.1.0"

STAGE_VERSIONS = {
    "geo": 1,
    "retrieval": 1,
    "sgva": 1,
    "csatsf": 1,
    "cdraps": 1,
    "pipeline": 1,
}
