"""Exporters bridging pretrained (or classical) vision backbones and dense
matchers to the engine's SCCF/SCCM file formats."""

__version__ = "0.1.0"
