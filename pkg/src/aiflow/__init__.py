"""Desk-scale study of device-edge-cloud language-model collaboration.

Subpackages cover weight decomposition for model families, a small exactly
reproducible language model with early exits, hierarchical speculative
decoding, task-oriented feature compression, and a deterministic network
simulator, all tied together by the `aiflow` command line tool.
"""

__version__ = "0.1.0"
