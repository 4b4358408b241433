"""Co-training a query Simplifier and Rewriter for conversational query rewrite."""
from .core import DataPool, Direction, LabeledExample, PseudoExample, Session, Turn
from .cotrain import CoTrainConfig, Mode, run
from .metrics import MetricReport, evaluate_corpus

__version__ = "0.1.0"

__all__ = [
    "CoTrainConfig", "DataPool", "Direction", "LabeledExample", "MetricReport", "Mode",
    "PseudoExample", "Session", "Turn", "evaluate_corpus", "run",
]
