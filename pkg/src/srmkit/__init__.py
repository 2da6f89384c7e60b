"""Symbolic reward machines with holes, and inference of the holes from demonstrations."""

from .core import (
    Award,
    ConcreteSrm,
    ConstraintViolation,
    CounterDecl,
    HindsightDirective,
    Product,
    ProductState,
    Rule,
    RunResult,
    Srm,
    SrmError,
    StepResult,
    StreamingRefused,
    Trajectory,
    VocabularyError,
    concretize,
    product_reset,
    product_step,
    run,
    step,
)
from .dsl import ParseDiagnostic, SourceSpan, SrmParseError, load, load_asset, parse, parse_or_raise, serialize, validate
from .expr import EvalError, NonAffineError
from .partial import BatchRun, PartialRun, partial_evaluate

__version__ = "0.1.0"
