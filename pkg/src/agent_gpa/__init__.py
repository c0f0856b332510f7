"""Goal-Plan-Action judges for evaluating and localizing errors in LLM agent traces."""

from .judges import JudgeSpec, JudgeVerdict, build_prompt, builtin_judges, parse_verdict
from .metrics import classification_metrics, krippendorff_alpha_interval
from .preprocess import process_trace, render_transcript, split_dataset
from .trace_model import AnnotatedError, Span, Trace, load_trace, parse_trace

__version__ = "0.1.0"

__all__ = [
    "AnnotatedError",
    "JudgeSpec",
    "JudgeVerdict",
    "Span",
    "Trace",
    "build_prompt",
    "builtin_judges",
    "classification_metrics",
    "krippendorff_alpha_interval",
    "load_trace",
    "parse_trace",
    "parse_verdict",
    "process_trace",
    "render_transcript",
    "split_dataset",
]
