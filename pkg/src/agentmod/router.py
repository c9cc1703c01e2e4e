"""Selective tool-use policy.

Simple samples get no tools. Every other sample gets the captioner, plus
OCR when the image carries text and the detector when more than five
objects survive the confidence threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Mapping, Sequence

from .tools import Detections, OcrText, ToolBundle, ToolKind

if TYPE_CHECKING:
    from .dataset import Sample
    from .datagen import TeacherTrace

DETECTOR_MIN_OBJECTS = 5
DEFAULT_SIMPLE_THRESHOLD = 0.8


@dataclass(frozen=True)
class RoutingSignals:
    ocr_text_length: int
    object_count: int
    is_simple: bool

    def __post_init__(self):
        if self.ocr_text_length < 0 or self.object_count < 0:
            raise ValueError("routing signal counts must be non-negative")


@dataclass(frozen=True)
class RoutingDecision:
    call_ocr: bool
    call_captioner: bool
    call_detector: bool
    simple: bool = False

    def __post_init__(self):
        if self.simple and (self.call_ocr or self.call_captioner or self.call_detector):
            raise ValueError("simple samples call no tools")
        if not self.simple and not self.call_captioner:
            raise ValueError("non-simple samples always call the captioner")

    @property
    def kinds(self) -> tuple[ToolKind, ...]:
        flags = (
            (ToolKind.OCR, self.call_ocr),
            (ToolKind.CAPTIONER, self.call_captioner),
            (ToolKind.DETECTOR, self.call_detector),
        )
        return tuple(k for k, on in flags if on)

    def to_dict(self) -> dict[str, bool]:
        return {
            "ocr": self.call_ocr,
            "captioner": self.call_captioner,
            "detector": self.call_detector,
            "simple": self.simple,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RoutingDecision:
        return cls(bool(data["ocr"]), bool(data["captioner"]), bool(data["detector"]), bool(data["simple"]))


def decide(signals: RoutingSignals) -> RoutingDecision:
    if signals.is_simple:
        return RoutingDecision(False, False, False, simple=True)
    return RoutingDecision(
        call_ocr=signals.ocr_text_length > 0,
        call_captioner=True,
        call_detector=signals.object_count > DETECTOR_MIN_OBJECTS,
    )


def signals_from_bundle(bundle: ToolBundle, is_simple: bool) -> RoutingSignals:
    """Read routing signals off a bundle that holds OCR and detector outputs."""
    ocr = bundle.outputs.get(ToolKind.OCR)
    det = bundle.outputs.get(ToolKind.DETECTOR)
    if not isinstance(ocr, OcrText) or not isinstance(det, Detections):
        raise ValueError("routing needs OCR and detector outputs in the bundle")
    # OcrText is already whitespace-normalized; detections already thresholded
    return RoutingSignals(len(ocr.text), len(det.items), is_simple)


def decide_simple(
    sample: Sample,
    zero_tool_traces: Sequence[TeacherTrace],
    threshold: float = DEFAULT_SIMPLE_THRESHOLD,
) -> bool:
    """A sample is simple when enough tool-free teacher traces already get it right."""
    if not zero_tool_traces:
        raise ValueError(f"sample {sample.id!r}: no zero-tool traces to judge difficulty")
    correct = sum(1 for t in zero_tool_traces if t.correct)
    return correct / len(zero_tool_traces) >= threshold
