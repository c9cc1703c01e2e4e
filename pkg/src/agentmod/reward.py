"""Answer, format and combined rewards for GRPO training.

The combined reward is the raw weighted sum ``w_answer * answer +
w_format * format`` (default weights 4 and 1, so values lie in
{0, 1, 4, 5}). The answer reward does not depend on format validity unless
``strict_answer`` is set.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Any, Iterable, Iterator, Mapping

from ._http import HttpError, JsonServer
from .dataset import PRESET_SPACES, LabelSpace, ManifestError
from .protocol import parse_model_output, validate_format

logger = logging.getLogger(__name__)

DEFAULT_WEIGHTS = (4.0, 1.0)


@dataclass(frozen=True)
class RewardBreakdown:
    answer: int
    format: int
    combined: float
    weights: tuple[float, float]

    def to_dict(self) -> dict[str, Any]:
        return {"answer": self.answer, "format": self.format, "combined": self.combined, "weights": list(self.weights)}


def format_reward(output: str, space: LabelSpace) -> int:
    return int(validate_format(output, space, "final_turn").valid)


def answer_reward(output: str, gold: str, space: LabelSpace, strict: bool = False) -> int:
    if strict and not format_reward(output, space):
        return 0
    answer = parse_model_output(output, space).answer
    gold_canon = space.canonical(gold)
    return int(answer is not None and answer == gold_canon)


def combined_reward(
    output: str,
    gold: str,
    space: LabelSpace,
    weights: tuple[float, float] = DEFAULT_WEIGHTS,
    strict_answer: bool = False,
) -> RewardBreakdown:
    w_answer, w_format = weights
    if w_answer < 0 or w_format < 0:
        raise ValueError("reward weights must be non-negative")
    a = answer_reward(output, gold, space, strict_answer)
    f = format_reward(output, space)
    return RewardBreakdown(a, f, w_answer * a + w_format * f, (w_answer, w_format))


class RewardScorer:
    """Scores JSON requests ``{output, gold, label_space | label_space_ref}``.

    ``label_space`` is an inline label-space object; ``label_space_ref``
    names one of the registered spaces.
    """

    def __init__(
        self,
        spaces: Mapping[str, LabelSpace] | None = None,
        weights: tuple[float, float] = DEFAULT_WEIGHTS,
        strict_answer: bool = False,
    ):
        self.spaces = dict(PRESET_SPACES)
        self.spaces.update(spaces or {})
        self.weights = weights
        self.strict_answer = strict_answer

    def _space(self, req: Mapping[str, Any]) -> LabelSpace:
        inline = req.get("label_space")
        if isinstance(inline, Mapping):
            return LabelSpace.from_dict(inline)
        ref = req.get("label_space_ref", inline)
        if not isinstance(ref, str) or ref not in self.spaces:
            raise ValueError(f"unknown label space {ref!r}")
        return self.spaces[ref]

    def score(self, req: Any) -> RewardBreakdown:
        if not isinstance(req, Mapping):
            raise ValueError("request must be a JSON object")
        output, gold = req.get("output"), req.get("gold")
        if not isinstance(output, str) or not isinstance(gold, str):
            raise ValueError("request needs string fields 'output' and 'gold'")
        space = self._space(req)
        if space.canonical(gold) is None:
            raise ValueError(f"gold label {gold!r} outside label space {space.name!r}")
        return combined_reward(output, gold, space, self.weights, self.strict_answer)

    def score_record(self, req: Any) -> dict[str, Any]:
        try:
            return self.score(req).to_dict()
        except (ValueError, ManifestError) as exc:
            return {"error": str(exc)}


def score_stream(lines: Iterable[str], scorer: RewardScorer | None = None) -> Iterator[str]:
    """One JSON response line per input line, in order; bad lines yield error records."""
    scorer = scorer or RewardScorer()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            req = json.loads(line)
        except ValueError as exc:
            out = {"error": f"invalid JSON: {exc}"}
        else:
            out = scorer.score_record(req)
        if "error" in out:
            out["line"] = lineno
        yield json.dumps(out, sort_keys=True)


def make_reward_server(address: tuple[str, int], scorer: RewardScorer | None = None, max_in_flight: int = 32) -> JsonServer:
    """HTTP service: ``POST /score {"items": [...]}`` returns one breakdown per item."""
    scorer = scorer or RewardScorer()

    def score(payload: Any) -> tuple[int, Any]:
        if not isinstance(payload, dict) or not isinstance(payload.get("items"), list):
            raise HttpError(400, "body must be {\"items\": [...]}")
        return 200, [scorer.score_record(item) for item in payload["items"]]

    return JsonServer(address, {"/score": score}, max_in_flight)
