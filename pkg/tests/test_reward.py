import json

import httpx
import pytest

from agentmod.dataset import HATEFUL_MEMES
from agentmod.reward import RewardScorer, answer_reward, combined_reward, format_reward, make_reward_server, score_stream

S = HATEFUL_MEMES
GOOD = "<think>r</think>\n<answer>hateful</answer>"


@pytest.mark.parametrize(
    "text, a, f, total",
    [
        (GOOD, 1, 1, 5.0),
        ("<think>r</think>\n<answer>not_hateful</answer>", 0, 1, 1.0),
        ("<answer>hateful</answer> trailing", 1, 0, 4.0),
        ("no tags at all", 0, 0, 0.0),
    ],
)
def test_combined_reward_cases(text, a, f, total):
    r = combined_reward(text, "hateful", S)
    assert (r.answer, r.format, r.combined) == (a, f, total)


def test_strict_answer_zeroes_unformatted():
    assert answer_reward("<answer>hateful</answer>", "hateful", S, strict=True) == 0
    assert answer_reward("<answer>hateful</answer>", "hateful", S) == 1


def test_weights_and_validation():
    assert combined_reward(GOOD, "hateful", S, weights=(2.0, 0.5)).combined == 2.5
    with pytest.raises(ValueError):
        combined_reward(GOOD, "hateful", S, weights=(-1.0, 1.0))


def test_format_reward_rejects_tool_turn():
    assert format_reward('<think>x</think><tool_call>{"name": "ocr"}</tool_call>', S) == 0


def test_scorer_inline_and_named_spaces():
    scorer = RewardScorer()
    named = scorer.score({"output": GOOD, "gold": "hateful", "label_space_ref": "hateful_memes"})
    inline = scorer.score({"output": GOOD, "gold": "hateful", "label_space": S.to_dict()})
    assert named == inline
    assert "error" in scorer.score_record({"output": GOOD, "gold": "spam", "label_space_ref": "hateful_memes"})
    assert "error" in scorer.score_record({"output": GOOD, "gold": "hateful", "label_space_ref": "nope"})


def test_score_stream_keeps_order_and_reports_bad_lines():
    lines = [
        json.dumps({"output": GOOD, "gold": "hateful", "label_space_ref": "hateful_memes"}),
        "",
        "{bad",
        json.dumps({"output": "x", "gold": "hateful", "label_space_ref": "hateful_memes"}),
    ]
    out = [json.loads(x) for x in score_stream(lines)]
    assert len(out) == 3
    assert out[0]["combined"] == 5.0
    assert out[1]["line"] == 3 and "error" in out[1]
    assert out[2]["combined"] == 0.0


def test_reward_server():
    server = make_reward_server(("127.0.0.1", 0))
    server.start_background()
    try:
        with httpx.Client(base_url=server.url) as client:
            assert client.get("/healthz").json() == {"status": "ok"}
            resp = client.post("/score", json={"items": [{"output": GOOD, "gold": "hateful", "label_space_ref": "hateful_memes"}]})
            assert resp.status_code == 200
            assert resp.json()[0]["combined"] == 5.0
            assert client.post("/score", json={"x": 1}).status_code == 400
            assert client.post("/score", content=b"{nope").status_code == 400
            assert client.post("/missing", json={}).status_code == 404
    finally:
        server.shutdown()
        server.server_close()
