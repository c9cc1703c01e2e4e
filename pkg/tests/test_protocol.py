import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentmod.dataset import HATEFUL_MEMES, MMHS150K
from agentmod.protocol import (
    ChatMessage,
    ParsedOutput,
    ProtocolError,
    Violation,
    append_tool_turn,
    build_enforced_prompt,
    build_selective_prompt,
    conversation_from_json,
    conversation_to_json,
    format_tool_call,
    parse_model_output,
    serialize_output,
    text_message,
    validate_format,
)
from agentmod.tools import Caption, OcrText, ToolBundle, ToolKind

S = HATEFUL_MEMES


def violations(text, mode="final_turn", space=S):
    return list(validate_format(text, space, mode).violations)


def test_valid_final_turn():
    text = "<think>The text is a slur.</think>\n<answer>hateful</answer>"
    assert violations(text) == []
    parsed = parse_model_output(text, S)
    assert parsed == ParsedOutput("The text is a slur.", (), "hateful")


def test_valid_tool_turn():
    text = '<think>Need text.</think>\n<tool_call>{"name": "ocr"}</tool_call>\n<tool_call>{"name": "captioner"}</tool_call>'
    assert violations(text, "tool_turn") == []
    assert parse_model_output(text, S).tool_calls == (ToolKind.OCR, ToolKind.CAPTIONER)


@pytest.mark.parametrize(
    "text, expected",
    [
        ("<answer>hateful</answer>", [Violation.MISSING_THINK]),
        ("<think>x</think>", [Violation.MISSING_ANSWER]),
        ("<think>x</think><answer>spam</answer>", [Violation.ANSWER_OUTSIDE_SPACE]),
        ("<think>x</think><answer>hateful</answer><answer>hateful</answer>", [Violation.MULTIPLE_ANSWERS]),
        ("<think>x</think><think>y</think><answer>hateful</answer>", [Violation.MULTIPLE_THINK]),
        ("<think>x</think><answer>hateful</answer> ok", [Violation.TRAILING_GARBAGE]),
        ("<answer>hateful</answer><think>x</think>", [Violation.OUT_OF_ORDER]),
        ("<think>x</think><answer>hateful", [Violation.UNCLOSED_TAG, Violation.MISSING_ANSWER]),
        (
            '<think>x</think><tool_call>{"name": "ocr"}</tool_call><answer>hateful</answer>',
            [Violation.TOOLCALL_AND_ANSWER],
        ),
    ],
)
def test_final_turn_violations(text, expected):
    assert violations(text) == expected


@pytest.mark.parametrize(
    "text, expected",
    [
        ("<think>x</think>", [Violation.MISSING_TOOL_CALL]),
        ('<think>x</think><tool_call>{"name": "search"}</tool_call>', [Violation.MALFORMED_TOOL_CALL]),
        ("<think>x</think><tool_call>ocr</tool_call>", [Violation.MALFORMED_TOOL_CALL]),
        (
            '<think>x</think><tool_call>{"name": "ocr"}</tool_call><answer>hateful</answer>',
            [Violation.TOOLCALL_AND_ANSWER],
        ),
    ],
)
def test_tool_turn_violations(text, expected):
    assert violations(text, "tool_turn") == expected


def test_parse_first_match_and_case():
    parsed = parse_model_output("<think>a</think><answer>HATEFUL</answer><answer>not_hateful</answer>", S)
    assert parsed.answer == "hateful"


def test_parse_tool_calls_win_over_answer():
    text = '<think>x</think><tool_call>{"name": "ocr"}</tool_call><answer>hateful</answer>'
    parsed = parse_model_output(text, S)
    assert parsed.answer is None and parsed.tool_calls == (ToolKind.OCR,)


def test_parse_reasoning_after_answer_is_ignored():
    assert parse_model_output("<answer>hateful</answer><think>late</think>", S).reasoning is None


def test_parse_out_of_space_answer_is_none():
    assert parse_model_output("<think>x</think><answer>spam</answer>", S).answer is None


def test_unknown_mode():
    with pytest.raises(ValueError):
        validate_format("", S, "other")


def test_chat_message_rules():
    with pytest.raises(ProtocolError):
        ChatMessage("assistant", ({"image_ref": "a.png"},))
    with pytest.raises(ProtocolError):
        ChatMessage("user", ({"image_ref": "a"}, {"image_ref": "b"}))
    with pytest.raises(ProtocolError):
        ChatMessage("robot", ({"text": "x"},))


def test_conversation_json_round_trip(sample):
    convo = build_selective_prompt(sample, S)
    assert conversation_from_json(conversation_to_json(convo)) == convo


def test_enforced_prompt_includes_tool_block(sample):
    bundle = ToolBundle("d", {ToolKind.OCR: OcrText("go home"), ToolKind.CAPTIONER: Caption("a sign")})
    system, user = build_enforced_prompt(sample, bundle, S)
    assert "Allowed labels: hateful, not_hateful" in system.text
    assert user.image_ref == sample.image_ref
    assert "Text: look at this" in user.text
    assert "Tool information:\nOCR: go home\nCaption: a sign" in user.text


def test_enforced_prompt_without_tools(sample):
    system, user = build_enforced_prompt(sample, ToolBundle("d"), S)
    assert "Tool information" not in user.text
    assert "Tool information" not in system.text


def test_selective_prompt_lists_tools(sample):
    system, _ = build_selective_prompt(sample, MMHS150K)
    for name in ("ocr", "captioner", "detector"):
        assert f"- {name}:" in system.text
    assert "not_hate, racist" in system.text


def test_append_tool_turn(sample):
    bundle = ToolBundle("d", {ToolKind.OCR: OcrText("x")})
    convo = append_tool_turn([text_message("assistant", "a")], ["ocr"], bundle)
    assert convo[-1].role == "tool" and convo[-1].text == "OCR: x"
    with pytest.raises(ProtocolError):
        append_tool_turn([], ["captioner"], bundle)


# -- properties ------------------------------------------------------------

safe_text = st.text(
    alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="<>"), max_size=80
)
final_outputs = st.builds(
    ParsedOutput,
    reasoning=safe_text,
    tool_calls=st.just(()),
    answer=st.sampled_from(MMHS150K.classes),
)
tool_outputs = st.builds(
    ParsedOutput,
    reasoning=safe_text,
    tool_calls=st.lists(st.sampled_from(list(ToolKind)), min_size=1, max_size=3).map(tuple),
    answer=st.none(),
)


@settings(max_examples=200, deadline=None)
@given(st.one_of(final_outputs, tool_outputs))
def test_serialize_parse_identity(parsed):
    text = serialize_output(parsed)
    assert parse_model_output(text, MMHS150K) == parsed
    mode = "tool_turn" if parsed.tool_calls else "final_turn"
    assert validate_format(text, MMHS150K, mode).valid


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=200))
def test_parser_total_on_bytes(data):
    text = data.decode("utf-8", errors="replace")
    parse_model_output(text, S)
    validate_format(text, S, "final_turn")
    validate_format(text, S, "tool_turn")


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(["<think>", "</think>", "<answer>", "</answer>", "hateful", "x", " ", format_tool_call("ocr")]), max_size=12))
def test_parser_total_on_tag_soup(pieces):
    text = "".join(pieces)
    report = validate_format(text, S)
    parsed = parse_model_output(text, S)
    if report.valid:
        assert parsed.answer == "hateful" and parsed.reasoning is not None
