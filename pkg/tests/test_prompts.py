import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from consistgen.prompts import (
    PromptSet,
    PromptSetError,
    locate_token,
    parse_prompt_sets,
    tokenize,
    write_prompt_sets,
)

ENTRY = {
    "superclass": "fantasy",
    "subject_token": "dragon",
    "subject_description": "A red dragon",
    "description_level": "generic",
    "style": "Origami style",
    "settings": ["blowing bubbles", "in a castle"],
    "seed": 11,
}


def write(tmp_path, data):
    path = tmp_path / "sets.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


def test_compose_and_locate(tmp_path):
    (ps,) = parse_prompt_sets(write(tmp_path, {"sets": [ENTRY]}))
    assert ps.prompts()[0] == "Origami style A red dragon blowing bubbles"
    spec = ps.specs(4096)[0]
    assert spec.subject_token_positions == ((4,),)
    assert spec.token_ids == tuple(tokenize("Origami style A red dragon blowing bubbles", 4096))
    assert ps.seed == 11


def test_missing_field_names_set_index(tmp_path):
    bad = dict(ENTRY)
    del bad["style"]
    with pytest.raises(PromptSetError, match=r"set 1: missing field\(s\) style"):
        parse_prompt_sets(write(tmp_path, {"sets": [ENTRY, bad]}))


@pytest.mark.parametrize("field,value", [
    ("superclass", "robots"),
    ("description_level", "vague"),
    ("settings", []),
    ("subject_token", "unicorn"),
])
def test_invalid_entries(tmp_path, field, value):
    bad = dict(ENTRY, **{field: value})
    with pytest.raises(PromptSetError, match="set 0"):
        parse_prompt_sets(write(tmp_path, [bad]))


def test_unknown_field_rejected(tmp_path):
    with pytest.raises(PromptSetError, match="unknown field"):
        parse_prompt_sets(write(tmp_path, [dict(ENTRY, colour="red")]))


def test_empty_file_rejected(tmp_path):
    with pytest.raises(PromptSetError):
        parse_prompt_sets(write(tmp_path, {"sets": []}))


def test_round_trip(tmp_path):
    sets = parse_prompt_sets(write(tmp_path, {"sets": [ENTRY]}))
    out = tmp_path / "again.yaml"
    write_prompt_sets(out, sets)
    assert parse_prompt_sets(out) == sets


def test_multi_subject_tokens():
    ps = PromptSet("animals", ["cat", "dog"], "A cat and a dog", "generic", "Watercolor", ["in a park"])
    spec = ps.specs(512)[0]
    assert spec.n_subjects == 2
    assert spec.subject_token_positions == ((2,), (5,))


def test_locate_is_case_and_punctuation_insensitive():
    assert locate_token("A Dragon, flying", "dragon") == 1
    with pytest.raises(PromptSetError):
        locate_token("a cat", "dog")


@given(st.lists(st.text(alphabet="abcdefgh", min_size=1, max_size=6), min_size=1, max_size=10),
       st.integers(2, 5000))
def test_tokenizer_range_and_determinism(words, vocab):
    text = " ".join(words)
    ids = tokenize(text, vocab)
    assert ids == tokenize(text, vocab)
    assert len(ids) == len(words) and all(0 <= i < vocab for i in ids)
