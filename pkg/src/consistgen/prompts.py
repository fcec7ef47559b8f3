"""Prompt-set files and the toy hashing tokenizer."""

from __future__ import annotations

import string
from dataclasses import asdict, dataclass
from pathlib import Path

import yaml

from .denoiser import PromptSpec
from .io import fnv1a64

SUPERCLASSES = ("humans", "animals", "fantasy", "inanimate")
DESCRIPTION_LEVELS = ("generic", "detailed")
FIELDS = ("superclass", "subject_token", "subject_description", "description_level",
          "style", "settings", "seed")


class PromptSetError(ValueError):
    pass


def normalize_word(word: str) -> str:
    return word.strip(string.punctuation).lower()


def token_id(word: str, vocab_size: int) -> int:
    return fnv1a64(normalize_word(word).encode("utf-8")) % vocab_size


def tokenize(text: str, vocab_size: int) -> list[int]:
    return [token_id(w, vocab_size) for w in text.split()]


def locate_token(text: str, token: str) -> int:
    """Index of the first word containing ``token`` (case-insensitive)."""
    needle = normalize_word(token)
    if not needle:
        raise PromptSetError("empty subject token")
    for i, word in enumerate(text.split()):
        if needle in normalize_word(word):
            return i
    raise PromptSetError(f"subject token {token!r} not found in prompt {text!r}")


def make_prompt_spec(text: str, subject_tokens, vocab_size: int) -> PromptSpec:
    if isinstance(subject_tokens, str):
        subject_tokens = [subject_tokens]
    positions = tuple((locate_token(text, tok),) for tok in subject_tokens)
    return PromptSpec(tuple(tokenize(text, vocab_size)), positions, text)


@dataclass
class PromptSet:
    superclass: str
    subject_token: str | list[str]
    subject_description: str
    description_level: str
    style: str
    settings: list[str]
    seed: int = 0

    @property
    def subject_tokens(self) -> list[str]:
        if isinstance(self.subject_token, str):
            return [self.subject_token]
        return list(self.subject_token)

    def compose(self, setting: str | None) -> str:
        parts = [self.style, self.subject_description] + ([setting] if setting else [])
        return " ".join(p.strip() for p in parts if p.strip())

    def prompts(self) -> list[str]:
        return [self.compose(s) for s in self.settings]

    def specs(self, vocab_size: int) -> list[PromptSpec]:
        return [make_prompt_spec(p, self.subject_tokens, vocab_size) for p in self.prompts()]

    def anchor_spec(self, vocab_size: int) -> PromptSpec:
        """Prompt for a real subject image: style and description, no setting."""
        return make_prompt_spec(self.compose(None), self.subject_tokens, vocab_size)

    def to_dict(self) -> dict:
        return asdict(self)


def _validate(entry, index: int) -> PromptSet:
    if not isinstance(entry, dict):
        raise PromptSetError(f"set {index}: expected a mapping, got {type(entry).__name__}")
    missing = [f for f in FIELDS if f not in entry and f != "seed"]
    if missing:
        raise PromptSetError(f"set {index}: missing field(s) {', '.join(missing)}")
    unknown = sorted(set(entry) - set(FIELDS))
    if unknown:
        raise PromptSetError(f"set {index}: unknown field(s) {', '.join(unknown)}")
    if entry["superclass"] not in SUPERCLASSES:
        raise PromptSetError(f"set {index}: unknown superclass {entry['superclass']!r}")
    if entry["description_level"] not in DESCRIPTION_LEVELS:
        raise PromptSetError(f"set {index}: unknown description level {entry['description_level']!r}")
    settings = entry["settings"]
    if not isinstance(settings, list) or not settings or not all(isinstance(s, str) for s in settings):
        raise PromptSetError(f"set {index}: settings must be a non-empty list of strings")
    token = entry["subject_token"]
    if not (isinstance(token, str) or (isinstance(token, list) and token
                                       and all(isinstance(t, str) for t in token))):
        raise PromptSetError(f"set {index}: subject_token must be a string or list of strings")
    ps = PromptSet(
        superclass=entry["superclass"],
        subject_token=token,
        subject_description=str(entry["subject_description"]),
        description_level=entry["description_level"],
        style=str(entry["style"]),
        settings=list(settings),
        seed=int(entry.get("seed", 0)),
    )
    for text in ps.prompts():
        for tok in ps.subject_tokens:
            try:
                locate_token(text, tok)
            except PromptSetError as exc:
                raise PromptSetError(f"set {index}: {exc}") from None
    return ps


def load_prompt_sets(data) -> list[PromptSet]:
    if isinstance(data, dict):
        data = data.get("sets")
    if not isinstance(data, list) or not data:
        raise PromptSetError("prompt file must contain a non-empty 'sets' list")
    return [_validate(entry, i) for i, entry in enumerate(data)]


def parse_prompt_sets(path) -> list[PromptSet]:
    with open(path) as fh:
        return load_prompt_sets(yaml.safe_load(fh))


def dump_prompt_sets(sets: list[PromptSet]) -> str:
    return yaml.safe_dump({"sets": [s.to_dict() for s in sets]}, sort_keys=False)


def write_prompt_sets(path, sets: list[PromptSet]) -> None:
    Path(path).write_text(dump_prompt_sets(sets))
