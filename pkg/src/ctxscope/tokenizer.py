"""Byte-level tokenizer and chat-template rendering with per-token role spans.

Every byte is one token. A small block of special ids sits below the byte
range and is reachable from template literals through escapes such as
``<|bos|>`` or ``[IND]``. Rendering a :class:`Conversation` through a
:class:`TemplateSpec` yields an :class:`AnnotatedSequence` whose role and
turn arrays let downstream code pick out user, assistant and template
positions exactly.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import MalformedConversation, ParseError

SPECIAL_NAMES = ("BOS", "EOS", "USER_MARK", "ASSISTANT_MARK", "IND", "PAD", "RESERVED_0", "RESERVED_1")

# Literal escapes accepted inside template strings.
SPECIAL_LITERALS = {
    "<|bos|>": "BOS",
    "<|eos|>": "EOS",
    "<|user|>": "USER_MARK",
    "<|assistant|>": "ASSISTANT_MARK",
    "[IND]": "IND",
    "<|pad|>": "PAD",
    "<|reserved_0|>": "RESERVED_0",
    "<|reserved_1|>": "RESERVED_1",
}
_LITERAL_OF = {name: lit for lit, name in SPECIAL_LITERALS.items()}
_ESCAPE_RE = re.compile("(" + "|".join(re.escape(k) for k in SPECIAL_LITERALS) + ")")


class Role(enum.IntEnum):
    BOS = 0
    TEMPLATE = 1
    USER = 2
    ASSISTANT = 3
    INDICATOR = 4
    RESPONSE_PREFIX = 5


USER_ROLES = frozenset({Role.USER, Role.INDICATOR})
ASSISTANT_SIDE = frozenset({Role.ASSISTANT, Role.RESPONSE_PREFIX})


@dataclass(frozen=True)
class TokenizerSpec:
    special_names: tuple = SPECIAL_NAMES

    @property
    def n_special(self) -> int:
        return len(self.special_names)

    @property
    def byte_offset(self) -> int:
        return self.n_special

    @property
    def vocab_size(self) -> int:
        return self.n_special + 256

    def id_of(self, name: str) -> int:
        return self.special_names.index(name)

    @property
    def bos_id(self) -> int:
        return self.id_of("BOS")

    @property
    def eos_id(self) -> int:
        return self.id_of("EOS")

    @property
    def ind_id(self) -> int:
        return self.id_of("IND")

    @property
    def pad_id(self) -> int:
        return self.id_of("PAD")


DEFAULT_TOKENIZER = TokenizerSpec()


def _as_bytes(text) -> bytes:
    return text.encode("utf-8") if isinstance(text, str) else bytes(text)


def tokenize(text, spec: TokenizerSpec = DEFAULT_TOKENIZER) -> list[int]:
    """Map each byte of ``text`` to ``byte + spec.byte_offset``.

    Special-token escapes are *not* interpreted here; use :func:`encode_literal`
    for template strings.
    """
    off = spec.byte_offset
    return [b + off for b in _as_bytes(text)]


def detokenize(ids: Iterable[int], spec: TokenizerSpec = DEFAULT_TOKENIZER,
               specials: str = "skip") -> bytes:
    """Inverse of :func:`tokenize`.

    ``specials="skip"`` drops special ids; ``"render"`` writes their literal
    escape back so template text round-trips.
    """
    off = spec.byte_offset
    out = bytearray()
    for i in ids:
        i = int(i)
        if i >= off:
            out.append(i - off)
        elif specials == "render":
            out += _LITERAL_OF.get(spec.special_names[i], f"<|{spec.special_names[i].lower()}|>").encode()
    return bytes(out)


def decode_text(ids: Iterable[int], spec: TokenizerSpec = DEFAULT_TOKENIZER) -> str:
    return detokenize(ids, spec).decode("utf-8", errors="replace")


def encode_literal(text: str, spec: TokenizerSpec = DEFAULT_TOKENIZER) -> list[int]:
    """Tokenize a template literal, turning escapes like ``<|bos|>`` into special ids."""
    ids: list[int] = []
    for piece in _ESCAPE_RE.split(text):
        if not piece:
            continue
        if piece in SPECIAL_LITERALS:
            ids.append(spec.id_of(SPECIAL_LITERALS[piece]))
        else:
            ids.extend(tokenize(piece, spec))
    return ids


@dataclass(frozen=True)
class TemplateSpec:
    name: str
    bos_text: str = "<|bos|>"
    user_prefix: str = ""
    user_suffix: str = ""
    assistant_prefix: str = ""
    assistant_suffix: str = ""
    response_prefix: str = ""

    @classmethod
    def null(cls, response_prefix: str = "", bos_text: str = "<|bos|>") -> "TemplateSpec":
        return cls(name="null", bos_text=bos_text, response_prefix=response_prefix)

    @property
    def is_null(self) -> bool:
        return not (self.user_prefix or self.user_suffix or self.assistant_prefix or self.assistant_suffix)

    @classmethod
    def from_dict(cls, d: dict) -> "TemplateSpec":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown template fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def builtin_templates() -> dict[str, TemplateSpec]:
    raw = json.loads(resources.files("ctxscope.data").joinpath("templates.json").read_text())
    return {k: TemplateSpec.from_dict(v) for k, v in raw.items()}


def load_template(name_or_path) -> TemplateSpec:
    """Resolve a bundled template name or a path to a template JSON file."""
    if isinstance(name_or_path, TemplateSpec):
        return name_or_path
    builtins = builtin_templates()
    if name_or_path in builtins:
        return builtins[name_or_path]
    path = Path(name_or_path)
    if path.exists():
        return TemplateSpec.from_dict(json.loads(path.read_text()))
    raise ValueError(f"unknown template {name_or_path!r}; builtins: {sorted(builtins)}")


@dataclass(frozen=True)
class Turn:
    role: str
    text: str
    indicator: bool = False


@dataclass(frozen=True)
class Conversation:
    id: str
    turns: tuple
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple(self.turns))

    @property
    def n_pairs(self) -> int:
        return sum(1 for t in self.turns if t.role == "assistant")

    def user_texts(self) -> list[str]:
        return [t.text for t in self.turns if t.role == "user"]

    def with_turns(self, turns) -> "Conversation":
        return Conversation(self.id, tuple(turns), dict(self.meta))

    def to_json(self) -> dict:
        msgs = []
        for t in self.turns:
            m = {"role": t.role, "content": t.text}
            if t.indicator:
                m["indicator"] = True
            msgs.append(m)
        out = {"id": self.id, "messages": msgs}
        if self.meta:
            out["meta"] = self.meta
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Conversation":
        turns = []
        for m in obj["messages"]:
            role = m["role"]
            if role not in ("user", "assistant"):
                raise ValueError(f"unsupported role {role!r}")
            turns.append(Turn(role, m["content"], bool(m.get("indicator", False))))
        return cls(str(obj["id"]), tuple(turns), dict(obj.get("meta", {})))


def conversation(*texts, id="c0", indicators=()) -> Conversation:
    """Shorthand: alternating user/assistant texts starting with user."""
    turns = []
    for i, t in enumerate(texts):
        role = "user" if i % 2 == 0 else "assistant"
        turns.append(Turn(role, t, role == "user" and (i // 2) in indicators))
    return Conversation(id, tuple(turns))


def read_conversations(path) -> list[Conversation]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(Conversation.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(str(exc), line=lineno) from exc
    return out


def write_conversations(path, convs: Iterable[Conversation]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for c in convs:
            f.write(json.dumps(c.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def _freeze(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AnnotatedSequence:
    tokens: np.ndarray
    roles: np.ndarray
    turn_index: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.int64)
        r = np.asarray(self.roles, dtype=np.int8)
        m = np.asarray(self.turn_index, dtype=np.int64)
        if not (len(t) == len(r) == len(m)):
            raise ValueError("tokens, roles and turn_index differ in length")
        for name, a in (("tokens", t), ("roles", r), ("turn_index", m)):
            object.__setattr__(self, name, _freeze(a.copy()))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other):
        if not isinstance(other, AnnotatedSequence):
            return NotImplemented
        return (np.array_equal(self.tokens, other.tokens) and np.array_equal(self.roles, other.roles)
                and np.array_equal(self.turn_index, other.turn_index))

    def user_mask(self) -> np.ndarray:
        return role_mask(self, USER_ROLES)

    def extend(self, tokens: Sequence[int], role: Role = Role.ASSISTANT, turn: int | None = None) -> "AnnotatedSequence":
        """Append tokens (e.g. generated ones) with a single role."""
        if turn is None:
            turn = int(self.turn_index.max()) if len(self) else -1
        n = len(tokens)
        return AnnotatedSequence(
            np.concatenate([self.tokens, np.asarray(tokens, dtype=np.int64)]),
            np.concatenate([self.roles, np.full(n, int(role), dtype=np.int8)]),
            np.concatenate([self.turn_index, np.full(n, turn, dtype=np.int64)]),
        )

    def truncate(self, n: int) -> "AnnotatedSequence":
        return AnnotatedSequence(self.tokens[:n], self.roles[:n], self.turn_index[:n])

    def spans(self) -> list[tuple[Role, int, int, int]]:
        """Maximal runs of (role, turn) as ``(role, turn, start, stop)``."""
        out = []
        start = 0
        for i in range(1, len(self) + 1):
            if i == len(self) or self.roles[i] != self.roles[start] or self.turn_index[i] != self.turn_index[start]:
                out.append((Role(int(self.roles[start])), int(self.turn_index[start]), start, i))
                start = i
        return out

    def text(self, spec: TokenizerSpec = DEFAULT_TOKENIZER) -> str:
        return detokenize(self.tokens, spec, specials="render").decode("utf-8", errors="replace")


def _validate(conv: Conversation) -> None:
    if not conv.turns:
        raise MalformedConversation(f"{conv.id}: empty conversation")
    for i, t in enumerate(conv.turns):
        expected = "user" if i % 2 == 0 else "assistant"
        if t.role != expected:
            raise MalformedConversation(f"{conv.id}: turn {i} is {t.role!r}, expected {expected!r}")
        if t.indicator and t.role != "user":
            raise MalformedConversation(f"{conv.id}: indicator on an assistant turn")


def render(conv: Conversation, template: TemplateSpec, include_response_prefix: bool = False,
           spec: TokenizerSpec = DEFAULT_TOKENIZER) -> AnnotatedSequence:
    """Render a conversation into tokens with per-token roles and turn numbers.

    Turn numbers are 1-based and shared by a user instruction and the response
    that follows it. Template and BOS tokens get turn -1. When the last turn is
    a user turn the assistant prefix is appended as a generation prompt, then
    the response prefix if requested.
    """
    _validate(conv)
    tokens: list[int] = []
    roles: list[int] = []
    turns: list[int] = []

    def emit(ids, role, turn):
        tokens.extend(ids)
        roles.extend([int(role)] * len(ids))
        turns.extend([turn] * len(ids))

    emit(encode_literal(template.bos_text, spec), Role.BOS, -1)
    m = 0
    for t in conv.turns:
        if t.role == "user":
            m += 1
            emit(encode_literal(template.user_prefix, spec), Role.TEMPLATE, -1)
            emit(tokenize(t.text, spec), Role.USER, m)
            if t.indicator:
                emit([spec.ind_id], Role.INDICATOR, m)
            emit(encode_literal(template.user_suffix, spec), Role.TEMPLATE, -1)
        else:
            emit(encode_literal(template.assistant_prefix, spec), Role.TEMPLATE, -1)
            emit(tokenize(t.text, spec), Role.ASSISTANT, m)
            emit(encode_literal(template.assistant_suffix, spec), Role.TEMPLATE, -1)
    if conv.turns[-1].role == "user":
        emit(encode_literal(template.assistant_prefix, spec), Role.TEMPLATE, -1)
        if include_response_prefix and template.response_prefix:
            emit(encode_literal(template.response_prefix, spec), Role.RESPONSE_PREFIX, m)
    return AnnotatedSequence(np.array(tokens, dtype=np.int64), np.array(roles, dtype=np.int8),
                             np.array(turns, dtype=np.int64))


def role_mask(seq: AnnotatedSequence, roles, up_to_turn: int | None = None) -> np.ndarray:
    """Boolean mask of positions whose role is in ``roles`` (and turn <= ``up_to_turn``)."""
    codes = np.array(sorted(int(r) for r in roles), dtype=np.int8)
    mask = np.isin(seq.roles, codes)
    if up_to_turn is not None:
        if len(seq) and up_to_turn > int(seq.turn_index.max()):
            raise ValueError(f"up_to_turn={up_to_turn} exceeds the last turn {int(seq.turn_index.max())}")
        mask &= seq.turn_index <= up_to_turn
    return mask
