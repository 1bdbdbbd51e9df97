"""Instruction tokenization, vocabulary mining, and grid encoding.

Tokens come from splitting instruction text on a delimiter set; delimiters are
discarded, so operand punctuation never becomes a token. No register/immediate
normalization is applied: the vocabulary keeps every raw token whose corpus
frequency reaches the threshold, and everything else encodes as UNK.
"""

from __future__ import annotations

import hashlib
import re
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError

DEFAULT_DELIMITERS = " \t+-*:,;[]()"
DEFAULT_MIN_FREQ = 32
DEFAULT_TOKENS_PER_INSTRUCTION = 5
DEFAULT_MAX_POSITIONS = 512

PAD_TOKEN = "<PAD>"
UNK_TOKEN = "<UNK>"
PAD_ID = 0
UNK_ID = 1

_HEADER_RE = re.compile(
    r"^# asmsim vocab v1 pad=(?P<pad>\S+) unk=(?P<unk>\S+) min_freq=(?P<minfreq>\d+)$"
)


def split_instruction(text: str, delimiters: str = DEFAULT_DELIMITERS) -> list[str]:
    """Split on any delimiter character, dropping delimiters and empty fragments."""
    if not delimiters:
        raise ValueError("delimiter set must be non-empty")
    pattern = "[" + re.escape(delimiters) + "]+"
    return [tok for tok in re.split(pattern, text) if tok]


@dataclass
class Vocabulary:
    """Token table with reserved PAD (id 0, frozen) and UNK (id 1, trainable)."""

    id_to_token: list[str]
    frequencies: list[int]
    min_freq: int
    delimiters: str = DEFAULT_DELIMITERS

    def __post_init__(self):
        if self.id_to_token[PAD_ID] != PAD_TOKEN or self.id_to_token[UNK_ID] != UNK_TOKEN:
            raise DataError("vocabulary must reserve id 0 for PAD and id 1 for UNK")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("vocabulary contains duplicate tokens")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def freq(self, token: str) -> int:
        i = self.token_to_id.get(token)
        return 0 if i is None else self.frequencies[i]

    def _body_bytes(self) -> bytes:
        for tok in self.id_to_token:
            if "\t" in tok or "\n" in tok:
                raise DataError(f"token {tok!r} cannot be serialized (contains tab/newline)")
        lines = [f"{tok}\t{freq}\n" for tok, freq in zip(self.id_to_token, self.frequencies)]
        return "".join(lines).encode("utf-8")

    def file_bytes(self) -> bytes:
        body = self._body_bytes()
        digest = hashlib.sha256(body).hexdigest()
        header = (
            f"# asmsim vocab v1 pad={PAD_TOKEN} unk={UNK_TOKEN} min_freq={self.min_freq}\n"
            f"# sha256={digest}\n"
        )
        return header.encode("utf-8") + body

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.file_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes, where: str = "vocabulary") -> "Vocabulary":
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataError(f"{where}: vocabulary is not valid UTF-8: {exc}") from None
        lines = text.split("\n")
        if len(lines) < 4:
            raise DataError(f"{where}: truncated vocabulary file")
        m = _HEADER_RE.match(lines[0])
        if m is None:
            raise DataError(f"{where}: unrecognized vocabulary header")
        if not lines[1].startswith("# sha256="):
            raise DataError(f"{where}: missing checksum header")
        recorded = lines[1][len("# sha256="):]
        body = "\n".join(lines[2:]).encode("utf-8")
        actual = hashlib.sha256(body).hexdigest()
        if recorded != actual:
            raise DataError(f"{where}: vocabulary checksum mismatch (file corrupted?)")
        id_to_token = []
        frequencies = []
        for lineno, line in enumerate(lines[2:], start=3):
            if line == "" and lineno == len(lines):
                continue  # trailing newline
            tok, sep, freq = line.partition("\t")
            if not sep or not tok:
                raise DataError(f"{where}:{lineno}: expected 'token<TAB>frequency'")
            try:
                frequencies.append(int(freq))
            except ValueError:
                raise DataError(f"{where}:{lineno}: bad frequency {freq!r}") from None
            id_to_token.append(tok)
        if m.group("pad") != PAD_TOKEN or m.group("unk") != UNK_TOKEN:
            raise DataError(f"{where}: unsupported reserved-token names in header")
        return cls(id_to_token, frequencies, min_freq=int(m.group("minfreq")))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "rb") as fh:
            raw = fh.read()
        return cls.from_bytes(raw, where=str(path))


def build_vocab(records, min_freq: int = DEFAULT_MIN_FREQ,
                delimiters: str = DEFAULT_DELIMITERS) -> Vocabulary:
    """Count tokens over all instructions of `records`; keep those with freq >= min_freq.

    Ids are dense: PAD, UNK, then descending frequency with lexicographic
    tie-break, so rebuilding from the same corpus reproduces the same file.
    """
    if min_freq < 1:
        raise ValueError(f"frequency threshold must be >= 1, got {min_freq}")
    counts: dict[str, int] = {}
    for rec in records:
        for ins in rec.instructions:
            for tok in split_instruction(ins, delimiters):
                counts[tok] = counts.get(tok, 0) + 1
    for reserved in (PAD_TOKEN, UNK_TOKEN):
        if reserved in counts:
            warnings.warn(f"corpus contains literal {reserved} token; dropped from vocabulary")
            del counts[reserved]
    kept = sorted(
        ((tok, c) for tok, c in counts.items() if c >= min_freq),
        key=lambda kv: (-kv[1], kv[0]),
    )
    if not kept:
        warnings.warn("vocabulary is empty apart from reserved tokens")
    id_to_token = [PAD_TOKEN, UNK_TOKEN] + [tok for tok, _ in kept]
    frequencies = [0, 0] + [c for _, c in kept]
    return Vocabulary(id_to_token, frequencies, min_freq=min_freq, delimiters=delimiters)


@dataclass
class EncodedFunction:
    """Fixed-width token-id grid: token_ids [S, K] int32, position_ids [S] int32."""

    token_ids: np.ndarray
    position_ids: np.ndarray

    def __post_init__(self):
        if self.token_ids.ndim != 2 or self.position_ids.ndim != 1:
            raise ValueError("token_ids must be [S, K] and position_ids [S]")
        if self.token_ids.shape[0] != self.position_ids.shape[0]:
            raise ValueError("token_ids and position_ids disagree on instruction count")

    @property
    def n_instructions(self) -> int:
        return self.token_ids.shape[0]


def encode_function(vocab: Vocabulary, instructions,
                    k_tokens: int = DEFAULT_TOKENS_PER_INSTRUCTION,
                    max_positions: int = DEFAULT_MAX_POSITIONS) -> EncodedFunction:
    """Encode one function: first k tokens of each instruction, PAD-filled.

    `instructions` is a FunctionRecord or any iterable of instruction strings.
    Positions clamp to max_positions - 1.
    """
    if k_tokens < 1 or max_positions < 1:
        raise ValueError("k_tokens and max_positions must be >= 1")
    ins_list = getattr(instructions, "instructions", instructions)
    s = len(ins_list)
    if s == 0:
        raise DataError("cannot encode a function with zero instructions")
    token_ids = np.full((s, k_tokens), PAD_ID, dtype=np.int32)
    for i, ins in enumerate(ins_list):
        toks = split_instruction(ins, vocab.delimiters)[:k_tokens]
        for j, tok in enumerate(toks):
            token_ids[i, j] = vocab.id_of(tok)
    position_ids = np.minimum(np.arange(s, dtype=np.int32), max_positions - 1)
    return EncodedFunction(token_ids=token_ids, position_ids=position_ids)
