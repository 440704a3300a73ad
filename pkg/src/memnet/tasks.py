"""Task generators, loaders and encodings.

Covers the Hénon map, the monthly airline-passenger series, bit-string
copy/reverse, bAbI stories, and the four-point key-value demo mapping.
Every task is turned into :class:`TaskInstance` sequences that any model
with the trainer interface can consume.
"""

from __future__ import annotations

import csv
import random
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import gaussian_similarity

__all__ = [
    "AirlineSeries",
    "BabiLine",
    "BabiParseError",
    "BabiStory",
    "FormatError",
    "HenonDivergence",
    "TaskInstance",
    "babi_encode",
    "babi_parse",
    "babi_serialize",
    "build_vocab",
    "export_instance_csv",
    "gen_copy",
    "gen_reverse",
    "generate_babi_qa1",
    "henon_generate",
    "henon_task",
    "kv_demo_eval",
    "load_airline",
    "one_hot",
    "tokenize",
]


@dataclass
class TaskInstance:
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    write_mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        self.mask = np.asarray(self.mask, dtype=float)
        n = len(self.inputs)
        if len(self.targets) != n or len(self.mask) != n:
            raise ValueError("inputs, targets and mask must have equal lengths")
        if self.write_mask is not None:
            self.write_mask = np.asarray(self.write_mask, dtype=bool)
            if len(self.write_mask) != n:
                raise ValueError("write_mask length differs from inputs")

    def __len__(self):
        return len(self.inputs)


def export_instance_csv(inst: TaskInstance, path) -> None:
    """One row per step: inputs, targets, loss mask, write flag."""
    n_x, n_o = inst.inputs.shape[1], inst.targets.shape[1]
    wm = inst.write_mask if inst.write_mask is not None else np.ones(len(inst), dtype=bool)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"x{i}" for i in range(n_x)] + [f"d{i}" for i in range(n_o)]
                   + ["mask", "write"])
        for t in range(len(inst)):
            w.writerow([t, *map(repr, inst.inputs[t].tolist()), *map(repr, inst.targets[t].tolist()),
                        int(inst.mask[t]), int(wm[t])])


# -- Hénon map -----------------------------------------------------------------

class HenonDivergence(ValueError):
    pass


def henon_generate(n: int, x0: float = 0.1, y0: float = 0.1) -> np.ndarray:
    """``n`` successive points of the Hénon map; row 0 is ``(x0, y0)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = np.empty((n, 2))
    x, y = float(x0), float(y0)
    for t in range(n):
        if abs(x) > 1e6:
            raise HenonDivergence(f"orbit from ({x0}, {y0}) diverged at step {t}")
        out[t] = x, y
        x, y = 1.0 - 1.4 * x * x + y, 0.3 * x
    return out


def henon_task(n_sequences: int = 20, seq_len: int = 100, x0: float = 0.1, y0: float = 0.1,
               discard: int = 100, include_y: bool = False) -> list[TaskInstance]:
    """Consecutive chunks of one orbit; each step predicts the next x.

    The first ``discard`` points are dropped so the orbit is on the attractor.
    """
    orbit = henon_generate(discard + n_sequences * seq_len + 1, x0, y0)[discard:]
    feats = orbit if include_y else orbit[:, :1]
    out = []
    for s in range(n_sequences):
        a = s * seq_len
        out.append(TaskInstance(feats[a:a + seq_len], orbit[a + 1:a + seq_len + 1, :1],
                                np.ones(seq_len), meta={"task": "henon", "length": seq_len, "index": s}))
    return out


# -- airline passengers ----------------------------------------------------------

class FormatError(ValueError):
    pass


@dataclass
class AirlineSeries:
    values: np.ndarray
    train: slice = slice(0, 96)
    val: slice = slice(72, 96)
    test: slice = slice(96, 144)


def load_airline(path=None) -> AirlineSeries:
    """Read ``month,passengers`` rows (thousands); default is the bundled file."""
    if path is None:
        text = resources.files("memnet").joinpath("data/airline_passengers.csv").read_text()
    else:
        text = Path(path).read_text()
    rows = list(csv.reader(text.splitlines()))
    if rows and not _is_number(rows[0][-1]):
        rows = rows[1:]
    rows = [r for r in rows if r]
    if len(rows) != 144:
        raise FormatError(f"expected 144 monthly rows, found {len(rows)}")
    try:
        values = np.array([float(r[1]) for r in rows])
    except (IndexError, ValueError) as exc:
        raise FormatError(f"bad airline row: {exc}") from exc
    return AirlineSeries(values)


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def airline_instance(values, start: int = 0, stop: int | None = None) -> TaskInstance:
    """One-step-ahead prediction over ``values[start:stop]``."""
    y = np.asarray(values, dtype=float)[start:stop]
    return TaskInstance(y[:-1, None], y[1:, None], np.ones(len(y) - 1), meta={"task": "airline"})


# -- copy / reverse ----------------------------------------------------------------

def _bit_task(length: int, n_bits: int, seed, reverse: bool) -> TaskInstance:
    if length < 1 or n_bits < 1:
        raise ValueError("length and n_bits must be >= 1")
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=(length, n_bits)).astype(float)
    T = 2 * length + 1
    x = np.zeros((T, n_bits + 2))
    d = np.zeros((T, n_bits))
    mask = np.zeros(T)
    x[:length, :n_bits] = bits
    x[length, n_bits] = 1.0  # delimiter: start of the output phase
    x[length + 1:, n_bits + 1] = 1.0  # padding flag on the blank output-phase inputs
    d[length + 1:] = bits[::-1] if reverse else bits
    mask[length + 1:] = 1.0
    name = "reverse" if reverse else "copy"
    return TaskInstance(x, d, mask, meta={"task": name, "length": length, "seed": seed, "bits": bits})


def gen_copy(length: int, n_bits: int = 8, seed=None) -> TaskInstance:
    """Bits, a delimiter step, then ``length`` blank steps that must echo the bits."""
    return _bit_task(length, n_bits, seed, reverse=False)


def gen_reverse(length: int, n_bits: int = 8, seed=None) -> TaskInstance:
    """Like :func:`gen_copy` but the output phase emits the bits last-to-first."""
    return _bit_task(length, n_bits, seed, reverse=True)


# -- bAbI ------------------------------------------------------------------------------

class BabiParseError(ValueError):
    pass


_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase words with every punctuation mark as its own token."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class BabiLine:
    index: int
    tokens: list[str]
    answer: str | None = None
    supports: tuple[int, ...] = ()

    @property
    def is_question(self) -> bool:
        return self.answer is not None


@dataclass
class BabiStory:
    lines: list[BabiLine]

    @property
    def questions(self) -> list[BabiLine]:
        return [ln for ln in self.lines if ln.is_question]

    def token_roles(self) -> list[tuple[str, str]]:
        """(token, role) pairs in reading order; role is ``statement``,
        ``question`` or ``answer-slot`` (the last token of a question)."""
        out = []
        for ln in self.lines:
            if ln.is_question:
                out += [(tok, "question") for tok in ln.tokens[:-1]]
                out.append((ln.tokens[-1], "answer-slot"))
            else:
                out += [(tok, "statement") for tok in ln.tokens]
        return out


def babi_parse(source) -> list[BabiStory]:
    """Parse the standard bAbI text layout.

    ``source`` is a path, a multi-line string, or an iterable of lines.  A
    line index of 1 starts a new story.  Question lines carry
    ``<tab>answer<tab>supporting ids``.
    """
    if isinstance(source, str) and "\n" in source:
        lines = source.splitlines()
        name = "<string>"
    elif isinstance(source, (str, Path)):
        lines = Path(source).read_text().splitlines()
        name = str(source)
    else:
        lines = list(source)
        name = "<lines>"
    stories: list[BabiStory] = []
    current: list[BabiLine] | None = None
    for lineno, raw in enumerate(lines, 1):
        raw = raw.rstrip("\n")
        if not raw.strip():
            continue
        head, _, rest = raw.partition(" ")
        if not head.isdigit() or not rest:
            raise BabiParseError(f"{name}:{lineno}: expected '<index> <text>'")
        idx = int(head)
        if idx == 1 or current is None:
            if idx != 1:
                raise BabiParseError(f"{name}:{lineno}: story must start at index 1")
            current = []
            stories.append(BabiStory(current))
        if "\t" in rest:
            parts = rest.split("\t")
            if len(parts) < 2 or not parts[1].strip():
                raise BabiParseError(f"{name}:{lineno}: question without an answer")
            try:
                supports = tuple(int(s) for s in parts[2].split()) if len(parts) > 2 else ()
            except ValueError:
                raise BabiParseError(f"{name}:{lineno}: bad supporting-fact ids") from None
            tokens = tokenize(parts[0])
            if not tokens:
                raise BabiParseError(f"{name}:{lineno}: empty question")
            current.append(BabiLine(idx, tokens, parts[1].strip().lower(), supports))
        else:
            current.append(BabiLine(idx, tokenize(rest)))
    return stories


def babi_serialize(stories: Iterable[BabiStory]) -> list[str]:
    """Write stories back in bAbI layout using the parsed tokens."""
    out = []
    for story in stories:
        for ln in story.lines:
            text = f"{ln.index} " + " ".join(ln.tokens)
            if ln.is_question:
                text += f"\t{ln.answer}\t" + " ".join(map(str, ln.supports))
            out.append(text)
    return out


def build_vocab(*story_sets: Iterable[BabiStory]) -> dict[str, int]:
    """Sorted token -> index map over every token and answer in all sets.

    Passing several task files merges their vocabularies (joint mode).
    """
    words = set()
    for stories in story_sets:
        for story in stories:
            for ln in story.lines:
                words.update(ln.tokens)
                if ln.answer is not None:
                    words.add(ln.answer)
    return {w: i for i, w in enumerate(sorted(words))}


def one_hot(index: int, size: int) -> np.ndarray:
    if not 0 <= index < size:
        raise IndexError(f"index {index} out of range for size {size}")
    v = np.zeros(size)
    v[index] = 1.0
    return v


def babi_encode(story: BabiStory, vocab: dict[str, int]) -> TaskInstance:
    """One sequence per story.

    Every token is a one-hot input.  Memory writes are off during question
    tokens; the loss is taken only at each question's last token, whose
    target is the one-hot answer.
    """
    roles = story.token_roles()
    n = len(vocab)
    try:
        xs = np.array([one_hot(vocab[tok], n) for tok, _ in roles])
    except KeyError as exc:
        raise KeyError(f"token {exc.args[0]!r} missing from vocabulary") from None
    ds = np.zeros((len(roles), n))
    mask = np.zeros(len(roles))
    write = np.array([role == "statement" for _, role in roles])
    answers = iter(q.answer for q in story.questions)
    answer_ids = []
    for t, (_, role) in enumerate(roles):
        if role == "answer-slot":
            a = next(answers)
            if a not in vocab:
                raise KeyError(f"answer {a!r} missing from vocabulary")
            ds[t] = one_hot(vocab[a], n)
            mask[t] = 1.0
            answer_ids.append(vocab[a])
    return TaskInstance(xs, ds, mask, write, meta={"task": "babi", "answers": answer_ids})


_QA1_PEOPLE = ("mary", "john", "sandra", "daniel")
_QA1_PLACES = ("bathroom", "bedroom", "garden", "hallway", "kitchen", "office")
_QA1_VERBS = ("moved to", "went to", "journeyed to", "travelled to", "went back to")


def generate_babi_qa1(n_stories: int, seed: int = 0) -> list[str]:
    """Synthesize single-supporting-fact stories in bAbI text layout.

    Mirrors the structure of the public task 1 files: 15 lines per story,
    two movement statements then one ``Where is X?`` question about a person
    who has moved, answered by that person's latest location.
    """
    rng = random.Random(seed)
    lines = []
    for _ in range(n_stories):
        where: dict[str, tuple[str, int]] = {}
        idx = 0
        for _q in range(5):
            movers = []
            for _s in range(2):
                idx += 1
                who = rng.choice(_QA1_PEOPLE)
                place = rng.choice(_QA1_PLACES)
                where[who] = (place, idx)
                movers.append(who)
                name = who.capitalize()
                lines.append(f"{idx} {name} {rng.choice(_QA1_VERBS)} the {place}.")
            idx += 1
            who = rng.choice(movers)
            place, support = where[who]
            lines.append(f"{idx} Where is {who.capitalize()}? \t{place}\t{support}")
    return lines


# -- key-value demo --------------------------------------------------------------

def kv_demo_eval(x: float, sigma: float) -> float:
    """G(x,1) - G(x,2) + G(x,3) - G(x,4): the four-pair lookup table {1:1, 2:-1, 3:1, 4:-1}."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return sum(sign * gaussian_similarity([x], [k], sigma)
               for k, sign in ((1, 1), (2, -1), (3, 1), (4, -1)))
