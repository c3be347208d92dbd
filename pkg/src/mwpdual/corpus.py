"""Problem corpus: records, masking, infill labels, I/O, and synthesis.

A record couples a word problem with its gold expression.  Numbers found
in the text become quantity slots N1, N2, ... in order of appearance; the
gold expression is stored in prefix form over those slots plus constants.
Masked problems replace every slot token with a single uniform [NUM] mask
so that infilling cannot read slot identity off the surface.
"""

from __future__ import annotations

import json
import math
import random
import re
from collections import Counter
from dataclasses import dataclass, field

from . import expr
from .expr import ExprTree, Token

PAD = "[PAD]"
NUM_MASK = "[NUM]"
UNK = "[UNK]"
EOS = "EOS"

DEFAULT_CONSTANTS = (1.0, 3.14)
DEFAULT_N_MAX = 15

_SLOT_WORD_RE = re.compile(r"N([1-9]\d*)")
_INT_RE = re.compile(r"\d+")
_DEC_RE = re.compile(r"\d+\.\d+|\.\d+")
_PCT_RE = re.compile(r"(\d+(?:\.\d+)?)%")
_FRAC_RE = re.compile(r"(\d+)/(\d+)")


class CorpusError(ValueError):
    pass


class TooManySlots(CorpusError):
    pass


class DuplicateSlotUse(CorpusError):
    pass


class MalformedLine(CorpusError):
    def __init__(self, lineno, why):
        super().__init__(f"line {lineno}: {why}")
        self.lineno = lineno


class InvalidConfig(CorpusError):
    pass


class InvalidSplit(CorpusError):
    pass


class RecordRejected(CorpusError):
    """A record failed validation; ``reason`` keys the rejection report."""

    def __init__(self, reason, detail=""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


def _values_match(a: float, b: float) -> bool:
    return math.isclose(a, b, rel_tol=1e-9, abs_tol=1e-12)


def parse_number_word(word: str) -> float | None:
    """Numeric value of a single text token, or None if it is not a number.

    Recognizes integers, decimals, percentages ('30%' -> 0.3) and
    space-free fractions ('3/4' -> 0.75).
    """
    m = _PCT_RE.fullmatch(word)
    if m:
        return float(m.group(1)) / 100.0
    m = _FRAC_RE.fullmatch(word)
    if m:
        den = int(m.group(2))
        if den == 0:
            return None
        return int(m.group(1)) / den
    if _DEC_RE.fullmatch(word) or _INT_RE.fullmatch(word):
        return float(word)
    return None


def extract_numbers(
    raw_text: str, n_max: int = DEFAULT_N_MAX
) -> tuple[list[str], list[tuple[int, float]], list[str]]:
    """Tokenize text and replace numbers left-to-right with slot tokens.

    Returns (tokens, numbers, norm_tokens) where numbers is an ordered
    list of (token position, value) and norm_tokens has the i-th number
    replaced by 'N<i>'.
    """
    tokens = raw_text.split()
    numbers: list[tuple[int, float]] = []
    norm_tokens = list(tokens)
    for pos, word in enumerate(tokens):
        value = parse_number_word(word)
        if value is None:
            continue
        numbers.append((pos, value))
        norm_tokens[pos] = f"N{len(numbers)}"
    if len(numbers) > n_max:
        raise TooManySlots(f"{len(numbers)} numbers exceed N_max={n_max}")
    return tokens, numbers, norm_tokens


@dataclass(frozen=True)
class MwpRecord:
    id: str
    raw_text: str
    tokens: tuple[str, ...]
    numbers: tuple[tuple[int, float], ...]  # (token position, value), position-ordered
    norm_tokens: tuple[str, ...]
    gold_prefix: tuple[Token, ...]
    answer: float

    @property
    def n_slots(self) -> int:
        return len(self.numbers)

    def bindings(self) -> dict[int, float]:
        return {k + 1: v for k, (_, v) in enumerate(self.numbers)}

    def gold_tree(self) -> ExprTree:
        return expr.parse_prefix(list(self.gold_prefix))


@dataclass(frozen=True)
class MaskedProblem:
    masked_tokens: tuple[str, ...]
    slot_positions: tuple[int, ...]
    slot_count: int


def mask_numbers(record: MwpRecord) -> MaskedProblem:
    """Replace every slot token with the uniform [NUM] mask."""
    masked = list(record.norm_tokens)
    positions = []
    for pos, _ in record.numbers:
        masked[pos] = NUM_MASK
        positions.append(pos)
    return MaskedProblem(tuple(masked), tuple(positions), len(positions))


def make_infill_labels(record: MwpRecord) -> list[int | None]:
    """Per-slot pointer labels into the gold tree's leaves.

    Label i is the index (within leaves_in_order) of the unique leaf
    referencing slot i+1, or None when the slot's number is unused by the
    expression.  A slot referenced by two leaves is ambiguous and raises.
    """
    tree = record.gold_tree()
    slot_to_leaf: dict[int, int] = {}
    for ordinal, (_, tok) in enumerate(expr.leaves_in_order(tree)):
        if tok.kind != "slot":
            continue
        if tok.index in slot_to_leaf:
            raise DuplicateSlotUse(f"slot N{tok.index} used twice in gold expression")
        slot_to_leaf[tok.index] = ordinal
    return [slot_to_leaf.get(i + 1) for i in range(record.n_slots)]


def make_record(
    rec_id: str,
    text: str,
    expression: str,
    answer: float,
    constants=DEFAULT_CONSTANTS,
    n_max: int = DEFAULT_N_MAX,
) -> MwpRecord:
    """Build and validate a record from raw annotation fields.

    Expression literals are bound to problem numbers by value, first
    unmatched occurrence first; leftovers must be in the constant list or
    the record is rejected.  All MwpRecord invariants are enforced here.
    """
    try:
        tokens, numbers, norm_tokens = extract_numbers(text, n_max)
    except TooManySlots as e:
        raise RecordRejected("too_many_slots", str(e)) from e
    try:
        infix = expr.tokenize_infix(expression)
    except expr.ExprError as e:
        raise RecordRejected("bad_expression", str(e)) from e

    claimed: set[int] = set()
    bound: list[Token] = []
    for tok in infix:
        if tok.kind == "slot":
            if tok.index > len(numbers):
                raise RecordRejected(
                    "bad_slot_index", f"N{tok.index} but only {len(numbers)} numbers"
                )
            claimed.add(tok.index)
            bound.append(tok)
        elif tok.kind == "const":
            hit = None
            for k in range(len(numbers)):
                if k + 1 in claimed:
                    continue
                if _values_match(numbers[k][1], tok.value):
                    hit = k + 1
                    break
            if hit is not None:
                claimed.add(hit)
                bound.append(expr.slot_token(hit))
            elif any(_values_match(c, tok.value) for c in constants):
                bound.append(tok)
            else:
                raise RecordRejected("unmatched_literal", tok.text)
        else:
            bound.append(tok)

    try:
        tree = expr.parse_infix(bound)
    except expr.ExprError as e:
        raise RecordRejected("bad_expression", str(e)) from e
    prefix = expr.tree_to_prefix(tree)

    slot_uses = Counter(t.index for t in prefix if t.kind == "slot")
    dupes = [i for i, c in slot_uses.items() if c > 1]
    if dupes:
        raise RecordRejected("duplicate_slot_use", f"N{dupes[0]}")

    record = MwpRecord(
        id=str(rec_id),
        raw_text=text,
        tokens=tuple(tokens),
        numbers=tuple(numbers),
        norm_tokens=tuple(norm_tokens),
        gold_prefix=tuple(prefix),
        answer=float(answer),
    )
    try:
        value = expr.evaluate(tree, record.bindings())
    except expr.ExprError as e:
        raise RecordRejected("eval_error", str(e)) from e
    if abs(value - record.answer) > 1e-4 * max(1.0, abs(record.answer)):
        raise RecordRejected("answer_mismatch", f"expression gives {value}, annotated {answer}")
    return record


REQUIRED_FIELDS = ("id", "text", "expression", "answer")


def load_jsonl(
    path,
    constants=DEFAULT_CONSTANTS,
    n_max: int = DEFAULT_N_MAX,
) -> tuple[list[MwpRecord], dict[str, int]]:
    """Load a JSONL dataset; returns (records, rejection report).

    Each line must be a JSON object with fields id, text, expression
    (infix over literal numbers and/or N<k> tokens), answer.  Structurally
    broken lines raise MalformedLine; semantically invalid records are
    dropped and counted by reason.
    """
    records: list[MwpRecord] = []
    report: Counter[str] = Counter()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedLine(lineno, f"invalid JSON ({e.msg})") from e
            if not isinstance(row, dict):
                raise MalformedLine(lineno, "not a JSON object")
            missing = [f for f in REQUIRED_FIELDS if f not in row]
            if missing:
                raise MalformedLine(lineno, f"missing fields {missing}")
            try:
                records.append(
                    make_record(
                        row["id"], row["text"], row["expression"], row["answer"],
                        constants=constants, n_max=n_max,
                    )
                )
            except RecordRejected as e:
                report[e.reason] += 1
    return records, dict(report)


def write_jsonl(rows: list[dict], path) -> None:
    """Write annotation rows with a canonical, byte-stable encoding."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True))
            fh.write("\n")


# --------------------------------------------------------------------------
# Synthetic corpus generation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_records: int
    op_count: tuple[int, int] = (1, 3)
    operands: tuple[int, int] = (2, 20)
    distractor_prob: float = 0.0
    template_pool: str = "arith_story_v1"

    @staticmethod
    def from_dict(d: dict) -> "SynthConfig":
        known = {"n_records", "op_count", "operands", "distractor_prob", "template_pool"}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown synthetic config keys: {sorted(unknown)}")
        if "n_records" not in d:
            raise InvalidConfig("synthetic config needs n_records")
        cfg = SynthConfig(
            n_records=int(d["n_records"]),
            op_count=tuple(d.get("op_count", (1, 3))),
            operands=tuple(d.get("operands", (2, 20))),
            distractor_prob=float(d.get("distractor_prob", 0.0)),
            template_pool=str(d.get("template_pool", "arith_story_v1")),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.n_records < 1:
            raise InvalidConfig("n_records must be >= 1")
        lo, hi = self.op_count
        if not (1 <= lo <= hi <= 3):
            raise InvalidConfig("op_count range must lie within [1, 3]")
        a, b = self.operands
        if not (1 <= a <= b):
            raise InvalidConfig("operand range must satisfy 1 <= lo <= hi")
        if not 0.0 <= self.distractor_prob <= 1.0:
            raise InvalidConfig("distractor_prob must be in [0, 1]")
        if self.template_pool not in TEMPLATE_POOLS:
            raise InvalidConfig(f"unknown template pool {self.template_pool!r}")


_NAMES = ("tom", "lily", "sam", "maria", "ben", "aisha", "leo", "nina",
          "omar", "rosa", "ivan", "mei")
_OBJECTS = ("apples", "marbles", "stickers", "coins", "books", "shells",
            "cards", "pens", "beads", "stamps", "buttons", "ribbons")
_PLACES = ("box", "jar", "basket", "drawer")

# the give/take pairs below share all their content words between + and -;
# only the argument order tells the directions apart
_OPEN_T = (
    "{name} has {v} {obj} .",
    "{name} starts with {v} {obj} .",
    "{name} keeps {v} {obj} in a {place} .",
    "{name} owns {v} {obj} .",
)
_PLUS_T = (
    "{name} buys {v} more {obj} .",
    "{name} finds {v} more {obj} .",
    "{name2} gives {name} {v} {obj} .",
    "{name} takes {v} {obj} from {name2} .",
    "then {v} more {obj} arrive .",
)
_MINUS_T = (
    "{name} gives {name2} {v} {obj} .",
    "{name2} takes {v} {obj} from {name} .",
    "{name} loses {v} {obj} .",
    "then {v} {obj} are lost .",
)
_TIMES_T = (
    "every one of the {obj} becomes {v} {obj} .",
    "a machine turns each one into {v} {obj} .",
    "the pile of {obj} grows to {v} times its size .",
)
_DIV_T = (
    "the {obj} are split into {v} equal piles and {name} keeps one .",
    "{name} shares them among {v} kids and keeps one share .",
    "{name} packs them into {v} equal boxes and keeps one box .",
)
_DISTRACT_T = (
    "{name2} has {v} {obj2} .",
    "a shelf holds {v} {obj2} .",
    "{name2} keeps {v} {obj2} .",
)
_QUESTION_T = (
    "how many {obj} does {name} have now ?",
    "how many {obj} are left ?",
    "how many {obj} does that leave {name} ?",
)

TEMPLATE_POOLS = {"arith_story_v1": None}  # single pool for now; id validated above


def _pick_distinct(rng: random.Random, lo: int, hi: int, used: set[int]) -> int | None:
    """Deterministically pick an unused integer in [lo, hi], or None."""
    if lo > hi:
        return None
    for _ in range(64):
        v = rng.randint(lo, hi)
        if v not in used:
            return v
    for v in range(lo, hi + 1):
        if v not in used:
            return v
    return None


def _sample_step(rng, op, acc, cfg, used):
    """Pick a legal operand for `op` given the running value, or None."""
    lo, hi = cfg.operands
    if op == "+":
        return _pick_distinct(rng, lo, hi, used)
    if op == "-":
        top = min(hi, acc - 1)
        return _pick_distinct(rng, lo, top, used) if top >= lo else None
    if op == "*":
        if acc > 400:
            return None
        top = min(hi, 9, 2000 // max(acc, 1))
        bot = max(lo, 2)
        return _pick_distinct(rng, bot, top, used) if top >= bot else None
    if op == "/":
        divisors = [d for d in range(max(lo, 2), min(hi, acc) + 1)
                    if acc % d == 0 and d not in used]
        return rng.choice(divisors) if divisors else None
    raise AssertionError(op)


def generate_synthetic_rows(config: SynthConfig, seed: int) -> list[dict]:
    """Deterministic raw annotation rows (id/text/expression/answer).

    Problems are chained arithmetic stories: an opening quantity followed
    by 1-3 update sentences, each realizing one of + - * /, optionally one
    irrelevant quantity sentence, then a question.  Numbers within one
    problem are pairwise distinct so slot binding is unambiguous.
    """
    config.validate()
    rng = random.Random(seed)
    rows = []
    for i in range(config.n_records):
        name = rng.choice(_NAMES)
        name2 = rng.choice([n for n in _NAMES if n != name])
        obj = rng.choice(_OBJECTS)
        place = rng.choice(_PLACES)
        m = rng.randint(*config.op_count)

        used: set[int] = set()
        v0 = _pick_distinct(rng, max(config.operands[0], 2), config.operands[1], used)
        used.add(v0)
        acc = v0
        sentences = [rng.choice(_OPEN_T).format(name=name, v=v0, obj=obj,
                                                place=place)]
        expression = str(v0)
        for _ in range(m):
            ops = ["+", "-", "*", "/"]
            rng.shuffle(ops)
            step = None
            for op in ops:
                v = _sample_step(rng, op, acc, config, used)
                if v is not None:
                    step = (op, v)
                    break
            op, v = step if step else ("+", _pick_distinct(rng, 1, 10**6, used))
            used.add(v)
            template = {
                "+": _PLUS_T, "-": _MINUS_T, "*": _TIMES_T, "/": _DIV_T,
            }[op]
            sentences.append(rng.choice(template).format(
                name=name, name2=name2, v=v, obj=obj))
            expression = f"( {expression} {op} {v} )"
            acc = {"+": acc + v, "-": acc - v, "*": acc * v, "/": acc // v}[op]

        if rng.random() < config.distractor_prob:
            v_d = _pick_distinct(rng, config.operands[0], config.operands[1], used)
            if v_d is not None:
                used.add(v_d)
                name2 = rng.choice([n for n in _NAMES if n != name])
                obj2 = rng.choice([o for o in _OBJECTS if o != obj])
                sent = rng.choice(_DISTRACT_T).format(name2=name2, v=v_d, obj2=obj2)
                sentences.insert(rng.randint(1, len(sentences)), sent)

        sentences.append(rng.choice(_QUESTION_T).format(name=name, obj=obj))
        rows.append({
            "id": f"syn{i:05d}",
            "text": " ".join(sentences),
            "expression": expression,
            "answer": float(acc),
        })
    return rows


def generate_synthetic(
    config: SynthConfig,
    seed: int,
    constants=DEFAULT_CONSTANTS,
    n_max: int = DEFAULT_N_MAX,
) -> list[MwpRecord]:
    """Deterministic synthetic records; every row must validate."""
    records = []
    for row in generate_synthetic_rows(config, seed):
        records.append(
            make_record(row["id"], row["text"], row["expression"], row["answer"],
                        constants=constants, n_max=n_max)
        )
    return records


# --------------------------------------------------------------------------
# Vocabulary and decoder token table
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Vocab:
    """Word -> id map for problem text, with fixed reserved ids."""

    words: tuple[str, ...]
    word2id: dict[str, int] = field(compare=False, repr=False, default=None)

    PAD_ID = 0
    NUM_ID = 1
    UNK_ID = 2

    def __post_init__(self):
        object.__setattr__(self, "word2id", {w: i for i, w in enumerate(self.words)})

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, tokens) -> list[int]:
        return [self.word2id.get(t, self.UNK_ID) for t in tokens]


RESERVED = (PAD, NUM_MASK, UNK)


def build_vocab(records: list[MwpRecord], min_freq: int = 1) -> Vocab:
    """Frequency-ordered vocabulary over norm_tokens.

    Words under min_freq map to [UNK]; slot tokens N<k> are structural and
    kept whenever they occur at all.  Order is (frequency desc, word asc)
    so equal corpora give identical tables.
    """
    counts: Counter[str] = Counter()
    for rec in records:
        counts.update(rec.norm_tokens)
    kept = [
        w for w, c in counts.items()
        if w not in RESERVED and (c >= min_freq or _SLOT_WORD_RE.fullmatch(w))
    ]
    kept.sort(key=lambda w: (-counts[w], w))
    return Vocab(tuple(RESERVED) + tuple(kept))


@dataclass(frozen=True)
class DecoderTable:
    """Fixed output token table: operators, constants, slots, EOS."""

    tokens: tuple[str, ...]
    constants: tuple[float, ...]
    n_max: int
    token2id: dict[str, int] = field(compare=False, repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "token2id", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def eos_id(self) -> int:
        return len(self.tokens) - 1

    def encode_prefix(self, prefix) -> list[int]:
        ids = []
        for tok in prefix:
            text = tok.text if isinstance(tok, Token) else str(tok)
            if text not in self.token2id:
                raise UnknownToken(f"{text!r} not in decoder table")
            ids.append(self.token2id[text])
        return ids

    def decode(self, ids) -> list[Token]:
        out = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise UnknownToken(f"token id {i} out of range")
            text = self.tokens[i]
            if text == EOS:
                raise UnknownToken("EOS has no expression token form")
            out.append(expr.token_from_text(text))
        return out


class UnknownToken(CorpusError):
    pass


def build_decoder_table(
    constants=DEFAULT_CONSTANTS, n_max: int = DEFAULT_N_MAX
) -> DecoderTable:
    tokens = list(expr.OPERATORS)
    tokens += [expr.format_number(c) for c in constants]
    tokens += [f"N{k}" for k in range(1, n_max + 1)]
    tokens.append(EOS)
    return DecoderTable(tuple(tokens), tuple(float(c) for c in constants), n_max)


# --------------------------------------------------------------------------
# Splitting
# --------------------------------------------------------------------------

def split(records, fractions=None, kfold=None, seed: int = 0):
    """Deterministic partition of records.

    With `fractions` (floats summing to 1, or integer counts summing to
    len(records)) returns one list per entry.  With `kfold=k` returns k
    (train, test) pairs whose test sets are disjoint and cover everything.
    """
    if (fractions is None) == (kfold is None):
        raise InvalidSplit("specify exactly one of fractions or kfold")
    shuffled = list(records)
    random.Random(seed).shuffle(shuffled)
    n = len(shuffled)

    if kfold is not None:
        if not 2 <= kfold <= n:
            raise InvalidSplit(f"kfold must be in [2, {n}]")
        pairs = []
        for i in range(kfold):
            test = shuffled[i::kfold]
            train = [r for j, r in enumerate(shuffled) if j % kfold != i]
            pairs.append((train, test))
        return pairs

    fracs = list(fractions)
    if not fracs or any(f <= 0 for f in fracs):
        raise InvalidSplit("fractions must be positive")
    if all(isinstance(f, int) for f in fracs):
        if sum(fracs) != n:
            raise InvalidSplit(f"counts sum to {sum(fracs)}, need {n}")
        cuts = [sum(fracs[: i + 1]) for i in range(len(fracs))]
    else:
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise InvalidSplit("fractions must sum to 1")
        cuts = [round(sum(fracs[: i + 1]) * n) for i in range(len(fracs))]
        cuts[-1] = n
    parts = []
    start = 0
    for cut in cuts:
        parts.append(shuffled[start:cut])
        start = cut
    return parts
