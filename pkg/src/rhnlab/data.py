"""Corpora, piano rolls and truncated-BPTT batching.

Piano-roll CSV format: first line ``D=<pitches>`` (e.g. ``D=88``), then one
line per frame holding ``D`` comma-separated 0/1 cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ContractError, RngStream

UNK = "<unk>"


@dataclass
class Batch:
    """One training window. Symbol data: ``inputs``/``targets`` of shape (T, B);
    vector data: (T, B, D). ``weights`` (T, B) masks padded positions."""

    inputs: np.ndarray
    targets: np.ndarray
    weights: np.ndarray | None = None

    @property
    def length(self):
        return self.inputs.shape[0]

    @property
    def batch_size(self):
        return self.inputs.shape[1]


# ---------------------------------------------------------------------------
# Symbol corpora
# ---------------------------------------------------------------------------


@dataclass
class Vocab:
    symbols: list

    def __post_init__(self):
        self.index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self):
        return len(self.symbols)

    def encode(self, tokens) -> np.ndarray:
        unk = self.index.get(UNK)
        out = np.empty(len(tokens), dtype=np.int64)
        for i, tok in enumerate(tokens):
            j = self.index.get(tok, unk)
            if j is None:
                raise ContractError(f"symbol {tok!r} not in vocabulary")
            out[i] = j
        return out

    def decode(self, indices) -> list:
        return [self.symbols[i] for i in indices]


@dataclass
class SymbolCorpus:
    symbols: np.ndarray
    vocab: Vocab
    level: str = "character"

    def __len__(self):
        return len(self.symbols)

    def text(self) -> bytes | str:
        toks = self.vocab.decode(self.symbols)
        if self.level == "character":
            return bytes(toks)
        return " ".join(toks)


def _tokenize(raw: bytes, level: str) -> list:
    if level == "character":
        return list(raw)
    if level == "word":
        try:
            return raw.decode("utf-8").split()
        except UnicodeDecodeError as err:
            raise ContractError(f"word-level corpus is not valid UTF-8: {err}") from err
    raise ContractError(f"unknown corpus level {level!r}")


def split_sizes(total: int, fractions) -> tuple[int, int, int]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ContractError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    n_train = int(round(total * fractions[0]))
    n_val = int(round(total * fractions[1]))
    n_train = min(n_train, total)
    n_val = min(n_val, total - n_train)
    return n_train, n_val, total - n_train - n_val


def corpus_from_tokens(tokens: list, level: str, split=(0.9, 0.05, 0.05)):
    """Contiguous train/val/test splits; vocabulary from the training split in
    first-appearance order. Word level reserves a final ``<unk>`` index."""
    if not tokens:
        raise ContractError("empty corpus")
    a, b, _ = split_sizes(len(tokens), split)
    parts = tokens[:a], tokens[a:a + b], tokens[a + b:]
    symbols = list(dict.fromkeys(parts[0]))
    if level == "word":
        symbols.append(UNK)
    vocab = Vocab(symbols)
    out = []
    for part in parts:
        if level == "character":
            unseen = set(part) - set(vocab.index)
            if unseen:
                raise ContractError(f"characters {sorted(unseen)} absent from the training split")
        out.append(SymbolCorpus(vocab.encode(part), vocab, level))
    return tuple(out)


def load_symbol_corpus(path, level: str = "character", split=(0.9, 0.05, 0.05)):
    """Read a raw text file; bytes are characters, whitespace separates words."""
    raw = Path(path).read_bytes()
    if not raw:
        raise ContractError(f"{path} is empty")
    return corpus_from_tokens(_tokenize(raw, level), level, split)


# ---------------------------------------------------------------------------
# Truncated BPTT batching
# ---------------------------------------------------------------------------


@dataclass
class BatchStream:
    """``B`` contiguous streams cut from a corpus, read in windows of ``bptt``.

    ``state`` holds the carried hidden state between windows; the trainer
    owns it. Each window's targets are the inputs shifted by one position.
    """

    streams: np.ndarray  # (B, stream_len)
    bptt: int
    cursor: int = 0
    state: np.ndarray | None = None

    @property
    def batch_size(self):
        return self.streams.shape[0]

    @property
    def n_windows(self) -> int:
        return (self.streams.shape[1] - 1) // self.bptt

    def reset(self):
        self.cursor = 0
        self.state = None

    def __iter__(self):
        return self

    def __next__(self) -> Batch:
        if self.cursor + self.bptt + 1 > self.streams.shape[1]:
            raise StopIteration
        c = self.cursor
        window = self.streams[:, c:c + self.bptt + 1].T
        self.cursor += self.bptt
        return Batch(inputs=np.ascontiguousarray(window[:-1]),
                     targets=np.ascontiguousarray(window[1:]))

    def windows(self):
        self.cursor = 0
        return iter(self)


def make_batches(corpus, batch_size: int, bptt: int) -> BatchStream:
    symbols = np.asarray(corpus.symbols if hasattr(corpus, "symbols") else corpus)
    if batch_size < 1 or bptt < 1:
        raise ContractError("batch size and window length must be >= 1")
    if len(symbols) < batch_size * (bptt + 1):
        raise ContractError(f"corpus of {len(symbols)} symbols is too small for "
                            f"{batch_size} streams of windows {bptt}")
    per = len(symbols) // batch_size
    streams = symbols[:per * batch_size].reshape(batch_size, per)
    return BatchStream(streams=streams, bptt=bptt)


# ---------------------------------------------------------------------------
# Piano rolls
# ---------------------------------------------------------------------------


@dataclass
class PianoRoll:
    frames: np.ndarray  # (T, D) of 0/1

    @property
    def n_pitches(self):
        return self.frames.shape[1]

    def pairs(self):
        """Next-step prediction pairs ``(frame_t, frame_{t+1})``."""
        return self.frames[:-1], self.frames[1:]


def save_piano_roll(path, roll: PianoRoll):
    lines = [f"D={roll.n_pitches}"]
    lines += [",".join(str(int(v)) for v in row) for row in roll.frames]
    Path(path).write_text("\n".join(lines) + "\n")


def load_piano_roll(path) -> PianoRoll:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("D="):
        raise ContractError(f"{path}: missing 'D=<pitches>' header")
    D = int(lines[0][2:])
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != D:
            raise ContractError(f"{path}:{i}: expected {D} cells, got {len(cells)}")
        if any(c.strip() not in ("0", "1") for c in cells):
            raise ContractError(f"{path}:{i}: piano-roll cells must be 0 or 1")
        rows.append([float(c) for c in cells])
    frames = np.array(rows, dtype=np.float64).reshape(len(rows), D)
    return PianoRoll(frames)


def roll_batches(rolls, batch_size: int, rng: RngStream | None = None):
    """Pad whole sequences into next-step batches of shape (T, B, D).

    Order is shuffled with ``rng`` when given; padded positions get weight 0.
    """
    order = np.arange(len(rolls))
    if rng is not None and len(rolls) > 1:
        order = order[np.argsort(rng.random(len(rolls)), kind="stable")]
    out = []
    for start in range(0, len(order), batch_size):
        chunk = [rolls[i] for i in order[start:start + batch_size]]
        T = max(len(r.frames) - 1 for r in chunk)
        if T < 1:
            continue
        D = chunk[0].n_pitches
        inputs = np.zeros((T, len(chunk), D))
        targets = np.zeros((T, len(chunk), D))
        weights = np.zeros((T, len(chunk)))
        for b, roll in enumerate(chunk):
            x, y = roll.pairs()
            inputs[:len(x), b] = x
            targets[:len(y), b] = y
            weights[:len(x), b] = 1.0
        out.append(Batch(inputs, targets, None if weights.all() else weights))
    return out


# ---------------------------------------------------------------------------
# Synthetic surrogates for desk-scale experiments
# ---------------------------------------------------------------------------


@dataclass
class ChoraleSpec:
    n_pitches: int = 24
    n_voices: int = 4
    length: int = 32


def synthetic_chorales(n_sequences: int, rng: RngStream, spec: ChoraleSpec = ChoraleSpec()):
    """Four-voice chord progressions on a small pitch range.

    A chord root walks a first-order Markov chain over scale degrees; each voice
    moves to the nearest chord tone in its own register, and chords are held
    for 1-3 frames. Predicting the next frame needs both the held-chord
    timing and the harmonic transition, so memory and nonlinear transitions
    both help.
    """
    D, V = spec.n_pitches, spec.n_voices
    degrees = np.array([0, 2, 4, 5, 7, 9, 11])
    # harmonic transition preferences between the seven scale degrees
    trans = np.array([
        [0.05, 0.10, 0.10, 0.30, 0.30, 0.10, 0.05],
        [0.10, 0.05, 0.05, 0.10, 0.60, 0.05, 0.05],
        [0.10, 0.05, 0.05, 0.30, 0.10, 0.35, 0.05],
        [0.25, 0.20, 0.05, 0.05, 0.40, 0.00, 0.05],
        [0.60, 0.05, 0.05, 0.05, 0.05, 0.15, 0.05],
        [0.10, 0.35, 0.05, 0.30, 0.10, 0.05, 0.05],
        [0.70, 0.05, 0.10, 0.05, 0.05, 0.05, 0.00],
    ])
    cum = np.cumsum(trans, axis=1)
    registers = np.linspace(0, D - 1, V + 2)[1:-1]
    rolls = []
    for _ in range(n_sequences):
        frames = np.zeros((spec.length, D))
        u = rng.random(3 * spec.length + 2)
        k = 0
        deg = 0
        hold = 0
        voices = registers.copy()
        for t in range(spec.length):
            if hold == 0:
                deg = int(np.searchsorted(cum[deg], u[k] * cum[deg, -1], side="right"))
                deg = min(deg, 6)
                hold = 1 + int(u[k + 1] * 3)
                k += 2
                root = degrees[deg]
                tones = {(root + off) % 12 for off in (0, 3 if deg in (1, 2, 5) else 4, 7)}
                cand = np.array([p for p in range(D) if p % 12 in tones])
                new = []
                for reg in voices:
                    new.append(cand[np.argmin(np.abs(cand - reg) + 1e-3 * cand)])
                voices = np.array(new, dtype=float) * 0.5 + registers * 0.5
                chord = new
            frames[t, chord] = 1.0
            hold -= 1
        rolls.append(PianoRoll(frames))
    return rolls


_NOUNS = ["city", "river", "king", "people", "war", "music", "land", "year", "time", "house",
          "church", "army", "island", "empire", "language", "school", "bridge", "valley",
          "jazz", "quarter", "bazaar"]
_ADJ = ["small", "great", "old", "new", "first", "northern", "southern", "long", "early",
        "ancient", "large", "famous", "royal", "local", "quiet", "frozen", "majestic"]
_VERBS = ["built", "found", "called", "named", "held", "ruled", "crossed", "defended",
          "described", "founded", "visited", "divided", "seized", "joined", "acquired"]
_PREP = ["of", "in", "near", "from", "by", "across", "under"]
_DET = ["the", "a", "this", "every", "one"]


def synthetic_text(n_chars: int, rng: RngStream) -> bytes:
    """English-like lowercase text from a small recursive phrase grammar.

    27 symbols (a-z and space) as in text8. Sentences nest prepositional
    phrases and relative clauses, and each sentence ends with a number that
    echoes the count of nouns in it, which rewards remembering structure.
    """
    out = []
    total = 0
    u = iter(())

    def draw():
        nonlocal u
        try:
            return next(u)
        except StopIteration:
            u = iter(rng.random(4096).tolist())
            return next(u)

    def pick(words):
        return words[int(draw() * len(words))]

    numbers = ["zero", "one", "two", "three", "four", "five", "six", "seven"]

    def noun_phrase(depth, counter):
        words = [pick(_DET)]
        if draw() < 0.5:
            words.append(pick(_ADJ))
        words.append(pick(_NOUNS))
        counter[0] += 1
        if depth < 3 and draw() < 0.35:
            words += [pick(_PREP)] + noun_phrase(depth + 1, counter)
        if depth < 2 and draw() < 0.2:
            words += ["which", pick(_VERBS)] + noun_phrase(depth + 1, counter)
        return words

    while total < n_chars:
        counter = [0]
        sent = noun_phrase(0, counter) + ["was", pick(_VERBS), "by"] + noun_phrase(0, counter)
        sent += ["and", "counted", numbers[min(counter[0], 7)]]
        text = " ".join(sent) + " "
        out.append(text)
        total += len(text)
    return "".join(out).encode("ascii")[:n_chars]
