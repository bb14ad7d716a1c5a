"""Procedural audio scenes with paired text.

A small bank of synthetic source classes occupies disjoint base-frequency
bands so that text-conditioned separation is learnable from scratch on a CPU.
Every render is a pure function of (class, length, seed); mixtures sum their
component waveforms exactly, and each mixture carries a templated prompt
describing its class names.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .dsp import Waveform

WAVESHAPES = ("harmonic", "amtone", "chirp", "noiseband")


@dataclass(frozen=True)
class SourceClass:
    """One timbre family: a waveshape confined to a base-frequency band."""

    class_id: int
    name: str
    waveshape: str
    freq_lo: float
    freq_hi: float
    peak: float = 0.45

    def __post_init__(self):
        if self.waveshape not in WAVESHAPES:
            raise ValueError(f"unknown waveshape {self.waveshape!r}")
        if not 0.0 < self.freq_lo < self.freq_hi:
            raise ValueError(f"bad frequency band [{self.freq_lo}, {self.freq_hi}]")
        if not 0.0 <= self.peak <= 0.5:
            raise ValueError("peak amplitude must lie in [0, 0.5]")


@dataclass(frozen=True)
class SourceBank:
    """The class inventory plus the sample rate all renders share."""

    classes: tuple
    sample_rate: int

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate class ids")
        if len({c.name for c in self.classes}) != len(self.classes):
            raise ValueError("duplicate class names")
        spans = sorted((c.freq_lo, c.freq_hi) for c in self.classes)
        for (_, hi), (lo, _) in zip(spans[:-1], spans[1:]):
            if lo < hi:
                raise ValueError("class base-frequency bands overlap")
        for c in self.classes:
            if c.freq_hi >= self.sample_rate / 2:
                raise ValueError(f"{c.name}: band exceeds Nyquist")

    def __len__(self):
        return len(self.classes)

    def by_id(self, class_id):
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise KeyError(f"no class with id {class_id}")

    def names(self):
        return [c.name for c in self.classes]


def default_bank(sample_rate=8000):
    """Eight classes across four waveshapes, bands strictly disjoint."""
    specs = [
        ("bass", "harmonic", 90.0, 140.0),
        ("cello", "harmonic", 200.0, 290.0),
        ("organ", "harmonic", 380.0, 500.0),
        ("guitar", "harmonic", 620.0, 820.0),
        ("flute", "amtone", 1050.0, 1400.0),
        ("whistle", "chirp", 1700.0, 2150.0),
        ("bell", "amtone", 2500.0, 2950.0),
        ("hiss", "noiseband", 3200.0, 3600.0),
    ]
    classes = tuple(
        SourceClass(class_id=i, name=n, waveshape=w, freq_lo=lo, freq_hi=hi)
        for i, (n, w, lo, hi) in enumerate(specs)
    )
    return SourceBank(classes=classes, sample_rate=sample_rate)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _envelope(rng, n, sr):
    attack = int(n * rng.uniform(0.03, 0.12))
    release = int(n * rng.uniform(0.08, 0.25))
    env = np.ones(n)
    if attack:
        env[:attack] = 0.5 - 0.5 * np.cos(np.pi * np.arange(attack) / attack)
    if release:
        env[n - release :] = 0.5 + 0.5 * np.cos(np.pi * np.arange(release) / release)
    # slow loudness wobble keeps renders of one class from being clones
    t = np.arange(n) / sr
    wobble = 1.0 - rng.uniform(0.05, 0.2) * 0.5 * (1.0 - np.cos(2.0 * np.pi * rng.uniform(0.4, 1.5) * t))
    return env * wobble


def render_source(cls, num_samples, seed, sample_rate=8000):
    """Render one source clip; deterministic in (class, length, seed)."""
    if num_samples <= 0:
        raise ValueError("num_samples must be positive")
    rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, cls.class_id, num_samples])
    t = np.arange(num_samples) / sample_rate
    nyq = sample_rate / 2.0

    if cls.waveshape == "harmonic":
        f0 = rng.uniform(cls.freq_lo, cls.freq_hi)
        x = np.zeros(num_samples)
        amp = 1.0
        for k in range(1, 4):
            fk = k * f0
            if fk >= nyq:
                break
            x += amp * np.sin(2.0 * np.pi * fk * t + rng.uniform(0, 2 * np.pi))
            amp *= 0.28
    elif cls.waveshape == "amtone":
        fc = rng.uniform(cls.freq_lo, cls.freq_hi)
        rate = rng.uniform(3.0, 9.0)
        depth = rng.uniform(0.3, 0.7)
        x = np.sin(2.0 * np.pi * fc * t + rng.uniform(0, 2 * np.pi))
        x *= 1.0 - depth * 0.5 * (1.0 - np.cos(2.0 * np.pi * rate * t))
    elif cls.waveshape == "chirp":
        span = cls.freq_hi - cls.freq_lo
        a = cls.freq_lo + rng.uniform(0.0, 0.3) * span
        b = cls.freq_hi - rng.uniform(0.0, 0.3) * span
        if rng.random() < 0.5:
            a, b = b, a
        freq = np.linspace(a, b, num_samples)
        phase = 2.0 * np.pi * np.cumsum(freq) / sample_rate
        x = np.sin(phase + rng.uniform(0, 2 * np.pi))
    elif cls.waveshape == "noiseband":
        white = rng.standard_normal(num_samples)
        spec = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(num_samples, 1.0 / sample_rate)
        spec[(freqs < cls.freq_lo) | (freqs > cls.freq_hi)] = 0.0
        x = np.fft.irfft(spec, n=num_samples)
    else:  # pragma: no cover - SourceClass validates waveshape
        raise ValueError(f"unknown waveshape {cls.waveshape!r}")

    x *= _envelope(rng, num_samples, sample_rate)
    top = np.max(np.abs(x))
    target = cls.peak * rng.uniform(0.85, 1.0)
    if top < 1e-12 or target == 0.0:
        return Waveform(np.zeros(num_samples), sample_rate)
    return Waveform(x * (target / top), sample_rate)


# ---------------------------------------------------------------------------
# prompts and tokens
# ---------------------------------------------------------------------------


class Vocabulary:
    """Word-level token table with <pad>=0 and <unk>=1, fixed at build time."""

    PAD = 0
    UNK = 1

    def __init__(self, words, max_len=16):
        self.max_len = int(max_len)
        self.words = ["<pad>", "<unk>"] + sorted(set(words))
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    @classmethod
    def for_bank(cls, bank, max_len=16):
        words = ["the", "sound", "of", "mixture", "and"]
        for c in bank.classes:
            words.extend(_tokenize(c.name))
        return cls(words, max_len=max_len)

    def encode(self, text):
        """Token ids padded to ``max_len``; returns (ids, length)."""
        toks = _tokenize(text)[: self.max_len]
        ids = np.full(self.max_len, self.PAD, dtype=np.int64)
        for i, w in enumerate(toks):
            ids[i] = self.index.get(w, self.UNK)
        return ids, len(toks)


def _tokenize(text):
    return re.findall(r"[a-z']+", text.lower())


@dataclass(frozen=True)
class PromptCondition:
    """A prompt string plus its deterministic tokenization."""

    text: str
    entity_names: tuple
    token_ids: np.ndarray
    length: int

    @classmethod
    def from_names(cls, names, vocab):
        text = build_prompt(names)
        ids, length = vocab.encode(text)
        return cls(text=text, entity_names=tuple(names), token_ids=ids, length=length)

    @classmethod
    def from_text(cls, text, vocab, entity_names=()):
        ids, length = vocab.encode(text)
        return cls(text=text, entity_names=tuple(entity_names), token_ids=ids, length=length)


def build_prompt(names):
    """Templated caption for 1-4 source names (Oxford comma beyond two)."""
    names = [str(n) for n in names]
    if not 1 <= len(names) <= 4:
        raise ValueError(f"build_prompt takes 1 to 4 names, got {len(names)}")
    if any(not n.strip() for n in names):
        raise ValueError("empty source name")
    if len(names) == 1:
        return f"The sound of {names[0]}."
    if len(names) == 2:
        return f"The sound mixture of {names[0]} and {names[1]}."
    return f"The sound mixture of {', '.join(names[:-1])}, and {names[-1]}."


_SINGLE_RE = re.compile(r"^\s*the sound of (.+?)\.?\s*$", re.IGNORECASE)
_MIXTURE_RE = re.compile(r"^\s*the sound mixture of (.+?)\.?\s*$", re.IGNORECASE)

# connectors that signal two co-occurring events in a free-text caption;
# longest first so "and then" wins over "and"
_CONNECTORS = (" followed by ", " and then ", " while ", " over ", " as ", " and ")

# intransitive tails dropped so the phrase reads as a noun phrase
_TRAILING_VERBS = {"runs", "hums", "plays", "continues", "sounds"}


def split_caption(caption):
    """Break a caption into per-source phrases.

    Templated captions invert exactly (class names come back verbatim).
    Free-text captions are split on sentence boundaries and connector
    words, each phrase is capitalized and closed with a period; a caption
    with no recognizable structure comes back as a single phrase.
    """
    if not caption or not caption.strip():
        raise ValueError("empty caption")
    m = _SINGLE_RE.match(caption)
    if m:
        return [m.group(1).strip()]
    m = _MIXTURE_RE.match(caption)
    if m:
        body = m.group(1)
        parts = re.split(r",\s*and\s+|\s+and\s+|,\s*", body)
        return [p.strip() for p in parts if p.strip()]

    phrases = []
    for sentence in re.split(r"[.;!?]+", caption):
        pieces = [sentence]
        for conn in _CONNECTORS:
            nxt = []
            for piece in pieces:
                nxt.extend(piece.split(conn))
            pieces = nxt
        for piece in pieces:
            words = piece.strip().split()
            if not words:
                continue
            if len(words) >= 3 and words[-1].lower() in _TRAILING_VERBS:
                words = words[:-1]
            phrase = " ".join(words)
            phrases.append(phrase[0].upper() + phrase[1:] + ".")
    return phrases if phrases else [caption.strip()]


# ---------------------------------------------------------------------------
# mixtures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixtureSample:
    """A mixture, its components, and the prompt that describes it."""

    mixture: Waveform
    components: tuple  # of (SourceClass, Waveform)
    prompt: PromptCondition

    def __post_init__(self):
        ids = [c.class_id for c, _ in self.components]
        if len(set(ids)) != len(ids):
            raise ValueError("mixture components must have distinct classes")
        total = np.zeros(len(self.mixture))
        for _, w in self.components:
            if w.sample_rate != self.mixture.sample_rate or len(w) != len(self.mixture):
                raise ValueError("component does not line up with the mixture")
            total += w.samples
        if not np.array_equal(total, self.mixture.samples):
            raise ValueError("mixture is not the exact sum of its components")

    @property
    def class_ids(self):
        return frozenset(c.class_id for c, _ in self.components)

    @property
    def num_sources(self):
        return len(self.components)


@dataclass(frozen=True)
class MoMSample:
    """A mixture of mixtures: the sum of two class-disjoint mixtures."""

    mom: Waveform
    parts: tuple  # of two MixtureSample

    def __post_init__(self):
        a, b = self.parts
        if a.class_ids & b.class_ids:
            raise ValueError("MoM parts share a source class")
        if not np.array_equal(a.mixture.samples + b.mixture.samples, self.mom.samples):
            raise ValueError("MoM is not the exact sum of its parts")


def make_mixture(classes, num_samples, seed, vocab, sample_rate=8000):
    """Render and sum distinct classes; prompt lists names in given order."""
    classes = list(classes)
    if not 1 <= len(classes) <= 4:
        raise ValueError("a mixture takes 1 to 4 classes")
    waves = [render_source(c, num_samples, seed, sample_rate) for c in classes]
    total = np.zeros(num_samples)
    for w in waves:
        total += w.samples
    prompt = PromptCondition.from_names([c.name for c in classes], vocab)
    return MixtureSample(
        mixture=Waveform(total, sample_rate),
        components=tuple(zip(classes, waves)),
        prompt=prompt,
    )


def make_mom(a, b):
    """Pair two class-disjoint mixtures into a mixture of mixtures."""
    if a.class_ids & b.class_ids:
        raise ValueError("MoM parts must use disjoint class sets")
    if a.mixture.sample_rate != b.mixture.sample_rate or len(a.mixture) != len(b.mixture):
        raise ValueError("MoM parts must share length and sample rate")
    return MoMSample(mom=Waveform(a.mixture.samples + b.mixture.samples, a.mixture.sample_rate), parts=(a, b))


# ---------------------------------------------------------------------------
# dataset bookkeeping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SingleSource:
    """A reference to one renderable clip (class + render seed)."""

    source_class: SourceClass
    render_seed: int

    def render(self, num_samples, sample_rate=8000):
        return render_source(self.source_class, num_samples, self.render_seed, sample_rate)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    test: tuple

    def train_by_class(self):
        by = {}
        for s in self.train:
            by.setdefault(s.source_class.class_id, []).append(s)
        return by

    def test_by_class(self):
        by = {}
        for s in self.test:
            by.setdefault(s.source_class.class_id, []).append(s)
        return by


def dataset_split(bank, per_class, seed):
    """Deterministic 80/20 split of ``per_class`` renders for every class."""
    if per_class < 5:
        raise ValueError("per_class must be at least 5 for an 80/20 split")
    if per_class > 1000:
        raise ValueError("per_class capped at 1000 (seed spacing)")
    train, test = [], []
    for c in bank.classes:
        rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, 7, c.class_id])
        order = rng.permutation(per_class)
        n_test = per_class // 5
        for j, i in enumerate(order):
            s = SingleSource(source_class=c, render_seed=int(seed) * 1000 + int(i))
            (test if j < n_test else train).append(s)
    return DatasetSplit(train=tuple(train), test=tuple(test))


def mixture_from_sources(sources, num_samples, vocab, sample_rate=8000):
    """Build a ``MixtureSample`` from already-chosen dataset singles."""
    waves = [s.render(num_samples, sample_rate) for s in sources]
    classes = [s.source_class for s in sources]
    if len({c.class_id for c in classes}) != len(classes):
        raise ValueError("sources must have distinct classes")
    total = np.zeros(num_samples)
    for w in waves:
        total += w.samples
    prompt = PromptCondition.from_names([c.name for c in classes], vocab)
    return MixtureSample(
        mixture=Waveform(total, sample_rate),
        components=tuple(zip(classes, waves)),
        prompt=prompt,
    )
