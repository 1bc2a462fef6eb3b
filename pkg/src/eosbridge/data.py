"""Synthetic symbolic multimodal corpus.

Images are 2x2 attribute grids (shape + color per cell, plus size and border
in hard mode) rendered to patch vectors through a frozen seeded codebook.
Three instance families pair each image with target text: a majority-shape
label, an attribute answer to a templated question, or a full enumeration
caption that identifies the image uniquely. Target-length distributions are
calibrated: labels <4 tokens ~89% of the time, answers <4 tokens ~67%,
captions mean ~18 tokens with >10 tokens at least 75% of the time.
"""

import hashlib
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError, ParseError
from .masks import Role, SequenceLayout
from .model import EOS_ID, PAD_ID

SHAPES = ("circle", "square", "triangle", "star")
COLORS = ("red", "green", "blue", "yellow", "black")
SIZES = ("small", "large")
BORDERS = ("thin", "thick")

GRID_ROWS = 2
GRID_COLS = 2
N_CELLS = GRID_ROWS * GRID_COLS

DEFAULT_TABLE_SEED = 1337
DEFAULT_PATCH_DIM = 12
MIN_CODE_DISTANCE = 0.5
JITTER_STD = 0.05

SPECIAL_TOKENS = ("<pad>", "<mask>", "<eos>")
_GRAMMAR = ("a", "the", "this", "it", "is", "are", "what", "which", "of",
            "at", "in", "to", "with", "and", "then", "shape", "color",
            "size", "border", "image", "picture", "grid", "row", "col",
            "cell", "contains", "showing", "answer", "label", "mostly",
            "corner", "top", "bottom", "left", "right",
            "zero", "one", "two", "three")
VOCAB_WORDS = SPECIAL_TOKENS + SHAPES + COLORS + SIZES + BORDERS + _GRAMMAR
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB_WORDS)}
NUMBER_WORDS = ("zero", "one", "two", "three")


def encode_words(words) -> tuple:
    try:
        return tuple(WORD_TO_ID[w] for w in words)
    except KeyError as e:
        raise DataError(f"word not in vocabulary: {e.args[0]!r}") from None


def decode_ids(ids) -> tuple:
    out = []
    for i in ids:
        if not 0 <= int(i) < len(VOCAB_WORDS):
            raise DataError(f"token id {i} out of vocabulary")
        out.append(VOCAB_WORDS[int(i)])
    return tuple(out)


def write_vocab(path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for w in VOCAB_WORDS:
            f.write(w + "\n")


def read_vocab(path) -> tuple:
    with open(path, encoding="utf-8") as f:
        return tuple(line.rstrip("\n") for line in f if line.strip())


# ---------------------------------------------------------------------------
# images and patches
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SymbolicImage:
    shapes: tuple            # N_CELLS shape names, reading order
    colors: tuple
    seed: int                # drives per-instance jitter
    sizes: Optional[tuple] = None    # hard mode only
    borders: Optional[tuple] = None

    def __post_init__(self):
        for field, values in (("shapes", SHAPES), ("colors", COLORS)):
            got = getattr(self, field)
            if len(got) != N_CELLS or any(v not in values for v in got):
                raise DataError(f"bad {field}: {got}")
        if (self.sizes is None) != (self.borders is None):
            raise DataError("sizes and borders must both be set or both absent")
        if self.sizes is not None:
            if any(v not in SIZES for v in self.sizes) or \
               any(v not in BORDERS for v in self.borders):
                raise DataError("bad size/border attributes")

    @property
    def hard(self) -> bool:
        return self.sizes is not None

    def cell(self, r: int, c: int) -> dict:
        i = r * GRID_COLS + c
        out = {"shape": self.shapes[i], "color": self.colors[i]}
        if self.hard:
            out["size"] = self.sizes[i]
            out["border"] = self.borders[i]
        return out

    def signature(self) -> tuple:
        return (self.shapes, self.colors, self.sizes, self.borders)


class PatchCodebook:
    """Frozen per-(shape, color) code vectors plus size/border offsets.

    Self-checks at construction that no two codes are closer than
    MIN_CODE_DISTANCE in L2, so distinct cell contents stay separable under
    the 0.05-std jitter.
    """

    def __init__(self, patch_dim: int = DEFAULT_PATCH_DIM,
                 seed: int = DEFAULT_TABLE_SEED):
        self.patch_dim = patch_dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.codes = {(s, c): rng.normal(size=patch_dim)
                      for s in SHAPES for c in COLORS}
        self.size_offsets = {s: rng.normal(0.0, 0.5, size=patch_dim)
                             for s in SIZES}
        self.border_offsets = {b: rng.normal(0.0, 0.5, size=patch_dim)
                               for b in BORDERS}
        keys = list(self.codes)
        for i, ka in enumerate(keys):
            for kb in keys[i + 1:]:
                d = np.linalg.norm(self.codes[ka] - self.codes[kb])
                if d <= MIN_CODE_DISTANCE:
                    raise DataError(f"codebook degenerate: {ka} and {kb} "
                                    f"only {d:.3f} apart")


def render_patches(codebook: PatchCodebook, img: SymbolicImage) -> np.ndarray:
    rng = np.random.default_rng(img.seed)
    rows = []
    for i in range(N_CELLS):
        v = codebook.codes[(img.shapes[i], img.colors[i])].copy()
        if img.hard:
            v += codebook.size_offsets[img.sizes[i]]
            v += codebook.border_offsets[img.borders[i]]
        rows.append(v + rng.normal(0.0, JITTER_STD, size=codebook.patch_dim))
    return np.stack(rows)


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------

CLASSIFICATION = "classification"
VQA = "vqa"
RETRIEVAL = "retrieval"
META_TASKS = (CLASSIFICATION, VQA, RETRIEVAL)


@dataclass(frozen=True)
class TrainingInstance:
    meta_task: str
    image: SymbolicImage
    block_a_text: Optional[tuple]   # token ids; questions only
    block_b_text: tuple             # token ids; the target text
    pair_id: str

    def __post_init__(self):
        if self.meta_task not in META_TASKS:
            raise DataError(f"unknown meta task {self.meta_task!r}")
        if self.meta_task == VQA and self.block_a_text is None:
            raise DataError("question text required for vqa instances")
        if self.meta_task != VQA and self.block_a_text is not None:
            raise DataError(f"{self.meta_task} instances carry no query text")
        if not self.block_b_text:
            raise DataError("empty target text")


def _pair_id(token_ids) -> str:
    payload = ",".join(str(int(t)) for t in token_ids).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def _random_image(rng, hard: bool) -> SymbolicImage:
    return SymbolicImage(
        shapes=tuple(SHAPES[i] for i in rng.integers(0, len(SHAPES), N_CELLS)),
        colors=tuple(COLORS[i] for i in rng.integers(0, len(COLORS), N_CELLS)),
        seed=int(rng.integers(0, 2 ** 31)),
        sizes=tuple(SIZES[i] for i in rng.integers(0, 2, N_CELLS)) if hard else None,
        borders=tuple(BORDERS[i] for i in rng.integers(0, 2, N_CELLS)) if hard else None,
    )


def majority_shape(img: SymbolicImage) -> Optional[str]:
    counts = {s: img.shapes.count(s) for s in set(img.shapes)}
    best = max(counts, key=counts.get)
    if counts[best] * 2 > N_CELLS:
        return best
    return None


def _pick(rng, weighted):
    r = rng.random()
    acc = 0.0
    for weight, value in weighted:
        acc += weight
        if r < acc:
            return value
    return weighted[-1][1]


def gen_classification(rng, hard: bool = False) -> TrainingInstance:
    """Majority-shape labeling; label short most of the time (~89% <4 tokens)."""
    maj = SHAPES[rng.integers(0, len(SHAPES))]
    n_major = 4 if rng.random() < 0.25 else 3
    shapes = [maj] * n_major
    while len(shapes) < N_CELLS:
        others = [s for s in SHAPES if s != maj]
        shapes.append(others[rng.integers(0, len(others))])
    order = rng.permutation(N_CELLS)
    img = SymbolicImage(
        shapes=tuple(shapes[i] for i in order),
        colors=tuple(COLORS[i] for i in rng.integers(0, len(COLORS), N_CELLS)),
        seed=int(rng.integers(0, 2 ** 31)),
        sizes=tuple(SIZES[i] for i in rng.integers(0, 2, N_CELLS)) if hard else None,
        borders=tuple(BORDERS[i] for i in rng.integers(0, 2, N_CELLS)) if hard else None,
    )
    label = _pick(rng, [
        (0.30, (maj,)),
        (0.30, (maj, "shape")),
        (0.145, ("a", maj, "shape")),
        (0.145, ("the", maj, "shape")),
        (0.055, ("image", "of", "a", maj)),
        (0.055, ("this", "image", "is", "mostly", maj)),
    ])
    ids = encode_words(label)
    return TrainingInstance(CLASSIFICATION, img, None, ids, _pair_id(ids))


_ATTR_VALUES = {"color": COLORS, "shape": SHAPES, "size": SIZES,
                "border": BORDERS}


def gen_vqa(rng, hard: bool = False) -> TrainingInstance:
    """Attribute question about one cell; answer ~67% <4 tokens."""
    img = _random_image(rng, hard)
    r = int(rng.integers(0, GRID_ROWS))
    c = int(rng.integers(0, GRID_COLS))
    attrs = ("color", "shape", "size", "border") if hard else ("color", "shape")
    attr = attrs[rng.integers(0, len(attrs))]
    value = img.cell(r, c)[attr]
    question = ("what", attr, "is", "at", "row", NUMBER_WORDS[r],
                "col", NUMBER_WORDS[c])
    answer = _pick(rng, [
        (0.25, (value,)),
        (0.20, (value, attr)),
        (0.22, ("the", value, attr)),
        (0.13, ("it", "is", value, attr)),
        (0.20, ("the", "answer", "is", value, attr)),
    ])
    ids = encode_words(answer)
    return TrainingInstance(VQA, img, encode_words(question), ids,
                            _pair_id(ids))


def caption_content_words(img: SymbolicImage) -> list:
    """Reading-order enumeration; injective over images by construction."""
    words = []
    for i in range(N_CELLS):
        if i:
            words.append("then")
        words.append("a")
        if img.hard:
            words += [img.sizes[i], img.colors[i], img.shapes[i],
                      "with", img.borders[i], "border"]
        else:
            words += [img.colors[i], img.shapes[i]]
    return words


def gen_retrieval(rng, hard: bool = False) -> TrainingInstance:
    """Full enumeration caption, mean length ~18 tokens (12-24 in base mode)."""
    img = _random_image(rng, hard)
    prefix = _pick(rng, [
        (0.2, ()),
        (0.4, ("this", "image", "contains")),
        (0.2, ("a", "grid", "showing")),
        (0.2, ("the", "image", "contains")),
    ])
    suffix = ("in", "the", "grid") if rng.random() < 0.3 else ()
    words = list(prefix) + caption_content_words(img) + list(suffix)
    ids = encode_words(words)
    return TrainingInstance(RETRIEVAL, img, None, ids, _pair_id(ids))


_GENERATORS = {CLASSIFICATION: gen_classification, VQA: gen_vqa,
               RETRIEVAL: gen_retrieval}


# ---------------------------------------------------------------------------
# corpus records and files
# ---------------------------------------------------------------------------

SPLITS = ("pretrain", "contrastive", "eval")


@dataclass(frozen=True)
class CorpusRecord:
    instance: TrainingInstance
    split: str
    table_seed: int

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")


def serialize(record: CorpusRecord) -> str:
    img = record.instance.image
    payload = {
        "meta_task": record.instance.meta_task,
        "split": record.split,
        "table_seed": record.table_seed,
        "seed": img.seed,
        "shapes": list(img.shapes),
        "colors": list(img.colors),
        "sizes": list(img.sizes) if img.sizes else None,
        "borders": list(img.borders) if img.borders else None,
        "block_a_text": (list(record.instance.block_a_text)
                         if record.instance.block_a_text is not None else None),
        "block_b_text": list(record.instance.block_b_text),
        "pair_id": record.instance.pair_id,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def deserialize(line: str, line_no: int = 0) -> CorpusRecord:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as e:
        raise ParseError(f"line {line_no}: bad record at offset {e.pos}: "
                         f"{e.msg}") from None
    try:
        img = SymbolicImage(
            shapes=tuple(d["shapes"]), colors=tuple(d["colors"]),
            seed=int(d["seed"]),
            sizes=tuple(d["sizes"]) if d.get("sizes") else None,
            borders=tuple(d["borders"]) if d.get("borders") else None)
        instance = TrainingInstance(
            meta_task=d["meta_task"], image=img,
            block_a_text=(tuple(d["block_a_text"])
                          if d.get("block_a_text") is not None else None),
            block_b_text=tuple(d["block_b_text"]), pair_id=d["pair_id"])
        return CorpusRecord(instance, d["split"], int(d["table_seed"]))
    except (KeyError, TypeError, DataError) as e:
        raise ParseError(f"line {line_no}: {e}") from None


def write_corpus(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(serialize(r) + "\n")


def read_corpus(path) -> list:
    records = []
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if line:
                records.append(deserialize(line, i))
    return records


def generate_corpus(meta_task: str, n: int, root_seed: int,
                    hard: bool = False, split: str = "pretrain",
                    table_seed: int = DEFAULT_TABLE_SEED,
                    unique_images: bool = False) -> list:
    """Deterministic corpus: instance i draws from a stream spawned off the
    root seed, so the same arguments always produce the same records.

    meta_task "mixed" cycles uniformly over the three tasks. unique_images
    rejects images whose cell contents already appeared (retrieval pools
    need caption-injective candidate sets)."""
    if meta_task != "mixed" and meta_task not in META_TASKS:
        raise DataError(f"unknown meta task {meta_task!r}")
    records = []
    seen = set()
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(root_seed,
                                                           spawn_key=(i,)))
        task = meta_task
        if meta_task == "mixed":
            task = META_TASKS[i % len(META_TASKS)]
        for attempt in range(200):
            inst = _GENERATORS[task](rng, hard=hard)
            if not unique_images or inst.image.signature() not in seen:
                break
        else:
            raise DataError(f"could not draw a fresh image after 200 tries "
                            f"({len(seen)} seen)")
        if unique_images:
            seen.add(inst.image.signature())
        records.append(CorpusRecord(inst, split, table_seed))
    return records


# ---------------------------------------------------------------------------
# semantic validation
# ---------------------------------------------------------------------------

def validate_instance(instance: TrainingInstance) -> None:
    """Check the target text is derivable from the image by the template
    rules; raises on any inconsistency."""
    words = decode_ids(instance.block_b_text)
    if instance.meta_task == CLASSIFICATION:
        maj = majority_shape(instance.image)
        if maj is None:
            raise DataError("classification image has no strict majority")
        if maj not in words:
            raise DataError(f"label {words} does not name majority {maj}")
    elif instance.meta_task == VQA:
        q = decode_ids(instance.block_a_text)
        attr = q[1]
        r = NUMBER_WORDS.index(q[5])
        c = NUMBER_WORDS.index(q[7])
        value = instance.image.cell(r, c)[attr]
        if value not in words:
            raise DataError(f"answer {words} inconsistent with {attr}="
                            f"{value} at ({r},{c})")
    elif instance.meta_task == RETRIEVAL:
        content = caption_content_words(instance.image)
        text = " ".join(words)
        if " ".join(content) not in text:
            raise DataError(f"caption {words} does not enumerate the grid")


# ---------------------------------------------------------------------------
# stage layouts
# ---------------------------------------------------------------------------

@dataclass
class EncodedInstance:
    layout: SequenceLayout
    tokens: np.ndarray            # int64, full length
    patches: np.ndarray           # rows for the visual positions
    vis_span: Optional[tuple]     # (start, stop) or None
    text_span: Optional[tuple]    # every maskable text position (warm-up)
    blockb_span: Optional[tuple]  # reconstruction-side text
    eos_pos: Optional[int]


def _encode(roles, token_groups) -> np.ndarray:
    tokens = np.full(len(roles), PAD_ID, dtype=np.int64)
    i = 0
    for group in token_groups:
        tokens[i:i + len(group)] = group
        i += len(group)
    assert i == len(roles)
    return tokens


def build_layout(instance: TrainingInstance, stage: int,
                 codebook: PatchCodebook):
    """Stage 1: flat [patches, text] for joint reconstruction (no bridge).
    Stage 2: [Block A][bridge][Block B] for truncated training.
    Stage 3: (query stream, target stream), each ending in a bridge token.
    """
    patches = render_patches(codebook, instance.image)
    a_text = instance.block_a_text or ()
    b_text = instance.block_b_text
    n_vis = patches.shape[0]
    if stage == 1:
        roles = (Role.VISUAL_A,) * n_vis + (Role.TEXT_A,) * len(a_text) \
            + (Role.TEXT_B,) * len(b_text)
        tokens = _encode(roles, [[PAD_ID] * n_vis, a_text, b_text])
        n = len(roles)
        return EncodedInstance(SequenceLayout(roles), tokens, patches,
                               vis_span=(0, n_vis), text_span=(n_vis, n),
                               blockb_span=(n - len(b_text), n), eos_pos=None)
    if stage == 2:
        if not b_text:
            raise DataError("stage-2 layout needs a nonempty block B")
        roles = (Role.VISUAL_A,) * n_vis + (Role.TEXT_A,) * len(a_text) \
            + (Role.EOS_BRIDGE,) + (Role.TEXT_B,) * len(b_text)
        eos = n_vis + len(a_text)
        tokens = _encode(roles, [[PAD_ID] * n_vis, a_text, [EOS_ID], b_text])
        n = len(roles)
        return EncodedInstance(SequenceLayout(roles), tokens, patches,
                               vis_span=(0, n_vis),
                               text_span=(n_vis, eos) if a_text else None,
                               blockb_span=(eos + 1, n), eos_pos=eos)
    if stage == 3:
        q_roles = (Role.VISUAL_A,) * n_vis + (Role.TEXT_A,) * len(a_text) \
            + (Role.EOS_BRIDGE,)
        q_tokens = _encode(q_roles, [[PAD_ID] * n_vis, a_text, [EOS_ID]])
        query = EncodedInstance(SequenceLayout(q_roles), q_tokens, patches,
                                vis_span=(0, n_vis), text_span=None,
                                blockb_span=None, eos_pos=len(q_roles) - 1)
        return query, build_target_stream(b_text, codebook.patch_dim)
    raise ValueError(f"stage must be 1, 2, or 3, got {stage}")


def build_target_stream(token_ids, patch_dim: int) -> EncodedInstance:
    """Text-only candidate stream with a trailing bridge token."""
    ids = tuple(int(t) for t in token_ids)
    if not ids:
        raise DataError("empty target stream")
    roles = (Role.TEXT_B,) * len(ids) + (Role.EOS_BRIDGE,)
    tokens = _encode(roles, [ids, [EOS_ID]])
    return EncodedInstance(SequenceLayout(roles), tokens,
                           np.zeros((0, patch_dim)), vis_span=None,
                           text_span=None, blockb_span=(0, len(ids)),
                           eos_pos=len(roles) - 1)
