"""Product catalogs: tokenization, vocabularies, splits and synthetic data."""

from __future__ import annotations

import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PATH_DELIMITER = " > "

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<s>", "</s>"
SPECIALS = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3


class ConfigurationError(ValueError):
    """Invalid parameters for a corpus operation."""


class CatalogFormatError(ValueError):
    """A catalog file has malformed lines."""

    def __init__(self, path, problems: list[tuple[int, str]]):
        self.path = str(path)
        self.problems = problems
        lines = "; ".join(f"line {n}: {msg}" for n, msg in problems[:10])
        more = f" (+{len(problems) - 10} more)" if len(problems) > 10 else ""
        super().__init__(f"{path}: {lines}{more}")


@dataclass(frozen=True, order=True)
class CategoryPath:
    """Root-first sequence of taxonomy node labels."""

    nodes: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        for label in self.nodes:
            if PATH_DELIMITER in label:
                raise ValueError(f"node label {label!r} contains the path delimiter")

    @classmethod
    def parse(cls, text: str) -> CategoryPath:
        text = text.strip()
        return cls(tuple(part.strip() for part in text.split(PATH_DELIMITER))) if text else cls(())

    def serialize(self) -> str:
        return PATH_DELIMITER.join(self.nodes)

    @property
    def depth(self) -> int:
        return len(self.nodes)

    def has_repeats(self) -> bool:
        return len(set(self.nodes)) != len(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def __str__(self) -> str:
        return self.serialize()


@dataclass(frozen=True)
class Product:
    id: int
    raw_title: str
    title_tokens: tuple[str, ...]
    gold_path: CategoryPath

    @property
    def label(self) -> str:
        return self.gold_path.serialize()


def make_product(pid: int, raw_title: str, path: CategoryPath | str | Sequence[str]) -> Product:
    """Validate and build a :class:`Product` from a raw title."""
    if isinstance(path, str):
        path = CategoryPath.parse(path)
    elif not isinstance(path, CategoryPath):
        path = CategoryPath(tuple(path))
    tokens = tuple(tokenize_title(raw_title))
    if not tokens:
        raise ValueError(f"product {pid}: title is empty after tokenization")
    if path.depth < 1 or any(not n for n in path.nodes):
        raise ValueError(f"product {pid}: category path must have depth >= 1 and no empty nodes")
    if path.has_repeats():
        raise ValueError(f"product {pid}: category path repeats a node")
    return Product(pid, raw_title, tokens, path)


# -- tokenization ---------------------------------------------------------------

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize_title(raw_title: str) -> list[str]:
    """Lowercase, split punctuation off as separate tokens, split on whitespace.

    >>> tokenize_title("Mix Pancake Waffle 24 OZ -Pack of 6")
    ['mix', 'pancake', 'waffle', '24', 'oz', '-', 'pack', 'of', '6']
    """
    return _TOKEN_RE.findall(raw_title.lower())


# -- vocabularies ---------------------------------------------------------------

@dataclass
class Vocabulary:
    """Token/id map whose first four ids are the reserved specials."""

    id_to_token: list[str]
    max_size: int | None = None
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        get = self.token_to_id.get
        return [get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def to_lines(self) -> str:
        return "".join(tok + "\n" for tok in self.id_to_token)

    @classmethod
    def from_lines(cls, text: str, max_size: int | None = None) -> Vocabulary:
        return cls([line for line in text.split("\n") if line], max_size)


def build_vocabulary(token_sequences: Iterable[Sequence[str]], max_size: int | None = 100_000) -> Vocabulary:
    """Keep the ``max_size - 4`` most frequent tokens; ties go lexicographically.

    ``max_size=None`` keeps every token (used for the target side).
    """
    if max_size is not None and max_size < 4:
        raise ConfigurationError(f"max_size must be >= 4, got {max_size}")
    counts = Counter(tok for seq in token_sequences for tok in seq if tok not in SPECIALS)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_size is not None:
        ranked = ranked[: max_size - len(SPECIALS)]
    return Vocabulary(list(SPECIALS) + [tok for tok, _ in ranked], max_size)


def build_target_vocabulary(paths: Iterable[CategoryPath]) -> Vocabulary:
    """One token per node label, never frequency-capped."""
    return build_vocabulary((p.nodes for p in paths), max_size=None)


@dataclass(frozen=True)
class EncodedProduct:
    product_id: int
    source_ids: tuple[int, ...]
    target_ids: tuple[int, ...]
    target_has_unk: bool


def encode_product(p: Product, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> EncodedProduct:
    """Source ids with UNK substitution and target ``BOS + nodes + EOS``."""
    if p.gold_path.depth < 1:
        raise ValueError(f"product {p.id}: empty category path")
    src = tuple(src_vocab.encode(p.title_tokens))
    nodes = tgt_vocab.encode(p.gold_path.nodes)
    return EncodedProduct(p.id, src, (BOS_ID, *nodes, EOS_ID), UNK_ID in nodes)


def encode_products(products: Sequence[Product], src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                    drop_unk_targets: bool = True) -> tuple[list[EncodedProduct], dict[str, int]]:
    """Encode a list; optionally drop products whose path is not expressible.

    Returns the encoded items and a small data-quality report.
    """
    out = []
    dropped = 0
    src_unk = 0
    for p in products:
        enc = encode_product(p, src_vocab, tgt_vocab)
        src_unk += enc.source_ids.count(UNK_ID)
        if enc.target_has_unk and drop_unk_targets:
            dropped += 1
            continue
        out.append(enc)
    return out, {"total": len(products), "dropped_unk_target": dropped, "source_unk_tokens": src_unk}


# -- splits ------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    train: list[int]
    validation: list[int]
    test: list[int]
    seed: int

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train": self.train, "validation": self.validation, "test": self.test}

    @classmethod
    def from_dict(cls, d: dict) -> DatasetSplit:
        return cls(list(d["train"]), list(d["validation"]), list(d["test"]), int(d["seed"]))


def largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    """Integer allocation of ``total`` proportional to ``ratios``.

    Leftover units go to the largest fractional parts; ties favour earlier
    slots.
    """
    ideal = [total * r for r in ratios]
    counts = [math.floor(x + 1e-12) for x in ideal]
    leftover = total - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(ideal[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts



def group_by_label(products: Sequence[Product]) -> dict[str, list[Product]]:
    groups: dict[str, list[Product]] = defaultdict(list)
    for p in products:
        groups[p.label].append(p)
    return dict(sorted(groups.items()))


def stratified_partition(products: Sequence[Product], ratios: Sequence[float], seed: int,
                         small_classes_to_first: bool = True) -> list[list[int]]:
    """Per-class proportional partition of product ids into ``len(ratios)`` parts.

    Classes smaller than the number of parts go wholly to the first part when
    ``small_classes_to_first`` is set.
    """
    if not products:
        raise ValueError("cannot split an empty product list")
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"ratios must be positive and sum to 1, got {tuple(ratios)}")
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[] for _ in ratios]
    for _, members in group_by_label(products).items():
        ids = [p.id for p in members]
        ids = [ids[i] for i in rng.permutation(len(ids))]
        if small_classes_to_first and len(ids) < len(ratios):
            parts[0].extend(ids)
            continue
        start = 0
        for part, n in zip(parts, largest_remainder(len(ids), ratios)):
            part.extend(ids[start:start + n])
            start += n
    return [sorted(part) for part in parts]


def stratified_split(products: Sequence[Product], ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0,
                     small_classes_to_train: bool = True) -> DatasetSplit:
    """Stratified train/validation/test split with largest-remainder rounding."""
    if len(ratios) != 3:
        raise ConfigurationError("stratified_split needs exactly three ratios")
    train, val, test = stratified_partition(products, ratios, seed, small_classes_to_train)
    return DatasetSplit(train, val, test, seed)


# -- catalog files -----------------------------------------------------------

def _graph_from_products(products):
    from .taxonomy import TaxonomyGraph
    return TaxonomyGraph.from_paths(p.gold_path for p in products)


def load_catalog_tsv(path: str | Path, dedup: bool = False):
    """Parse ``title<TAB>Root > Child > ... > Leaf`` lines.

    Returns ``(products, graph)``. Every malformed line is collected and
    reported together in a :class:`CatalogFormatError`. Titles that appear with
    more than one path are kept; their count is logged.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CatalogFormatError(path, [(0, f"unreadable: {exc}")]) from exc
    problems: list[tuple[int, str]] = []
    products: list[Product] = []
    seen: set[tuple[str, str]] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            problems.append((lineno, "missing TAB between title and path"))
            continue
        title, _, path_text = line.partition("\t")
        segments = path_text.split(PATH_DELIMITER)
        if not path_text.strip() or any(not s.strip() for s in segments):
            problems.append((lineno, "empty path segment"))
            continue
        try:
            cat = CategoryPath(tuple(s.strip() for s in segments))
        except ValueError as exc:
            problems.append((lineno, str(exc)))
            continue
        key = (title, cat.serialize())
        if dedup and key in seen:
            continue
        seen.add(key)
        try:
            products.append(make_product(len(products), title, cat))
        except ValueError as exc:
            problems.append((lineno, str(exc)))
    if problems:
        raise CatalogFormatError(path, problems)
    paths_per_title: dict[tuple[str, ...], set[str]] = defaultdict(set)
    for p in products:
        paths_per_title[p.title_tokens].add(p.label)
    conflicts = sum(1 for v in paths_per_title.values() if len(v) > 1)
    if conflicts:
        logger.info("%s: %d titles carry conflicting paths", path, conflicts)
    return products, _graph_from_products(products)


def write_catalog_tsv(path: str | Path, products: Iterable[Product]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in products:
            fh.write(f"{p.raw_title}\t{p.label}\n")


def title_conflicts(products: Sequence[Product]) -> int:
    """Number of distinct tokenized titles that map to more than one path."""
    paths: dict[tuple[str, ...], set[str]] = defaultdict(set)
    for p in products:
        paths[p.title_tokens].add(p.label)
    return sum(1 for v in paths.values() if len(v) > 1)


# -- synthetic catalogs ---------------------------------------------------------

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "cl", "dr", "gr", "pl", "st", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the synthetic long-tail catalog generator.

    ``title_noise`` in [0, 1) scales both the number of uninformative filler
    tokens and the chance that a keyword is borrowed from a sibling class.
    ``num_brands`` two-word brand names are shared across all classes; a
    title carries one with probability ``brand_rate``.
    """

    num_classes: int = 60
    depth_range: tuple[int, int] = (2, 4)
    skew_exponent: float = 1.0
    num_products: int = 2000
    title_noise: float = 0.3
    seed: int = 0
    keywords_per_node: int = 6
    filler_vocab: int = 400
    num_brands: int = 300
    brand_rate: float = 0.3

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticConfig:
        d = dict(d)
        if "depth_range" in d:
            d["depth_range"] = tuple(d["depth_range"])
        return cls(**d)


def leaf_sizes(num_classes: int, num_products: int, skew_exponent: float) -> list[int]:
    """Products per leaf rank: one each, the rest allocated by ``rank ** -skew``."""
    weights = np.arange(1, num_classes + 1, dtype=float) ** -skew_exponent
    extra = largest_remainder(num_products - num_classes, list(weights / weights.sum()))
    return [1 + e for e in extra]


class _WordMaker:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.used: set[str] = set()

    def word(self, syllables: int) -> str:
        for _ in range(10_000):
            w = "".join(self.rng.choice(_ONSETS) + self.rng.choice(_VOWELS) for _ in range(syllables))
            if w not in self.used:
                self.used.add(w)
                return w
        raise ConfigurationError(f"ran out of unique {syllables}-syllable words; lower the pool sizes")


def generate_synthetic_catalog(config: SyntheticConfig | dict):
    """Random taxonomy tree plus power-law distributed products.

    Each node owns a pool of keywords. A title mixes keywords of the nodes on
    its gold path (the leaf always contributes) with filler tokens drawn from
    a Zipf-distributed shared pool; with probability ``title_noise`` one leaf
    keyword is swapped for a keyword of a sibling leaf, and with probability
    ``title_noise / 2`` each mid-level keyword comes from a node at the same
    depth on another branch.

    Returns ``(products, graph)``.
    """
    if isinstance(config, dict):
        config = SyntheticConfig.from_dict(config)
    lo, hi = config.depth_range
    if lo < 1 or hi < lo:
        raise ConfigurationError(f"depth_range {config.depth_range} is empty or below 1")
    if config.num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    if config.num_products < config.num_classes:
        raise ConfigurationError("num_products must be >= num_classes")
    if not 0.0 <= config.title_noise < 1.0:
        raise ConfigurationError("title_noise must lie in [0, 1)")
    if config.num_brands < 0 or not 0.0 <= config.brand_rate <= 1.0:
        raise ConfigurationError("num_brands must be >= 0 and brand_rate in [0, 1]")

    rng = np.random.default_rng(config.seed)
    words = _WordMaker(rng)

    def new_label() -> str:
        return f"{words.word(2).capitalize()} {words.word(int(rng.integers(2, 4))).capitalize()}"

    n_top = max(2, int(round(math.sqrt(config.num_classes) / 1.5)))
    if lo == 1:
        n_top = max(2, n_top)
    tops = [new_label() for _ in range(n_top)]
    children: dict[str, list[str]] = defaultdict(list)
    leaf_paths: list[tuple[str, ...]] = []
    for i in range(config.num_classes):
        depth = int(rng.integers(lo, hi + 1))
        if depth == 1:
            leaf_paths.append((new_label(),))
            continue
        path = [tops[i % n_top]]
        for _ in range(depth - 2):
            pool = children[path[-1]]
            if pool and rng.random() > 0.35:
                nxt = pool[int(rng.integers(len(pool)))]
            else:
                nxt = new_label()
                pool.append(nxt)
            path.append(nxt)
        path.append(new_label())
        leaf_paths.append(tuple(path))

    node_keywords: dict[str, list[str]] = {}
    for path in leaf_paths:
        for label in path:
            if label not in node_keywords:
                node_keywords[label] = [words.word(int(rng.integers(2, 4))) for _ in range(config.keywords_per_node)]
    filler = [words.word(2) for _ in range(config.filler_vocab // 2)]
    filler += [str(n) for n in range(1, config.filler_vocab - len(filler) + 1)]
    filler_p = 1.0 / np.arange(1, len(filler) + 1)
    filler_p /= filler_p.sum()
    brands = [(words.word(2), words.word(int(rng.integers(2, 4)))) for _ in range(config.num_brands)]
    units = ["oz", "pack", "of", "-", "x", "ml", "set", "new", "(", ")", ",", "/"]

    siblings: dict[tuple[str, ...], list[str]] = defaultdict(list)
    for path in leaf_paths:
        siblings[path[:-1]].append(path[-1])
    by_depth: dict[int, list[str]] = defaultdict(list)
    for path in leaf_paths:
        for depth, label in enumerate(path[1:-1], start=1):
            if label not in by_depth[depth]:
                by_depth[depth].append(label)

    order = rng.permutation(config.num_classes)
    sizes = leaf_sizes(config.num_classes, config.num_products, config.skew_exponent)
    assignments: list[tuple[str, ...]] = []
    for rank, leaf_idx in enumerate(order):
        assignments.extend([leaf_paths[leaf_idx]] * sizes[rank])
    assignments = [assignments[i] for i in rng.permutation(len(assignments))]

    noise = config.title_noise
    products = []
    for pid, path in enumerate(assignments):
        tokens: list[str] = []
        leaf = path[-1]
        for depth, label in enumerate(path[:-1]):
            if rng.random() < 0.7:
                others = [o for o in by_depth[depth] if o != label] if depth else []
                if others and rng.random() < noise / 2:
                    label = others[int(rng.integers(len(others)))]
                tokens.append(node_keywords[label][int(rng.integers(config.keywords_per_node))])
        leaf_kw = list(rng.choice(node_keywords[leaf], size=int(rng.integers(1, 3)), replace=False))
        sibs = [s for s in siblings[path[:-1]] if s != leaf]
        if sibs and rng.random() < noise:
            other = sibs[int(rng.integers(len(sibs)))]
            leaf_kw[0] = node_keywords[other][int(rng.integers(config.keywords_per_node))]
        tokens.extend(leaf_kw)
        n_filler = int(rng.poisson(1.0 + 6.0 * noise))
        tokens.extend(filler[i] for i in rng.choice(len(filler), size=n_filler, p=filler_p))
        if rng.random() < 0.5:
            tokens.extend([str(int(rng.integers(1, 48))), units[int(rng.integers(len(units)))]])
        tokens = [tokens[i] for i in rng.permutation(len(tokens))]
        if brands and rng.random() < config.brand_rate:
            tokens = [*brands[int(rng.integers(len(brands)))], *tokens]
        title = " ".join(t.capitalize() if rng.random() < 0.5 else t for t in tokens)
        products.append(make_product(pid, title, CategoryPath(path)))
    return products, _graph_from_products(products)
