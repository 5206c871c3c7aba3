"""Measurement machinery: size partitions, attention ratio, answer scoring,
and mean/CI aggregation.

Answer normalization reproduces the official VQA evaluation behaviour bit
for bit (see normalize_answer); scores computed here are comparable to
published numbers.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datatypes import BBox, ImportanceMap
from .errors import DegenerateInput, EmptyInput, OutOfBounds

SMALL_THRESHOLD = 0.005
LARGE_THRESHOLD = 0.05

PARTITIONS = ("small", "medium", "large")

RATIO_SPLITS = ("all", "correct", "incorrect")

# Guard for float noise when a window spans a whole axis: the number of
# one-cell placements is floor(cells - window + eps) + 1.
_PLACEMENT_EPS = 1e-9


def size_partition(gt_bbox: BBox, image_width: int, image_height: int) -> str:
    """Label a box by its area share S of the image: small / medium / large.

    S < 0.005 is small, 0.005 <= S < 0.05 medium, S >= 0.05 large.
    """
    if gt_bbox.w <= 0 or gt_bbox.h <= 0:
        raise DegenerateInput(f"bbox area must be positive, got {gt_bbox}")
    if image_width <= 0 or image_height <= 0:
        raise DegenerateInput(f"image area must be positive, got {image_width}x{image_height}")
    share = (gt_bbox.w * gt_bbox.h) / (image_width * image_height)
    if share < SMALL_THRESHOLD:
        return "small"
    if share < LARGE_THRESHOLD:
        return "medium"
    return "large"


def _overlap_weights(start: float, length: float, cells: int) -> np.ndarray:
    """Weight of each unit cell [j, j+1) overlapped by [start, start+length)."""
    j = np.arange(cells, dtype=np.float64)
    lo = np.maximum(j, start)
    hi = np.minimum(j + 1.0, start + length)
    return np.maximum(hi - lo, 0.0)


def attention_ratio(
    importance: ImportanceMap, gt_bbox: BBox, image_width: int, image_height: int
) -> float:
    """Mass inside the ground-truth box relative to same-size windows.

    The box is mapped to cell coordinates and its mass computed with
    fractional cell weights (pixel-overlap proportional). The denominator is
    the mean mass over every in-bounds placement of a same-size window at
    one-cell offsets. A zero denominator defines the ratio as 1.
    """
    if image_width <= 0 or image_height <= 0:
        raise OutOfBounds(f"image size must be positive, got {image_width}x{image_height}")
    if not gt_bbox.inside(image_width, image_height):
        raise OutOfBounds(f"bbox {gt_bbox} not inside {image_width}x{image_height} image")
    vals = importance.values
    rows, cols = vals.shape
    ox, oy = importance.origin

    # pixel box -> cell coordinates
    x0 = (gt_bbox.x - ox) / importance.patch_width
    y0 = (gt_bbox.y - oy) / importance.patch_height
    wc = gt_bbox.w / importance.patch_width
    hc = gt_bbox.h / importance.patch_height
    x0 = min(max(x0, 0.0), cols)
    y0 = min(max(y0, 0.0), rows)
    wc = min(wc, cols - x0)
    hc = min(hc, rows - y0)
    if wc <= 0 or hc <= 0:
        raise OutOfBounds(f"bbox {gt_bbox} covers no cells of the map")

    wx = _overlap_weights(x0, wc, cols)
    wy = _overlap_weights(y0, hc, rows)
    gt_sum = float(wy @ vals @ wx)

    n_x = int(np.floor(cols - wc + _PLACEMENT_EPS)) + 1
    n_y = int(np.floor(rows - hc + _PLACEMENT_EPS)) + 1
    # candidate windows at integer cell offsets, same fractional size
    wx_all = np.stack([_overlap_weights(float(o), wc, cols) for o in range(n_x)], axis=1)
    wy_all = np.stack([_overlap_weights(float(o), hc, rows) for o in range(n_y)], axis=1)
    sums = wy_all.T @ vals @ wx_all
    mean_sum = float(sums.mean())
    if mean_sum == 0.0:
        return 1.0
    return gt_sum / mean_sum


# --- answer normalization (official VQA evaluation behaviour) ---------------

_CONTRACTIONS = {
    "aint": "ain't", "arent": "aren't", "cant": "can't", "couldve": "could've",
    "couldnt": "couldn't", "couldnt've": "couldn't've", "couldn'tve": "couldn't've",
    "didnt": "didn't", "doesnt": "doesn't", "dont": "don't", "hadnt": "hadn't",
    "hadnt've": "hadn't've", "hadn'tve": "hadn't've", "hasnt": "hasn't",
    "havent": "haven't", "hed": "he'd", "hed've": "he'd've", "he'dve": "he'd've",
    "hes": "he's", "howd": "how'd", "howll": "how'll", "hows": "how's",
    "Id've": "I'd've", "I'dve": "I'd've", "Im": "I'm", "Ive": "I've",
    "isnt": "isn't", "itd": "it'd", "itd've": "it'd've", "it'dve": "it'd've",
    "itll": "it'll", "let's": "let's", "maam": "ma'am", "mightnt": "mightn't",
    "mightnt've": "mightn't've", "mightn'tve": "mightn't've", "mightve": "might've",
    "mustnt": "mustn't", "mustve": "must've", "neednt": "needn't",
    "notve": "not've", "oclock": "o'clock", "oughtnt": "oughtn't",
    "ow's'at": "'ow's'at", "'ows'at": "'ow's'at", "'ow'sat": "'ow's'at",
    "shant": "shan't", "shed've": "she'd've", "she'dve": "she'd've",
    "she's": "she's", "shouldve": "should've", "shouldnt": "shouldn't",
    "shouldnt've": "shouldn't've", "shouldn'tve": "shouldn't've",
    "somebody'd": "somebodyd", "somebodyd've": "somebody'd've",
    "somebody'dve": "somebody'd've", "somebodyll": "somebody'll",
    "somebodys": "somebody's", "someoned": "someone'd",
    "someoned've": "someone'd've", "someone'dve": "someone'd've",
    "someonell": "someone'll", "someones": "someone's", "somethingd": "something'd",
    "somethingd've": "something'd've", "something'dve": "something'd've",
    "somethingll": "something'll", "thats": "that's", "thered": "there'd",
    "thered've": "there'd've", "there'dve": "there'd've", "therere": "there're",
    "theres": "there's", "theyd": "they'd", "theyd've": "they'd've",
    "they'dve": "they'd've", "theyll": "they'll", "theyre": "they're",
    "theyve": "they've", "twas": "'twas", "wasnt": "wasn't",
    "wed've": "we'd've", "we'dve": "we'd've", "weve": "we've",
    "werent": "weren't", "whatll": "what'll", "whatre": "what're",
    "whats": "what's", "whatve": "what've", "whens": "when's",
    "whered": "where'd", "wheres": "where's", "whereve": "where've",
    "whod": "who'd", "whod've": "who'd've", "who'dve": "who'd've",
    "wholl": "who'll", "whos": "who's", "whove": "who've", "whyll": "why'll",
    "whyre": "why're", "whys": "why's", "wont": "won't", "wouldve": "would've",
    "wouldnt": "wouldn't", "wouldnt've": "wouldn't've",
    "wouldn'tve": "wouldn't've", "yall": "y'all", "yall'll": "y'all'll",
    "y'allll": "y'all'll", "yall'd've": "y'all'd've", "y'alld've": "y'all'd've",
    "y'all'dve": "y'all'd've", "youd": "you'd", "youd've": "you'd've",
    "you'dve": "you'd've", "youll": "you'll", "youre": "you're", "youve": "you've",
}

_NUMBER_WORDS = {
    "none": "0", "zero": "0", "one": "1", "two": "2", "three": "3", "four": "4",
    "five": "5", "six": "6", "seven": "7", "eight": "8", "nine": "9", "ten": "10",
}

_ARTICLES = frozenset({"a", "an", "the"})

# apostrophe deliberately absent: in-word apostrophes survive normalization
_PUNCT = [
    ";", "/", "[", "]", '"', "{", "}", "(", ")", "=", "+", "\\", "_", "-",
    ">", "<", "@", "`", ",", "?", "!",
]

_COMMA_BETWEEN_DIGITS = re.compile(r"(\d)(,)(\d)")
# The deployed evaluator's period rule reduces to: drop '.' unless a digit
# follows (its lookbehind is spelled as a lookahead and never fires).
_PERIOD = re.compile(r"\.(?!\d)")


def _process_punctuation(text: str) -> str:
    out = text
    for p in _PUNCT:
        if (p + " " in text or " " + p in text) or _COMMA_BETWEEN_DIGITS.search(text):
            out = out.replace(p, "")
        else:
            out = out.replace(p, " ")
    return _PERIOD.sub("", out)


def _process_digits_articles(text: str) -> str:
    words = []
    for word in text.lower().split():
        word = _NUMBER_WORDS.get(word, word)
        if word not in _ARTICLES:
            words.append(word)
    return " ".join(_CONTRACTIONS.get(w, w) for w in words)


def normalize_answer(text: str) -> str:
    """Official VQA answer normalization.

    Newlines and tabs become spaces and the result is stripped and
    lowercased; punctuation is removed (commas between digits and most
    marks vanish, a mark flanked by a space elsewhere in the string also
    vanishes, otherwise it becomes a space; periods are dropped unless a
    digit follows); number words none..ten map to digits; the articles
    a/an/the are dropped; contractions are canonicalized to their
    apostrophe form. In-word apostrophes are preserved throughout.
    """
    t = text.replace("\n", " ").replace("\t", " ").strip().lower()
    t = _process_punctuation(t)
    return _process_digits_articles(t)


def vqa_score(prediction: str, gt_answers: Sequence[str]) -> float:
    """min(matches / 3, 1) over the normalized ground-truth answers."""
    if not gt_answers:
        raise ValueError("gt_answers must be non-empty")
    p = normalize_answer(prediction)
    matches = sum(1 for a in gt_answers if normalize_answer(a) == p)
    return min(matches / 3.0, 1.0)


def exact_match(prediction: str, gt_answer: str) -> int:
    """1 iff the normalized strings are equal (GQA-style accuracy)."""
    return int(normalize_answer(prediction) == normalize_answer(gt_answer))


def mean_ci(values: Sequence[float]) -> tuple[float, float]:
    """Sample mean and 95% CI half-width (1.96 * sample std / sqrt(n))."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise EmptyInput("cannot aggregate an empty sample")
    mean = float(arr.mean())
    if arr.size == 1:
        return mean, 0.0
    half = 1.96 * float(arr.std(ddof=1)) / float(np.sqrt(arr.size))
    return mean, half


@dataclass(frozen=True)
class RatioStat:
    """Aggregated attention ratio for one layer pair and record split."""

    m: int
    k: int
    layer_index: int  # combined index l = m + k * L
    mean: float
    ci95_half_width: float
    n: int
    split: str

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.ci95_half_width < 0:
            raise ValueError(f"half width must be >= 0, got {self.ci95_half_width}")
        if self.split not in RATIO_SPLITS:
            raise ValueError(f"split must be one of {RATIO_SPLITS}, got {self.split!r}")

    def to_json_dict(self) -> dict:
        return {
            "m": self.m,
            "k": self.k,
            "layer_index": self.layer_index,
            "mean": self.mean,
            "ci95_half_width": self.ci95_half_width,
            "n": self.n,
            "split": self.split,
        }


def ratio_stats(
    ratios_by_layer: dict[tuple[int, int], list[float]],
    correct_ids_by_layer: dict[tuple[int, int], list[bool]],
    num_llm_layers: int,
) -> list[RatioStat]:
    """Fold per-record ratios into per-layer, per-split RatioStat rows.

    ratios_by_layer maps (m, k) to the per-record ratios in record order;
    correct_ids_by_layer gives the matching correctness flags (may be
    empty when no predictions exist, in which case only 'all' is emitted).
    """
    stats: list[RatioStat] = []
    for (m, k), ratios in sorted(ratios_by_layer.items(), key=lambda mk: (mk[0][1], mk[0][0])):
        flags = correct_ids_by_layer.get((m, k), [])
        subsets = {"all": ratios}
        if flags:
            subsets["correct"] = [r for r, ok in zip(ratios, flags) if ok]
            subsets["incorrect"] = [r for r, ok in zip(ratios, flags) if not ok]
        for split in RATIO_SPLITS:
            values = subsets.get(split)
            if not values:
                continue
            mean, half = mean_ci(values)
            stats.append(
                RatioStat(
                    m=m,
                    k=k,
                    layer_index=m + k * num_llm_layers,
                    mean=mean,
                    ci95_half_width=half,
                    n=len(values),
                    split=split,
                )
            )
    return stats


def write_ratio_tables(stats: Iterable[RatioStat], json_path: str | Path, csv_path: str | Path) -> None:
    rows = [s.to_json_dict() for s in stats]
    Path(json_path).write_text(
        json.dumps(rows, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    fields = ["m", "k", "layer_index", "mean", "ci95_half_width", "n", "split"]
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def summarize_scores(groups: dict[str, list[float]]) -> dict:
    """Per-group mean/n plus the overall aggregate, deterministic order."""
    table: dict = {"groups": {}, "overall": None}
    everything: list[float] = []
    for name in sorted(groups):
        values = groups[name]
        if not values:
            continue
        mean, half = mean_ci(values)
        table["groups"][name] = {"mean": mean, "ci95_half_width": half, "n": len(values)}
        everything.extend(values)
    if everything:
        mean, half = mean_ci(everything)
        table["overall"] = {"mean": mean, "ci95_half_width": half, "n": len(everything)}
    return table


def write_summary_tables(summary: dict, json_path: str | Path, csv_path: str | Path) -> None:
    Path(json_path).write_text(
        json.dumps(summary, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "mean", "ci95_half_width", "n"])
        for name, row in summary["groups"].items():
            writer.writerow([name, row["mean"], row["ci95_half_width"], row["n"]])
        if summary["overall"] is not None:
            o = summary["overall"]
            writer.writerow(["overall", o["mean"], o["ci95_half_width"], o["n"]])


def plot_ratio_curves(stats: Sequence[RatioStat], path: str | Path) -> None:
    """Layer-curve plot (mean with CI band) per split, written as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for split in RATIO_SPLITS:
        rows = sorted((s for s in stats if s.split == split), key=lambda s: s.layer_index)
        if not rows:
            continue
        xs = [s.layer_index for s in rows]
        means = np.array([s.mean for s in rows])
        halves = np.array([s.ci95_half_width for s in rows])
        ax.plot(xs, means, label=split)
        ax.fill_between(xs, means - halves, means + halves, alpha=0.2)
    ax.axhline(1.0, color="grey", linewidth=0.8, linestyle="--")
    ax.set_xlabel("combined layer index l = m + k*L")
    ax.set_ylabel("attention ratio")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_partition_bars(summary: dict, path: str | Path) -> None:
    """Bar chart of group means with CI whiskers, written as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(summary["groups"])
    means = [summary["groups"][n]["mean"] for n in names]
    halves = [summary["groups"][n]["ci95_half_width"] for n in names]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(names)), means, yerr=halves, capsize=3)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("mean score")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
