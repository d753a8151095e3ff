"""Listening-test statistics, objective proxies, and latent-space analysis.

Pure functions throughout: rating aggregation with confidence intervals,
relative gap closures between anchor systems, style-confusion matrices,
mel-cepstral distortion, embedding cosine similarity, 2D projection of
latents, and cluster purity.
"""

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.fft
import scipy.stats

from .errors import (
    DegenerateGap,
    DegenerateInput,
    InsufficientData,
    InvalidInput,
    MalformedScreen,
)
from .spkemb import embed_utterance

CI_Z = 1.96
MCD_COEFF_LO = 1
MCD_COEFF_HI = 13


@dataclass
class RatingScreen:
    """One listener's scores for all systems on one stimulus."""

    screen_id: str
    listener_id: str
    scores: dict

    def __post_init__(self):
        for system, score in self.scores.items():
            score = float(score)
            if not (0.0 <= score <= 100.0):
                raise InvalidInput(
                    f"score for {system!r} on screen {self.screen_id!r} "
                    f"is {score}, outside [0, 100]")
            self.scores[system] = score


@dataclass
class RatingSet:
    screens: list = field(default_factory=list)

    def scores_for(self, system):
        out = []
        for screen in self.screens:
            if system in screen.scores:
                out.append(screen.scores[system])
        return out


def load_ratings_csv(path) -> RatingSet:
    """Read screens from a CSV with screen_id, listener_id, system, score.

    Raises MalformedScreen when one screen scores a system twice.
    """
    grouped = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"screen_id", "listener_id", "system", "score"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise InvalidInput(
                f"ratings CSV needs columns {sorted(required)}, "
                f"got {reader.fieldnames}")
        for row in reader:
            key = (row["screen_id"], row["listener_id"])
            scores = grouped.setdefault(key, {})
            if row["system"] in scores:
                raise MalformedScreen(
                    f"screen {key[0]!r} listener {key[1]!r} scores "
                    f"{row['system']!r} twice")
            scores[row["system"]] = float(row["score"])
    screens = [RatingScreen(screen_id=k[0], listener_id=k[1], scores=v)
               for k, v in sorted(grouped.items())]
    return RatingSet(screens=screens)


def mushra_mean_ci(ratings: RatingSet, system):
    """Mean score and 95% confidence half-width for one system.

    Normal approximation: ci95 = 1.96 * s / sqrt(n) with the n-1 sample
    standard deviation.
    """
    scores = np.asarray(ratings.scores_for(system), dtype=np.float64)
    if scores.size < 2:
        raise InsufficientData(
            f"system {system!r} has {scores.size} ratings, need >= 2")
    mean = float(scores.mean())
    ci95 = float(CI_Z * scores.std(ddof=1) / np.sqrt(scores.size))
    return mean, ci95


def relative_gap_closure(lower, upper, system) -> float:
    """Percent of the lower-to-upper gap covered by the system.

    100 * (system - lower) / (upper - lower); can exceed 100 when the
    system lands beyond the upper anchor.
    """
    lower, upper, system = float(lower), float(upper), float(system)
    if upper == lower:
        raise DegenerateGap("upper and lower anchors are equal")
    return 100.0 * (system - lower) / (upper - lower)


def aggregate_gap_closures(rows) -> float:
    """Mean closure over (lower, upper, system) rows."""
    rows = list(rows)
    if not rows:
        raise InvalidInput("cannot aggregate zero rows")
    return float(np.mean([relative_gap_closure(*row) for row in rows]))


def reference_anchored_gain(neutral, augmented, reference=100.0) -> float:
    """Gap to the reference anchor closed by the augmented system."""
    neutral, augmented = float(neutral), float(augmented)
    if neutral == reference:
        raise DegenerateGap("neutral equals the reference anchor")
    if neutral > reference:
        raise InvalidInput(
            f"neutral ({neutral}) must lie below the reference "
            f"({reference})")
    return 100.0 * (augmented - neutral) / (reference - neutral)


@dataclass
class ConfusionResult:
    """Column-stochastic perceived-style matrix in percent."""

    matrix: np.ndarray
    systems: list
    references: list
    ambiguous_screens: list


def confusion_from_ratings(grouped) -> ConfusionResult:
    """Perceived-style confusion from per-reference rating screens.

    Parameters
    ----------
    grouped : dict mapping reference label to RatingSet (or screen list)
        Every screen must score every system that appears in its group's
        first screen; the argmax system is the perceived style, ties
        split their mass equally and flag the screen as ambiguous.

    Returns
    -------
    ConfusionResult with columns (one per reference) summing to 100.
    """
    references = sorted(grouped)
    if not references:
        raise InvalidInput("no reference groups given")
    systems = None
    for ref in references:
        screens = getattr(grouped[ref], "screens", grouped[ref])
        for screen in screens:
            keys = sorted(screen.scores)
            if systems is None:
                systems = keys
            elif keys != systems:
                raise MalformedScreen(
                    f"screen {screen.screen_id!r} rates {keys}, "
                    f"expected {systems}")
    if not systems:
        raise InvalidInput("no screens in any reference group")

    matrix = np.zeros((len(systems), len(references)))
    ambiguous = []
    for j, ref in enumerate(references):
        screens = getattr(grouped[ref], "screens", grouped[ref])
        if not screens:
            raise InvalidInput(f"reference {ref!r} has no screens")
        for screen in screens:
            scores = np.array([screen.scores[s] for s in systems])
            winners = np.nonzero(scores == scores.max())[0]
            if winners.size > 1:
                ambiguous.append((ref, screen.screen_id, screen.listener_id))
            matrix[winners, j] += 1.0 / winners.size
        matrix[:, j] *= 100.0 / len(screens)
    return ConfusionResult(matrix=matrix, systems=systems,
                           references=references,
                           ambiguous_screens=ambiguous)


def mel_cepstral_distortion(a, b) -> float:
    """Cepstral distance in dB between two equal-length log-mel sequences.

    (10 / ln 10) * sqrt(2) * mean over frames of the L2 norm of the
    difference in DCT coefficients 1..12.
    """
    fa = np.asarray(getattr(a, "frames", a), dtype=np.float64)
    fb = np.asarray(getattr(b, "frames", b), dtype=np.float64)
    if fa.shape != fb.shape:
        raise InvalidInput(
            f"mel shapes disagree: {fa.shape} vs {fb.shape}")
    ca = scipy.fft.dct(fa, type=2, norm="ortho", axis=1)
    cb = scipy.fft.dct(fb, type=2, norm="ortho", axis=1)
    diff = ca[:, MCD_COEFF_LO:MCD_COEFF_HI] - cb[:, MCD_COEFF_LO:MCD_COEFF_HI]
    dist = np.linalg.norm(diff, axis=1).mean()
    return float((10.0 / np.log(10.0)) * np.sqrt(2.0) * dist)


def speaker_similarity(encoder, a, b) -> float:
    """Cosine similarity of the two utterances' speaker embeddings."""
    ea = embed_utterance(encoder, a).vector
    eb = embed_utterance(encoder, b).vector
    return float(np.clip(ea @ eb, -1.0, 1.0))


def _pca_2d(x):
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    # deterministic sign: largest-magnitude loading positive
    for row in components:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    return centered @ components.T, components


def latent_projection_2d(z_vectors, labels, centroids=None, path=None,
                         method="pca", seed=0):
    """Project latent vectors to 2D; optionally write a labeled SVG plot.

    PCA (default) is deterministic; the neighbor-embedding alternative
    (method="tsne") is seeded.  Centroids, given as {label: vector},
    are projected with the same transform and drawn as markers.

    Returns
    -------
    (coords, centroid_coords): (N, 2) array and {label: (2,) array}.
    """
    x = np.asarray(z_vectors, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInput("z_vectors must be 2-D (n_vectors, dim)")
    labels = list(labels)
    if len(labels) != x.shape[0]:
        raise InvalidInput("labels and z_vectors disagree in length")
    if np.unique(x, axis=0).shape[0] < 2:
        raise DegenerateInput("need at least 2 distinct vectors")

    if method == "pca":
        coords, components = _pca_2d(x)
        mean = x.mean(axis=0)
        centroid_coords = {
            label: (np.asarray(vec, dtype=np.float64) - mean) @ components.T
            for label, vec in (centroids or {}).items()
        }
    elif method == "tsne":
        from sklearn.manifold import TSNE
        extra = [np.asarray(v, dtype=np.float64)
                 for v in (centroids or {}).values()]
        stacked = np.vstack([x] + extra) if extra else x
        perplexity = min(30.0, max(2.0, (stacked.shape[0] - 1) / 3.0))
        coords_all = TSNE(n_components=2, random_state=seed, init="pca",
                          perplexity=perplexity).fit_transform(stacked)
        coords = coords_all[:x.shape[0]]
        centroid_coords = {
            label: coords_all[x.shape[0] + i]
            for i, label in enumerate((centroids or {}))
        }
    else:
        raise InvalidInput(f"unknown projection method {method!r}")

    if path is not None:
        _write_projection_svg(coords, labels, centroid_coords, path)
    return coords, centroid_coords


def _write_projection_svg(coords, labels, centroid_coords, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "styleforge"
    fig, ax = plt.subplots(figsize=(6, 5))
    order = sorted(set(labels))
    cmap = plt.get_cmap("tab10")
    for i, label in enumerate(order):
        mask = np.array([l == label for l in labels])
        ax.scatter(coords[mask, 0], coords[mask, 1], s=14,
                   color=cmap(i % 10), label=label, alpha=0.75)
    for i, (label, xy) in enumerate(sorted(centroid_coords.items())):
        ax.scatter([xy[0]], [xy[1]], marker="X", s=160, edgecolor="black",
                   color=cmap(order.index(label) % 10
                              if label in order else i % 10),
                   linewidths=1.2, zorder=5)
    ax.legend(loc="best", fontsize=8)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cluster_purity(z_vectors, labels, k: Optional[int] = None,
                   seed: int = 0) -> float:
    """Purity of seeded k-means clusters against the given labels."""
    from sklearn.cluster import KMeans

    x = np.asarray(z_vectors, dtype=np.float64)
    labels = np.asarray(list(labels))
    if k is None:
        k = np.unique(labels).size
    if x.shape[0] < k:
        raise InvalidInput(f"need at least k={k} vectors, got {x.shape[0]}")
    if k < 2:
        return 1.0
    assignments = KMeans(n_clusters=k, random_state=seed,
                         n_init=10).fit_predict(x)
    total = 0
    for cluster in range(k):
        members = labels[assignments == cluster]
        if members.size:
            _, counts = np.unique(members, return_counts=True)
            total += counts.max()
    return float(total / labels.size)


def significance_test(ratings: RatingSet, systems):
    """Paired two-sided t-tests between system pairs, Holm corrected.

    Returns {(a, b): corrected p-value} for every unordered pair; scores
    are paired per screen, and screens missing either system are dropped.
    """
    systems = list(systems)
    if len(systems) < 2:
        raise InvalidInput("need at least 2 systems to compare")
    raw = {}
    for i, a in enumerate(systems):
        for b in systems[i + 1:]:
            xs, ys = [], []
            for screen in ratings.screens:
                if a in screen.scores and b in screen.scores:
                    xs.append(screen.scores[a])
                    ys.append(screen.scores[b])
            if len(xs) < 2:
                raise InsufficientData(
                    f"fewer than 2 paired screens for {a!r} vs {b!r}")
            raw[(a, b)] = float(scipy.stats.ttest_rel(xs, ys).pvalue)
    pairs = sorted(raw, key=lambda p: raw[p])
    m = len(pairs)
    corrected = {}
    running = 0.0
    for rank, pair in enumerate(pairs):
        running = max(running, min(1.0, (m - rank) * raw[pair]))
        corrected[pair] = running
    return corrected
