"""Embedding back-end shared by every identifier: centering, LDA projection,
length normalisation, profile estimation and cosine distance.

Embeddings are 1-d float64 numpy arrays. Everything in here is a pure function
of its inputs; a fitted `ProjectionModel` is never modified.
"""
from typing import Iterable, List, NamedTuple, Sequence, Tuple

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray


Embedding = NDArray[np.float64]


class DegenerateEmbedding(ValueError):
    """Raised for zero-norm vectors, which have no direction to speak of."""


class DimensionMismatch(ValueError):
    pass


class SpeakerProfile(NamedTuple):
    speaker_id: str
    vector: Embedding


class ProjectionModel(NamedTuple):
    """Centering + LDA. `lda` has shape (d_out, d_in)."""
    mean: Embedding
    lda: NDArray[np.float64]

    @property
    def d_in(self) -> int:
        return self.lda.shape[1]

    @property
    def d_out(self) -> int:
        return self.lda.shape[0]


def as_embedding(v: ArrayLike) -> Embedding:
    vec = np.asarray(v, dtype=np.float64)
    if vec.ndim != 1:
        raise DimensionMismatch(f'expected a vector, got an array of shape {vec.shape}')
    if not np.all(np.isfinite(vec)):
        raise ValueError('embedding contains non-finite values')
    return vec


def length_normalize(v: ArrayLike) -> Embedding:
    vec = as_embedding(v)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise DegenerateEmbedding('degenerate embedding: zero norm')
    return vec / norm


def length_normalize_rows(m: ArrayLike) -> NDArray[np.float64]:
    """Row-wise `length_normalize` for a (n, d) matrix."""
    mat = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateEmbedding(f'degenerate embedding: zero norm in row {int(np.flatnonzero(norms.ravel() == 0.0)[0])}')
    return mat / norms


def mean_normalize(v: ArrayLike, mean: ArrayLike) -> Embedding:
    vec, mu = as_embedding(v), as_embedding(mean)
    if vec.shape != mu.shape:
        raise DimensionMismatch(f'embedding has dimension {vec.shape[0]}, mean has {mu.shape[0]}')
    return vec - mu


def cosine_distance(a: ArrayLike, b: ArrayLike) -> float:
    va, vb = as_embedding(a), as_embedding(b)
    if va.shape != vb.shape:
        raise DimensionMismatch(f'cannot compare dimension {va.shape[0]} with {vb.shape[0]}')
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise DegenerateEmbedding('degenerate embedding: zero norm')
    # Clip so rounding never takes us outside of [0, 2].
    return float(np.clip(1.0 - np.dot(va, vb) / (na * nb), 0.0, 2.0))


def cosine_distances(x: ArrayLike, profiles: ArrayLike) -> NDArray[np.float64]:
    """Distance from `x` to each row of `profiles`."""
    vx = length_normalize(x)
    rows = length_normalize_rows(profiles)
    if rows.shape[1] != vx.shape[0]:
        raise DimensionMismatch(f'cannot compare dimension {vx.shape[0]} with {rows.shape[1]}')
    return np.clip(1.0 - rows @ vx, 0.0, 2.0)


def _scatter(embeddings: NDArray[np.float64], labels: Sequence[str]) -> Tuple[NDArray, NDArray, NDArray, NDArray]:
    """Returns global mean, within-class, between-class and total scatter,
    each normalised by the number of samples."""
    mean = embeddings.mean(axis=0)
    d = embeddings.shape[1]
    s_w = np.zeros((d, d))
    s_b = np.zeros((d, d))
    label_array = np.asarray(labels)
    for label in sorted(set(labels)):
        members = embeddings[label_array == label]
        class_mean = members.mean(axis=0)
        centered = members - class_mean
        s_w += centered.T @ centered
        offset = (class_mean - mean)[:, None]
        s_b += len(members) * (offset @ offset.T)
    n = embeddings.shape[0]
    s_w /= n
    s_b /= n
    return mean, s_w, s_b, s_w + s_b


def _fix_signs(vectors: NDArray[np.float64]) -> NDArray[np.float64]:
    """Flip each column so that its largest-magnitude entry is positive, which
    makes eigenvector output deterministic."""
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def within_class_regularizer(s_w: NDArray[np.float64]) -> float:
    """Shrinkage added to the diagonal of the within-class scatter."""
    return 1e-4 * float(np.trace(s_w)) / s_w.shape[0]


def fit_lda(embeddings: Iterable[Tuple[ArrayLike, str]], d_out: int) -> ProjectionModel:
    """Fit centering + LDA on labelled embeddings.

    The first min(d_out, #classes - 1) rows are the leading generalised
    eigenvectors of (S_B, S_W + eps*I). When more rows are requested, the rest
    are principal directions of the total scatter inside the null space of
    the between-class scatter, so they still satisfy the
    eigen-equation (with eigenvalue 0). Rows are scaled to unit within-class
    variance.
    """
    pairs = list(embeddings)
    if not pairs:
        raise ValueError('no embeddings to fit LDA on')

    data = np.stack([as_embedding(v) for v, _ in pairs])
    labels = [speaker for _, speaker in pairs]
    d_in = data.shape[1]

    # Classes with a single sample carry no within-class information.
    counts = {label: labels.count(label) for label in set(labels)}
    keep = np.array([counts[label] >= 2 for label in labels])
    data = data[keep]
    labels = [label for label, kept in zip(labels, keep) if kept]
    n_classes = len(set(labels))

    if n_classes < 2:
        raise ValueError(f'LDA needs at least 2 speakers with 2 or more samples each, got {n_classes}')
    if not 1 <= d_out <= d_in:
        raise ValueError(f'd_out must be in [1, {d_in}], got {d_out}')

    mean, s_w, s_b, s_t = _scatter(data, labels)

    eps = within_class_regularizer(s_w)
    s_w_reg = s_w + eps * np.eye(d_in)

    evals = np.linalg.eigvalsh(s_w_reg)
    if evals.min() <= 0.0 or evals.min() < 1e-12 * evals.max():
        raise np.linalg.LinAlgError('within-class scatter is singular after regularisation')

    # Generalised problem S_B v = lambda S_W v; eigenvectors come back with
    # v^T S_W v = 1.
    n_lda = min(d_out, n_classes - 1)
    b_evals, b_evecs = scipy.linalg.eigh(s_b, s_w_reg)
    order = np.argsort(b_evals)[::-1]
    directions = b_evecs[:, order[:n_lda]]

    n_rest = d_out - n_lda
    if n_rest > 0:
        # Only look for the rest in the null space of the between-class scatter.
        null = b_evecs[:, order[n_classes - 1:]]
        t_evals, t_evecs = scipy.linalg.eigh(null.T @ s_t @ null)
        rest = null @ t_evecs[:, np.argsort(t_evals)[::-1][:n_rest]]
        directions = np.concatenate([directions, rest], axis=1)

    lda = _fix_signs(directions).T
    return ProjectionModel(mean=mean, lda=np.ascontiguousarray(lda))


def apply_projection(p: ProjectionModel, v: ArrayLike) -> Embedding:
    """mean-subtract, project, length-normalise"""
    centered = mean_normalize(v, p.mean)
    return length_normalize(p.lda @ centered)


def apply_projection_rows(p: ProjectionModel, m: ArrayLike) -> NDArray[np.float64]:
    mat = np.asarray(m, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[1] != p.d_in:
        raise DimensionMismatch(f'expected rows of dimension {p.d_in}, got array of shape {mat.shape}')
    return length_normalize_rows((mat - p.mean) @ p.lda.T)


def estimate_profile(speaker_id: str, windows: Sequence[ArrayLike]) -> SpeakerProfile:
    """Enrolment: length-normalised mean of a speaker's (already projected)
    window embeddings."""
    if len(windows) == 0:
        raise ValueError(f'no enrolment windows for speaker {speaker_id!r}')
    mat = np.stack([as_embedding(w) for w in windows])
    try:
        vector = length_normalize(mat.mean(axis=0))
    except DegenerateEmbedding:
        raise DegenerateEmbedding(f'degenerate embedding: enrolment windows of {speaker_id!r} average to zero')
    return SpeakerProfile(speaker_id, vector)


def estimate_profiles(windows: Iterable[Tuple[str, ArrayLike]]) -> List[SpeakerProfile]:
    """Profiles for every speaker in (speaker_id, embedding) pairs, in order of
    first appearance."""
    grouped: dict = {}
    for speaker, vector in windows:
        grouped.setdefault(speaker, []).append(vector)
    return [estimate_profile(speaker, vectors) for speaker, vectors in grouped.items()]


def check_unique(profiles: Sequence[SpeakerProfile]) -> None:
    seen = set()
    for profile in profiles:
        if profile.speaker_id in seen:
            raise ValueError(f'duplicate speaker profile: {profile.speaker_id!r}')
        seen.add(profile.speaker_id)
