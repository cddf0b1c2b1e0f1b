"""Per-window speaker decisions over whole meetings.

An identification sequence for window i with context c and candidate profiles
s_1..s_N is [x_{i-c}, ..., x_{i+c}, s_1, ..., s_N]; its label is the position
of the true speaker's profile. Two identifiers consume these sequences: the
cosine baseline (looks at x_i only) and the RMC classifier.
"""
from typing import List, Literal, NamedTuple, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import scipy.ndimage
from numpy.typing import ArrayLike, NDArray

from speakerid import logging
from speakerid.embedding import SpeakerProfile, cosine_distances
from speakerid.rmc import SpeakerClassifier, forward, forward_batch


# Either SpeakerProfile tuples or a (n, dim) matrix of profile vectors.
Profiles = Union[Sequence[SpeakerProfile], ArrayLike]


class IdentificationSequence(NamedTuple):
    elements: NDArray[np.float64]  # (2c + 1 + n_profiles, dim)
    n_profiles: int
    n_context: int
    label: Optional[int] = None
    window_index: int = 0
    meeting: str = ''

    @property
    def window(self) -> NDArray[np.float64]:
        """The window being identified (centre of the context)."""
        return self.elements[self.n_context]

    @property
    def context(self) -> NDArray[np.float64]:
        return self.elements[:2 * self.n_context + 1]

    @property
    def profiles(self) -> NDArray[np.float64]:
        return self.elements[2 * self.n_context + 1:]


class LabelTrajectory(NamedTuple):
    """Decisions for the windows of one meeting, ordered by start time.
    `posteriors` is (n, n_max) for the RMC identifier, distances are not kept."""
    meeting: str
    starts: NDArray[np.float64]
    ends: NDArray[np.float64]
    labels: NDArray[np.int64]
    posteriors: Optional[NDArray[np.float64]] = None


def _profile_matrix(profiles: Profiles) -> NDArray[np.float64]:
    if len(profiles) == 0:
        return np.zeros((0, 0))
    if isinstance(profiles[0], SpeakerProfile):
        return np.stack([profile.vector for profile in profiles])
    return np.asarray(profiles, dtype=np.float64).reshape(len(profiles), -1)


def build_sequence(windows: ArrayLike, i: int, c: int, profiles: Profiles, *, label: Optional[int] = None, meeting: str = '') -> IdentificationSequence:
    """Sequence for window `i` of `windows` (n, dim). Context positions that
    fall outside the meeting repeat the nearest window."""
    window_matrix = np.asarray(windows, dtype=np.float64)
    if not 0 <= i < len(window_matrix):
        raise IndexError(f'window index {i} out of range for {len(window_matrix)} windows')
    if c < 0:
        raise ValueError(f'context must be non-negative, got {c}')
    profile_matrix = _profile_matrix(profiles)
    if len(profile_matrix) == 0:
        raise ValueError('no speaker profiles to identify against')
    if profile_matrix.shape[1] != window_matrix.shape[1]:
        raise ValueError(f'profiles have dimension {profile_matrix.shape[1]}, windows have {window_matrix.shape[1]}')
    if label is not None and not 0 <= label < len(profile_matrix):
        raise ValueError(f'label {label} out of range for {len(profile_matrix)} profiles')

    positions = np.clip(np.arange(i - c, i + c + 1), 0, len(window_matrix) - 1)
    elements = np.concatenate([window_matrix[positions], profile_matrix])
    return IdentificationSequence(elements, len(profile_matrix), c, label, i, meeting)


def reorder_profiles(seq: IdentificationSequence, order: ArrayLike) -> IdentificationSequence:
    """New sequence whose k-th profile is the old `order[k]`-th profile. The
    label follows the true profile to its new position."""
    order = np.asarray(order)
    if sorted(order.tolist()) != list(range(seq.n_profiles)):
        raise ValueError(f'{order.tolist()} is not a permutation of {seq.n_profiles} profiles')
    elements = np.concatenate([seq.context, seq.profiles[order]])
    label = None if seq.label is None else int(np.flatnonzero(order == seq.label)[0])
    return seq._replace(elements=elements, label=label)


def permute_profiles(seq: IdentificationSequence, rng: np.random.Generator) -> IdentificationSequence:
    """Training augmentation: uniformly random profile order."""
    if seq.label is None:
        raise ValueError('cannot permute the profiles of an unlabelled sequence')
    return reorder_profiles(seq, rng.permutation(seq.n_profiles))


def identify_cosine(x: ArrayLike, profiles: Profiles) -> Tuple[int, NDArray[np.float64]]:
    """Closest profile by cosine distance; ties go to the lowest index."""
    matrix = _profile_matrix(profiles)
    if len(matrix) == 0:
        raise ValueError('no speaker profiles to identify against')
    distances = cosine_distances(x, matrix)
    return int(np.argmin(distances)), distances


def decide(posterior: ArrayLike, n_profiles: int) -> int:
    """Argmax over the first `n_profiles` positions; the remaining positions
    belong to absent speakers. Ties go to the lowest index."""
    return int(np.argmax(np.asarray(posterior)[:n_profiles]))


def identify_rmc(model: SpeakerClassifier, seq: IdentificationSequence) -> Tuple[int, NDArray[np.float64]]:
    if seq.n_profiles > model.config.n_max:
        raise ValueError(f'sequence has {seq.n_profiles} profiles, model handles at most {model.config.n_max}')
    posterior = forward(model, seq)
    return decide(posterior, seq.n_profiles), posterior


class Identifier(Protocol):
    """Anything that labels identification sequences. `context` is the number
    of neighbouring windows on each side it wants in its sequences."""
    name: str
    context: int

    def identify_sequences(self, sequences: Sequence[IdentificationSequence]) -> Tuple[NDArray[np.int64], Optional[NDArray[np.float64]]]:
        ...


class CosineIdentifier:
    """Baseline: closest profile to the centre window. Ignores context."""
    name = 'cosine'
    context = 0

    def identify_sequences(self, sequences: Sequence[IdentificationSequence]) -> Tuple[NDArray[np.int64], Optional[NDArray[np.float64]]]:
        labels = np.array([identify_cosine(seq.window, seq.profiles)[0] for seq in sequences], dtype=np.int64)
        return labels, None


class RmcIdentifier:
    """Trained classifier. Sequences are evaluated in batches of equal length."""
    name = 'rmc'

    def __init__(self, model: SpeakerClassifier, context: int = 0):
        self.model = model
        self.context = context

    def identify_sequences(self, sequences: Sequence[IdentificationSequence]) -> Tuple[NDArray[np.int64], Optional[NDArray[np.float64]]]:
        for seq in sequences:
            if seq.n_profiles > self.model.config.n_max:
                raise ValueError(f'sequence has {seq.n_profiles} profiles, model handles at most {self.model.config.n_max}')
        if not sequences:
            return np.zeros(0, dtype=np.int64), np.zeros((0, self.model.config.n_max))
        posteriors = forward_batch(self.model, sequences)
        labels = np.array([decide(p, seq.n_profiles) for p, seq in zip(posteriors, sequences)], dtype=np.int64)
        return labels, posteriors


@logging.trace
def identify_meeting(identifier: Identifier, meeting: str, times: ArrayLike, windows: ArrayLike, profiles: Profiles) -> LabelTrajectory:
    """Label every window of a meeting. `times` is (n, 2) start/end seconds,
    `windows` (n, dim), both in time order. Profiles are used in the order
    given."""
    time_array = np.asarray(times, dtype=np.float64).reshape(-1, 2)
    window_matrix = np.asarray(windows, dtype=np.float64)
    if len(time_array) != len(window_matrix):
        raise ValueError(f'{len(time_array)} window times for {len(window_matrix)} windows')
    if np.any(np.diff(time_array[:, 0]) < 0):
        raise ValueError(f'windows of meeting {meeting!r} are not ordered by start time')

    sequences = [
        build_sequence(window_matrix, i, identifier.context, profiles, meeting=meeting)
        for i in range(len(window_matrix))
    ]
    labels, posteriors = identifier.identify_sequences(sequences)
    logging.update(meeting=meeting, windows=len(sequences), system=identifier.name)
    return LabelTrajectory(meeting, time_array[:, 0].copy(), time_array[:, 1].copy(), labels, posteriors)


def _mode(values: NDArray[np.float64]) -> float:
    """Most frequent label in the window; ties go to the centre label if it is
    one of the most frequent, otherwise to the lowest label."""
    labels = values.astype(np.int64)
    counts = np.bincount(labels)
    best = np.flatnonzero(counts == counts.max())
    centre = labels[len(labels) // 2]
    return float(centre if centre in best else best[0])


def median_smooth(traj: LabelTrajectory, taps: int, *, method: Literal['median', 'mode'] = 'median') -> LabelTrajectory:
    """Replace every label by the median (or mode) of the `taps` labels
    centred on it, repeating the edge labels at both ends."""
    if taps < 1 or taps % 2 == 0:
        raise ValueError(f'taps must be a positive odd number, got {taps}')
    if taps == 1 or len(traj.labels) == 0:
        return traj
    labels = np.asarray(traj.labels, dtype=np.int64)
    if method == 'median':
        smoothed = scipy.ndimage.median_filter(labels, size=taps, mode='nearest')
    elif method == 'mode':
        smoothed = scipy.ndimage.generic_filter(labels.astype(np.float64), _mode, size=taps, mode='nearest').astype(np.int64)
    else:
        raise ValueError(f'unknown smoothing method: {method!r}')
    return traj._replace(labels=smoothed.astype(np.int64))


def trajectory_accuracy(traj: LabelTrajectory, truth: ArrayLike) -> float:
    """Fraction of windows whose label equals the true label."""
    truth_array = np.asarray(truth)
    if len(truth_array) != len(traj.labels):
        raise ValueError(f'{len(truth_array)} true labels for {len(traj.labels)} windows')
    if len(traj.labels) == 0:
        raise ValueError('accuracy of an empty trajectory is undefined')
    return float(np.mean(traj.labels == truth_array))
