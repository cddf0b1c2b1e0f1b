"""Deterministic synthetic corpora.

Speakers are directions on the unit sphere; a window embedding is the
speaker's direction plus Gaussian noise, renormalised. Meetings are scripted
as alternating turns separated by short silences. An optional channel (a
fixed, well-conditioned linear map plus additive noise) distorts window
embeddings but never the enrolment draws, so profiles are always "clean".
"""
import math
from typing import Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator

from speakerid import config, logging
from speakerid._util import ThreadPool, derive_seed
from speakerid.embedding import DegenerateEmbedding, Embedding, SpeakerProfile, estimate_profile, length_normalize, length_normalize_rows
from speakerid.timeline import Segment, Timeline, make_timeline, merge_segments, window_segments
from speakerid.trainer import ExamplePool, Utterance


Segmentation = Literal['oraclespk', 'oraclevad']

ChannelPreset = Literal['clean', 'channel', 'channel+noise']


class SpeakerModel(NamedTuple):
    speaker_id: str
    mean: Embedding  # unit norm
    spread: float


class ChannelModel(NamedTuple):
    matrix: NDArray[np.float64]  # (d, d)
    noise: float

    def apply(self, v: Embedding, rng: np.random.Generator) -> Embedding:
        distorted = self.matrix @ v
        if self.noise > 0:
            distorted = distorted + self.noise * rng.standard_normal(len(v))
        return length_normalize(distorted)


def make_channel(d: int, rng: np.random.Generator, condition: float = 10.0, noise: float = 0.1) -> ChannelModel:
    """Symmetric positive definite map U diag(s) U^T with a random rotation U
    and s log-uniform in [1/condition, 1]. Directions are pulled towards the
    strong axes but never by more than a right angle."""
    if not 1.0 <= condition <= 100.0:
        raise ValueError(f'channel condition number must be in [1, 100], got {condition}')
    if noise < 0:
        raise ValueError(f'channel noise must be non-negative, got {noise}')
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    scales = np.exp(rng.uniform(-math.log(condition), 0.0, size=d))
    scales[0] = 1.0
    return ChannelModel((basis * scales) @ basis.T, noise)


def channel_preset(preset: ChannelPreset, d: int, rng: np.random.Generator, condition: float = 10.0, noise: float = 0.1) -> Optional[ChannelModel]:
    """clean: no channel. channel: linear map only. channel+noise: map plus
    additive noise."""
    if preset == 'clean':
        return None
    if preset == 'channel':
        return make_channel(d, rng, condition, 0.0)
    if preset == 'channel+noise':
        return make_channel(d, rng, condition, noise)
    raise ValueError(f'unknown channel preset: {preset!r}')


def make_roster(n: int, d: int, spread: float, rng: np.random.Generator, prefix: str = 'spk') -> List[SpeakerModel]:
    if n < 1 or d < 1:
        raise ValueError(f'need at least one speaker and one dimension, got n={n}, d={d}')
    if spread < 0:
        raise ValueError(f'spread must be non-negative, got {spread}')
    means = length_normalize_rows(rng.standard_normal((n, d)))
    return [SpeakerModel(f'{prefix}{i:04d}', mean, spread) for i, mean in enumerate(means)]


def split_roster(roster: Sequence[SpeakerModel], n_unseen: int) -> Tuple[List[SpeakerModel], List[SpeakerModel]]:
    """(training speakers, held-out speakers). The split is positional so it
    never shares ids."""
    if not 0 <= n_unseen < len(roster):
        raise ValueError(f'cannot hold out {n_unseen} of {len(roster)} speakers')
    cut = len(roster) - n_unseen
    return list(roster[:cut]), list(roster[cut:])


def sample_speaker_embedding(spk: SpeakerModel, rng: np.random.Generator) -> Embedding:
    for _ in range(2):
        draw = spk.mean + spk.spread * rng.standard_normal(len(spk.mean))
        norm = np.linalg.norm(draw)
        if norm > 0:
            return draw / norm
    raise DegenerateEmbedding(f'degenerate embedding: zero draw for speaker {spk.speaker_id!r}')


def sample_window(spk: SpeakerModel, channel: Optional[ChannelModel], rng: np.random.Generator) -> Embedding:
    clean = sample_speaker_embedding(spk, rng)
    return channel.apply(clean, rng) if channel is not None else clean


def enrolment_draws(spk: SpeakerModel, n: int, rng: np.random.Generator) -> NDArray[np.float64]:
    """`n` clean draws to estimate a profile from."""
    if n < 1:
        raise ValueError(f'need at least one enrolment draw, got {n}')
    return np.stack([sample_speaker_embedding(spk, rng) for _ in range(n)])


class MeetingParams(BaseModel):
    """Meeting script parameters. Durations in seconds."""
    model_config = ConfigDict(extra='forbid')

    speakers_per_meeting: int = Field(4, ge=2)
    turns: int = Field(20, ge=1)
    turn_range: Tuple[float, float] = (1.5, 12.0)
    silence_range: Tuple[float, float] = (0.05, 1.5)
    # Chance that a turn starts before the previous one ended, and by how much
    # at most.
    overlap_prob: float = Field(0.0, ge=0.0, le=1.0)
    overlap_max: float = Field(1.0, gt=0.0)

    @model_validator(mode='after')
    def check_ranges(self) -> 'MeetingParams':
        for name in ('turn_range', 'silence_range'):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f'{name} must satisfy 0 < min <= max, got {lo}, {hi}')
        return self


class MeetingScript(NamedTuple):
    """`gaps[k]` is the time between the end of turn k and the start of turn
    k + 1; a negative gap means turn k + 1 starts while turn k is running."""
    turns: List[Tuple[str, float]]
    gaps: List[float]


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(np.exp(rng.uniform(math.log(lo), math.log(hi))))


def make_script(speakers: Sequence[str], params: MeetingParams, rng: np.random.Generator) -> MeetingScript:
    """Turns alternate between different speakers of the roster."""
    if len(speakers) < 2:
        raise ValueError(f'a meeting needs at least 2 speakers, got {len(speakers)}')
    turns: List[Tuple[str, float]] = []
    gaps: List[float] = []
    previous = None
    prev_end = 0.0  # end of the turn before the current one
    cursor = 0.0
    for k in range(params.turns):
        choices = [speaker for speaker in speakers if speaker != previous]
        speaker = choices[int(rng.integers(len(choices)))]
        duration = _log_uniform(rng, *params.turn_range)
        if k > 0:
            gap = _log_uniform(rng, *params.silence_range)
            if params.overlap_prob > 0 and rng.random() < params.overlap_prob:
                # Never reach back past the previous turn's start or the turn
                # before that, so at most two speakers overlap and same-speaker
                # turns never do.
                last_start = cursor - turns[-1][1]
                limit = min(params.overlap_max, (cursor - max(prev_end, last_start)) / 2)
                if limit > 0:
                    gap = -float(rng.uniform(0.0, limit))
            gaps.append(gap)
            prev_end = cursor
            cursor += gap
        turns.append((speaker, duration))
        cursor += duration
        previous = speaker
    return MeetingScript(turns, gaps)


def script_timeline(meeting: str, script: MeetingScript) -> Timeline:
    segments = []
    cursor = 0.0
    for k, (speaker, duration) in enumerate(script.turns):
        if k > 0:
            cursor += script.gaps[k - 1]
        segments.append(Segment(cursor, cursor + duration, speaker))
        cursor += duration
    return make_timeline(meeting, segments)


class Meeting(NamedTuple):
    """A synthetic meeting. `speakers[i]` is the speaker covering most of
    window i. `profiles` are the enrolled participants, sorted by id, estimated
    from the clean draws in `enrolment`."""
    reference: Timeline
    times: NDArray[np.float64]  # (n, 2)
    windows: NDArray[np.float64]  # (n, d)
    speakers: List[str]
    profiles: List[SpeakerProfile]
    enrolment: Dict[str, NDArray[np.float64]]

    @property
    def meeting(self) -> str:
        return self.reference.meeting

    def truth(self) -> NDArray[np.int64]:
        """Index of each window's speaker among the profiles."""
        index = {profile.speaker_id: i for i, profile in enumerate(self.profiles)}
        return np.array([index[speaker] for speaker in self.speakers], dtype=np.int64)


def _speaker_weights(reference: Timeline, start: float, end: float) -> Dict[str, float]:
    weights: Dict[str, float] = {}
    for segment in reference.segments:
        covered = min(end, segment.end) - max(start, segment.start)
        if covered > 0 and segment.speaker is not None:
            weights[segment.speaker] = weights.get(segment.speaker, 0.0) + covered
    return weights


def generate_meeting(
        meeting: str,
        roster: Sequence[SpeakerModel],
        params: MeetingParams,
        rng: np.random.Generator,
        *,
        win: float = config.WINDOW_LENGTH,
        shift: float = config.WINDOW_SHIFT,
        channel: Optional[ChannelModel] = None,
        segmentation: Segmentation = 'oraclespk',
        gap: float = config.MERGE_GAP,
        enrol_draws: int = 8) -> Meeting:
    """Script a meeting among all of `roster`, cut windows and sample their
    embeddings, and enrol every participant from separate clean draws.

    With `oraclespk` windows are cut over the reference speaker segments. With
    `oraclevad` they are cut over the speech regions left after merging the
    reference with `gap`; a window that covers several speakers gets the
    overlap-weighted mix of their draws.
    """
    if len(roster) < 2:
        raise ValueError(f'a meeting needs at least 2 speakers, got {len(roster)}')
    models = {spk.speaker_id: spk for spk in roster}
    if len(models) != len(roster):
        raise ValueError('duplicate speaker ids in roster')

    script = make_script(sorted(models), params, rng)
    reference = script_timeline(meeting, script)

    if segmentation == 'oraclespk':
        regions = reference
    elif segmentation == 'oraclevad':
        regions = merge_segments(reference, gap)
    else:
        raise ValueError(f'unknown segmentation: {segmentation!r}')

    cuts = sorted(window_segments(regions, win, shift), key=lambda w: (w[0], w[1]))
    times = np.array([(start, end) for start, end, _ in cuts], dtype=np.float64).reshape(-1, 2)

    windows = []
    speakers = []
    for start, end, index in cuts:
        if segmentation == 'oraclespk':
            weights = {regions.segments[index].speaker: 1.0}
        else:
            weights = _speaker_weights(reference, start, end)
        mix = sum(weight * sample_speaker_embedding(models[speaker], rng) for speaker, weight in weights.items())
        clean = length_normalize(mix)
        windows.append(channel.apply(clean, rng) if channel is not None else clean)
        # First speaker in time wins ties.
        speakers.append(max(weights, key=weights.get))

    enrolment = {speaker: enrolment_draws(models[speaker], enrol_draws, rng) for speaker in sorted(models)}
    profiles = [estimate_profile(speaker, draws) for speaker, draws in enrolment.items()]
    dim = len(roster[0].mean)
    return Meeting(reference, times, np.array(windows).reshape(-1, dim), speakers, profiles, enrolment)


@logging.trace
def generate_meetings(
        roster: Sequence[SpeakerModel],
        count: int,
        params: MeetingParams,
        seed: int,
        *,
        prefix: str = 'meeting',
        workers: Optional[int] = None,
        **kwargs) -> List[Meeting]:
    """`count` meetings, each among `params.speakers_per_meeting` speakers
    drawn from `roster`. Meeting i only depends on (seed, prefix, i), so the
    result does not depend on `workers`."""
    if count == 0:
        return []
    if len(roster) < params.speakers_per_meeting:
        raise ValueError(f'roster of {len(roster)} speakers is too small for meetings of {params.speakers_per_meeting}')

    results: Dict[int, Meeting] = {}

    def worker(i: int) -> None:
        rng = np.random.default_rng(derive_seed(seed, prefix, i))
        chosen = sorted(rng.choice(len(roster), size=params.speakers_per_meeting, replace=False))
        results[i] = generate_meeting(f'{prefix}{i:03d}', [roster[k] for k in chosen], params, rng, **kwargs)

    with ThreadPool(max_workers=workers or config.THREADS) as pool:
        for i in range(count):
            pool.start(worker, i)
        pool.join()

    logging.update(meetings=count, seed=seed)
    return [results[i] for i in range(count)]


def generate_pool(
        roster: Sequence[SpeakerModel],
        utterances_per_speaker: int,
        windows_per_utterance: int,
        channel: Optional[ChannelModel],
        rng: np.random.Generator,
        enrol_draws: int = 8) -> ExamplePool:
    """Training pool: per speaker, a clean profile and a number of short
    utterances of (possibly channel-distorted) windows."""
    if utterances_per_speaker < 1 or windows_per_utterance < 1:
        raise ValueError(f'need at least one utterance of one window per speaker, got {utterances_per_speaker} x {windows_per_utterance}')
    if len({spk.speaker_id for spk in roster}) != len(roster):
        raise ValueError('duplicate speaker ids in roster')

    profiles = {}
    enrolment = {}
    utterances = []
    for spk in roster:
        enrolment[spk.speaker_id] = enrolment_draws(spk, enrol_draws, rng)
        profiles[spk.speaker_id] = estimate_profile(spk.speaker_id, enrolment[spk.speaker_id]).vector
        for _ in range(utterances_per_speaker):
            windows = np.stack([sample_window(spk, channel, rng) for _ in range(windows_per_utterance)])
            utterances.append(Utterance(spk.speaker_id, windows))
    return ExamplePool(utterances, profiles, enrolment)
