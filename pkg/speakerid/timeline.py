"""Speech timelines and scoring.

Times are seconds from the start of the meeting. `Timeline` is the plain
form the file readers and writers use; interval algebra and scoring go
through pyannote.core annotations, where each speaker's overlapping or
touching segments are first merged into turns.
"""
from typing import Iterable, Iterator, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np
from numpy.typing import NDArray
from pyannote import core
from pyannote.metrics.identification import IdentificationErrorRate

from speakerid.identification import LabelTrajectory


class TimelineError(ValueError):
    pass


class UndefinedScore(ValueError):
    """Raised when nothing is left to score, e.g. everything fell in collars."""


class Segment(NamedTuple):
    start: float
    end: float
    speaker: Optional[str] = None

    @property
    def duration(self) -> float:
        return self.end - self.start


class Timeline(NamedTuple):
    meeting: str
    segments: List[Segment]


def check_segment(segment: Segment) -> None:
    if not (np.isfinite(segment.start) and np.isfinite(segment.end)):
        raise TimelineError(f'segment {segment} has non-finite times')
    if segment.start < 0:
        raise TimelineError(f'segment {segment} starts before 0')
    if segment.end <= segment.start:
        raise TimelineError(f'segment {segment} does not end after it starts')


def make_timeline(meeting: str, segments: Iterable[Segment]) -> Timeline:
    """Validated timeline with segments sorted by (start, end)."""
    ordered = sorted((Segment(float(s.start), float(s.end), s.speaker) for s in segments), key=lambda s: (s.start, s.end))
    for segment in ordered:
        check_segment(segment)
    return Timeline(meeting, ordered)


def check_sorted(timeline: Timeline) -> None:
    for prev, curr in zip(timeline.segments, timeline.segments[1:]):
        if curr.start < prev.start:
            raise TimelineError(f'timeline {timeline.meeting!r} is not sorted: {curr} after {prev}')


def to_annotation(timeline: Timeline) -> core.Annotation:
    """Speaker turns of `timeline`. Segments without a speaker are left out."""
    annotation = core.Annotation(uri=timeline.meeting)
    for track, segment in enumerate(timeline.segments):
        if segment.speaker is not None:
            annotation[core.Segment(segment.start, segment.end), track] = segment.speaker
    return annotation.support()


def _span_timeline(timeline: Timeline) -> core.Timeline:
    return core.Timeline([core.Segment(s.start, s.end) for s in timeline.segments], uri=timeline.meeting)


def merge_segments(timeline: Timeline, gap: float) -> Timeline:
    """Merge segments separated by less than `gap` seconds of silence
    (strictly less). Touching and overlapping segments always merge. A merged
    segment keeps the speaker only when all of its parts agree."""
    if gap < 0:
        raise TimelineError(f'gap must be non-negative, got {gap}')
    check_sorted(timeline)

    merged: List[Segment] = []
    for region in _span_timeline(timeline).support(collar=gap):
        speakers = {s.speaker for s in timeline.segments if region.start <= s.start and s.end <= region.end}
        speaker = speakers.pop() if len(speakers) == 1 else None
        merged.append(Segment(region.start, region.end, speaker))
    return Timeline(timeline.meeting, merged)


def window_segments(timeline: Timeline, win: float, shift: float) -> List[Tuple[float, float, int]]:
    """Sliding analysis windows as (start, end, segment index).

    A segment no longer than `win` becomes one window. Longer segments get
    windows every `shift` seconds; if more than shift/2 of the segment is left
    uncovered a last window is placed flush with the segment end, otherwise
    the last regular window is stretched to the end.
    """
    if win <= 0 or shift <= 0 or shift > win:
        raise TimelineError(f'need win > 0 and 0 < shift <= win, got win={win}, shift={shift}')

    windows: List[Tuple[float, float, int]] = []
    for index, segment in enumerate(timeline.segments):
        length = segment.duration
        if length <= win:
            windows.append((segment.start, segment.end, index))
            continue

        # Small tolerance so that e.g. (3.0 - 1.5) / 0.75 counts as 2 steps.
        steps = int(np.floor((length - win) / shift + 1e-9))
        current = [(segment.start + k * shift, segment.start + k * shift + win) for k in range(steps + 1)]
        tail = segment.end - current[-1][1]
        if tail > shift / 2:
            current.append((segment.end - win, segment.end))
        elif tail > 0:
            current[-1] = (current[-1][0], segment.end)
        windows.extend((start, end, index) for start, end in current)
    return windows


def _cut_points(*groups: Iterable[float]) -> NDArray[np.float64]:
    return np.unique(np.fromiter((p for group in groups for p in group), dtype=np.float64))


def trajectory_to_segments(traj: LabelTrajectory, speakers: Sequence[str]) -> Timeline:
    """Turn per-window labels into speaker segments. Each instant covered by
    one or more windows gets the label of the covering window whose centre is
    nearest (the earlier window on ties), so overlapping windows hand over at
    the midpoint of their centres. Touching pieces with the same label merge.
    """
    if len(traj.labels) == 0:
        return Timeline(traj.meeting, [])

    starts = np.asarray(traj.starts, dtype=np.float64)
    ends = np.asarray(traj.ends, dtype=np.float64)
    centres = (starts + ends) / 2
    for label in traj.labels:
        if not 0 <= label < len(speakers):
            raise TimelineError(f'label {label} has no speaker among {len(speakers)} profiles')

    # Hand-over points between every pair of overlapping windows.
    overlapping = np.triu((starts[:, None] < ends[None, :]) & (starts[None, :] < ends[:, None]), k=1)
    first, second = np.nonzero(overlapping)
    handovers = (centres[first] + centres[second]) / 2

    points = _cut_points(starts, ends, handovers)
    pieces: List[Segment] = []
    for a, b in zip(points, points[1:]):
        mid = (a + b) / 2
        covering = np.flatnonzero((starts < mid) & (mid < ends))
        if len(covering) == 0:
            continue
        nearest = covering[np.argmin(np.abs(centres[covering] - mid))]
        speaker = speakers[int(traj.labels[nearest])]
        if pieces and pieces[-1].speaker == speaker and abs(pieces[-1].end - a) < 1e-9:
            pieces[-1] = Segment(pieces[-1].start, float(b), speaker)
        else:
            pieces.append(Segment(float(a), float(b), speaker))
    return Timeline(traj.meeting, pieces)


class MeetingScore(NamedTuple):
    meeting: str
    scored_time: float
    speaker_error_time: float

    @property
    def ser(self) -> float:
        if self.scored_time <= 0:
            raise UndefinedScore(f'no scored speech in meeting {self.meeting!r}')
        return self.speaker_error_time / self.scored_time


class ScoreReport(NamedTuple):
    """Totals are summed times, so combining meetings does not depend on their
    order."""
    scored_time: float
    speaker_error_time: float
    meetings: List[MeetingScore]

    @property
    def ser(self) -> float:
        if self.scored_time <= 0:
            raise UndefinedScore('speaker error rate is undefined: no scored speech')
        return self.speaker_error_time / self.scored_time

    @classmethod
    def combine(cls, scores: Iterable[MeetingScore]) -> 'ScoreReport':
        meetings = sorted(scores, key=lambda score: score.meeting)
        return cls(
            scored_time=sum(score.scored_time for score in meetings),
            speaker_error_time=sum(score.speaker_error_time for score in meetings),
            meetings=meetings)

    def records(self) -> Iterator[dict]:
        for score in self.meetings:
            yield {
                'meeting': score.meeting,
                'scored_time': score.scored_time,
                'speaker_error_time': score.speaker_error_time,
                'ser': score.ser if score.scored_time > 0 else None,
            }
        yield {
            'meeting': 'ALL',
            'scored_time': self.scored_time,
            'speaker_error_time': self.speaker_error_time,
            'ser': self.ser if self.scored_time > 0 else None,
        }

    def table(self) -> str:
        rows = [('meeting', 'scored (s)', 'error (s)', 'SER (%)')]
        for record in self.records():
            ser = '-' if record['ser'] is None else f"{100 * record['ser']:.2f}"
            rows.append((record['meeting'], f"{record['scored_time']:.2f}", f"{record['speaker_error_time']:.2f}", ser))
        widths = [max(len(row[col]) for row in rows) for col in range(4)]
        return '\n'.join(
            '  '.join(cell.ljust(width) if col == 0 else cell.rjust(width) for col, (cell, width) in enumerate(zip(row, widths)))
            for row in rows)


def score_meeting(reference: Timeline, hypothesis: Timeline, collar: float, exclude_overlap: bool) -> MeetingScore:
    """Scored reference time and speaker error time for one meeting.

    Scored: reference speech, minus `collar` seconds on both sides of every
    boundary of a reference speaker turn, minus (if `exclude_overlap`) the
    time where two or more reference speakers talk at once. Overlapped speech
    that is scored counts once per reference speaker. Error: scored speaker
    time not matched by the same hypothesis speaker, whether another speaker
    was hypothesised or none.
    """
    if collar < 0:
        raise TimelineError(f'collar must be non-negative, got {collar}')
    for segment in reference.segments:
        check_segment(segment)
        if segment.speaker is None:
            raise TimelineError(f'reference segment {segment} of {reference.meeting!r} has no speaker')
    if not reference.segments:
        return MeetingScore(reference.meeting, 0.0, 0.0)

    ref = to_annotation(reference)
    hyp = to_annotation(Timeline(reference.meeting, hypothesis.segments))
    # Hypothesis speech outside the reference extent is not scored.
    uem = core.Timeline([ref.get_timeline().extent()], uri=reference.meeting)
    metric = IdentificationErrorRate(collar=2 * collar, skip_overlap=exclude_overlap)
    detail = metric.compute_components(ref, hyp, uem=uem)
    return MeetingScore(
        reference.meeting,
        float(detail['total']),
        float(detail['confusion'] + detail['missed detection']))


def compute_ser(reference: Timeline, hypothesis: Timeline, collar: float, exclude_overlap: bool) -> ScoreReport:
    return ScoreReport.combine([score_meeting(reference, hypothesis, collar, exclude_overlap)])


def score_meetings(pairs: Iterable[Tuple[Timeline, Timeline]], collar: float, exclude_overlap: bool) -> ScoreReport:
    """Score (reference, hypothesis) pairs of several meetings at once."""
    return ScoreReport.combine(score_meeting(ref, hyp, collar, exclude_overlap) for ref, hyp in pairs)


def speaker_at(reference: Timeline, t: float) -> str:
    """Reference speaker talking at `t`, the earliest-starting one if several."""
    for segment in reference.segments:
        if segment.start <= t < segment.end and segment.speaker is not None:
            return segment.speaker
    raise TimelineError(f'time {t:.3f} of {reference.meeting!r} is outside reference speech')


def window_accuracy(traj: LabelTrajectory, reference: Timeline, speakers: Sequence[str]) -> float:
    """Fraction of windows whose label names the reference speaker at the
    window centre."""
    if len(traj.labels) == 0:
        raise TimelineError('window accuracy of an empty trajectory is undefined')
    correct = 0
    for start, end, label in zip(traj.starts, traj.ends, traj.labels):
        if speakers[int(label)] == speaker_at(reference, (start + end) / 2):
            correct += 1
    return correct / len(traj.labels)


def speech_time(timeline: Timeline) -> float:
    """Duration of the union of all segments."""
    return float(_span_timeline(timeline).support().duration())


def overlap_fraction(reference: Timeline) -> float:
    """Share of speech time during which two or more speakers are active."""
    speech = speech_time(reference)
    if speech <= 0:
        return 0.0
    return float(to_annotation(reference).get_overlap().duration() / speech)


def speaker_changes_per_minute(reference: Timeline) -> float:
    """Number of times consecutive segments (by start time) change speaker,
    per minute of speech."""
    ordered = sorted(reference.segments, key=lambda s: (s.start, s.end))
    changes = sum(1 for prev, curr in zip(ordered, ordered[1:]) if prev.speaker != curr.speaker)
    minutes = speech_time(reference) / 60
    return changes / minutes if minutes > 0 else 0.0


def speakers_of(timeline: Timeline) -> Set[str]:
    return {segment.speaker for segment in timeline.segments if segment.speaker is not None}
