"""Desk-scale experiments on synthetic corpora.

Each benchmark returns a `BenchmarkResult`: a few rows of numbers plus a
verdict on the property it checks. Defaults are sized to run on a CPU in
minutes; every size is a keyword argument.
"""
import math
import statistics
from typing import Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from speakerid import logging
from speakerid._util import derive_seed
from speakerid.identification import CosineIdentifier, IdentificationSequence, Identifier, LabelTrajectory, RmcIdentifier, build_sequence, identify_meeting, median_smooth, trajectory_accuracy
from speakerid.rmc import RmcConfig, SpeakerClassifier, build_model, match_parameter_budget, parameter_count
from speakerid.synth import ChannelPreset, Meeting, MeetingParams, channel_preset, generate_meetings, generate_pool, make_roster, split_roster
from speakerid.timeline import ScoreReport, score_meeting, score_meetings, trajectory_to_segments
from speakerid.trainer import ExamplePool, TrainingConfig, evaluate, make_training_examples, train


class BenchmarkResult(NamedTuple):
    name: str
    rows: List[dict]
    passed: bool
    summary: str

    def table(self) -> str:
        if not self.rows:
            return f'{self.name}: {self.summary}'
        columns = list(self.rows[0])
        cells = [columns] + [[_format(row[col]) for col in columns] for row in self.rows]
        widths = [max(len(line[i]) for line in cells) for i in range(len(columns))]
        lines = ['  '.join(cell.rjust(width) for cell, width in zip(line, widths)) for line in cells]
        verdict = 'PASS' if self.passed else 'FAIL'
        return '\n'.join(lines + [f'{self.name}: {verdict} ({self.summary})'])


def _format(value) -> str:
    if isinstance(value, float):
        return f'{value:.4f}'
    return str(value)


class Corpus(NamedTuple):
    pool: ExamplePool
    meetings: List[Meeting]


def make_corpus(
        seed: int,
        *,
        dim: int = 32,
        spread: float = 0.3,
        train_speakers: int = 500,
        unseen_speakers: int = 50,
        utterances_per_speaker: int = 4,
        windows_per_utterance: int = 5,
        eval_meetings: int = 10,
        eval_speakers: str = 'unseen',
        channel: ChannelPreset = 'channel+noise',
        channel_condition: float = 10.0,
        meeting: Optional[MeetingParams] = None) -> Corpus:
    """Training pool and evaluation meetings. The same channel distorts pool
    and meeting windows; profiles are always clean."""
    rng = np.random.default_rng(derive_seed(seed, 'roster'))
    roster = make_roster(train_speakers + unseen_speakers, dim, spread, rng)
    train_roster, unseen_roster = split_roster(roster, unseen_speakers)
    channel_model = channel_preset(channel, dim, np.random.default_rng(derive_seed(seed, 'channel')), channel_condition)
    pool = generate_pool(train_roster, utterances_per_speaker, windows_per_utterance, channel_model, np.random.default_rng(derive_seed(seed, 'pool')))
    meetings = generate_meetings(
        unseen_roster if eval_speakers == 'unseen' else train_roster,
        eval_meetings,
        meeting or MeetingParams(),
        derive_seed(seed, 'meetings'),
        channel=channel_model)
    return Corpus(pool, meetings)


def model_config(corpus: Corpus, **kwargs) -> RmcConfig:
    """Model configuration whose input width matches the corpus embeddings."""
    dim = len(next(iter(corpus.pool.profiles.values())))
    return RmcConfig(input_dim=dim, **kwargs)


def train_model(pool: ExamplePool, model_cfg: RmcConfig, train_cfg: TrainingConfig, examples: int) -> Tuple[SpeakerClassifier, list]:
    rng = np.random.default_rng(derive_seed(train_cfg.seed, 'examples'))
    sequences = make_training_examples(pool, train_cfg, examples, rng)
    return train(build_model(model_cfg), sequences, train_cfg)


def meeting_sequences(meeting: Meeting, context: int) -> List[IdentificationSequence]:
    """One labelled sequence per window, against the meeting's profiles."""
    truth = meeting.truth()
    return [
        build_sequence(meeting.windows, i, context, meeting.profiles, label=int(truth[i]), meeting=meeting.meeting)
        for i in range(len(meeting.windows))
    ]


class MeetingRun(NamedTuple):
    report: ScoreReport
    accuracy: float


def run_meetings(identifier: Identifier, meetings: Sequence[Meeting], *, taps: int = 1, collar: float = 0.25, exclude_overlap: bool = True) -> MeetingRun:
    """Identify every window, smooth, convert to segments and score against
    the reference. Accuracy is over all windows of all meetings."""
    pairs = []
    correct = 0.0
    total = 0
    for meeting in meetings:
        traj = identify_meeting(identifier, meeting.meeting, meeting.times, meeting.windows, meeting.profiles)
        traj = median_smooth(traj, taps)
        speakers = [profile.speaker_id for profile in meeting.profiles]
        pairs.append((meeting.reference, trajectory_to_segments(traj, speakers)))
        if len(traj.labels):
            correct += trajectory_accuracy(traj, meeting.truth()) * len(traj.labels)
            total += len(traj.labels)
    return MeetingRun(score_meetings(pairs, collar, exclude_overlap), correct / total if total else float('nan'))



@logging.trace
def overfit(*, seed: int = 0, examples: int = 200, epochs: int = 500, speakers: int = 4) -> BenchmarkResult:
    """A fresh model starts near ln(n) loss and can fit a small training set."""
    corpus = make_corpus(seed, train_speakers=speakers, unseen_speakers=0, eval_meetings=0, eval_speakers='seen', channel='clean')
    model_cfg = model_config(corpus, n_max=speakers, seed=seed)
    train_cfg = TrainingConfig(epochs=epochs, seq_len_range=(speakers, speakers), seed=seed)
    _, log = train_model(corpus.pool, model_cfg, train_cfg, examples)

    initial = log[0].loss
    best = max(log, key=lambda record: record.accuracy)
    passed = abs(initial - math.log(speakers)) <= 0.1 and best.accuracy >= 0.99
    rows = [record._asdict() for record in log if record.epoch in (0, 1, best.epoch, log[-1].epoch)]
    return BenchmarkResult('overfit', rows, passed, f'initial loss {initial:.3f} vs ln({speakers}) = {math.log(speakers):.3f}, best accuracy {best.accuracy:.3f} at epoch {best.epoch}')


@logging.trace
def mismatch(*, seed: int = 0, context: int = 1, examples: int = 8000, epochs: int = 20, **corpus_kwargs) -> BenchmarkResult:
    """Trained classifier against the cosine baseline on unseen speakers with
    a strong channel between profiles and windows."""
    corpus = make_corpus(seed, **{'channel_condition': 30.0, **corpus_kwargs})
    model_cfg = model_config(corpus, seed=seed)
    train_cfg = TrainingConfig(epochs=epochs, context=context, seed=seed)
    model, _ = train_model(corpus.pool, model_cfg, train_cfg, examples)

    baseline = run_meetings(CosineIdentifier(), corpus.meetings)
    trained = run_meetings(RmcIdentifier(model, context), corpus.meetings)
    reduction = 1 - trained.report.ser / baseline.report.ser if baseline.report.ser > 0 else 0.0
    rows = [
        {'system': 'cosine', 'ser': baseline.report.ser, 'accuracy': baseline.accuracy},
        {'system': f'rmc c={context}', 'ser': trained.report.ser, 'accuracy': trained.accuracy},
    ]
    passed = reduction >= 0.2 and above_chance(baseline.accuracy, corpus) and above_chance(trained.accuracy, corpus)
    return BenchmarkResult('mismatch', rows, passed, f'relative SER reduction {100 * reduction:.1f}%')


def _seeds(seed: int, n: int) -> Iterator[int]:
    return (derive_seed(seed, 'run', k) for k in range(n))


def chance(corpus: Corpus) -> float:
    """Accuracy of guessing among the profiles of an evaluation meeting."""
    return 1 / max(len(meeting.profiles) for meeting in corpus.meetings)


def above_chance(accuracy: float, corpus: Corpus, factor: float = 1.5) -> bool:
    return accuracy > factor * chance(corpus)


@logging.trace
def context(*, seed: int = 0, seeds: int = 5, examples: int = 4000, epochs: int = 20, **corpus_kwargs) -> BenchmarkResult:
    """Window accuracy with one window of context on each side against none."""
    rows = []
    learned = True
    for run_seed in _seeds(seed, seeds):
        corpus = make_corpus(run_seed, **corpus_kwargs)
        row = {'seed': run_seed}
        for c in (0, 1):
            model, _ = train_model(corpus.pool, model_config(corpus, seed=run_seed), TrainingConfig(epochs=epochs, context=c, seed=run_seed), examples)
            row[f'accuracy c={c}'] = evaluate(model, [seq for meeting in corpus.meetings for seq in meeting_sequences(meeting, c)])
            learned = learned and above_chance(row[f'accuracy c={c}'], corpus)
        rows.append(row)
    without = statistics.median(row['accuracy c=0'] for row in rows)
    with_context = statistics.median(row['accuracy c=1'] for row in rows)
    return BenchmarkResult('context', rows, learned and with_context >= without, f'median accuracy {without:.4f} (c=0) vs {with_context:.4f} (c=1)')


@logging.trace
def seq_len(*, seed: int = 0, examples: int = 4000, epochs: int = 20, max_len: int = 9, **corpus_kwargs) -> BenchmarkResult:
    """Model trained on variable numbers of profiles against one trained on
    exactly as many as the evaluation meetings have."""
    corpus = make_corpus(seed, **corpus_kwargs)
    n = len(corpus.meetings[0].profiles)
    variable, _ = train_model(corpus.pool, model_config(corpus, n_max=max_len, seed=seed), TrainingConfig(epochs=epochs, seq_len_range=(2, max_len), seed=seed), examples)
    fixed, _ = train_model(corpus.pool, model_config(corpus, n_max=n, seed=seed), TrainingConfig(epochs=epochs, seq_len_range=(n, n), seed=seed), examples)

    sequences = [seq for meeting in corpus.meetings for seq in meeting_sequences(meeting, 0)]
    rows = [
        {'training': f'2..{max_len}', 'accuracy': evaluate(variable, sequences)},
        {'training': f'{n}', 'accuracy': evaluate(fixed, sequences)},
    ]
    gap = rows[1]['accuracy'] - rows[0]['accuracy']
    passed = gap <= 0.03 and all(above_chance(row['accuracy'], corpus) for row in rows)
    return BenchmarkResult('seq-len', rows, passed, f'fixed-length model ahead by {100 * gap:.2f} points')


@logging.trace
def ablation(*, seed: int = 0, seeds: int = 5, examples: int = 4000, epochs: int = 20, budget_tolerance: float = 0.02, **corpus_kwargs) -> BenchmarkResult:
    """Relational memory against a plain LSTM core on unseen speakers, same
    schedule. The relational memory's attention MLP is widened until both
    cores have the same number of parameters."""
    rows = []
    learned = matched = True
    for run_seed in _seeds(seed, seeds):
        corpus = make_corpus(run_seed, **{'eval_speakers': 'unseen', **corpus_kwargs})
        sequences = [seq for meeting in corpus.meetings for seq in meeting_sequences(meeting, 0)]
        lstm_cfg = model_config(corpus, core='lstm', seed=run_seed)
        budget = parameter_count(build_model(lstm_cfg))
        row = {'seed': run_seed}
        for core, model_cfg in (('rmc', match_parameter_budget(model_config(corpus, seed=run_seed), budget)), ('lstm', lstm_cfg)):
            model, _ = train_model(corpus.pool, model_cfg, TrainingConfig(epochs=epochs, seed=run_seed), examples)
            row[f'{core} accuracy'] = evaluate(model, sequences)
            row[f'{core} parameters'] = parameter_count(model)
            learned = learned and above_chance(row[f'{core} accuracy'], corpus)
        matched = matched and abs(row['rmc parameters'] - budget) <= budget_tolerance * budget
        rows.append(row)
    rmc = statistics.median(row['rmc accuracy'] for row in rows)
    lstm = statistics.median(row['lstm accuracy'] for row in rows)
    return BenchmarkResult('ablation', rows, learned and matched and rmc >= lstm, f'median accuracy {rmc:.4f} (rmc) vs {lstm:.4f} (lstm)')


def inject_flips(traj: LabelTrajectory, truth: np.ndarray, rate: float, n_labels: int, rng: np.random.Generator) -> Tuple[LabelTrajectory, List[int]]:
    """Flip isolated interior labels: a flipped window has both neighbours
    unflipped and carrying its own true label."""
    candidates = [i for i in range(1, len(truth) - 1) if truth[i - 1] == truth[i] == truth[i + 1]]
    target = int(round(rate * len(truth)))
    flipped: List[int] = []
    taken = set()
    for i in rng.permutation(candidates):
        if len(flipped) >= target:
            break
        if {i - 1, i, i + 1} & taken:
            continue
        flipped.append(int(i))
        taken.add(int(i))
    labels = truth.copy()
    for i in flipped:
        labels[i] = (truth[i] + 1 + rng.integers(n_labels - 1)) % n_labels
    return traj._replace(labels=labels), sorted(flipped)


@logging.trace
def median_flips(*, seed: int = 0, rate: float = 0.1, taps: int = 3, meetings: int = 5, collar: float = 0.25) -> BenchmarkResult:
    """Isolated single-window errors are removed by a 3-tap median filter."""
    corpus = make_corpus(seed, train_speakers=8, unseen_speakers=0, utterances_per_speaker=1, windows_per_utterance=1,
                         eval_meetings=meetings, eval_speakers='seen', channel='clean')
    rng = np.random.default_rng(derive_seed(seed, 'flips'))
    rows = []
    for meeting in corpus.meetings:
        truth = meeting.truth()
        perfect = LabelTrajectory(meeting.meeting, meeting.times[:, 0], meeting.times[:, 1], truth)
        noisy, flipped = inject_flips(perfect, truth, rate, len(meeting.profiles), rng)
        smoothed = median_smooth(noisy, taps)
        speakers = [profile.speaker_id for profile in meeting.profiles]
        before = score_meeting(meeting.reference, trajectory_to_segments(noisy, speakers), collar, True)
        after = score_meeting(meeting.reference, trajectory_to_segments(smoothed, speakers), collar, True)
        rows.append({
            'meeting': meeting.meeting,
            'flips': len(flipped),
            'removed': int(np.sum(smoothed.labels[flipped] == truth[flipped])) if flipped else 0,
            'ser before': before.ser,
            'ser after': after.ser,
        })
    passed = all(row['removed'] == row['flips'] and (row['flips'] == 0 or row['ser after'] < row['ser before']) for row in rows)
    return BenchmarkResult('median-flips', rows, passed, f'{sum(row["removed"] for row in rows)} of {sum(row["flips"] for row in rows)} isolated flips removed')


BENCHMARKS: Dict[str, Callable[..., BenchmarkResult]] = {
    'overfit': overfit,
    'mismatch': mismatch,
    'context': context,
    'seq-len': seq_len,
    'ablation': ablation,
    'median-flips': median_flips,
}
