#!/usr/bin/env python3
"""Command line interface tying the pipeline together.

    speakerid synth --out corpus/
    speakerid fit-backend --archive corpus/pool.xvec --dim 24 --out corpus/backend.lda
    speakerid enroll --archive corpus/pool-enrol.xvec --projection corpus/backend.lda --out corpus/pool-profiles.xvec
    speakerid train --pool corpus/pool.xvec --profiles corpus/pool-profiles.xvec --projection corpus/backend.lda --out model/model.ckpt
    speakerid identify --system rmc --checkpoint model/model.ckpt --archive corpus/eval.xvec --profiles ... --out hyp.rttm
    speakerid score --reference corpus/eval.rttm --hypothesis hyp.rttm

Every failure prints a single `Error: <ExceptionClass>: <message>` line on
stderr and exits with status 1.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from speakerid import config, logging
from speakerid._util import ThreadPool, derive_seed
from speakerid.benchmarks import BENCHMARKS
from speakerid.embedding import ProjectionModel, SpeakerProfile, apply_projection_rows, check_unique, estimate_profiles, fit_lda
from speakerid.experiment import ExperimentConfig, apply_overrides, load_config, write_resolved
from speakerid.formats import (EmbeddingArchive, archive_to_profiles, load_checkpoint, load_projection, make_archive,
    profiles_to_archive, read_archive, read_rttm, read_trajectories, save_checkpoint, save_projection, write_archive,
    write_rttm, write_training_log, write_trajectories)
from speakerid.identification import CosineIdentifier, Identifier, LabelTrajectory, RmcIdentifier, identify_meeting, median_smooth
from speakerid.rmc import build_model
from speakerid.synth import channel_preset, generate_meetings, generate_pool, make_roster, split_roster
from speakerid.timeline import ScoreReport, Timeline, overlap_fraction, score_meetings, speaker_changes_per_minute, speakers_of, speech_time, trajectory_to_segments, window_accuracy
from speakerid.trainer import ExamplePool, Utterance, check_compatible, make_training_examples, train


def _config(args, overrides: Dict[str, Any]) -> ExperimentConfig:
    return apply_overrides(load_config(args.config), overrides)


def _project(archive: EmbeddingArchive, projection: Optional[ProjectionModel]) -> np.ndarray:
    vectors = archive.vectors()
    return apply_projection_rows(projection, vectors) if projection is not None else vectors


def _load_projection(path: Optional[str]) -> Optional[ProjectionModel]:
    return load_projection(path) if path else None


def main_synth(args):
    cfg = _config(args, {'out': args.out, 'seed': args.seed, 'synth.eval_speakers': args.eval_speakers, 'synth.channel': args.channel})
    synth = cfg.synth
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    roster = make_roster(synth.train_speakers + synth.unseen_speakers, synth.dim, synth.spread, np.random.default_rng(derive_seed(cfg.seed, 'roster')))
    train_roster, unseen_roster = split_roster(roster, synth.unseen_speakers)
    channel = channel_preset(synth.channel, synth.dim, np.random.default_rng(derive_seed(cfg.seed, 'channel')), synth.channel_condition, synth.channel_noise)

    pool = generate_pool(train_roster, synth.utterances_per_speaker, synth.windows_per_utterance, channel,
                         np.random.default_rng(derive_seed(cfg.seed, 'pool')), synth.enrol_draws)
    meetings = generate_meetings(
        unseen_roster if synth.eval_speakers == 'unseen' else train_roster,
        synth.eval_meetings,
        synth.meeting,
        derive_seed(cfg.seed, 'meetings'),
        workers=args.parallel,
        win=cfg.windowing.win,
        shift=cfg.windowing.shift,
        channel=channel,
        segmentation=cfg.segmentation.method,
        gap=cfg.segmentation.gap,
        enrol_draws=synth.enrol_draws)

    shift, win = cfg.windowing.shift, cfg.windowing.win
    write_archive(make_archive(
        (f'u{j:05d}/{utt.speaker_id}', k * shift, k * shift + win, vector)
        for j, utt in enumerate(pool.utterances)
        for k, vector in enumerate(utt.windows)), out / 'pool.xvec')
    write_archive(make_archive(
        (f'pool/{speaker}', float(k), float(k), vector)
        for speaker, draws in pool.enrolment.items()
        for k, vector in enumerate(draws)), out / 'pool-enrol.xvec')

    if meetings:
        write_archive(make_archive(
            (meeting.meeting, start, end, vector)
            for meeting in meetings
            for (start, end), vector in zip(meeting.times, meeting.windows)), out / 'eval.xvec')
        write_archive(make_archive(
            (f'{meeting.meeting}/{speaker}', float(k), float(k), vector)
            for meeting in meetings
            for speaker, draws in meeting.enrolment.items()
            for k, vector in enumerate(draws)), out / 'eval-enrol.xvec')
        write_rttm([meeting.reference for meeting in meetings], out / 'eval.rttm')

    write_resolved(cfg, out)
    logging.event('synth', speakers=len(roster), utterances=len(pool.utterances), meetings=len(meetings))


def main_fit_backend(args):
    archive = read_archive(args.archive)
    pairs = []
    for record in archive.records:
        if record.speaker is None:
            raise ValueError(f'record {record.id!r} has no speaker label')
        pairs.append((record.vector, record.speaker))
    projection = fit_lda(pairs, args.dim)
    save_projection(projection, args.out)
    logging.event('fit_backend', d_in=projection.d_in, d_out=projection.d_out, samples=len(pairs))


def main_enroll(args):
    archive = read_archive(args.archive)
    projection = _load_projection(args.projection)

    records = []
    for group, windows in archive.groups().items():
        for record in windows.records:
            if record.speaker is None:
                raise ValueError(f'enrolment record {record.id!r} has no speaker label')
        vectors = _project(windows, projection)
        profiles = estimate_profiles((record.speaker, vector) for record, vector in zip(windows.records, vectors))
        records += profiles_to_archive(profiles, group)
    write_archive(make_archive(records), args.out)



def _pool_from_archives(windows: EmbeddingArchive, profiles: EmbeddingArchive, projection: Optional[ProjectionModel]) -> ExamplePool:
    utterances = []
    for group, records in windows.groups().items():
        speakers = {record.speaker for record in records.records}
        if None in speakers or len(speakers) != 1:
            raise ValueError(f'pool utterance {group!r} must carry exactly one speaker label, got {sorted(map(str, speakers))}')
        utterances.append(Utterance(speakers.pop(), _project(records, projection)))

    by_speaker: Dict[str, np.ndarray] = {}
    for group_profiles in archive_to_profiles(profiles).values():
        for profile in group_profiles:
            by_speaker[profile.speaker_id] = profile.vector
    return ExamplePool(utterances, by_speaker)


def _parse_range(value: str) -> Tuple[int, int]:
    try:
        lo, hi = value.split(':')
        return int(lo), int(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected MIN:MAX, got {value!r}')


def main_train(args):
    windows = read_archive(args.pool)
    profiles = read_archive(args.profiles)
    projection = _load_projection(args.projection)
    pool = _pool_from_archives(windows, profiles, projection)
    dim = projection.d_out if projection is not None else windows.dim

    cfg = _config(args, {
        'seed': args.seed,
        'examples': args.examples,
        'model.input_dim': dim,
        'model.core': args.core,
        'model.seed': args.seed,
        'training.seed': args.seed,
        'training.epochs': args.epochs,
        'training.context': args.context,
        'training.seq_len_range': args.seq_len_range,
    })

    model = build_model(cfg.model)
    check_compatible(cfg.training, model)
    examples = make_training_examples(pool, cfg.training, cfg.examples, np.random.default_rng(derive_seed(cfg.training.seed, 'examples')))
    model, log = train(model, examples, cfg.training)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, cfg.training, log)
    with open(args.log or out.with_suffix('.log.tsv'), 'w', encoding='utf-8') as fh:
        write_training_log(log, fh)
    write_resolved(cfg, out.parent)


def _make_identifier(args, cfg: ExperimentConfig) -> Identifier:
    if cfg.identification.system == 'cosine':
        return CosineIdentifier()
    if not args.checkpoint:
        raise ValueError('--system rmc needs --checkpoint')
    checkpoint = load_checkpoint(args.checkpoint)
    context = args.context
    if context is None:
        context = checkpoint.training.context if checkpoint.training is not None else cfg.identification.context
    return RmcIdentifier(checkpoint.model, context)


def _identify_all(args, cfg: ExperimentConfig) -> List[Tuple[LabelTrajectory, List[str]]]:
    """Unsmoothed trajectories for every meeting in the archive, with the
    speaker name of each label."""
    identifier = _make_identifier(args, cfg)
    archive = read_archive(args.archive)
    projection = _load_projection(args.projection)
    profiles = archive_to_profiles(read_archive(args.profiles))
    meetings = list(archive.groups().items())

    for meeting, _ in meetings:
        if meeting not in profiles:
            raise ValueError(f'no profiles enrolled for meeting {meeting!r}')
        check_unique(profiles[meeting])

    results: Dict[int, Tuple[LabelTrajectory, List[str]]] = {}

    def worker(i: int, meeting: str, windows: EmbeddingArchive) -> None:
        meeting_profiles: Sequence[SpeakerProfile] = profiles[meeting]
        traj = identify_meeting(identifier, meeting, windows.times(), _project(windows, projection), meeting_profiles)
        results[i] = (traj, [profile.speaker_id for profile in meeting_profiles])

    with ThreadPool(max_workers=args.parallel) as pool:
        for i, (meeting, windows) in enumerate(meetings):
            pool.start(worker, i, meeting, windows)
        pool.join()

    return [results[i] for i in range(len(meetings))]


def _identify_overrides(args) -> Dict[str, Any]:
    return {
        'identification.system': args.system,
        'identification.taps': getattr(args, 'taps', None),
        'identification.smoothing': args.smoothing,
        'identification.context': args.context,
    }


def main_identify(args):
    cfg = _config(args, _identify_overrides(args))
    smoothed = [
        (median_smooth(traj, cfg.identification.taps, method=cfg.identification.smoothing), speakers)
        for traj, speakers in _identify_all(args, cfg)
    ]
    write_rttm([trajectory_to_segments(traj, speakers) for traj, speakers in smoothed], args.out)
    trajectory_path = args.trajectory or Path(args.out).with_suffix('.traj.tsv')
    with open(trajectory_path, 'w', encoding='utf-8') as fh:
        write_trajectories(smoothed, fh)
    write_resolved(cfg, Path(args.out).parent)


def _score(reference: Dict[str, Timeline], hypothesis: Dict[str, Timeline], collar: float, exclude_overlap: bool) -> ScoreReport:
    pairs = ((ref, hypothesis.get(meeting, Timeline(meeting, []))) for meeting, ref in reference.items())
    report = score_meetings(pairs, collar, exclude_overlap)
    for score in report.meetings:
        logging.event('score', meeting=score.meeting, scored_time=score.scored_time, speaker_error_time=score.speaker_error_time)
    return report



def _window_accuracy(reference: Dict[str, Timeline], trajectories: Sequence[Tuple[LabelTrajectory, List[str]]]) -> float:
    correct = total = 0
    for traj, speakers in trajectories:
        if traj.meeting not in reference:
            raise ValueError(f'no reference for meeting {traj.meeting!r}')
        correct += round(window_accuracy(traj, reference[traj.meeting], speakers) * len(traj.labels))
        total += len(traj.labels)
    if total == 0:
        raise ValueError('window accuracy of an empty trajectory is undefined')
    return correct / total


def main_score(args):
    cfg = _config(args, {'scoring.collar': args.collar, 'scoring.ignore_overlap': args.ignore_overlap})
    reference = read_rttm(args.reference)
    report = _score(reference, read_rttm(args.hypothesis), cfg.scoring.collar, cfg.scoring.ignore_overlap)

    accuracy = None
    if args.trajectory:
        with open(args.trajectory, 'r', encoding='utf-8') as fh:
            accuracy = _window_accuracy(reference, list(read_trajectories(fh).values()))

    if args.json:
        for record in report.records():
            print(json.dumps(record))
        if accuracy is not None:
            print(json.dumps({'window_accuracy': accuracy}))
    else:
        print(report.table())
        if accuracy is not None:
            print(f'window accuracy: {100 * accuracy:.2f}%')


def main_sweep_median(args):
    if args.max_taps < 1 or args.max_taps % 2 == 0:
        raise ValueError(f'--max-taps must be a positive odd number, got {args.max_taps}')
    cfg = _config(args, {**_identify_overrides(args), 'scoring.collar': args.collar, 'scoring.ignore_overlap': args.ignore_overlap})
    reference = read_rttm(args.reference)
    trajectories = _identify_all(args, cfg)

    rows = []
    for taps in range(1, args.max_taps + 1, 2):
        smoothed = [(median_smooth(traj, taps, method=cfg.identification.smoothing), speakers) for traj, speakers in trajectories]
        hypothesis = {traj.meeting: trajectory_to_segments(traj, speakers) for traj, speakers in smoothed}
        report = _score(reference, hypothesis, cfg.scoring.collar, cfg.scoring.ignore_overlap)
        rows.append({'taps': taps, 'ser': report.ser, 'window_accuracy': _window_accuracy(reference, smoothed)})

    if args.json:
        for row in rows:
            print(json.dumps(row))
    else:
        print('taps  SER (%)  accuracy (%)')
        for row in rows:
            print(f"{row['taps']:>4}  {100 * row['ser']:>7.2f}  {100 * row['window_accuracy']:>12.2f}")


def main_stats(args):
    rows = []
    for meeting, timeline in read_rttm(args.reference).items():
        rows.append({
            'meeting': meeting,
            'speakers': len(speakers_of(timeline)),
            'speech_time': speech_time(timeline),
            'overlap_fraction': overlap_fraction(timeline),
            'changes_per_minute': speaker_changes_per_minute(timeline),
        })
    if args.json:
        for row in rows:
            print(json.dumps(row))
    else:
        print('meeting  speakers  speech (s)  overlap (%)  changes/min')
        for row in rows:
            print(f"{row['meeting']}  {row['speakers']:>8}  {row['speech_time']:>10.2f}  {100 * row['overlap_fraction']:>11.2f}  {row['changes_per_minute']:>11.2f}")


def _parse_param(value: str) -> Tuple[str, Any]:
    key, sep, raw = value.partition('=')
    if not sep:
        raise argparse.ArgumentTypeError(f'expected KEY=VALUE, got {value!r}')
    return key.replace('-', '_'), yaml.safe_load(raw)


def main_benchmark(args):
    result = BENCHMARKS[args.name](seed=args.seed, **dict(args.param))
    if args.json:
        for row in result.rows:
            print(json.dumps(row))
        print(json.dumps({'benchmark': result.name, 'passed': result.passed, 'summary': result.summary}))
    else:
        print(result.table())


def main_list_commands(args):
    print("Usage: speakerid COMMAND [--help]", file=sys.stderr)
    sys.exit(2)


def _add_identify_args(parser):
    parser.add_argument('--archive', required=True, help='Meeting window archive (.xvec or .xvec.txt)')
    parser.add_argument('--profiles', required=True, help='Profile archive with <meeting>/<speaker> ids')
    parser.add_argument('--projection', help='LDA back-end from fit-backend, applied to the windows')
    parser.add_argument('--system', choices=['cosine', 'rmc'], help='Identifier (default: from config, rmc)')
    parser.add_argument('--checkpoint', help='Model checkpoint, needed for --system rmc')
    parser.add_argument('--context', type=int, help='Context windows on each side (default: as trained)')
    parser.add_argument('--smoothing', choices=['median', 'mode'], help='Label smoothing filter')
    parser.add_argument('--parallel', type=int, default=config.THREADS, help='Identify N meetings at the same time')


def _add_scoring_args(parser):
    parser.add_argument('--collar', type=float, help=f'Unscored tolerance around reference boundaries in seconds (default: {config.COLLAR})')
    parser.add_argument('--ignore-overlap', dest='ignore_overlap', action='store_true', default=None, help='Exclude overlapped speech from scoring (default)')
    parser.add_argument('--include-overlap', dest='ignore_overlap', action='store_false', help='Score overlapped speech too')


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='speakerid', description='Speaker identification in meetings with enrolled participants.')
    parser.add_argument('--config', '-c', type=str, help='Experiment configuration (YAML)')
    parser.add_argument('--trace', type=argparse.FileType('a'), nargs='?', const='/dev/stderr', help='Write tracing JSON to file (defaults to stderr)')
    parser.set_defaults(func=main_list_commands)
    subparsers = parser.add_subparsers()

    parser_synth = subparsers.add_parser('synth', help='Generate a synthetic corpus')
    parser_synth.add_argument('--out', '-o', type=str, help='Output directory')
    parser_synth.add_argument('--seed', type=int)
    parser_synth.add_argument('--eval-speakers', choices=['seen', 'unseen'])
    parser_synth.add_argument('--channel', choices=['clean', 'channel', 'channel+noise'])
    parser_synth.add_argument('--parallel', type=int, default=config.THREADS, help='Generate N meetings at the same time')
    parser_synth.set_defaults(func=main_synth)

    parser_backend = subparsers.add_parser('fit-backend', help='Fit the LDA back-end on a labelled archive')
    parser_backend.add_argument('--archive', required=True)
    parser_backend.add_argument('--dim', type=int, required=True, help='Output dimension')
    parser_backend.add_argument('--out', '-o', required=True)
    parser_backend.set_defaults(func=main_fit_backend)

    parser_enroll = subparsers.add_parser('enroll', help='Estimate speaker profiles from enrolment windows')
    parser_enroll.add_argument('--archive', required=True, help='Enrolment archive with <group>/<speaker> ids')
    parser_enroll.add_argument('--projection')
    parser_enroll.add_argument('--out', '-o', required=True)
    parser_enroll.set_defaults(func=main_enroll)

    parser_train = subparsers.add_parser('train', help='Train the classifier')
    parser_train.add_argument('--pool', required=True, help='Labelled window archive with <utterance>/<speaker> ids')
    parser_train.add_argument('--profiles', required=True, help='Profile archive for the pool speakers')
    parser_train.add_argument('--projection')
    parser_train.add_argument('--out', '-o', required=True, help='Checkpoint path')
    parser_train.add_argument('--log', help='Training log TSV (default: next to the checkpoint)')
    parser_train.add_argument('--seq-len-range', type=_parse_range, metavar='MIN:MAX')
    parser_train.add_argument('--context', type=int)
    parser_train.add_argument('--seed', type=int)
    parser_train.add_argument('--epochs', type=int)
    parser_train.add_argument('--examples', type=int)
    parser_train.add_argument('--core', choices=['rmc', 'lstm'])
    parser_train.set_defaults(func=main_train)

    parser_identify = subparsers.add_parser('identify', help='Label every window of every meeting')
    _add_identify_args(parser_identify)
    parser_identify.add_argument('--taps', type=int, help='Median filter length (odd)')
    parser_identify.add_argument('--out', '-o', required=True, help='Hypothesis RTTM')
    parser_identify.add_argument('--trajectory', help='Per-window TSV (default: next to the RTTM)')
    parser_identify.set_defaults(func=main_identify)

    parser_score = subparsers.add_parser('score', help='Speaker error rate and window accuracy')
    parser_score.add_argument('--reference', required=True)
    parser_score.add_argument('--hypothesis', required=True)
    parser_score.add_argument('--trajectory', help='Trajectory TSV from identify, for window accuracy')
    parser_score.add_argument('--json', action='store_true', help='Print JSON lines instead of a table')
    _add_scoring_args(parser_score)
    parser_score.set_defaults(func=main_score)

    parser_sweep = subparsers.add_parser('sweep-median', help='Score median filters of 1, 3, .., K taps')
    _add_identify_args(parser_sweep)
    parser_sweep.add_argument('--reference', required=True)
    parser_sweep.add_argument('--max-taps', type=int, required=True)
    parser_sweep.add_argument('--json', action='store_true')
    _add_scoring_args(parser_sweep)
    parser_sweep.set_defaults(func=main_sweep_median)

    parser_stats = subparsers.add_parser('stats', help='Overlap and speaker change statistics of a reference')
    parser_stats.add_argument('--reference', required=True)
    parser_stats.add_argument('--json', action='store_true')
    parser_stats.set_defaults(func=main_stats)

    parser_benchmark = subparsers.add_parser('benchmark', help='Run a synthetic experiment')
    parser_benchmark.add_argument('name', choices=sorted(BENCHMARKS))
    parser_benchmark.add_argument('--seed', type=int, default=0)
    parser_benchmark.add_argument('--param', '-p', type=_parse_param, action='append', default=[], metavar='KEY=VALUE', help='Benchmark keyword argument')
    parser_benchmark.add_argument('--json', action='store_true')
    parser_benchmark.set_defaults(func=main_benchmark)

    return parser


def main(argv: Optional[List[str]] = None) -> None:
    args = make_parser().parse_args(argv)
    try:
        config.configure_torch()
        with logging.Context(file=args.trace), logging.span(f'speakerid {args.func.__name__}'):
            args.func(args)
    except Exception as exc:
        print(f'Error: {type(exc).__name__}: {exc}', file=sys.stderr)
        sys.exit(1)


if __name__ == '__main__':
    main()
