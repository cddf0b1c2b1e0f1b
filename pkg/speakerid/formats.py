"""On-disk formats: embedding archives, RTTM, model checkpoints, projection
models and trajectory tables.

Embedding archive (`.xvec`), all little-endian:

    header   magic b'XVEC' | version u16 | dim u32 | count u64
    record   id length u16 | id utf-8 | start f64 | end f64 | dim x f32

Record ids are either a meeting id (windows of that meeting) or
`<group>/<speaker>` for labelled embeddings, where the group is a meeting or
utterance. `.xvec.txt` holds the same records as `id start end v1 .. vd` lines.

Checkpoints and projection models share one container:

    magic 4 bytes | version u16 | header length u32 | JSON header | tensors

The JSON header lists the tensors (name, dtype, shape) in the order their raw
little-endian bytes follow. Equal content always gives equal bytes.
"""
import json
import struct
from pathlib import Path
from typing import IO, Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from numpy.typing import ArrayLike, NDArray

from speakerid.embedding import ProjectionModel, SpeakerProfile
from speakerid.identification import LabelTrajectory
from speakerid.rmc import RmcConfig, SpeakerClassifier, build_model
from speakerid.timeline import Segment, Timeline, TimelineError, make_timeline
from speakerid.trainer import EpochRecord, TrainingConfig


PathLike = Union[str, Path]


class FormatError(ValueError):
    pass


class ArchiveError(FormatError):
    pass


class RttmError(FormatError):
    pass


class CheckpointError(FormatError):
    pass


XVEC_MAGIC = b'XVEC'
XVEC_VERSION = 1
XVEC_HEADER = struct.Struct('<4sHIQ')
XVEC_ID_LENGTH = struct.Struct('<H')
XVEC_TIMES = struct.Struct('<dd')


class XvecRecord(NamedTuple):
    id: str
    start: float
    end: float
    vector: NDArray[np.float64]

    @property
    def group(self) -> str:
        return split_id(self.id)[0]

    @property
    def speaker(self) -> Optional[str]:
        return split_id(self.id)[1]


def split_id(record_id: str) -> Tuple[str, Optional[str]]:
    """`meeting/speaker` -> (meeting, speaker); a bare id has no speaker."""
    group, sep, speaker = record_id.rpartition('/')
    return (group, speaker) if sep else (record_id, None)


class EmbeddingArchive(NamedTuple):
    dim: int
    records: List[XvecRecord]

    def vectors(self) -> NDArray[np.float64]:
        return np.stack([record.vector for record in self.records]).reshape(-1, self.dim)

    def times(self) -> NDArray[np.float64]:
        return np.array([(record.start, record.end) for record in self.records], dtype=np.float64).reshape(-1, 2)

    def groups(self) -> Dict[str, 'EmbeddingArchive']:
        """Records per group in order of first appearance, each group sorted by
        start time."""
        grouped: Dict[str, List[XvecRecord]] = {}
        for record in self.records:
            grouped.setdefault(record.group, []).append(record)
        return {
            group: EmbeddingArchive(self.dim, sorted(records, key=lambda r: (r.start, r.end)))
            for group, records in grouped.items()
        }


def make_archive(records: Iterable[Tuple[str, float, float, ArrayLike]]) -> EmbeddingArchive:
    converted = [XvecRecord(str(id), float(start), float(end), np.asarray(vector, dtype=np.float64)) for id, start, end, vector in records]
    if not converted:
        raise ArchiveError('cannot make an archive without records')
    dim = len(converted[0].vector)
    for record in converted:
        if record.vector.shape != (dim,):
            raise ArchiveError(f'record {record.id!r} has shape {record.vector.shape}, expected ({dim},)')
    return EmbeddingArchive(dim, converted)


def profiles_to_archive(profiles: Iterable[SpeakerProfile], group: str) -> List[Tuple[str, float, float, ArrayLike]]:
    return [(f'{group}/{profile.speaker_id}', 0.0, 0.0, profile.vector) for profile in profiles]


def archive_to_profiles(archive: EmbeddingArchive) -> Dict[str, List[SpeakerProfile]]:
    """Profiles per group, in archive order."""
    profiles: Dict[str, List[SpeakerProfile]] = {}
    for record in archive.records:
        if record.speaker is None:
            raise ArchiveError(f'profile record {record.id!r} names no speaker')
        profiles.setdefault(record.group, []).append(SpeakerProfile(record.speaker, record.vector))
    return profiles


def _is_text(path: PathLike) -> bool:
    return str(path).endswith('.txt')


def encode_archive(archive: EmbeddingArchive) -> bytes:
    chunks = [XVEC_HEADER.pack(XVEC_MAGIC, XVEC_VERSION, archive.dim, len(archive.records))]
    for record in archive.records:
        name = record.id.encode('utf-8')
        if len(name) > 0xFFFF:
            raise ArchiveError(f'record id of {len(name)} bytes is too long')
        chunks.append(XVEC_ID_LENGTH.pack(len(name)))
        chunks.append(name)
        chunks.append(XVEC_TIMES.pack(record.start, record.end))
        chunks.append(np.asarray(record.vector, dtype='<f4').tobytes())
    return b''.join(chunks)


def decode_archive(data: bytes) -> EmbeddingArchive:
    if len(data) < XVEC_HEADER.size:
        raise ArchiveError(f'archive of {len(data)} bytes is shorter than its header')
    magic, version, dim, count = XVEC_HEADER.unpack_from(data)
    if magic != XVEC_MAGIC:
        raise ArchiveError(f'bad magic {magic!r}, expected {XVEC_MAGIC!r}')
    if version != XVEC_VERSION:
        raise ArchiveError(f'unsupported archive version {version}')

    offset = XVEC_HEADER.size
    vector_size = 4 * dim
    records = []
    try:
        for n in range(count):
            (length,) = XVEC_ID_LENGTH.unpack_from(data, offset)
            offset += XVEC_ID_LENGTH.size
            if offset + length + XVEC_TIMES.size + vector_size > len(data):
                raise ArchiveError(f'archive is truncated in record {n} of {count}')
            name = data[offset:offset + length].decode('utf-8')
            offset += length
            start, end = XVEC_TIMES.unpack_from(data, offset)
            offset += XVEC_TIMES.size
            vector = np.frombuffer(data, dtype='<f4', count=dim, offset=offset).astype(np.float64)
            offset += vector_size
            records.append(XvecRecord(name, start, end, vector))
    except struct.error as exc:
        raise ArchiveError(f'archive is truncated: {exc}') from exc
    except UnicodeDecodeError as exc:
        raise ArchiveError(f'record id is not valid utf-8: {exc}') from exc
    if offset != len(data):
        raise ArchiveError(f'{len(data) - offset} trailing bytes after {count} records')
    return EmbeddingArchive(dim, records)


def format_archive_text(archive: EmbeddingArchive) -> str:
    lines = []
    for record in archive.records:
        values = ' '.join(f'{value:.9g}' for value in np.asarray(record.vector, dtype=np.float32))
        lines.append(f'{record.id} {record.start!r} {record.end!r} {values}\n')
    return ''.join(lines)


def parse_archive_text(lines: Iterable[str]) -> EmbeddingArchive:
    records = []
    dim = None
    for lineno, line in enumerate(lines, start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) < 4:
            raise ArchiveError(f'line {lineno}: expected id, start, end and at least one value, got {len(fields)} fields')
        if dim is None:
            dim = len(fields) - 3
        elif len(fields) - 3 != dim:
            raise ArchiveError(f'line {lineno}: expected {dim} values, got {len(fields) - 3}')
        try:
            start, end = float(fields[1]), float(fields[2])
            vector = np.array(fields[3:], dtype=np.float32).astype(np.float64)
        except ValueError as exc:
            raise ArchiveError(f'line {lineno}: {exc}') from exc
        records.append(XvecRecord(fields[0], start, end, vector))
    if dim is None:
        raise ArchiveError('text archive has no records')
    return EmbeddingArchive(dim, records)


def read_archive(path: PathLike) -> EmbeddingArchive:
    """Read a `.xvec` or `.xvec.txt` archive; all or nothing."""
    if _is_text(path):
        with open(path, 'r', encoding='utf-8') as fh:
            return parse_archive_text(fh)
    return decode_archive(Path(path).read_bytes())


def write_archive(archive: EmbeddingArchive, path: PathLike) -> None:
    if _is_text(path):
        Path(path).write_text(format_archive_text(archive), encoding='utf-8')
    else:
        Path(path).write_bytes(encode_archive(archive))


RTTM_FIELDS = 10


def parse_rttm(lines: Iterable[str], source: str = '<rttm>') -> Dict[str, Timeline]:
    """Timelines per meeting (file id), in order of first appearance."""
    segments: Dict[str, List[Segment]] = {}
    for lineno, line in enumerate(lines, start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != RTTM_FIELDS:
            raise RttmError(f'{source}:{lineno}: expected {RTTM_FIELDS} fields, got {len(fields)}')
        if fields[0] != 'SPEAKER':
            raise RttmError(f'{source}:{lineno}: unsupported record type {fields[0]!r}')
        try:
            tbeg, tdur = float(fields[3]), float(fields[4])
        except ValueError as exc:
            raise RttmError(f'{source}:{lineno}: {exc}') from exc
        if not (np.isfinite(tbeg) and np.isfinite(tdur)) or tbeg < 0:
            raise RttmError(f'{source}:{lineno}: invalid onset {fields[3]}')
        if tdur <= 0:
            raise RttmError(f'{source}:{lineno}: duration must be positive, got {fields[4]}')
        speaker = None if fields[7] == '<NA>' else fields[7]
        segments.setdefault(fields[1], []).append(Segment(tbeg, tbeg + tdur, speaker))
    try:
        return {meeting: make_timeline(meeting, segs) for meeting, segs in segments.items()}
    except TimelineError as exc:
        raise RttmError(f'{source}: {exc}') from exc


def format_rttm(timeline: Timeline) -> str:
    return ''.join(
        f'SPEAKER {timeline.meeting} 1 {segment.start:.3f} {segment.duration:.3f} <NA> <NA> {segment.speaker or "<NA>"} <NA> <NA>\n'
        for segment in timeline.segments)


def read_rttm(path: PathLike) -> Dict[str, Timeline]:
    with open(path, 'r', encoding='utf-8') as fh:
        return parse_rttm(fh, str(path))


def write_rttm(timelines: Union[Timeline, Iterable[Timeline]], path: PathLike) -> None:
    if isinstance(timelines, Timeline):
        timelines = [timelines]
    Path(path).write_text(''.join(format_rttm(timeline) for timeline in timelines), encoding='utf-8')


CONTAINER_HEADER = struct.Struct('<4sHI')
CONTAINER_VERSION = 1
CHECKPOINT_MAGIC = b'SPKC'
PROJECTION_MAGIC = b'SPKP'


def encode_container(magic: bytes, header: Dict[str, Any], tensors: Dict[str, NDArray]) -> bytes:
    arrays = {name: np.ascontiguousarray(array) for name, array in tensors.items()}
    header = {
        **header,
        'tensors': [
            {'name': name, 'dtype': array.dtype.newbyteorder('<').str, 'shape': list(array.shape)}
            for name, array in arrays.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    chunks = [CONTAINER_HEADER.pack(magic, CONTAINER_VERSION, len(blob)), blob]
    for entry, array in zip(header['tensors'], arrays.values()):
        chunks.append(array.astype(entry['dtype']).tobytes())
    return b''.join(chunks)


def decode_container(data: bytes, magic: bytes) -> Tuple[Dict[str, Any], Dict[str, NDArray]]:
    if len(data) < CONTAINER_HEADER.size:
        raise CheckpointError(f'file of {len(data)} bytes is shorter than its header')
    found, version, length = CONTAINER_HEADER.unpack_from(data)
    if found != magic:
        raise CheckpointError(f'bad magic {found!r}, expected {magic!r}')
    if version != CONTAINER_VERSION:
        raise CheckpointError(f'unsupported format version {version}')

    offset = CONTAINER_HEADER.size
    try:
        header = json.loads(data[offset:offset + length].decode('utf-8'))
    except ValueError as exc:
        raise CheckpointError(f'unreadable header: {exc}') from exc
    offset += length

    tensors = {}
    for entry in header.pop('tensors', []):
        dtype = np.dtype(entry['dtype'])
        count = int(np.prod(entry['shape'], dtype=np.int64))
        if offset + count * dtype.itemsize > len(data):
            raise CheckpointError(f'file is truncated in tensor {entry["name"]!r}')
        tensors[entry['name']] = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(entry['shape']).copy()
        offset += count * dtype.itemsize
    if offset != len(data):
        raise CheckpointError(f'{len(data) - offset} trailing bytes after the last tensor')
    return header, tensors


class Checkpoint(NamedTuple):
    model: SpeakerClassifier
    training: Optional[TrainingConfig]
    seed: int
    log: List[EpochRecord]


def save_checkpoint(model: SpeakerClassifier, path: PathLike, training: Optional[TrainingConfig] = None, log: Sequence[EpochRecord] = ()) -> None:
    header = {
        'model': model.config.model_dump(mode='json'),
        'training': training.model_dump(mode='json') if training is not None else None,
        'seed': training.seed if training is not None else model.config.seed,
        'log': [list(record) for record in log],
    }
    tensors = {name: tensor.detach().cpu().numpy() for name, tensor in model.state_dict().items()}
    Path(path).write_bytes(encode_container(CHECKPOINT_MAGIC, header, tensors))


def load_checkpoint(path: PathLike) -> Checkpoint:
    header, tensors = decode_container(Path(path).read_bytes(), CHECKPOINT_MAGIC)
    try:
        model = build_model(RmcConfig(**header['model']))
        training = TrainingConfig(**header['training']) if header.get('training') is not None else None
        state = {name: torch.from_numpy(array) for name, array in tensors.items()}
        model.load_state_dict(state, strict=True)
    except (KeyError, ValueError, RuntimeError) as exc:
        raise CheckpointError(f'{path}: {exc}') from exc
    model.eval()
    log = [EpochRecord(int(epoch), float(loss), float(accuracy)) for epoch, loss, accuracy in header.get('log', [])]
    return Checkpoint(model, training, int(header.get('seed', 0)), log)


def save_projection(projection: ProjectionModel, path: PathLike) -> None:
    header = {'d_in': projection.d_in, 'd_out': projection.d_out}
    Path(path).write_bytes(encode_container(PROJECTION_MAGIC, header, {'mean': projection.mean, 'lda': projection.lda}))


def load_projection(path: PathLike) -> ProjectionModel:
    header, tensors = decode_container(Path(path).read_bytes(), PROJECTION_MAGIC)
    if set(tensors) != {'mean', 'lda'}:
        raise CheckpointError(f'{path}: expected tensors mean and lda, got {sorted(tensors)}')
    projection = ProjectionModel(tensors['mean'].astype(np.float64), tensors['lda'].astype(np.float64))
    if projection.lda.shape != (header.get('d_out'), header.get('d_in')) or projection.mean.shape != (projection.d_in,):
        raise CheckpointError(f'{path}: tensor shapes do not match the header')
    return projection


TRAJECTORY_COLUMNS = ['meeting', 'start', 'end', 'label', 'speaker']


def write_trajectories(trajectories: Iterable[Tuple[LabelTrajectory, Sequence[str]]], fh: IO[str]) -> None:
    """TSV, one row per window. Posterior columns p0..p{n_max-1} follow when the
    first trajectory has posteriors."""
    header_written = False
    n_posteriors = 0
    for traj, speakers in trajectories:
        if not header_written:
            n_posteriors = traj.posteriors.shape[1] if traj.posteriors is not None else 0
            fh.write('\t'.join(TRAJECTORY_COLUMNS + [f'p{k}' for k in range(n_posteriors)]) + '\n')
            header_written = True
        for i in range(len(traj.labels)):
            label = int(traj.labels[i])
            row = [traj.meeting, f'{traj.starts[i]:.3f}', f'{traj.ends[i]:.3f}', str(label), speakers[label]]
            if n_posteriors:
                row += [f'{p:.6f}' for p in traj.posteriors[i]]
            fh.write('\t'.join(row) + '\n')


def read_trajectories(lines: Iterable[str]) -> Dict[str, Tuple[LabelTrajectory, List[str]]]:
    """Inverse of `write_trajectories`. Speaker names per meeting are listed by
    label, with labels that never occur named `?`."""
    rows: Dict[str, List[List[str]]] = {}
    columns = None
    for lineno, line in enumerate(lines, start=1):
        fields = line.rstrip('\n').split('\t')
        if columns is None:
            if fields[:len(TRAJECTORY_COLUMNS)] != TRAJECTORY_COLUMNS:
                raise FormatError(f'line {lineno}: expected header starting with {" ".join(TRAJECTORY_COLUMNS)}')
            columns = fields
            continue
        if fields == ['']:
            continue
        if len(fields) != len(columns):
            raise FormatError(f'line {lineno}: expected {len(columns)} columns, got {len(fields)}')
        rows.setdefault(fields[0], []).append(fields)

    n_posteriors = len(columns) - len(TRAJECTORY_COLUMNS) if columns else 0
    result = {}
    try:
        for meeting, meeting_rows in rows.items():
            labels = np.array([int(row[3]) for row in meeting_rows], dtype=np.int64)
            speakers = ['?'] * (int(labels.max()) + 1)
            for row, label in zip(meeting_rows, labels):
                speakers[label] = row[4]
            posteriors = np.array([[float(v) for v in row[5:]] for row in meeting_rows]) if n_posteriors else None
            traj = LabelTrajectory(
                meeting,
                np.array([float(row[1]) for row in meeting_rows]),
                np.array([float(row[2]) for row in meeting_rows]),
                labels,
                posteriors)
            result[meeting] = (traj, speakers)
    except ValueError as exc:
        raise FormatError(f'malformed trajectory row: {exc}') from exc
    return result


def write_training_log(log: Iterable[EpochRecord], fh: IO[str]) -> None:
    fh.write('epoch\tloss\taccuracy\n')
    for record in log:
        fh.write(f'{record.epoch}\t{record.loss:.6f}\t{record.accuracy:.4f}\n')
