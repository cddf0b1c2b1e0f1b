"""Training-set construction and mini-batch training of the classifiers."""
from typing import Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from more_itertools import chunked
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator

from speakerid import logging
from speakerid.embedding import Embedding
from speakerid.identification import IdentificationSequence, Identifier, RmcIdentifier, build_sequence, decide, permute_profiles
from speakerid.rmc import NonFiniteActivation, SpeakerClassifier, batch_loss


class TrainingDiverged(RuntimeError):
    pass


class TrainingConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    learning_rate: float = Field(1e-3, ge=0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(10, ge=0)
    optimizer: Literal['adam', 'sgd'] = 'adam'
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    # Inclusive range of the number of profiles per training sequence.
    seq_len_range: Tuple[int, int] = (2, 4)
    # Neighbouring windows on each side of the labelled window.
    context: int = Field(0, ge=0)
    seed: int = 0
    permute: bool = True

    @model_validator(mode='after')
    def check_seq_len_range(self) -> 'TrainingConfig':
        lo, hi = self.seq_len_range
        if lo < 2:
            raise ValueError(f'sequences need at least 2 profiles, got seq_len_range {lo}:{hi}')
        if hi < lo:
            raise ValueError(f'empty seq_len_range {lo}:{hi}')
        return self


class Utterance(NamedTuple):
    """Consecutive windows of one speaker, so that context windows come from
    the same recording as the labelled window."""
    speaker_id: str
    windows: NDArray[np.float64]  # (n, dim)


class ExamplePool(NamedTuple):
    """`enrolment` optionally keeps the draws each profile was estimated from."""
    utterances: List[Utterance]
    profiles: Dict[str, Embedding]
    enrolment: Optional[Dict[str, NDArray[np.float64]]] = None

    @property
    def speakers(self) -> List[str]:
        return sorted(self.profiles)


class EpochRecord(NamedTuple):
    epoch: int
    loss: float
    accuracy: float


def check_pool(pool: ExamplePool) -> None:
    if not pool.utterances or all(len(utt.windows) == 0 for utt in pool.utterances):
        raise ValueError('example pool has no windows')
    for utt in pool.utterances:
        if utt.speaker_id not in pool.profiles:
            raise ValueError(f'speaker {utt.speaker_id!r} has windows but no profile in the pool')


def check_compatible(cfg: TrainingConfig, model: SpeakerClassifier) -> None:
    if cfg.seq_len_range[1] > model.config.n_max:
        raise ValueError(f'seq_len_range {cfg.seq_len_range[0]}:{cfg.seq_len_range[1]} exceeds the model maximum of {model.config.n_max} profiles')


def make_training_examples(pool: ExamplePool, cfg: TrainingConfig, count: int, rng: np.random.Generator) -> List[IdentificationSequence]:
    """Labelled sequences: a window drawn uniformly from all pool windows, its
    context, the true speaker's profile and N-1 distinct random distractors,
    with N uniform in `cfg.seq_len_range`."""
    check_pool(pool)
    speakers = pool.speakers
    lo, hi = cfg.seq_len_range
    if len(speakers) < hi:
        raise ValueError(f'pool has {len(speakers)} distinct speakers, sequences of {hi} profiles need at least that many')

    index = {speaker: i for i, speaker in enumerate(speakers)}
    sizes = np.array([len(utt.windows) for utt in pool.utterances])
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    examples = []
    for _ in range(count):
        flat = int(rng.integers(offsets[-1]))
        u = int(np.searchsorted(offsets, flat, side='right')) - 1
        utt = pool.utterances[u]
        n = int(rng.integers(lo, hi + 1))

        # Distractors: uniform without replacement from everyone but the true
        # speaker, by sampling from len-1 indices and skipping over the true one.
        true = index[utt.speaker_id]
        picks = rng.choice(len(speakers) - 1, size=n - 1, replace=False)
        ids = [utt.speaker_id] + [speakers[k + 1 if k >= true else k] for k in picks]
        if not cfg.permute:
            ids.sort()

        profiles = np.stack([pool.profiles[speaker] for speaker in ids])
        seq = build_sequence(utt.windows, flat - int(offsets[u]), cfg.context, profiles, label=ids.index(utt.speaker_id), meeting=utt.speaker_id)
        if cfg.permute:
            seq = permute_profiles(seq, rng)
        examples.append(seq)
    return examples


def _check_examples(model: SpeakerClassifier, examples: Sequence[IdentificationSequence]) -> None:
    for i, seq in enumerate(examples):
        if seq.label is None:
            raise ValueError(f'training example {i} has no label')
        if seq.elements.shape[1] != model.config.input_dim:
            raise ValueError(f'training example {i} has dimension {seq.elements.shape[1]}, model expects {model.config.input_dim}')
        if seq.n_profiles > model.config.n_max:
            raise ValueError(f'training example {i} has {seq.n_profiles} profiles, model handles at most {model.config.n_max}')


def make_optimizer(model: SpeakerClassifier, cfg: TrainingConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == 'adam':
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate)


def _correct(posteriors: NDArray[np.float64], batch: Sequence[IdentificationSequence]) -> int:
    return sum(int(decide(p, seq.n_profiles) == seq.label) for p, seq in zip(posteriors, batch))


def dataset_loss(model: SpeakerClassifier, examples: Sequence[IdentificationSequence], batch_size: int = 256) -> Tuple[float, float]:
    """Mean cross-entropy and accuracy over labelled examples, without
    touching the parameters."""
    if not examples:
        raise ValueError('no examples to evaluate')
    total, correct = 0.0, 0
    with torch.no_grad():
        for batch in chunked(examples, batch_size):
            loss, posteriors = batch_loss(model, [(seq, seq.label) for seq in batch])
            total += float(loss) * len(batch)
            correct += _correct(posteriors, batch)
    return total / len(examples), correct / len(examples)


@logging.trace
def train(model: SpeakerClassifier, examples: Sequence[IdentificationSequence], cfg: TrainingConfig) -> Tuple[SpeakerClassifier, List[EpochRecord]]:
    """Train `model` in place for `cfg.epochs` epochs of shuffled mini-batches.

    The log starts with epoch 0, the untrained model evaluated on the
    examples. Later records hold the mean loss and accuracy over the
    mini-batches of that epoch. Shuffling only depends on `cfg.seed`.
    """
    if not examples:
        raise ValueError('no training examples')
    _check_examples(model, examples)

    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(model, cfg)
    model.train()

    loss, accuracy = dataset_loss(model, examples)
    log = [EpochRecord(0, loss, accuracy)]
    logging.event('epoch', epoch=0, loss=loss, accuracy=accuracy)

    for epoch in range(1, cfg.epochs + 1):
        total, correct = 0.0, 0
        for n, indices in enumerate(chunked(rng.permutation(len(examples)), cfg.batch_size)):
            batch = [examples[i] for i in indices]
            optimizer.zero_grad()
            try:
                loss_tensor, posteriors = batch_loss(model, [(seq, seq.label) for seq in batch])
            except NonFiniteActivation as exc:
                raise TrainingDiverged(f'epoch {epoch}, batch {n}: {exc}') from exc
            batch_mean = float(loss_tensor.detach())
            if not np.isfinite(batch_mean):
                raise TrainingDiverged(f'epoch {epoch}, batch {n}: loss is {batch_mean}')
            loss_tensor.backward()
            optimizer.step()
            total += batch_mean * len(batch)
            correct += _correct(posteriors, batch)

        record = EpochRecord(epoch, total / len(examples), correct / len(examples))
        log.append(record)
        logging.event('epoch', **record._asdict())

    model.eval()
    return model, log


def evaluate(identifier: Union[Identifier, SpeakerClassifier], sequences: Sequence[IdentificationSequence]) -> float:
    """Fraction of labelled sequences the identifier gets right."""
    if not sequences:
        raise ValueError('cannot evaluate on an empty set of sequences')
    if any(seq.label is None for seq in sequences):
        raise ValueError('evaluation sequences must be labelled')
    if isinstance(identifier, SpeakerClassifier):
        identifier = RmcIdentifier(identifier)
    labels, _ = identifier.identify_sequences(sequences)
    truth = np.array([seq.label for seq in sequences])
    return float(np.mean(labels == truth))
