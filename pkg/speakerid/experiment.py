"""Experiment configuration: one YAML document per experiment.

Every section rejects unknown keys. Times are in seconds, sizes are counts.
Command-line flags override keys through `apply_overrides`, and every command
that writes an output directory leaves the resolved configuration behind as
`config.resolved.yaml`.
"""
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from speakerid import config
from speakerid.rmc import RmcConfig
from speakerid.synth import ChannelPreset, MeetingParams, Segmentation
from speakerid.trainer import TrainingConfig


class ConfigError(ValueError):
    pass


class Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class WindowingConfig(Section):
    win: float = Field(config.WINDOW_LENGTH, gt=0)
    shift: float = Field(config.WINDOW_SHIFT, gt=0)

    @model_validator(mode='after')
    def check_shift(self) -> 'WindowingConfig':
        if self.shift > self.win:
            raise ValueError(f'window shift {self.shift} exceeds window length {self.win}')
        return self


class SegmentationConfig(Section):
    method: Segmentation = 'oraclespk'
    gap: float = Field(config.MERGE_GAP, ge=0)


class ScoringConfig(Section):
    collar: float = Field(config.COLLAR, ge=0)
    ignore_overlap: bool = True


class IdentificationConfig(Section):
    system: Literal['cosine', 'rmc'] = 'rmc'
    context: int = Field(0, ge=0)
    taps: int = Field(1, ge=1)
    smoothing: Literal['median', 'mode'] = 'median'
    # Output dimension of the LDA back-end, None to skip the projection.
    lda_dim: Optional[int] = Field(None, ge=1)

    @model_validator(mode='after')
    def check_taps(self) -> 'IdentificationConfig':
        if self.taps % 2 == 0:
            raise ValueError(f'taps must be odd, got {self.taps}')
        return self


class SynthConfig(Section):
    dim: int = Field(32, ge=1)
    spread: float = Field(0.3, ge=0)
    train_speakers: int = Field(500, ge=2)
    unseen_speakers: int = Field(50, ge=0)
    utterances_per_speaker: int = Field(4, ge=1)
    windows_per_utterance: int = Field(5, ge=1)
    enrol_draws: int = Field(8, ge=1)
    eval_meetings: int = Field(10, ge=0)
    # Draw evaluation meeting participants from the training speakers (seen)
    # or from the held-out ones (unseen).
    eval_speakers: Literal['seen', 'unseen'] = 'unseen'
    channel: ChannelPreset = 'channel+noise'
    channel_condition: float = Field(10.0, ge=1.0, le=100.0)
    channel_noise: float = Field(0.1, ge=0)
    meeting: MeetingParams = Field(default_factory=MeetingParams)


class ExperimentConfig(Section):
    out: str = 'out'
    seed: int = 0
    # Number of training sequences drawn from the pool.
    examples: int = Field(2000, ge=1)
    windowing: WindowingConfig = Field(default_factory=WindowingConfig)
    segmentation: SegmentationConfig = Field(default_factory=SegmentationConfig)
    scoring: ScoringConfig = Field(default_factory=ScoringConfig)
    identification: IdentificationConfig = Field(default_factory=IdentificationConfig)
    model: RmcConfig = Field(default_factory=RmcConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)

    @model_validator(mode='after')
    def check_consistency(self) -> 'ExperimentConfig':
        if self.training.seq_len_range[1] > self.model.n_max:
            raise ValueError(f'training.seq_len_range goes up to {self.training.seq_len_range[1]} profiles, model.n_max is {self.model.n_max}')
        if self.synth.meeting.speakers_per_meeting > self.model.n_max:
            raise ValueError(f'meetings of {self.synth.meeting.speakers_per_meeting} speakers exceed model.n_max {self.model.n_max}')
        return self


def _validate(data: Dict[str, Any], source: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        # One line per problem, prefixed with the dotted key.
        problems = '; '.join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors())
        raise ConfigError(f'{source}: {problems}') from exc


def load_config(path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """Defaults, updated with the YAML document at `path` if given."""
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, 'r', encoding='utf-8') as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f'{path}: {exc}') from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f'{path}: expected a mapping at the top level, got {type(data).__name__}')
    return _validate(data, str(path))


def apply_overrides(cfg: ExperimentConfig, overrides: Dict[str, Any]) -> ExperimentConfig:
    """New config with dotted keys (`training.seed`) replaced. `None` values
    are skipped so unset command line flags can be passed straight through."""
    data = cfg.model_dump(mode='python')
    for key, value in overrides.items():
        if value is None:
            continue
        *parents, leaf = key.split('.')
        node = data
        for part in parents:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f'unknown configuration key: {key}')
            node = node[part]
        if leaf not in node:
            raise ConfigError(f'unknown configuration key: {key}')
        node[leaf] = value
    return _validate(data, 'command line')


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode='json'), sort_keys=False)


def write_resolved(cfg: ExperimentConfig, out_dir: Union[str, Path]) -> Path:
    path = Path(out_dir) / config.RESOLVED_CONFIG_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg), encoding='utf-8')
    return path
