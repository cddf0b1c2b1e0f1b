"""Relational Memory Core classifier.

A recurrent cell keeps a memory of Q = n_max + 1 slots of width P. Every step
projects the next sequence element to width P, lets each memory slot attend
over all slots plus that element (multi-head dot-product attention with
layer-normalised inputs), refines the result with a row-wise MLP and writes it
back through per-slot input/forget gates. After the last element the flattened
memory goes through an MLP head with a softmax over n_max speaker positions.

`LstmCore` is a drop-in replacement for the memory cell with a plain LSTM of
hidden width Q*P, used for ablations.
"""
import math
from typing import Any, Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import Tensor, nn

from speakerid import logging


class NonFiniteActivation(RuntimeError):
    pass


class RmcConfig(BaseModel):
    """Architecture hyper-parameters. Widths are counts of units."""
    model_config = ConfigDict(extra='forbid')

    core: Literal['rmc', 'lstm'] = 'rmc'
    n_max: int = Field(4, ge=2)
    input_dim: int = Field(32, ge=1)
    slot_width: int = Field(64, ge=1)
    heads: int = Field(2, ge=1)
    attention_mlp_width: int = Field(64, ge=1)
    mlp_head_layers: int = Field(4, ge=0)
    mlp_head_width: int = Field(256, ge=1)
    forget_bias: float = 1.0
    input_bias: float = 0.0
    dtype: Literal['float64', 'float32'] = 'float64'
    seed: int = 0

    @model_validator(mode='after')
    def check_heads(self) -> 'RmcConfig':
        if self.slot_width % self.heads != 0:
            raise ValueError(f'slot_width {self.slot_width} is not divisible by heads {self.heads}')
        return self

    @property
    def slots(self) -> int:
        return self.n_max + 1

    @property
    def head_dim(self) -> int:
        return self.slot_width // self.heads

    @property
    def output_width(self) -> int:
        return self.slots * self.slot_width

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)


class CellState(NamedTuple):
    """`memory` is (B, Q, P) for the RMC. The LSTM keeps its hidden state
    (B, Q*P) in `memory` and its cell state in `cell`."""
    memory: Tensor
    cell: Optional[Tensor] = None


def init_memory(config: RmcConfig) -> Tensor:
    """Row i is the i-th standard basis vector, truncated or zero-padded to
    the slot width."""
    return torch.eye(config.slots, config.slot_width, dtype=config.torch_dtype)


def _check_finite(name: str, tensor: Tensor) -> None:
    if not bool(torch.isfinite(tensor).all()):
        raise NonFiniteActivation(f'non-finite values in {name}')


class RelationalMemoryCore(nn.Module):
    def __init__(self, config: RmcConfig):
        super().__init__()
        self.config = config
        P, H, D = config.slot_width, config.heads, config.head_dim

        self.input_projection = nn.Linear(config.input_dim, P)

        self.w_q = nn.Parameter(torch.randn(H, P, D) / math.sqrt(P))
        self.w_k = nn.Parameter(torch.randn(H, P, D) / math.sqrt(P))
        self.w_v = nn.Parameter(torch.randn(H, P, D) / math.sqrt(P))
        self.attention_norm = nn.LayerNorm(P)

        self.mlp_norm = nn.LayerNorm(P)
        self.row_mlp = nn.Sequential(
            nn.Linear(P, config.attention_mlp_width),
            nn.ReLU(),
            nn.Linear(config.attention_mlp_width, P))

        # Input and forget gate pre-activations, [input | forget], per slot.
        self.gate_input = nn.Linear(P, 2 * P)
        self.gate_memory = nn.Linear(P, 2 * P, bias=False)
        with torch.no_grad():
            self.gate_input.bias[:P] = config.input_bias
            self.gate_input.bias[P:] = config.forget_bias

    def initial_state(self, batch_size: int) -> CellState:
        memory = init_memory(self.config).to(self.w_q.dtype)
        return CellState(memory.expand(batch_size, -1, -1).clone())

    def attend(self, memory: Tensor, x: Tensor) -> Tuple[Tensor, Tensor]:
        """memory (B, Q, P), projected input x (B, P). Returns the memory with
        the attention output added, and the attention weights (B, H, Q, Q+1)."""
        B, Q, P = memory.shape
        if x.shape != (B, P):
            raise ValueError(f'input of shape {tuple(x.shape)} does not match memory of shape {tuple(memory.shape)}')

        # Layer norm is row-wise, so normalising [M; x] also gives LN(M) in the
        # first Q rows.
        normed = self.attention_norm(torch.cat([memory, x[:, None, :]], dim=1))
        queries = torch.einsum('bqp,hpd->bhqd', normed[:, :Q], self.w_q)
        keys = torch.einsum('bkp,hpd->bhkd', normed, self.w_k)
        values = torch.einsum('bkp,hpd->bhkd', normed, self.w_v)

        logits = queries @ keys.transpose(-1, -2) / math.sqrt(self.config.head_dim)
        weights = torch.softmax(logits, dim=-1)
        heads = weights @ values
        return memory + heads.permute(0, 2, 1, 3).reshape(B, Q, P), weights

    def step(self, state: CellState, x_raw: Tensor) -> Tuple[CellState, Tensor]:
        memory = state.memory
        x = self.input_projection(x_raw)
        attended, _ = self.attend(memory, x)
        refined = attended + self.row_mlp(self.mlp_norm(attended))

        gates = torch.sigmoid(self.gate_input(x)[:, None, :] + self.gate_memory(memory))
        input_gate, forget_gate = gates.chunk(2, dim=-1)
        memory = forget_gate * memory + input_gate * torch.tanh(refined)
        _check_finite('memory update', memory)
        return CellState(memory), memory.flatten(1)


class LstmCore(nn.Module):
    """Plain LSTM with hidden width Q*P, same step/initial_state signatures as
    RelationalMemoryCore."""
    def __init__(self, config: RmcConfig):
        super().__init__()
        self.config = config
        self.cell = nn.LSTMCell(config.input_dim, config.output_width)
        with torch.no_grad():
            # torch orders the gates [input | forget | cell | output].
            width = config.output_width
            self.cell.bias_ih[width:2 * width] += config.forget_bias

    def initial_state(self, batch_size: int) -> CellState:
        zeros = torch.zeros(batch_size, self.config.output_width, dtype=self.cell.weight_ih.dtype)
        return CellState(zeros, zeros.clone())

    def step(self, state: CellState, x_raw: Tensor) -> Tuple[CellState, Tensor]:
        hidden, cell = self.cell(x_raw, (state.memory, state.cell))
        _check_finite('lstm state', cell)
        return CellState(hidden, cell), hidden


class SpeakerClassifier(nn.Module):
    """Recurrent core followed by the MLP head producing n_max logits."""
    def __init__(self, config: RmcConfig):
        super().__init__()
        self.config = config
        self.core = RelationalMemoryCore(config) if config.core == 'rmc' else LstmCore(config)

        layers: List[nn.Module] = []
        width = config.output_width
        for _ in range(config.mlp_head_layers):
            layers += [nn.Linear(width, config.mlp_head_width), nn.ReLU()]
            width = config.mlp_head_width
        layers.append(nn.Linear(width, config.n_max))
        self.head = nn.Sequential(*layers)

    def logits(self, elements: Tensor) -> Tensor:
        """elements (B, T, input_dim), fed in order; only the output after the
        last element reaches the head."""
        if elements.ndim != 3 or elements.shape[1] == 0:
            raise ValueError(f'expected a non-empty batch of sequences, got shape {tuple(elements.shape)}')
        if elements.shape[2] != self.config.input_dim:
            raise ValueError(f'sequence elements have dimension {elements.shape[2]}, model expects {self.config.input_dim}')
        state = self.core.initial_state(elements.shape[0])
        for t in range(elements.shape[1]):
            state, output = self.core.step(state, elements[:, t])
        return self.head(output)

    def forward(self, elements: Tensor) -> Tensor:
        return torch.softmax(self.logits(elements), dim=-1)


def build_model(config: RmcConfig) -> SpeakerClassifier:
    """Freshly initialised model. Initialisation only depends on config.seed,
    not on the global torch RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = SpeakerClassifier(config)
    return model.to(config.torch_dtype)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def match_parameter_budget(config: RmcConfig, target: int) -> RmcConfig:
    """Relational memory configuration whose attention MLP width brings the
    parameter count closest to `target`. The count is affine in that width."""
    def count(width: int) -> int:
        return parameter_count(build_model(config.model_copy(update={'core': 'rmc', 'attention_mlp_width': width})))

    at_one = count(1)
    slope = count(2) - at_one
    width = max(1, round(1 + (target - at_one) / slope))
    return config.model_copy(update={'core': 'rmc', 'attention_mlp_width': width})


# Anything with an `elements` attribute (IdentificationSequence) or a plain
# (T, input_dim) array.
SequenceLike = Any


def elements_of(seq: SequenceLike) -> NDArray[np.float64]:
    elements = np.asarray(getattr(seq, 'elements', seq), dtype=np.float64)
    if elements.ndim != 2 or elements.shape[0] == 0:
        raise ValueError(f'expected a non-empty (length, dim) sequence, got shape {elements.shape}')
    return elements


def _length_groups(sequences: Sequence[NDArray]) -> Dict[int, List[int]]:
    """Indices of equal-length sequences, keyed by length in ascending order.
    Grouping lets one batched pass handle all sequences of a length."""
    groups: Dict[int, List[int]] = {}
    for i, seq in enumerate(sequences):
        groups.setdefault(seq.shape[0], []).append(i)
    return dict(sorted(groups.items()))


def _to_tensor(model: SpeakerClassifier, arrays: Sequence[NDArray]) -> Tensor:
    return torch.as_tensor(np.stack(arrays), dtype=model.config.torch_dtype)


def attend(model: SpeakerClassifier, memory: ArrayLike, x: ArrayLike) -> Tuple[NDArray, NDArray]:
    """Single (unbatched) attention update: memory (Q, P), projected input
    x (P,). Returns the new memory and the attention weights (H, Q, Q+1)."""
    core = model.core
    if not isinstance(core, RelationalMemoryCore):
        raise TypeError('attend() needs a model with a relational memory core')
    dtype = model.config.torch_dtype
    with torch.no_grad():
        out, weights = core.attend(torch.as_tensor(np.asarray(memory), dtype=dtype)[None], torch.as_tensor(np.asarray(x), dtype=dtype)[None])
    return out[0].numpy(), weights[0].numpy()


def _step(model: SpeakerClassifier, state: Optional[CellState], x_raw: ArrayLike) -> Tuple[CellState, NDArray]:
    x = torch.as_tensor(np.asarray(x_raw), dtype=model.config.torch_dtype)
    if x.shape != (model.config.input_dim,):
        raise ValueError(f'input has shape {tuple(x.shape)}, model expects ({model.config.input_dim},)')
    with torch.no_grad():
        if state is None:
            state = model.core.initial_state(1)
        state, output = model.core.step(state, x[None])
    return state, output[0].numpy()


def rmc_step(model: SpeakerClassifier, state: Optional[CellState], x_raw: ArrayLike) -> Tuple[CellState, NDArray]:
    """One memory update for a single (unbatched) input. `state=None` starts
    from the initial memory."""
    if not isinstance(model.core, RelationalMemoryCore):
        raise TypeError('rmc_step() needs a model with a relational memory core')
    return _step(model, state, x_raw)


def lstm_step(model: SpeakerClassifier, state: Optional[CellState], x_raw: ArrayLike) -> Tuple[CellState, NDArray]:
    if not isinstance(model.core, LstmCore):
        raise TypeError('lstm_step() needs a model with an LSTM core')
    return _step(model, state, x_raw)


def forward_batch(model: SpeakerClassifier, sequences: Sequence[SequenceLike]) -> NDArray[np.float64]:
    """Posterior over the n_max positions for every sequence, (len, n_max)."""
    arrays = [elements_of(seq) for seq in sequences]
    posteriors = np.zeros((len(arrays), model.config.n_max))
    with torch.no_grad():
        for _, indices in _length_groups(arrays).items():
            probs = model(_to_tensor(model, [arrays[i] for i in indices]))
            posteriors[indices] = probs.numpy()
    return posteriors


def forward(model: SpeakerClassifier, seq: SequenceLike) -> NDArray[np.float64]:
    return forward_batch(model, [seq])[0]


def batch_loss(model: SpeakerClassifier, batch: Sequence[Tuple[SequenceLike, int]]) -> Tuple[Tensor, NDArray[np.float64]]:
    """Mean cross-entropy over the batch as a differentiable tensor, plus the
    posteriors (detached) in batch order."""
    if len(batch) == 0:
        raise ValueError('empty batch')
    arrays = [elements_of(seq) for seq, _ in batch]
    labels = [int(label) for _, label in batch]
    for label in labels:
        if not 0 <= label < model.config.n_max:
            raise ValueError(f'label {label} out of range [0, {model.config.n_max})')

    total = torch.zeros((), dtype=model.config.torch_dtype)
    posteriors = np.zeros((len(batch), model.config.n_max))
    for _, indices in _length_groups(arrays).items():
        logits = model.logits(_to_tensor(model, [arrays[i] for i in indices]))
        targets = torch.as_tensor([labels[i] for i in indices])
        total = total + F.cross_entropy(logits, targets, reduction='sum')
        posteriors[indices] = torch.softmax(logits.detach(), dim=-1).numpy()
    return total / len(batch), posteriors


def loss_and_gradients(model: SpeakerClassifier, batch: Sequence[Tuple[SequenceLike, int]]) -> Tuple[float, Dict[str, Tensor]]:
    """Mean cross-entropy and its gradient for every named parameter."""
    model.zero_grad(set_to_none=False)
    loss, _ = batch_loss(model, batch)
    loss.backward()
    gradients = {
        name: param.grad.detach().clone() if param.grad is not None else torch.zeros_like(param)
        for name, param in model.named_parameters()
    }
    return float(loss.detach()), gradients


class GradientCheck(NamedTuple):
    name: str
    shape: Tuple[int, ...]
    checked: int
    max_relative_error: float


class GradientReport(NamedTuple):
    entries: List[GradientCheck]
    tolerance: float

    @property
    def max_relative_error(self) -> float:
        return max((entry.max_relative_error for entry in self.entries), default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_relative_error <= self.tolerance


@logging.trace
def check_gradients(model: SpeakerClassifier, seq: SequenceLike, label: int, step: float = 1e-5, tol: float = 1e-4, *, max_entries: Optional[int] = 24, seed: int = 0) -> GradientReport:
    """Compare analytic gradients with central finite differences. At most
    `max_entries` coordinates per tensor are perturbed (all of them when
    None), picked by a generator seeded with `seed`. The relative error of a
    coordinate is |a - n| / max(|a|, |n|, 1e-6)."""
    batch = [(seq, label)]
    _, analytic = loss_and_gradients(model, batch)
    rng = np.random.default_rng(seed)
    entries = []

    with torch.no_grad():
        for name, param in model.named_parameters():
            flat = param.view(-1)
            if max_entries is None or flat.numel() <= max_entries:
                coords = np.arange(flat.numel())
            else:
                coords = np.sort(rng.choice(flat.numel(), size=max_entries, replace=False))

            worst = 0.0
            grad = analytic[name].view(-1)
            for i in coords:
                original = flat[i].item()
                flat[i] = original + step
                plus = float(batch_loss(model, batch)[0])
                flat[i] = original - step
                minus = float(batch_loss(model, batch)[0])
                flat[i] = original
                numeric = (plus - minus) / (2 * step)
                a = grad[i].item()
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-6))

            entries.append(GradientCheck(name, tuple(param.shape), len(coords), worst))
            logging.event('gradient_check', tensor=name, checked=len(coords), max_relative_error=worst)

    return GradientReport(entries, tol)
