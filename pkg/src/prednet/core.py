"""The PredNet hierarchy: A / Ahat / E / R units, per-timestep update, losses.

Each timestep runs two passes.  Top-down, every representation unit R_l
(a ConvLSTM) consumes its previous error E_l and the freshly updated,
upsampled R_{l+1}.  Bottom-up, the targets A_l are formed (the input frame at
l = 0, pooled convolutions of E_{l-1} above), predictions Ahat_l are read out
of R_l and the rectified positive/negative errors E_l are formed.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import kernels as K
from .autograd import Tensor
from .errors import ConfigError, ContractError, DimensionError, FormatError

LOSS_MODES = ("L0", "Lall")


@dataclass
class PredNetConfig:
    num_layers: int = 4
    a_channels: tuple[int, ...] = (1, 8, 16, 32)
    r_channels: tuple[int, ...] = (8, 16, 32, 32)
    loss_mode: str = "L0"
    layer_weights: tuple[float, ...] | None = None
    time_weights: tuple[float, ...] | None = None
    pixel_max: float = 1.0
    input_size: tuple[int, int] = (32, 32)
    kernel: int = 3

    def __post_init__(self):
        self.a_channels = tuple(int(c) for c in self.a_channels)
        self.r_channels = tuple(int(c) for c in self.r_channels)
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if len(self.a_channels) != self.num_layers or len(self.r_channels) != self.num_layers:
            raise ConfigError("a_channels and r_channels need one entry per layer")
        if min(self.a_channels + self.r_channels) < 1:
            raise ConfigError("channel counts must be positive")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        l0 = (1.0,) + (0.0,) * (self.num_layers - 1)
        if self.layer_weights is None:
            self.layer_weights = l0 if self.loss_mode == "L0" else (1.0,) + (0.1,) * (self.num_layers - 1)
        self.layer_weights = tuple(float(w) for w in self.layer_weights)
        if len(self.layer_weights) != self.num_layers or min(self.layer_weights) < 0:
            raise ConfigError("layer_weights need one nonnegative entry per layer")
        if (self.loss_mode == "L0") != (self.layer_weights == l0):
            raise ConfigError("loss_mode L0 requires layer weights (1, 0, ..., 0) and only L0 may use them")
        if self.time_weights is not None:
            self.time_weights = tuple(float(w) for w in self.time_weights)
            if min(self.time_weights) < 0:
                raise ConfigError("time_weights must be nonnegative")
        if self.pixel_max <= 0:
            raise ConfigError("pixel_max must be positive")

    def layer_sizes(self) -> list[tuple[int, int]]:
        h, w = self.input_size
        f = 2 ** (self.num_layers - 1)
        if h % f or w % f:
            raise ConfigError(f"input size {h}x{w} is not divisible by {f} for {self.num_layers} layers")
        return [(h >> l, w >> l) for l in range(self.num_layers)]

    def time_weights_for(self, T: int) -> tuple[float, ...]:
        if self.time_weights is not None:
            if len(self.time_weights) != T:
                raise ConfigError(f"time_weights has {len(self.time_weights)} entries, sequence has {T}")
            return self.time_weights
        if T < 2:
            raise ContractError("loss needs at least two frames")
        return (0.0,) + (1.0 / (T - 1),) * (T - 1)


@dataclass
class LayerState:
    A: Tensor
    Ahat: Tensor
    E: Tensor
    R: Tensor
    cell: Tensor


@dataclass
class RolloutTrace:
    """Predictions and unit activity of one (batched) rollout.

    ``abs_E`` / ``abs_R`` hold mean absolute activations per
    ``(sample, t, layer)``.
    """

    predictions: list[Tensor]
    states: list[list[LayerState]]
    abs_E: np.ndarray
    abs_R: np.ndarray
    extras: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.predictions)

    @property
    def mean_abs_E(self) -> np.ndarray:
        """[T, L] averaged over the batch."""
        return self.abs_E.mean(axis=0)

    @property
    def mean_abs_R(self) -> np.ndarray:
        return self.abs_R.mean(axis=0)

    def prediction_array(self) -> np.ndarray:
        """[N, T, C, H, W] prediction frames."""
        return np.stack([p.data for p in self.predictions], axis=1)


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, unit name) so shared units initialise
    identically regardless of which other units a model owns."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def as_batch(sequence) -> np.ndarray:
    """Accept [T, C, H, W] or [N, T, C, H, W] and return the batched form."""
    arr = np.asarray(sequence.data if isinstance(sequence, Tensor) else sequence)
    if arr.ndim == 4:
        arr = arr[None]
    if arr.ndim != 5:
        raise DimensionError(f"sequence must be [T,C,H,W] or [N,T,C,H,W], got {arr.shape}")
    return arr


class PredNet:
    """Vanilla PredNet; weights are created deterministically from ``seed``."""

    def __init__(self, config: PredNetConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        self.sizes = config.layer_sizes()
        self.params: dict[str, Tensor] = {}
        self._build()
        self._units = self._group_units()

    # ----------------------------------------------------------- parameters

    def _feedback_channels(self, layer: int) -> int:
        return 0

    def _add(self, name: str, values: np.ndarray) -> None:
        self.params[name] = Tensor(values, requires_grad=True)

    def _build(self) -> None:
        cfg = self.config
        L, k = cfg.num_layers, cfg.kernel
        for l in range(L):
            a, r = cfg.a_channels[l], cfg.r_channels[l]
            r_in = 2 * a + (cfg.r_channels[l + 1] if l < L - 1 else 0)
            unit = f"l{l}.R"
            for key, val in K.init_convlstm(
                param_rng(self.seed, unit), r_in, r, k, self._feedback_channels(l)
            ).items():
                self._add(f"{unit}.{key}", val)
            spec = K.ConvSpec(r, a, k)
            self._add(f"l{l}.Ahat.W", spec.init_weight(param_rng(self.seed, f"l{l}.Ahat")))
            self._add(f"l{l}.Ahat.b", np.zeros(a))
            if l > 0:
                spec = K.ConvSpec(2 * cfg.a_channels[l - 1], a, k)
                self._add(f"l{l}.A.W", spec.init_weight(param_rng(self.seed, f"l{l}.A")))
                self._add(f"l{l}.A.b", np.zeros(a))

    def _group_units(self) -> dict[str, dict[str, str]]:
        units: dict[str, dict[str, str]] = {}
        for name in self.params:
            unit, key = name.rsplit(".", 1)
            units.setdefault(unit, {})[key] = name
        return units

    def unit(self, prefix: str) -> dict[str, Tensor]:
        # looked up on every call so that reassigned entries of ``params`` take effect
        return {key: self.params[name] for key, name in self._units[prefix].items()}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = sorted(set(self.params) - set(arrays))
            extra = sorted(set(arrays) - set(self.params))
            raise FormatError(f"checkpoint does not match model (missing {missing[:3]}, unexpected {extra[:3]})")
        for name, t in self.params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != t.shape:
                raise FormatError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.astype(t.data.dtype)

    # ----------------------------------------------------------- dynamics

    def initial_states(self, n: int) -> list[LayerState]:
        cfg = self.config
        states = []
        for l, (h, w) in enumerate(self.sizes):
            a, r = cfg.a_channels[l], cfg.r_channels[l]
            zero_a = Tensor(np.zeros((n, a, h, w)))
            states.append(
                LayerState(
                    A=zero_a,
                    Ahat=zero_a,
                    E=Tensor(np.zeros((n, 2 * a, h, w))),
                    R=Tensor(np.zeros((n, r, h, w))),
                    cell=Tensor(np.zeros((n, r, h, w))),
                )
            )
        return states

    def step(
        self,
        frame: Tensor | None,
        prev_states: list[LayerState] | None,
        feedback: Tensor | None = None,
        n: int | None = None,
    ) -> tuple[Tensor, list[LayerState]]:
        """Advance one timestep.

        ``frame`` is ``[N, C, H, W]``; ``None`` feeds the model's own
        prediction back in (closed loop).  ``feedback`` is an optional extra
        input group for R_{L-2}.  Returns ``(Ahat_0, states)``.
        """
        cfg = self.config
        L = cfg.num_layers
        if prev_states is None:
            if frame is None and n is None:
                raise ContractError("closed-loop step needs existing states")
            prev_states = self.initial_states(frame.shape[0] if frame is not None else n)
        if frame is not None:
            expected = (prev_states[0].E.shape[0], cfg.a_channels[0]) + self.sizes[0]
            if frame.shape != expected:
                raise DimensionError(f"frame shape {frame.shape} != expected {expected}")

        R: list[Tensor] = [None] * L  # type: ignore[list-item]
        cells: list[Tensor] = [None] * L  # type: ignore[list-item]
        for l in reversed(range(L)):
            prev = prev_states[l]
            x = prev.E
            if l < L - 1:
                x = ag.concat([x, K.upsample_nearest2(R[l + 1])], axis=1)
            extra = feedback if l == L - 2 else None
            h, st = K.convlstm_step(x, K.ConvLSTMState(prev.R, prev.cell), self.unit(f"l{l}.R"), extra)
            R[l], cells[l] = h, st.cell

        states: list[LayerState] = []
        below_E = None
        for l in range(L):
            ahat_u = self.unit(f"l{l}.Ahat")
            Ahat = ag.relu(K.conv2d(R[l], ahat_u["W"], ahat_u["b"]))
            if l == 0:
                Ahat = ag.clamp_max(Ahat, cfg.pixel_max)
                A = Ahat if frame is None else frame
            else:
                a_u = self.unit(f"l{l}.A")
                A = K.maxpool2(ag.relu(K.conv2d(below_E, a_u["W"], a_u["b"])))
            E = ag.concat([ag.relu(Ahat - A), ag.relu(A - Ahat)], axis=1)
            states.append(LayerState(A=A, Ahat=Ahat, E=E, R=R[l], cell=cells[l]))
            below_E = E
        return states[0].Ahat, states

    def rollout(self, sequence, mode: str = "open_loop", t_start: int | None = None) -> RolloutTrace:
        """Run over a whole sequence.

        ``mode="closed_loop"`` feeds the model's predictions back as input
        from ``t_start`` on; ``t_start == T`` is the same as open loop.
        """
        seq = as_batch(sequence)
        N, T = seq.shape[:2]
        if mode == "open_loop":
            t_start = T
        elif mode == "closed_loop":
            if t_start is None or not 2 <= t_start <= T:
                raise ContractError(f"closed-loop t_start must lie in [2, {T}], got {t_start}")
        else:
            raise ContractError(f"unknown rollout mode {mode!r}")
        preds, all_states = [], []
        abs_E = np.zeros((N, T, self.config.num_layers))
        abs_R = np.zeros_like(abs_E)
        extras: dict = {}
        carry = None
        for t in range(T):
            frame = Tensor(seq[:, t]) if t < t_start else None
            pred, states, carry = self._advance(frame, carry, N, extras)
            preds.append(pred)
            all_states.append(states)
            for l, s in enumerate(states):
                abs_E[:, t, l] = np.abs(s.E.data).mean(axis=(1, 2, 3))
                abs_R[:, t, l] = np.abs(s.R.data).mean(axis=(1, 2, 3))
        return RolloutTrace(preds, all_states, abs_E, abs_R, extras)

    def _advance(self, frame, carry, n, extras):
        """One rollout step; ``carry`` is whatever recurrent state the model
        threads between steps (the layer states for vanilla PredNet)."""
        pred, states = self.step(frame, carry, n=n)
        return pred, states, states

    # ----------------------------------------------------------- loss

    def loss(self, trace: RolloutTrace) -> Tensor:
        return prednet_loss(trace, self.config)


def prednet_loss(trace: RolloutTrace, config: PredNetConfig) -> Tensor:
    """sum_t mu_t sum_l lambda_l mean(E_l^t)."""
    mu = config.time_weights_for(trace.T)
    lam = config.layer_weights
    total = None
    for t, states in enumerate(trace.states):
        if mu[t] == 0:
            continue
        for l, s in enumerate(states):
            if lam[l] == 0:
                continue
            term = ag.scale(ag.mean(s.E), mu[t] * lam[l])
            total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return total


def init_model(config: PredNetConfig, seed: int = 0) -> PredNet:
    return PredNet(config, seed)
