"""PredNet+: PredNet with a classification pathway on the top representation.

An encoder (two ConvLSTM stages, or two plain convolutions) reads R_{L-1}
every timestep and emits class logits through global average pooling and an
affine map.  A decoder (two transposed convolutions) turns the encoder
features back into a spatial map that enters R_{L-2}'s ConvLSTM as an extra
input group on the following timestep.  Per-frame logits are combined with
exponentially increasing weights before a single softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import kernels as K
from .autograd import Tensor
from .core import PredNet, PredNetConfig, RolloutTrace, param_rng, prednet_loss
from .errors import ConfigError, ContractError, DimensionError

HEAD_KINDS = ("convlstm", "conv")


@dataclass
class ClassifierConfig:
    num_classes: int = 8
    alpha: float = 2.0
    beta: float = 1.0
    gamma: float = 1.0
    group_map: tuple[int, ...] | None = None
    group_penalty: float = 2.0
    encoder_channels: tuple[int, int] = (16, 16)
    decoder_channels: int = 16
    feedback_channels: int = 8
    head: str = "convlstm"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ConfigError("alpha, beta and gamma must be nonnegative")
        if self.beta + self.gamma <= 0:
            raise ConfigError("beta + gamma must be positive")
        if self.group_map is not None:
            self.group_map = tuple(int(g) for g in self.group_map)
            if len(self.group_map) != self.num_classes:
                raise ConfigError("group_map needs one group per class")
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"head must be one of {HEAD_KINDS}")
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if len(self.encoder_channels) != 2 or min(self.encoder_channels) < 1:
            raise ConfigError("encoder_channels needs two positive entries")
        if self.decoder_channels < 1 or self.feedback_channels < 1:
            raise ConfigError("decoder and feedback channel counts must be positive")


def axis_groups(num_classes: int = 8) -> tuple[int, ...]:
    """Pair opposite compass directions: i and i + 4 share group i mod 4."""
    return tuple(i % (num_classes // 2) for i in range(num_classes))


@dataclass
class ClassTrace:
    per_t_logits: list[Tensor]
    aggregate_probs: Tensor
    feedback_maps: list[Tensor] = field(default_factory=list)


def time_weights(alpha: float, T: int) -> np.ndarray:
    """Normalised exp(alpha * (t - T) / T) for t = 1..T."""
    if T < 1:
        raise ContractError("need at least one frame of logits")
    t = np.arange(1, T + 1)
    w = np.exp(alpha * (t - T) / T)
    return w / w.sum()


def combine_logits(per_t_logits, alpha: float) -> Tensor:
    """Time-weighted sum of per-frame logits (before the softmax)."""
    logits = [l if isinstance(l, Tensor) else Tensor(l) for l in per_t_logits]
    w = time_weights(alpha, len(logits))
    total = ag.scale(logits[0], w[0])
    for wt, lt in zip(w[1:], logits[1:]):
        total = total + ag.scale(lt, wt)
    return total


def aggregate_logits(per_t_logits, alpha: float, T: int | None = None) -> Tensor:
    """softmax(sum_t w_t * logits_t) with exponential, normalised weights."""
    logits = list(per_t_logits)
    if T is not None and T != len(logits):
        raise ContractError(f"T={T} but {len(logits)} frames of logits given")
    return K.softmax(combine_logits(logits, alpha))


def _labels_array(label, n: int, num_classes: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(label))
    if labels.size != n:
        raise ContractError(f"{labels.size} labels for {n} predictions")
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= num_classes:
        raise ContractError(f"labels must be integers in [0, {num_classes})")
    return labels.astype(np.int64)


def class_loss(log_probs: Tensor, probs: np.ndarray, label, config: ClassifierConfig) -> Tensor:
    """Batch mean of -log p[label], times ``group_penalty`` for samples whose
    top-1 class falls in a different group than the label."""
    lp = log_probs if log_probs.ndim == 2 else ag.reshape(log_probs, (1, -1))
    probs = np.atleast_2d(probs)
    n, k = lp.shape
    labels = _labels_array(label, n, config.num_classes)
    if k != config.num_classes:
        raise DimensionError(f"{k} class scores for {config.num_classes} classes")
    weights = np.ones(n)
    if config.group_map is not None:
        top1 = probs.argmax(axis=1)
        groups = np.asarray(config.group_map)
        weights = np.where(groups[top1] != groups[labels], config.group_penalty, 1.0)
    select = np.zeros((n, k))
    select[np.arange(n), labels] = -weights / n
    return ag.sum(ag.mul(lp, Tensor(select)))


def multitask_loss(frame_loss: Tensor, class_probs, label, config: ClassifierConfig, log_probs: Tensor | None = None) -> Tensor:
    """beta * frame_loss + gamma * class loss.

    ``class_probs`` is a probability tensor ([K] or [N, K]).  Pass
    ``log_probs`` (from a log-softmax) to avoid taking the log of
    probabilities that underflowed.
    """
    probs = class_probs.data if isinstance(class_probs, Tensor) else np.asarray(class_probs)
    if log_probs is None:
        p = class_probs if isinstance(class_probs, Tensor) else Tensor(class_probs)
        log_probs = ag.log(p)
    lc = class_loss(log_probs, probs, label, config)
    if config.gamma == 0:
        return ag.scale(frame_loss, config.beta)
    return ag.scale(frame_loss, config.beta) + ag.scale(lc, config.gamma)


class PredNetPlus(PredNet):
    """PredNet with the classification and feedback pathway."""

    def __init__(self, config: PredNetConfig, classifier: ClassifierConfig, seed: int = 0):
        if config.num_layers < 2:
            raise ConfigError("PredNet+ needs at least two layers (feedback goes into R_{L-2})")
        self.classifier = classifier
        super().__init__(config, seed)

    def _feedback_channels(self, layer: int) -> int:
        return self.classifier.feedback_channels if layer == self.config.num_layers - 2 else 0

    def _build(self) -> None:
        super()._build()
        cc, cfg = self.classifier, self.config
        k = cfg.kernel
        r_top = cfg.r_channels[-1]
        e0, e1 = cc.encoder_channels
        for i, (cin, cout) in enumerate(((r_top, e0), (e0, e1))):
            unit = f"cls.enc{i}"
            rng = param_rng(self.seed, unit)
            if cc.head == "convlstm":
                for key, val in K.init_convlstm(rng, cin, cout, k).items():
                    self._add(f"{unit}.{key}", val)
            else:
                self._add(f"{unit}.W", K.ConvSpec(cin, cout, k).init_weight(rng))
                self._add(f"{unit}.b", np.zeros(cout))
        self._add("cls.fc.W", K.glorot(param_rng(self.seed, "cls.fc"), (e1, cc.num_classes), e1, cc.num_classes))
        self._add("cls.fc.b", np.zeros(cc.num_classes))
        d, fb = cc.decoder_channels, cc.feedback_channels
        spec0 = K.ConvSpec(e1, d, k, stride=2)
        spec1 = K.ConvSpec(d, fb, k, stride=1)
        self._add("dec.up0.W", spec0.init_weight(param_rng(self.seed, "dec.up0"), transpose=True))
        self._add("dec.up0.b", np.zeros(d))
        # no bias on the last stage: the gates of R_{L-2} already carry one
        self._add("dec.up1.W", spec1.init_weight(param_rng(self.seed, "dec.up1"), transpose=True))

    def zero_decoder(self) -> None:
        """Set every decoder weight and bias to zero (feedback becomes 0)."""
        for name, t in self.params.items():
            if name.startswith("dec."):
                t.data = np.zeros_like(t.data)

    # ----------------------------------------------------------- pathway

    def classify_step(self, R_top: Tensor, enc_state=None):
        """Encode R_{L-1} at one timestep.

        Returns ``(logits [N, K], new encoder state, features)`` where the
        features are the last encoder stage's spatial map.
        """
        cc = self.classifier
        if R_top.ndim != 4 or R_top.shape[1] != self.config.r_channels[-1] or R_top.shape[2:] != self.sizes[-1]:
            raise DimensionError(f"R_top shape {R_top.shape} does not match the top layer")
        n = R_top.shape[0]
        h, w = self.sizes[-1]
        x = R_top
        new_state = []
        for i, cout in enumerate(cc.encoder_channels):
            u = self.unit(f"cls.enc{i}")
            if cc.head == "convlstm":
                prev = enc_state[i] if enc_state is not None else K.ConvLSTMState.zeros((n, cout, h, w))
                x, st = K.convlstm_step(x, prev, u)
                new_state.append(st)
            else:
                x = ag.relu(K.conv2d(x, u["W"], u["b"]))
                new_state.append(None)
        fc = self.unit("cls.fc")
        logits = K.linear(K.global_avg_pool(x), fc["W"], fc["b"])
        return logits, new_state, x

    def decode_feedback(self, features: Tensor) -> Tensor:
        """Map encoder features to R_{L-2}'s resolution and feedback channels."""
        expected = (self.classifier.encoder_channels[1],) + self.sizes[-1]
        if features.ndim != 4 or features.shape[1:] != expected:
            raise DimensionError(f"features shape {features.shape}, expected [N, {expected}]")
        u0, u1 = self.unit("dec.up0"), self.unit("dec.up1")
        y = ag.relu(K.conv2d_transpose(features, u0["W"], u0["b"], stride=2))
        return K.conv2d_transpose(y, u1["W"], stride=1)

    def _advance(self, frame, carry, n, extras):
        core, enc, feedback = carry if carry is not None else (None, None, None)
        pred, states = self.step(frame, core, feedback=feedback, n=n)
        logits, enc, feats = self.classify_step(states[-1].R, enc)
        feedback = self.decode_feedback(feats)
        extras.setdefault("logits", []).append(logits)
        extras.setdefault("feedback", []).append(feedback)
        return pred, states, (states, enc, feedback)

    def class_trace(self, trace: RolloutTrace) -> ClassTrace:
        logits = trace.extras["logits"]
        return ClassTrace(logits, aggregate_logits(logits, self.classifier.alpha), trace.extras["feedback"])

    def loss(self, trace: RolloutTrace, labels=None) -> Tensor:
        """Multi-task loss; without labels only the frame term is returned."""
        frame = prednet_loss(trace, self.config)
        if labels is None:
            return frame
        combined = combine_logits(trace.extras["logits"], self.classifier.alpha)
        log_probs = K.log_softmax(combined)
        return multitask_loss(frame, np.exp(log_probs.data), labels, self.classifier, log_probs=log_probs)


def sequence_label(labels) -> int:
    """Video-level target: the direction in force at the final frame."""
    return int(np.asarray(labels)[-1])


def topk_hits(probs: np.ndarray, labels, k: int) -> np.ndarray:
    probs = np.atleast_2d(probs)
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return (order == np.asarray(labels).reshape(-1, 1)).any(axis=1)


def entropy_bits(probs: np.ndarray) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), 1e-300, 1.0)
    return float(-(p * np.log(p)).sum() / math.log(2))
