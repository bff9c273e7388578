"""Experiment configuration, training loop, evaluation, extrapolation and probing.

Configuration files are INI text with one section per concern::

    [experiment]  seed
    [model]       num_layers, a_channels, r_channels, loss_mode, ...
    [classifier]  present only for PredNet+ runs
    [optimizer]   learning_rate, decay_factor, patience, epochs, batch_size
    [data]        dataset paths, fps_factor, generator settings
    [eval]        tau, t_starts, n

Everything downstream of (config, seed) is deterministic, so artifacts from
two identical runs are byte-identical.
"""

from __future__ import annotations

import configparser
import csv
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import checkpoint
from . import metrics as M
from .core import PredNet, PredNetConfig
from .datagen import LabeledSequence, SceneSpec, builtin_glyphs, gen_dataset, load_digits_idx, read_vseq
from .errors import ConfigError, ContractError, FormatError, NumericError
from .plus import ClassifierConfig, PredNetPlus, aggregate_logits, axis_groups, sequence_label, topk_hits

EVAL_BATCH = 50


# ------------------------------------------------------------------ config


KEEP_CHOICES = ("last", "val_loss", "val_mae")


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    decay_factor: float = 0.5
    patience: int = 3
    epochs: int = 10
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    keep: str = "last"  # which epoch's weights to save: last, val_loss or val_mae (lowest)

    def __post_init__(self):
        if self.learning_rate <= 0 or not 0 < self.decay_factor <= 1:
            raise ConfigError("learning_rate must be positive and decay_factor in (0, 1]")
        if self.keep not in KEEP_CHOICES:
            raise ConfigError(f"keep must be one of {KEEP_CHOICES}")
        if self.patience < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("patience and batch_size must be >= 1, epochs >= 0")


@dataclass
class DataConfig:
    train: str | None = None
    val: str | None = None
    test: str | None = None
    fps_factor: int = 1
    num_train: int = 200
    num_val: int = 40
    num_test: int = 40
    seq_len: int = 10
    canvas: tuple[int, int] = (32, 32)
    num_shapes: int = 6
    glyph_size: int = 10
    speed: int = 1
    glyphs: str | None = None

    def __post_init__(self):
        if self.fps_factor < 1:
            raise ConfigError("fps_factor must be >= 1")
        if min(self.num_train, self.num_val, self.num_test) < 0:
            raise ConfigError("dataset sizes must be nonnegative")

    def scene(self) -> SceneSpec:
        return SceneSpec(
            canvas=tuple(self.canvas),
            num_shapes=self.num_shapes,
            glyph_size=self.glyph_size,
            speed=self.speed,
            seq_len=self.seq_len,
        )


@dataclass
class EvalConfig:
    tau: float = M.DEFAULT_TAU
    t_starts: tuple[int, ...] = ()
    n: int | None = None
    dump_sequences: int = 2

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.n is not None and self.n < 1:
            raise ConfigError("n must be >= 1")


@dataclass
class ExperimentConfig:
    model: PredNetConfig = field(default_factory=PredNetConfig)
    classifier: ClassifierConfig | None = None
    zero_decoder: bool = False
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    base_dir: Path = field(default_factory=Path)

    def build_model(self) -> PredNet:
        if self.classifier is None:
            return PredNet(self.model, self.seed)
        model = PredNetPlus(self.model, self.classifier, self.seed)
        if self.zero_decoder:
            model.zero_decoder()
        return model

    def dataset_path(self, split: str) -> Path:
        value = getattr(self.data, split)
        if value is None:
            raise ConfigError(f"[data] {split} path is not set")
        path = Path(value)
        return path if path.is_absolute() else self.base_dir / path

    def require_datasets(self, *splits: str) -> None:
        for split in splits:
            path = self.dataset_path(split)
            if not path.exists():
                raise ConfigError(f"{split} dataset {path} does not exist")

    def load_split(self, split: str) -> list[LabeledSequence]:
        self.require_datasets(split)
        return [subsample_fps(s, self.data.fps_factor) for s in read_vseq(self.dataset_path(split))]

    @classmethod
    def from_ini(cls, path, seed: int | None = None) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        return cls.from_string(path.read_text(), base_dir=path.parent, seed=seed)

    @classmethod
    def from_string(cls, text: str, base_dir=".", seed: int | None = None) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config: {exc}") from exc
        known = {"experiment", "model", "classifier", "optimizer", "data", "eval"}
        unknown = set(parser.sections()) - known
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")

        def section(name: str) -> dict[str, str]:
            return dict(parser[name]) if parser.has_section(name) else {}

        exp = section("experiment")
        cfg_seed = _parse_value(exp.pop("seed", "0"), int, "seed")
        if exp:
            raise ConfigError(f"unknown [experiment] keys {sorted(exp)}")
        classifier = None
        zero_decoder = False
        if parser.has_section("classifier"):
            cls_items = section("classifier")
            zero_decoder = _parse_value(cls_items.pop("zero_decoder", "false"), bool, "zero_decoder")
            if cls_items.get("group_map", "").strip().lower() == "axis":
                num_classes = _parse_value(cls_items.get("num_classes", "8"), int, "num_classes")
                cls_items["group_map"] = ",".join(str(g) for g in axis_groups(num_classes))
            classifier = _build(ClassifierConfig, cls_items, "classifier")
        return cls(
            model=_build(PredNetConfig, section("model"), "model"),
            classifier=classifier,
            zero_decoder=zero_decoder,
            optimizer=_build(OptimizerConfig, section("optimizer"), "optimizer"),
            data=_build(DataConfig, section("data"), "data"),
            eval=_build(EvalConfig, section("eval"), "eval"),
            seed=cfg_seed if seed is None else int(seed),
            base_dir=Path(base_dir),
        )


_CONVERTERS = {
    "num_layers": int, "a_channels": "ints", "r_channels": "ints", "loss_mode": str,
    "layer_weights": "floats", "time_weights": "floats", "pixel_max": float,
    "input_size": "ints", "kernel": int,
    "num_classes": int, "alpha": float, "beta": float, "gamma": float, "group_map": "ints",
    "group_penalty": float, "encoder_channels": "ints", "decoder_channels": int,
    "feedback_channels": int, "head": str,
    "learning_rate": float, "decay_factor": float, "patience": int, "epochs": int,
    "batch_size": int, "beta1": float, "beta2": float, "eps": float, "keep": str,
    "train": str, "val": str, "test": str, "fps_factor": int, "num_train": int, "num_val": int,
    "num_test": int, "seq_len": int, "canvas": "ints", "num_shapes": int, "glyph_size": int,
    "speed": int, "glyphs": str,
    "tau": float, "t_starts": "ints", "n": int, "dump_sequences": int,
}


def _parse_value(raw: str, kind, key: str):
    raw = raw.strip()
    try:
        if kind == "ints":
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if kind == "floats":
            return tuple(float(v) for v in raw.replace(",", " ").split())
        if kind is bool:
            if raw.lower() not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "yes", "1")
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _build(cls, items: dict[str, str], section: str):
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in items.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        if raw.strip().lower() in ("", "none"):
            kwargs[key] = None
            continue
        kwargs[key] = _parse_value(raw, _CONVERTERS[key], key)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def derived_seed(seed: int, name: str) -> int:
    """Independent 32-bit seed for a named stream (dataset split, shuffling)."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


# ------------------------------------------------------------------ data


def subsample_fps(sequence, factor: int):
    """Keep frames 0, factor, 2*factor, ... (labels follow the frames)."""
    factor = int(factor)
    if factor < 1:
        raise ContractError("fps factor must be >= 1")
    frames = sequence.frames if isinstance(sequence, LabeledSequence) else np.asarray(sequence)
    if factor > len(frames):
        raise ContractError(f"fps factor {factor} exceeds sequence length {len(frames)}")
    if isinstance(sequence, LabeledSequence):
        return LabeledSequence(sequence.frames[::factor], sequence.labels[::factor], dict(sequence.meta))
    return frames[::factor]


def generate_splits(data: DataConfig, seed: int) -> dict[str, list[LabeledSequence]]:
    glyphs = load_digits_idx(data.glyphs, data.glyph_size) if data.glyphs else builtin_glyphs(data.glyph_size)
    spec = data.scene()
    sizes = {"train": data.num_train, "val": data.num_val, "test": data.num_test}
    return {split: gen_dataset(n, derived_seed(seed, split), spec, glyphs) for split, n in sizes.items()}


def stack_frames(sequences: list[LabeledSequence]) -> np.ndarray:
    if not sequences:
        raise ContractError("empty dataset")
    return np.stack([s.frames for s in sequences])


def stack_targets(sequences: list[LabeledSequence]) -> np.ndarray:
    return np.array([sequence_label(s.labels) for s in sequences], dtype=np.int64)


# ------------------------------------------------------------------ optimizer


class Adam:
    """Adaptive moment estimation over a fixed list of parameter tensors."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.steps += 1
        c1 = 1 - self.beta1**self.steps
        c2 = 1 - self.beta2**self.steps
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)


class PlateauDecay:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs
    without a new best validation loss."""

    def __init__(self, optimizer: Adam, factor: float = 0.5, patience: int = 3):
        self.optimizer = optimizer
        self.factor, self.patience = factor, patience
        self.best = np.inf
        self.bad_epochs = 0

    def observe(self, val_loss: float) -> None:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.optimizer.lr *= self.factor
            self.bad_epochs = 0


# ------------------------------------------------------------------ training


LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_mae", "learning_rate")


@dataclass
class TrainResult:
    model: PredNet
    log: list[dict]
    checkpoint_path: Path | None = None
    log_path: Path | None = None


def _batch_loss(model: PredNet, frames: np.ndarray, targets: np.ndarray):
    trace = model.rollout(frames)
    if isinstance(model, PredNetPlus):
        return model.loss(trace, targets), trace
    return model.loss(trace), trace


def score(model: PredNet, frames: np.ndarray, targets: np.ndarray) -> tuple[float, float]:
    """Mean loss and mean next-frame MAE (frames t >= 1) without recording a graph."""
    total_loss, maes = 0.0, []
    with ag.no_grad():
        for i in range(0, len(frames), EVAL_BATCH):
            chunk = frames[i : i + EVAL_BATCH]
            loss, trace = _batch_loss(model, chunk, targets[i : i + EVAL_BATCH])
            total_loss += loss.item() * len(chunk)
            err = np.abs(trace.prediction_array()[:, 1:].astype(np.float64) - chunk[:, 1:])
            maes.append(err.mean(axis=(1, 2, 3, 4)))
    return total_loss / len(frames), float(np.concatenate(maes).mean())


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([row["epoch"], *(f"{row[c]:.9g}" for c in LOG_COLUMNS[1:])])


def _dump_failure(model: PredNet, out_dir: Path | None, epoch: int, batch: int, ids, exc: Exception) -> str:
    where = f"epoch {epoch}, batch {batch}, sequences {list(ids)}"
    if out_dir is None:
        return where
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint.save(model.state_dict(), out_dir / "failure_state.pnck")
    (out_dir / "failure.txt").write_text(f"{where}\n{exc}\n")
    return f"{where}; state dumped to {out_dir / 'failure_state.pnck'}"


def train(
    config: ExperimentConfig,
    train_set: list[LabeledSequence],
    val_set: list[LabeledSequence],
    out_dir=None,
    progress=None,
) -> TrainResult:
    """Fit the configured model; epoch 0 in the log is the untrained model.

    With ``[optimizer] keep`` set to ``val_loss`` or ``val_mae`` the returned
    and saved weights are those of the epoch with the lowest value of that
    column (earliest on ties); the log always covers every epoch.
    ``progress`` (optional) is called with each log row as it is produced.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    model = config.build_model()
    opt_cfg = config.optimizer
    opt = Adam(model.parameters(), opt_cfg.learning_rate, opt_cfg.beta1, opt_cfg.beta2, opt_cfg.eps)
    schedule = PlateauDecay(opt, opt_cfg.decay_factor, opt_cfg.patience)
    shuffle = np.random.default_rng(derived_seed(config.seed, "shuffle"))

    train_x, train_y = stack_frames(train_set), stack_targets(train_set)
    val_x, val_y = stack_frames(val_set), stack_targets(val_set)
    log = []
    best = {"value": np.inf, "state": None}

    def record(epoch: int, train_loss: float) -> None:
        val_loss, val_mae = score(model, val_x, val_y)
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_mae": val_mae, "learning_rate": opt.lr}
        log.append(row)
        if opt_cfg.keep != "last" and row[opt_cfg.keep] < best["value"]:
            best.update(value=row[opt_cfg.keep], state=model.state_dict())
        if progress is not None:
            progress(row)
        if epoch > 0:
            schedule.observe(val_loss)

    record(0, score(model, train_x, train_y)[0])
    bs = opt_cfg.batch_size
    for epoch in range(1, opt_cfg.epochs + 1):
        order = shuffle.permutation(len(train_x))
        total = 0.0
        for b, start in enumerate(range(0, len(order), bs)):
            idx = order[start : start + bs]
            try:
                opt.zero_grad()
                loss, _ = _batch_loss(model, train_x[idx], train_y[idx])
                ag.backward(loss, model.parameters())
                opt.step()
            except NumericError as exc:
                where = _dump_failure(model, out_dir, epoch, b, idx, exc)
                raise NumericError(f"training diverged at {where}: {exc}") from exc
            total += loss.item() * len(idx)
        record(epoch, total / len(train_x))

    if best["state"] is not None:
        model.load_state_dict(best["state"])
    result = TrainResult(model, log)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint_path = out_dir / "model.pnck"
        result.log_path = out_dir / "train_log.csv"
        checkpoint.save(model.state_dict(), result.checkpoint_path)
        write_log(log, result.log_path)
    return result


def load_model(config: ExperimentConfig, path) -> PredNet:
    model = config.build_model()
    model.load_state_dict(checkpoint.load(path))
    return model


# ------------------------------------------------------------------ evaluation


class CopyBaseline:
    """Pseudo-model whose prediction for frame t is frame t - 1."""


def predict(model, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Open-loop predictions [N, T, C, H, W] and, for PredNet+, class
    probabilities [N, K]."""
    if isinstance(model, CopyBaseline):
        return np.stack([M.baseline_copy(f) for f in frames]), None
    preds, probs = [], []
    with ag.no_grad():
        for i in range(0, len(frames), EVAL_BATCH):
            trace = model.rollout(frames[i : i + EVAL_BATCH])
            preds.append(trace.prediction_array())
            if isinstance(model, PredNetPlus):
                probs.append(aggregate_logits(trace.extras["logits"], model.classifier.alpha).data)
    return np.concatenate(preds), (np.concatenate(probs) if probs else None)


def evaluate(model, sequences: list[LabeledSequence], tau: float = M.DEFAULT_TAU) -> M.MetricsReport:
    """Metric suite with copy-baseline deltas; PredNet+ adds top-1/top-5
    accuracy (``report.extra``)."""
    frames = stack_frames(sequences)
    preds, probs = predict(model, frames)
    report = M.build_report(frames, preds, tau)
    if probs is not None:
        labels = stack_targets(sequences)
        report.extra["top1"] = float(topk_hits(probs, labels, 1).mean())
        report.extra["top5"] = float(topk_hits(probs, labels, 5).mean())
        report.extra["probs"] = probs
        report.extra["labels"] = labels
    return report


def write_classification_csv(probs: np.ndarray, labels: np.ndarray, path, ids=None) -> None:
    ids = range(len(labels)) if ids is None else ids
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sequence_id", "label", "top1", "top5", "probs"])
        for sid, label, p in zip(ids, labels, probs):
            order = np.argsort(-p, kind="stable")
            writer.writerow(
                [sid, int(label), int(order[0]), " ".join(str(int(c)) for c in order[:5]), " ".join(f"{v:.6g}" for v in p)]
            )


# ------------------------------------------------------------------ images


def _to_bytes(img: np.ndarray) -> bytes:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8).tobytes()


def write_pgm(path, img) -> None:
    """Binary greyscale image from a [H, W] array in [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ContractError(f"PGM needs a 2-D image, got {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + _to_bytes(img))


def write_ppm(path, img) -> None:
    """Binary colour image from a [H, W, 3] array in [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"PPM needs an [H, W, 3] image, got {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + _to_bytes(img))


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM written by this module back to [0, 1] floats."""
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] not in (b"P5", b"P6"):
        raise FormatError("not a binary PGM/PPM file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    channels = 3 if parts[0] == b"P6" else 1
    data = np.frombuffer(parts[4], dtype=np.uint8)
    if data.size != w * h * channels or maxval != 255:
        raise FormatError("PNM payload does not match its header")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape).astype(np.float64) / 255


# ------------------------------------------------------------------ extrapolation


@dataclass
class ExtrapolationReport:
    t_start: int
    steps: list[dict]

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.steps])

    def to_csv(self, path) -> None:
        cols = ["step", "frame", "mae", "psnr", "ssim", "sharpness", "copy_mae"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for row in self.steps:
                writer.writerow([M._fmt(row[c]) for c in cols])


def default_t_starts(T: int) -> tuple[int, ...]:
    return tuple(sorted({max(2, min(T - 1, round(T * q))) for q in (0.25, 0.5, 0.75)}))


def extrapolate(
    model: PredNet,
    sequences: list[LabeledSequence],
    t_start: int,
    n: int | None = None,
    out_dir=None,
    dump_sequences: int = 2,
) -> ExtrapolationReport:
    """Closed-loop rollout from ``t_start`` for ``n`` steps.

    Step k (1-based) is the prediction of frame ``t_start + k - 1``; step 1
    is still an ordinary one-step prediction.  The copy column repeats the
    last observed frame.  Frames of the first ``dump_sequences`` sequences
    are written as PGM files named after ``t_start``.
    """
    frames = stack_frames(sequences)
    T = frames.shape[1]
    if not 2 <= t_start < T:
        raise ContractError(f"t_start must lie in [2, {T - 1}], got {t_start}")
    n = T - t_start if n is None else int(n)
    if n < 1 or t_start + n > T:
        raise ContractError(f"n must lie in [1, {T - t_start}] for t_start {t_start}, got {n}")
    preds = []
    with ag.no_grad():
        for i in range(0, len(frames), EVAL_BATCH):
            chunk = frames[i : i + EVAL_BATCH, : t_start + n]
            preds.append(model.rollout(chunk, mode="closed_loop", t_start=t_start).prediction_array())
    preds = np.concatenate(preds)
    steps = []
    for k in range(1, n + 1):
        t = t_start + k - 1
        truth, guess, last = frames[:, t], preds[:, t], frames[:, t_start - 1]
        steps.append(
            {
                "step": k,
                "frame": t,
                "mae": float(np.mean([M.mae(a, b) for a, b in zip(truth, guess)])),
                "psnr": float(np.mean([M.psnr(a, b) for a, b in zip(truth, guess)])),
                "ssim": float(np.mean([M.ssim(a, b) for a, b in zip(truth, guess)])),
                "sharpness": float(np.mean([M.sharpness(b) for b in guess])),
                "copy_mae": float(np.mean([M.mae(a, b) for a, b in zip(truth, last)])),
            }
        )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for s in range(min(dump_sequences, len(frames))):
            for t in range(t_start + n):
                kind = "observed" if t < t_start else "extrapolated"
                write_pgm(out_dir / f"seq{s:03d}_tstart{t_start:02d}_t{t:02d}_{kind}.pgm", preds[s, t].mean(axis=0))
                write_pgm(out_dir / f"seq{s:03d}_tstart{t_start:02d}_t{t:02d}_truth.pgm", frames[s, t].mean(axis=0))
    return ExtrapolationReport(t_start, steps)


# ------------------------------------------------------------------ probing


@dataclass
class ProbeResult:
    mean_abs_E: np.ndarray  # [T, L]
    mean_abs_R: np.ndarray  # [T, L]
    error_rises_with_layer: bool
    bottom_r_correlation: float

    def rows(self) -> list[tuple[int, int, float, float]]:
        T, L = self.mean_abs_E.shape
        return [(t, l, float(self.mean_abs_E[t, l]), float(self.mean_abs_R[t, l])) for t in range(T) for l in range(L)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "layer", "mean_abs_E", "mean_abs_R"])
            for t, l, e, r in self.rows():
                writer.writerow([t, l, f"{e:.9g}", f"{r:.9g}"])

    def summary_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["statistic", "value"])
            writer.writerow(["error_rises_with_layer", int(self.error_rises_with_layer)])
            writer.writerow(["bottom_r_correlation", f"{self.bottom_r_correlation:.9g}"])


def trajectory_correlation(mean_abs_R: np.ndarray) -> float:
    """Pearson correlation over time between layer 0's mean |R| and the
    average trajectory of the layers above (nan when either is constant)."""
    if mean_abs_R.shape[1] < 2:
        return float("nan")
    bottom = mean_abs_R[:, 0]
    rest = mean_abs_R[:, 1:].mean(axis=1)
    if bottom.std() == 0 or rest.std() == 0:
        return float("nan")
    return float(np.corrcoef(bottom, rest)[0, 1])


def _grid(maps: list[list[np.ndarray]], size: tuple[int, int]) -> np.ndarray:
    """Tile per-(layer, t) maps (each upsampled to ``size``) into rows by layer."""
    h, w = size
    rows = []
    for layer_maps in maps:
        tiles = []
        for m in layer_maps:
            f = h // m.shape[0]
            tile = np.kron(m, np.ones((f, f)))
            peak = tile.max()
            tiles.append(tile / peak if peak > 0 else tile)
        rows.append(np.concatenate(tiles, axis=1))
    return np.concatenate(rows, axis=0)


def probe(model: PredNet, sequence, out_dir=None) -> ProbeResult:
    """Per-(t, layer) mean |E| and |R| for one sequence, plus summary flags.

    With ``out_dir`` the trace CSV, a summary CSV and channel-averaged
    activation grids (rows are layers, columns are timesteps) are written.
    """
    frames = np.asarray(sequence.frames if isinstance(sequence, LabeledSequence) else sequence)
    with ag.no_grad():
        trace = model.rollout(frames)
    E, R = trace.mean_abs_E, trace.mean_abs_R
    per_layer = E.mean(axis=0)
    result = ProbeResult(E, R, bool(np.all(np.diff(per_layer) >= 0)), trajectory_correlation(R))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.to_csv(out_dir / "probe_trace.csv")
        result.summary_csv(out_dir / "probe_summary.csv")
        size = model.sizes[0]
        for unit in ("E", "R"):
            maps = [
                [np.abs(getattr(states[l], unit).data[0]).mean(axis=0) for states in trace.states]
                for l in range(model.config.num_layers)
            ]
            write_pgm(out_dir / f"probe_{unit}.pgm", _grid(maps, size))
    return result


def with_overrides(config: ExperimentConfig, **changes) -> ExperimentConfig:
    """Shallow copy of ``config`` with top-level fields replaced."""
    return replace(config, **changes)
