"""Incremental task streams, training strategies, probing, and metrics.

A stream is an ordered list of tasks, each with a train and an eval
split.  ``run_continual`` walks the stream under one of four strategies:

* ``finetune``   -- every stage trains all parameters;
* ``fixed``      -- train the first task, then freeze the encoder;
* ``branchtune`` -- from the second task on, wrap every conv in a
  zero-initialized parallel branch, train only the branches (the host
  path is value-identity but gradient-blocked), then fold the branches
  back in so the architecture never grows;
* ``freeze_grid`` -- from the second task on, apply one of the
  conv/bn/projector freezing combinations.

After every stage a linear probe scores each seen task (plus the next
one, for forward transfer) on frozen embeddings.  Stage 0 is the
untrained seed-matched model, which doubles as the random baseline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cka as C
from . import nn
from . import selfsup
from .branch import BranchShape, compress, expand
from .checkpoint import save_checkpoint
from .data import Dataset
from .selfsup import SslConfig
from . import tensor as T
from .tensor import Tensor


# -- task streams ------------------------------------------------------------


@dataclass(frozen=True)
class TaskSplit:
    """One task's data: a train split and a held-out eval split."""

    task: int  # 1-based position in the stream
    train: Dataset
    eval: Dataset


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[TaskSplit, ...]
    kind: str                              # "class_incremental" | "data_incremental"
    seed: int
    class_to_task: dict | None = None      # class-incremental only

    def __len__(self) -> int:
        return len(self.tasks)


def _holdout(indices: np.ndarray, eval_fraction: float,
             rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Split an index set into (train, eval); both ends stay non-empty."""
    perm = rng.permutation(indices)
    n_eval = max(1, int(round(eval_fraction * len(indices))))
    n_eval = min(n_eval, len(indices) - 1)
    return perm[n_eval:], perm[:n_eval]


def split_class_incremental(dataset: Dataset, num_tasks: int, seed: int,
                            eval_fraction: float = 0.25) -> TaskStream:
    """Partition classes into ``num_tasks`` disjoint groups.

    Class order is shuffled by ``seed`` and split contiguously; group
    sizes differ by at most one when the class count is not divisible.
    Within every class a stratified eval fraction is held out.
    """
    if num_tasks < 1:
        raise ValueError(f"need at least 1 task, got {num_tasks}")
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    classes = dataset.classes
    if num_tasks > len(classes):
        raise ValueError(
            f"cannot split {len(classes)} classes into {num_tasks} tasks")
    counts = {int(c): int(np.sum(dataset.labels == c)) for c in classes}
    thin = [c for c, n in counts.items() if n < 2]
    if thin:
        raise ValueError(f"classes {thin} have fewer than 2 samples")
    order = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(seed))).permutation(classes)
    base, extras = divmod(len(classes), num_tasks)
    sizes = [base + 1] * extras + [base] * (num_tasks - extras)
    tasks = []
    class_to_task = {}
    cursor = 0
    for t, size in enumerate(sizes, start=1):
        group = order[cursor:cursor + size]
        cursor += size
        train_idx, eval_idx = [], []
        for cls in group:
            class_to_task[int(cls)] = t
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence((seed, int(cls)))))
            tr, ev = _holdout(np.flatnonzero(dataset.labels == cls),
                              eval_fraction, rng)
            train_idx.append(tr)
            eval_idx.append(ev)
        tasks.append(TaskSplit(task=t,
                               train=dataset.subset(np.concatenate(train_idx)),
                               eval=dataset.subset(np.concatenate(eval_idx))))
    return TaskStream(tasks=tuple(tasks), kind="class_incremental",
                      seed=seed, class_to_task=class_to_task)


def split_data_incremental(dataset: Dataset, num_tasks: int, seed: int,
                           eval_fraction: float = 0.25) -> TaskStream:
    """Shuffle all samples by ``seed`` and cut near-equal disjoint chunks.

    Every task may contain every class; only the sample index sets are
    disjoint.  Each chunk holds out its own eval fraction.
    """
    if num_tasks < 1:
        raise ValueError(f"need at least 1 task, got {num_tasks}")
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    n = len(dataset)
    if n < 2 * num_tasks:
        raise ValueError(
            f"{n} samples cannot fill {num_tasks} tasks of at least 2 each")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    perm = rng.permutation(n)
    base, extras = divmod(n, num_tasks)
    sizes = [base + 1] * extras + [base] * (num_tasks - extras)
    tasks = []
    cursor = 0
    for t, size in enumerate(sizes, start=1):
        chunk = perm[cursor:cursor + size]
        cursor += size
        n_eval = max(1, int(round(eval_fraction * size)))
        n_eval = min(n_eval, size - 1)
        tasks.append(TaskSplit(task=t,
                               train=dataset.subset(chunk[n_eval:]),
                               eval=dataset.subset(chunk[:n_eval])))
    return TaskStream(tasks=tuple(tasks), kind="data_incremental", seed=seed)


# -- accuracy bookkeeping ----------------------------------------------------


class AccuracyMatrix:
    """Probe accuracies indexed as [stage][task].

    Stages run 0..T where stage 0 is the untrained model; tasks run
    1..T.  Unfilled cells are NaN.
    """

    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise ValueError(f"need at least 1 task, got {num_tasks}")
        self.num_tasks = num_tasks
        self.values = np.full((num_tasks + 1, num_tasks), np.nan)

    def _check(self, stage: int, task: int) -> None:
        if not 0 <= stage <= self.num_tasks:
            raise ValueError(f"stage {stage} outside 0..{self.num_tasks}")
        if not 1 <= task <= self.num_tasks:
            raise ValueError(f"task {task} outside 1..{self.num_tasks}")

    def set(self, stage: int, task: int, value: float) -> None:
        self._check(stage, task)
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self.values[stage, task - 1] = value

    def get(self, stage: int, task: int) -> float:
        self._check(stage, task)
        return float(self.values[stage, task - 1])

    def has(self, stage: int, task: int) -> bool:
        self._check(stage, task)
        return not math.isnan(self.values[stage, task - 1])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("stage,task,accuracy\n")
            for stage in range(self.num_tasks + 1):
                for task in range(1, self.num_tasks + 1):
                    if self.has(stage, task):
                        fh.write(f"{stage},{task},"
                                 f"{self.get(stage, task)!r}\n")

    @classmethod
    def read_csv(cls, path) -> "AccuracyMatrix":
        rows = []
        with open(path, newline="") as fh:
            header = fh.readline().strip()
            if header != "stage,task,accuracy":
                raise ValueError(f"{path}: unexpected header {header!r}")
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                stage_s, task_s, acc_s = line.split(",")
                rows.append((int(stage_s), int(task_s), float(acc_s)))
        if not rows:
            raise ValueError(f"{path}: no accuracy rows")
        # stage s can only exist in a matrix with at least s tasks
        matrix = cls(max(max(task for _, task, _ in rows),
                         max(stage for stage, _, _ in rows)))
        for stage, task, acc in rows:
            matrix.set(stage, task, acc)
        return matrix


# -- linear probing ----------------------------------------------------------


@dataclass
class ProbeConfig:
    epochs: int = 50
    lr: float = 0.2
    momentum: float = 0.9
    batch_size: int = 64
    weight_decay: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("probe epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("probe lr must be positive")


def _embed_all(encoder, images: np.ndarray, batch: int = 256) -> np.ndarray:
    parts = [encoder.embed(images[s:s + batch])
             for s in range(0, len(images), batch)]
    return np.concatenate(parts).astype(np.float64)


def linear_probe(encoder, train_split: Dataset, eval_split: Dataset,
                 cfg: ProbeConfig) -> float:
    """Top-1 accuracy of a softmax head trained on frozen embeddings.

    ``encoder`` needs only an ``embed(images) -> (n, d)`` method and is
    never modified.  Features are standardized by the train split's
    statistics; the head starts at zero and trains by softmax
    cross-entropy, so the result is deterministic for a given probe
    seed.  Labels may be arbitrary integers; eval labels must be a
    subset of train labels and eval must contain at least two classes.
    """
    cfg.validate()
    classes = np.unique(train_split.labels)
    if len(classes) < 2:
        raise ValueError("probe needs at least 2 training classes")
    eval_classes = np.unique(eval_split.labels)
    if len(eval_classes) < 2:
        raise ValueError("single-class eval split cannot rank a probe")
    if not np.all(np.isin(eval_classes, classes)):
        raise ValueError(
            f"eval labels {sorted(set(eval_classes) - set(classes))} "
            f"never appear in the train split")

    xtr = _embed_all(encoder, train_split.images)
    xev = _embed_all(encoder, eval_split.images)
    mean = xtr.mean(axis=0)
    std = xtr.std(axis=0)
    std[std < 1e-8] = 1.0
    xtr = (xtr - mean) / std
    xev = (xev - mean) / std

    remap = {int(c): i for i, c in enumerate(classes)}
    ytr = np.array([remap[int(label)] for label in train_split.labels])
    yev = np.array([remap[int(label)] for label in eval_split.labels])
    k = len(classes)
    n, d = xtr.shape
    onehot = np.eye(k)[ytr]

    weight = Tensor(np.zeros((k, d)), requires_grad=True)
    bias = Tensor(np.zeros(k), requires_grad=True)
    opt = nn.SGD([weight, bias], lr=cfg.lr, momentum=cfg.momentum,
                 weight_decay=cfg.weight_decay)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            x = Tensor(xtr[idx])
            target = Tensor(onehot[idx])
            logits = T.matmul(x, weight.T) + bias
            # constant per-row shift keeps exp bounded without touching grads
            shift = Tensor(logits.data.max(axis=1, keepdims=True))
            log_norm = ((logits - shift).exp().sum(axis=1).log()
                        + shift.reshape(len(idx)))
            ce = (log_norm - (logits * target).sum(axis=1)).mean()
            opt.zero_grad()
            ce.backward()
            opt.step()
    scores = xev @ weight.data.T + bias.data
    return float(np.mean(scores.argmax(axis=1) == yev))


# -- strategies and run configuration ----------------------------------------


STRATEGY_KINDS = ("finetune", "fixed", "branchtune", "freeze_grid")


@dataclass(frozen=True)
class StrategySpec:
    """Which parameters may move from the second task on.

    ``fix_bn`` of None resolves by branch shape: bn stays trainable
    under a 1x1 branch and is frozen under wider ones.
    """

    kind: str = "branchtune"
    branch_shape: BranchShape = BranchShape.K1X3
    fix_bn: bool | None = None
    freeze: nn.Strategy = nn.Strategy.FINE_TUNE_ALL  # freeze_grid only

    def validate(self) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(
                f"unknown strategy {self.kind!r}, expected one of "
                f"{STRATEGY_KINDS}")

    def resolved_fix_bn(self) -> bool:
        if self.fix_bn is not None:
            return self.fix_bn
        return self.branch_shape is not BranchShape.K1X1


@dataclass
class RunConfig:
    spec: nn.BackboneSpec
    strategy: StrategySpec
    ssl: SslConfig
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    model_seed: int = 0
    profile_cka: bool = True
    joint_reference: bool = True
    cka_samples: int = 256
    cka_seed: int = 0
    output_dir: str | Path | None = None
    config_text: str = ""    # canonical effective config, echoed in the report
    config_digest: str = ""


@dataclass
class RunResult:
    model: nn.Model
    accuracy: AccuracyMatrix
    profiles: list[C.CkaProfile]
    report: dict
    loss_logs: dict[int, list[float]]


def joint_train_reference(stream: TaskStream, upto: int,
                          cfg: RunConfig) -> nn.Model:
    """Fresh model trained once on the union of tasks 1..``upto``.

    Uses the same backbone seed and the same training config as the
    incremental run, so it is the everything-at-once counterfactual.
    """
    if not 1 <= upto <= len(stream.tasks):
        raise ValueError(f"upto {upto} outside 1..{len(stream.tasks)}")
    model = nn.build_backbone(cfg.spec, cfg.model_seed)
    images = np.concatenate([t.train.images for t in stream.tasks[:upto]])
    selfsup.ssl_train_task(model, images, cfg.ssl)
    return model


# -- metrics -----------------------------------------------------------------


def metrics(acc: AccuracyMatrix, random_baseline) -> dict[str, float]:
    """Final average accuracy, forgetting, and forward transfer.

    With T tasks: the average is over the final stage's row; forgetting
    averages, over tasks 1..T-1, the gap between a task's best
    post-exposure accuracy and its final accuracy (never negative);
    forward transfer averages, over tasks 2..T, the margin of the
    stage-(i-1) encoder over the random baseline on task i.  The last
    two are NaN for a single-task stream.
    """
    t_final = acc.num_tasks
    baseline = np.asarray(random_baseline, dtype=np.float64)
    if baseline.shape != (t_final,):
        raise ValueError(
            f"need {t_final} baseline accuracies, got shape {baseline.shape}")
    final = acc.values[t_final]
    if np.isnan(final).any():
        missing = [i + 1 for i in np.flatnonzero(np.isnan(final))]
        raise ValueError(f"final-stage accuracies missing for tasks {missing}")
    a_val = float(final.mean())
    if t_final == 1:
        return {"A": a_val, "F": float("nan"), "FT": float("nan")}
    drops = []
    for task in range(1, t_final):
        seen = acc.values[task:t_final + 1, task - 1]  # stages task..T only
        if np.isnan(seen).any():
            raise ValueError(f"post-exposure accuracies missing for task {task}")
        drops.append(float(seen.max()) - float(final[task - 1]))
    gains = []
    for task in range(2, t_final + 1):
        prev_stage = acc.values[task - 1, task - 1]
        if math.isnan(prev_stage):
            raise ValueError(f"stage {task - 1} accuracy on task {task} missing")
        if math.isnan(baseline[task - 1]):
            raise ValueError(f"random baseline missing for task {task}")
        gains.append(float(prev_stage) - float(baseline[task - 1]))
    return {"A": a_val,
            "F": float(np.mean(drops)),
            "FT": float(np.mean(gains))}


# -- the continual loop ------------------------------------------------------


def _sample_images(images: np.ndarray, count: int, seed_key) -> np.ndarray:
    if len(images) <= count:
        return images
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed_key)))
    return images[rng.choice(len(images), size=count, replace=False)]


def _json_value(x: float):
    return None if math.isnan(x) else x


def _assemble_report(acc: AccuracyMatrix, baseline: list[float],
                     cfg: RunConfig, partial: bool) -> dict:
    report = {"R": [_json_value(b) for b in baseline],
              "config": cfg.config_text,
              "config_digest": cfg.config_digest}
    if partial:
        report.update({"A": None, "F": None, "FT": None})
    else:
        m = metrics(acc, baseline)
        report.update({k: _json_value(v) for k, v in m.items()})
    return report


def write_outputs(result: RunResult, out_dir) -> None:
    """Write metrics.json, the accuracy table, and per-stage cka tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(result.report, sort_keys=True, indent=2)
    (out / "metrics.json").write_text(text + "\n")
    result.accuracy.write_csv(out / "accuracy_matrix.csv")
    for profile in result.profiles:
        profile.write_csv(out / f"cka_stage_{profile.stage}.csv")


def run_continual(stream: TaskStream, cfg: RunConfig) -> RunResult:
    """Train through the stream under the configured strategy.

    Every strategy trains the first task with all parameters free; they
    differ from the second task on.  After each stage, probes fill the
    accuracy row for tasks up to one past the current stage; from stage
    2 on (when profiling is enabled) the previous model, the current
    model, and a jointly trained reference produce a per-layer
    similarity profile.  A failure mid-stream still writes the partial
    outputs before propagating.
    """
    cfg.spec.validate()
    cfg.strategy.validate()
    cfg.ssl.validate()
    cfg.probe.validate()
    num_tasks = len(stream.tasks)
    if num_tasks < 1:
        raise ValueError("empty task stream")
    out = Path(cfg.output_dir) if cfg.output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    model = nn.build_backbone(cfg.spec, cfg.model_seed)
    acc = AccuracyMatrix(num_tasks)
    profiles: list[C.CkaProfile] = []
    loss_logs: dict[int, list[float]] = {}
    baseline: list[float] = []

    def probe_into(stage: int, tasks: range) -> None:
        for j in tasks:
            split = stream.tasks[j - 1]
            acc.set(stage, j,
                    linear_probe(model, split.train, split.eval, cfg.probe))

    try:
        # stage 0: the untrained seed-matched model is the random baseline
        probe_into(0, range(1, num_tasks + 1))
        baseline.extend(acc.get(0, j) for j in range(1, num_tasks + 1))

        for stage in range(1, num_tasks + 1):
            split = stream.tasks[stage - 1]
            prev = (model.clone()
                    if cfg.profile_cka and stage >= 2 else None)
            log: list[float] = []
            if stage == 1 or cfg.strategy.kind == "finetune":
                nn.set_strategy(model, nn.Strategy.FINE_TUNE_ALL)
                selfsup.ssl_train_task(model, split.train, cfg.ssl, loss_log=log)
            elif cfg.strategy.kind == "fixed":
                # frozen encoder: a training pass could not move anything
                nn.set_strategy(model, nn.Strategy.FIXED_ALL)
            elif cfg.strategy.kind == "freeze_grid":
                nn.set_strategy(model, cfg.strategy.freeze)
                selfsup.ssl_train_task(model, split.train, cfg.ssl, loss_log=log)
            else:  # branchtune
                expanded = expand(model, cfg.strategy.branch_shape,
                                  fix_bn=cfg.strategy.resolved_fix_bn())
                selfsup.ssl_train_task(expanded, split.train, cfg.ssl,
                                       loss_log=log)
                model = compress(expanded)
            loss_logs[stage] = log

            probe_into(stage, range(1, min(stage + 1, num_tasks) + 1))

            if cfg.profile_cka and stage >= 2:
                joint = (joint_train_reference(stream, stage, cfg)
                         if cfg.joint_reference else None)
                old_images = _sample_images(
                    np.concatenate([t.eval.images
                                    for t in stream.tasks[:stage - 1]]),
                    cfg.cka_samples, (cfg.cka_seed, stage, 0))
                new_images = _sample_images(split.eval.images,
                                            cfg.cka_samples,
                                            (cfg.cka_seed, stage, 1))
                profiles.append(C.stability_plasticity(
                    prev, model, joint, old_images, new_images, stage=stage))

            if out is not None:
                save_checkpoint(model, out / f"checkpoint_stage_{stage}.ckpt")
    except Exception:
        if out is not None:
            partial = RunResult(model=model, accuracy=acc, profiles=profiles,
                                report=_assemble_report(acc, baseline, cfg,
                                                        partial=True),
                                loss_logs=loss_logs)
            write_outputs(partial, out)
        raise

    report = _assemble_report(acc, baseline, cfg, partial=False)
    result = RunResult(model=model, accuracy=acc, profiles=profiles,
                       report=report, loss_logs=loss_logs)
    if out is not None:
        write_outputs(result, out)
    return result
