"""Training loop, evaluation, multi-seed benchmarks and hyper-parameter sweeps."""

from __future__ import annotations

import csv
import functools
import hashlib
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Rng
from .errors import ConfigurationError, DivergenceError, LimoError
from .model import STRATEGIES, LinearHead, TowerConfig, build_model
from .objective import LossReport, LossWeights, limo_loss, logits, posterior
from .tasks import Episode, GeneratorSpec, Task, generate_task, import_embeddings, split_episode

TOGGLES = ("ce", "mi", "text")
SUMMARY_FIELDS = ("run_id", "strategy", "shots", "K", "lambda_ent", "lambda_cond",
                  "lambda_text", "seed_count", "mean_acc", "std_acc")
ITERATIONS_PER_SHOT = 500


@dataclass
class RunConfig:
    shots: int = 4
    query_per_class: int = 25
    classes: int = 10
    strategy: str = "lora"
    lambda_ent: float = 10.0
    lambda_cond: float = 1.0
    lambda_text: float = 0.1
    tau: float = 0.01
    rank: int = 2
    dropout: float = 0.25
    iterations: int | None = None
    learning_rate: float = 2e-3
    kl_reduction: str = "mean"
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    toggle_off: list = field(default_factory=list)
    freeze_text: bool = False
    # synthetic generator
    input_dim: int = 16
    concentration: float = 6.0
    class_correlation: float = 0.5
    samples_per_class: int | None = None
    # backbone
    hidden_dim: int = 16
    embed_dim: int = 16
    num_blocks: int = 2
    backbone_seed: int = 0
    block_scale: float = 0.2
    # io
    embeddings: str | None = None
    trace_every: int = 100

    def __post_init__(self):
        self.seeds = [int(s) for s in self.seeds]
        self.toggle_off = sorted(set(self.toggle_off))

    @property
    def resolved_iterations(self) -> int:
        return self.iterations if self.iterations is not None else ITERATIONS_PER_SHOT * self.shots

    @property
    def weights(self) -> LossWeights:
        ent, cond, text = self.lambda_ent, self.lambda_cond, self.lambda_text
        if "mi" in self.toggle_off:
            ent = cond = 0.0
        if "text" in self.toggle_off:
            text = 0.0
        return LossWeights(lambda_ent=ent, lambda_cond=cond, lambda_text=text)

    @property
    def use_ce(self) -> bool:
        return "ce" not in self.toggle_off

    def tower_config(self) -> TowerConfig:
        return TowerConfig(input_dim=self.input_dim, hidden_dim=self.hidden_dim,
                           embed_dim=self.embed_dim, num_blocks=self.num_blocks,
                           seed=self.backbone_seed, block_scale=self.block_scale)

    def generator_spec(self, seed: int) -> GeneratorSpec:
        spc = self.samples_per_class or self.shots + self.query_per_class
        return GeneratorSpec(K=self.classes, input_dim=self.input_dim, samples_per_class=spc,
                             concentration=self.concentration,
                             class_correlation=self.class_correlation, seed=seed)

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}")
        if self.iterations is not None and self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.shots < 1 or self.query_per_class < 1:
            raise ConfigurationError("shots and query_per_class must be >= 1")
        bad = set(self.toggle_off) - set(TOGGLES)
        if bad:
            raise ConfigurationError(f"unknown toggles {sorted(bad)}; expected {TOGGLES}")
        if self.embeddings and self.strategy not in ("lvp", "frozen"):
            raise ConfigurationError(
                f"strategy {self.strategy!r} needs tower internals; precomputed embeddings "
                "support lvp and frozen only")
        if self.kl_reduction not in ("mean", "sum"):
            raise ConfigurationError("kl_reduction must be 'mean' or 'sum'")
        if not self.tau > 0 or not self.learning_rate > 0:
            raise ConfigurationError("tau and learning_rate must be positive")
        self.weights  # noqa: B018  (validates nonnegativity)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    def run_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


@dataclass
class RunResult:
    config: dict
    seeds: list
    accuracies: list
    zero_shot_accuracies: list
    mean_acc: float
    std_acc: float
    traces: dict
    wall_clock: float = 0.0

    def to_json(self, include_wall_clock: bool = True) -> str:
        data = asdict(self)
        if not include_wall_clock:
            data.pop("wall_clock")
        return json.dumps(data, sort_keys=True, indent=2)

    def summary_row(self) -> dict:
        cfg = RunConfig.from_dict(self.config)
        w = cfg.weights
        return {"run_id": cfg.run_id(), "strategy": cfg.strategy, "shots": cfg.shots,
                "K": cfg.classes, "lambda_ent": w.lambda_ent, "lambda_cond": w.lambda_cond,
                "lambda_text": w.lambda_text, "seed_count": len(self.seeds),
                "mean_acc": self.mean_acc, "std_acc": self.std_acc}


class Adam:
    """Adam with a cosine-decayed step size, updating tensors in place."""

    def __init__(self, params, lr: float, total_steps: int,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.total = total_steps
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * self.t / self.total))

    def step(self) -> None:
        lr = self.current_lr()
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _episode_features(task: Task, episode: Episode) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack support then query rows; returns features and the two row ranges."""
    rows = np.concatenate([episode.support, episode.query])
    n_s = len(episode.support)
    return task.features[rows], np.arange(n_s), np.arange(n_s, len(rows))


def _class_input(model, task: Task):
    return None if getattr(model, "prompts", None) is not None else task.class_tokens


def zero_shot_snapshot(model, task: Task, episode: Episode) -> np.ndarray:
    """Posterior of the unadapted model over the query rows, in eval mode."""
    model.eval()
    with ad.no_grad():
        img = model.encode_images(task.features[episode.query])
        cls = model.encode_classes(_class_input(model, task))
        return posterior(logits(img, cls), model.tau).probs.data.copy()


def train_episode(model, episode: Episode, task: Task, cfg: RunConfig, *,
                  rng: Rng | None = None, loss_fn: Callable | None = None,
                  on_step: Callable | None = None, trace_every: int | None = None):
    """Full-batch transductive adaptation of ``model`` on one episode.

    Returns ``(model, trace)`` where ``trace`` lists LossReport dicts every
    ``trace_every`` steps (and at the final step).  ``loss_fn`` replaces the
    objective (same signature as :func:`limo_loss`); ``on_step`` receives
    ``(step, image_emb, class_emb, report)`` before each update.
    """
    cfg.validate()
    if task.mode == "precomputed" and not isinstance(model, LinearHead):
        raise ConfigurationError("precomputed tasks need a LinearHead model")
    if loss_fn is None:
        loss_fn = functools.partial(limo_loss, kl_reduction=cfg.kl_reduction)
    trace_every = trace_every or cfg.trace_every
    steps = cfg.resolved_iterations
    weights = cfg.weights
    rng = rng or Rng(0).fork("dropout")

    snapshot = zero_shot_snapshot(model, task, episode)
    feats, s_rows, q_rows = _episode_features(task, episode)
    if not cfg.use_ce:
        s_rows = s_rows[:0]
    onehot = episode.support_onehot[: len(s_rows)]

    params = [t for _, t in model.trainable()]
    trace: list[dict] = []
    if not params:
        # nothing to adapt; still report the objective once
        with ad.no_grad():
            img = model.encode_images(feats)
            cls = model.encode_classes(_class_input(model, task))
            _, report = loss_fn(img, cls, s_rows, onehot, q_rows, snapshot, weights,
                                model.tau, diagnostic=not cfg.use_ce)
        trace.append({"step": 0, **report.to_dict()})
        return model, trace

    text_trainable = any(k.startswith("text.") for k, _ in model.trainable())
    fixed_cls = None
    if not text_trainable:
        with ad.no_grad():
            fixed_cls = model.encode_classes(_class_input(model, task))

    opt = Adam(params, cfg.learning_rate, steps)
    model.train(rng)
    x = ad.Tensor(feats)
    for step in range(steps):
        model.zero_grad()
        img = model.encode_images(x)
        cls = fixed_cls if fixed_cls is not None else model.encode_classes(_class_input(model, task))
        loss, report = loss_fn(img, cls, s_rows, onehot, q_rows, snapshot, weights,
                               model.tau, diagnostic=not cfg.use_ce)
        if not np.isfinite(report.total):
            raise DivergenceError(step, report)
        if on_step is not None:
            on_step(step, img, cls, report)
        if step % trace_every == 0 or step == steps - 1:
            trace.append({"step": step, **report.to_dict()})
        loss.backward()
        opt.step()
    model.eval()
    return model, trace


def evaluate(model, episode: Episode, task: Task) -> float:
    """Top-1 query accuracy in eval mode; ties go to the lowest class index."""
    probs = zero_shot_snapshot(model, task, episode)
    pred = np.argmax(probs, axis=1)
    return float(np.mean(pred == task.labels[episode.query]))


def _load_task(cfg: RunConfig, rng: Rng) -> Task:
    if cfg.embeddings:
        task = import_embeddings(cfg.embeddings)
        if task.K != cfg.classes:
            raise ConfigurationError(
                f"{cfg.embeddings} holds {task.K} classes but the config says {cfg.classes}")
        return task
    return generate_task(cfg.generator_spec(rng.seed), rng.fork("task"))


def make_model(cfg: RunConfig, task: Task, rng: Rng):
    if task.mode == "precomputed":
        return LinearHead(task.class_tokens, cfg.strategy, cfg.tau)
    return build_model(cfg.tower_config(), cfg.strategy, rank=cfg.rank, dropout=cfg.dropout,
                       tau=cfg.tau, class_tokens=task.class_tokens,
                       freeze_text=cfg.freeze_text, rng=rng.fork("adapters"))


def run_seed(cfg: RunConfig, seed: int) -> tuple[float, float, list]:
    """One seed end to end: ``(zero_shot_acc, adapted_acc, trace)``."""
    rng = Rng(seed)
    task = _load_task(cfg, rng)
    episode = split_episode(task, cfg.shots, cfg.query_per_class, rng.fork("episode"))
    model = make_model(cfg, task, rng)
    zs = evaluate(model, episode, task)
    model, trace = train_episode(model, episode, task, cfg, rng=rng.fork("dropout"))
    return zs, evaluate(model, episode, task), trace


def run_benchmark(cfg: RunConfig, out_dir=None) -> RunResult:
    cfg.validate()
    start = time.perf_counter()
    accs, zss, traces = [], [], {}
    for seed in cfg.seeds:
        try:
            zs, acc, trace = run_seed(cfg, seed)
        except LimoError as exc:
            exc.seed = seed
            exc.args = (f"seed {seed}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
            raise
        zss.append(zs)
        accs.append(acc)
        traces[str(seed)] = trace
    arr = np.asarray(accs)
    result = RunResult(config=cfg.to_dict(), seeds=list(cfg.seeds), accuracies=accs,
                       zero_shot_accuracies=zss, mean_acc=float(arr.mean()),
                       std_acc=float(arr.std()), traces=traces,
                       wall_clock=time.perf_counter() - start)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def write_outputs(result: RunResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "result.json").write_text(result.to_json())
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        w.writerow(result.summary_row())
    with open(out / "trace.jsonl", "w") as fh:
        for seed, trace in result.traces.items():
            for rec in trace:
                fh.write(json.dumps({"seed": int(seed), **rec}, sort_keys=True) + "\n")


SWEEPABLE = ("lambda_ent", "lambda_cond", "lambda_text")


def sweep(cfg: RunConfig, parameter: str, values, out_dir=None) -> list[dict]:
    """One benchmark per value of ``parameter``, others held fixed."""
    if parameter not in SWEEPABLE:
        raise ConfigurationError(f"can only sweep {SWEEPABLE}, not {parameter!r}")
    values = list(values)
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    rows = []
    for value in values:
        res = run_benchmark(replace(cfg, **{parameter: float(value)}))
        rows.append({"parameter": parameter, "value": float(value),
                     "mean": res.mean_acc, "std": res.std_acc})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.csv").write_text(sweep_csv(rows))
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=("parameter", "value", "mean", "std"), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
