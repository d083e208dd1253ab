"""Synthetic desk-scale multimodal classification tasks and the training loop.

Images are feature grids with objects planted as channel signatures, so the
fusion stack is exercised without any vision backbone.  Questions are short
token-id sequences (a task marker plus object tokens); answers are class
ids fully determined by the generator's rule.

Three task kinds:

* ``presence``: is the queried object type anywhere in the grid (2 classes)
* ``counting``: how many copies of the queried type are planted
* ``spatial``:  where is object a relative to object b (left/right/above/below)
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .fusion import ConfigError, FusionConfig, FusionModel, ModalityFeatures
from .sampler import TaskMixState
from .tensor import (
    OpCounter,
    ParamStore,
    Tensor,
    add,
    add_row_vector,
    concat_rows,
    cross_entropy_logits,
    embedding_rows,
    matmul,
    mean_rows,
    mul_const,
    no_grad,
    seeded_rng,
)

TASK_KINDS = ("presence", "counting", "spatial")

# Token-id layout: 0 pad, 1..3 task markers, then object tokens.
PAD_TOKEN = 0
MARKER = {"presence": 1, "counting": 2, "spatial": 3}
OBJECT_TOKEN_BASE = 4

# Object signatures are fixed per (vocab, channels) so that train and eval
# sets generated from different seeds describe the same world.
_SIGNATURE_SEED = 70921
_BACKGROUND_NOISE = 0.05
_OBJECT_NOISE = 0.10

SPATIAL_CLASSES = ("left", "right", "above", "below")


class GenerationError(ValueError):
    """The task spec cannot produce valid samples."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass
class TaskSpec:
    kind: str = "presence"
    grid: int = 4
    channels: int = 8
    vocab: int = 6
    classes: int = 0  # 0 = derived from kind
    max_distractors: int = 2
    text_len: int = 3

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; valid: {TASK_KINDS}")
        if self.grid < 2 or self.channels < 1 or self.vocab < 2:
            raise ConfigError(
                f"need grid >= 2, channels >= 1, vocab >= 2; got "
                f"grid={self.grid}, channels={self.channels}, vocab={self.vocab}"
            )
        if self.classes == 0:
            self.classes = {"presence": 2, "counting": 4, "spatial": 4}[self.kind]
        if self.kind == "presence" and self.classes != 2:
            raise ConfigError("presence is a binary task")
        if self.kind == "spatial" and self.classes != 4:
            raise ConfigError("spatial uses exactly 4 relation classes")
        if self.text_len < 3:
            raise ConfigError("questions need at least 3 token slots")
        cells = self.grid * self.grid
        worst = self.max_distractors + (
            self.classes - 1 if self.kind == "counting" else 2
        )
        if worst > cells:
            raise GenerationError(
                f"cannot place up to {worst} objects on a {self.grid}x{self.grid} grid"
            )

    @property
    def token_vocab(self) -> int:
        return OBJECT_TOKEN_BASE + self.vocab


@dataclass
class SyntheticSample:
    image: np.ndarray  # [H, W, C]
    question: np.ndarray  # [text_len] int token ids
    answer: int


def object_signatures(vocab: int, channels: int) -> np.ndarray:
    """Fixed unit-norm channel signature per object type.

    Signatures are mutually orthogonal whenever vocab <= channels, so
    distinct object types are unambiguous under the planting noise.
    """
    rng = seeded_rng(_SIGNATURE_SEED)
    if vocab <= channels:
        q, _ = np.linalg.qr(rng.normal(0.0, 1.0, (channels, vocab)))
        return np.ascontiguousarray(q.T)
    sig = rng.normal(0.0, 1.0, (vocab, channels))
    return sig / np.linalg.norm(sig, axis=1, keepdims=True)


def _blank_grid(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, _BACKGROUND_NOISE, (spec.grid, spec.grid, spec.channels))


def _plant(grid, cell: int, kind: int, sig, spec: TaskSpec, rng) -> None:
    r, c = divmod(cell, spec.grid)
    grid[r, c, :] = sig[kind] + rng.normal(0.0, _OBJECT_NOISE, spec.channels)


def _question(spec: TaskSpec, tokens: list[int]) -> np.ndarray:
    q = np.full(spec.text_len, PAD_TOKEN, dtype=np.int64)
    q[: len(tokens)] = tokens
    return q


def generate(spec: TaskSpec, n: int, seed: int) -> list[SyntheticSample]:
    """Generate n i.i.d. samples; identical (spec, n, seed) is bit-identical."""
    if n < 1:
        raise GenerationError(f"sample count must be positive, got {n}")
    rng = seeded_rng(seed)
    sig = object_signatures(spec.vocab, spec.channels)
    cells = spec.grid * spec.grid
    samples = []
    for _ in range(n):
        if spec.kind == "presence":
            target = int(rng.integers(spec.vocab))
            present = int(rng.integers(2))
            n_distractors = int(rng.integers(1, spec.max_distractors + 1))
            others = [v for v in range(spec.vocab) if v != target]
            kinds = list(rng.choice(others, size=n_distractors, replace=True))
            if present:
                kinds.append(target)
            spots = rng.choice(cells, size=len(kinds), replace=False)
            grid = _blank_grid(spec, rng)
            for cell, kind in zip(spots, kinds):
                _plant(grid, int(cell), int(kind), sig, spec, rng)
            samples.append(
                SyntheticSample(
                    image=grid,
                    question=_question(spec, [MARKER["presence"], OBJECT_TOKEN_BASE + target]),
                    answer=present,
                )
            )
        elif spec.kind == "counting":
            target = int(rng.integers(spec.vocab))
            count = int(rng.integers(spec.classes))
            n_distractors = int(rng.integers(spec.max_distractors + 1))
            others = [v for v in range(spec.vocab) if v != target]
            kinds = [target] * count + list(
                rng.choice(others, size=n_distractors, replace=True)
            )
            spots = rng.choice(cells, size=len(kinds), replace=False) if kinds else []
            grid = _blank_grid(spec, rng)
            for cell, kind in zip(spots, kinds):
                _plant(grid, int(cell), int(kind), sig, spec, rng)
            samples.append(
                SyntheticSample(
                    image=grid,
                    question=_question(spec, [MARKER["counting"], OBJECT_TOKEN_BASE + target]),
                    answer=count,
                )
            )
        else:  # spatial
            a, b = rng.choice(spec.vocab, size=2, replace=False)
            while True:
                ca, cb = rng.choice(cells, size=2, replace=False)
                ra, cola = divmod(int(ca), spec.grid)
                rb, colb = divmod(int(cb), spec.grid)
                if abs(ra - rb) != abs(cola - colb):
                    break
            if abs(cola - colb) > abs(ra - rb):
                answer = 0 if cola < colb else 1  # left / right
            else:
                answer = 2 if ra < rb else 3  # above / below
            grid = _blank_grid(spec, rng)
            _plant(grid, int(ca), int(a), sig, spec, rng)
            _plant(grid, int(cb), int(b), sig, spec, rng)
            samples.append(
                SyntheticSample(
                    image=grid,
                    question=_question(
                        spec,
                        [MARKER["spatial"], OBJECT_TOKEN_BASE + int(a), OBJECT_TOKEN_BASE + int(b)],
                    ),
                    answer=answer,
                )
            )
    return samples


# ---------------------------------------------------------------------------
# Model with classifier head(s)
# ---------------------------------------------------------------------------


class TaskModel:
    """Question embedding + fusion stack + one linear head per task kind."""

    def __init__(
        self,
        model_kind: str,
        specs: dict[str, TaskSpec],
        fusion_config: FusionConfig,
        seed: int,
    ):
        if not specs:
            raise ConfigError("need at least one task spec")
        first = next(iter(specs.values()))
        for s in specs.values():
            if (s.grid, s.channels, s.vocab, s.text_len) != (
                first.grid, first.channels, first.vocab, first.text_len,
            ):
                raise ConfigError("mixed tasks must share grid/channels/vocab/text_len")
        self.specs = specs
        self.model_kind = model_kind
        self.fusion_config = fusion_config
        rng = seeded_rng(seed)
        self.store = ParamStore()
        d = fusion_config.width
        self.embed = self.store.add(
            "text.embed", rng.normal(0.0, d**-0.5, (first.token_vocab, d))
        )
        self.text_pos = self.store.add(
            "text.pos", rng.normal(0.0, d**-0.5, (first.text_len, d))
        )
        self.fusion = FusionModel(
            model_kind,
            fusion_config,
            channels=first.channels,
            image_tokens=first.grid * first.grid,
            rng=rng,
            store=self.store,
            prefix="fusion.",
        )
        self.heads = {}
        for kind in sorted(specs):
            a = specs[kind].classes
            self.heads[kind] = (
                self.store.add(f"head.{kind}.w", rng.normal(0.0, d**-0.5, (d, a))),
                self.store.add(f"head.{kind}.b", np.zeros(a)),
            )

    def logits(self, sample: SyntheticSample, kind: str | None = None) -> Tensor:
        kind = kind if kind is not None else next(iter(self.specs))
        text = add(embedding_rows(self.embed, sample.question), self.text_pos)
        feats = ModalityFeatures(text=text, image=Tensor(sample.image))
        fused = self.fusion.forward(feats).features
        w, b = self.heads[kind]
        return add_row_vector(matmul(mean_rows(fused), w), b)

    def batch_loss(self, samples: list[SyntheticSample], kind: str | None = None) -> Tensor:
        rows = [self.logits(s, kind) for s in samples]
        labels = np.array([s.answer for s in samples], dtype=np.int64)
        return cross_entropy_logits(concat_rows(rows), labels)

    def predict(self, sample: SyntheticSample, kind: str | None = None) -> int:
        with no_grad():
            return int(np.argmax(self.logits(sample, kind).data))


def evaluate(model: TaskModel, samples: list[SyntheticSample], kind: str | None = None) -> float:
    """Argmax accuracy over a sample list; deterministic."""
    hits = sum(1 for s in samples if model.predict(s, kind) == s.answer)
    return hits / len(samples)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: list[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * p.grad
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * (p.grad * p.grad)
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 50
    eval_samples: int = 128
    train_pool: int = 1024
    seed: int = 0
    ablate_image: bool = False

    def validate(self) -> None:
        for name in ("steps", "batch_size", "eval_every", "eval_samples", "train_pool"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")


@dataclass
class LogRow:
    step: int
    loss: float
    eval_acc: float
    cum_flops: int


@dataclass
class TrainResult:
    rows: list[LogRow]
    model: TaskModel
    final_accuracy: float
    weight_rows: list[tuple[int, str, float, float]] = field(default_factory=list)


def _trainable(model: TaskModel, cfg: TrainConfig) -> list[Tensor]:
    frozen = set()
    if cfg.ablate_image:
        # Pinning the cross-attention gate at zero cuts the image pathway:
        # the fused features then depend on the text stream alone.
        frozen.add("fusion.fuse.alpha")
    return [t for name, t in model.store.items() if name not in frozen]


def train(
    model_kind: str,
    spec: TaskSpec,
    cfg: TrainConfig,
    fusion_config: FusionConfig,
) -> TrainResult:
    """Single-task Adam training; the log carries one row per step.

    ``eval_acc`` holds the most recent held-out evaluation (refreshed every
    ``eval_every`` steps and at the final step).  ``cum_flops`` accumulates
    the forward FLOPs of training batches only.
    """
    cfg.validate()
    fusion_config.validate()
    pool = generate(spec, cfg.train_pool, cfg.seed)
    eval_set = generate(spec, cfg.eval_samples, cfg.seed + 1)
    model = TaskModel(model_kind, {spec.kind: spec}, fusion_config, cfg.seed + 2)
    opt = Adam(
        _trainable(model, cfg),
        lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
    )
    rng = seeded_rng(cfg.seed + 3)
    counter = OpCounter()
    rows: list[LogRow] = []
    acc = evaluate(model, eval_set, spec.kind)
    for step in range(1, cfg.steps + 1):
        batch = [pool[i] for i in rng.integers(0, len(pool), cfg.batch_size)]
        opt.zero_grad()
        with counter:
            loss = model.batch_loss(batch, spec.kind)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainingDivergedError(step)
        loss.backward()
        opt.step()
        if step % cfg.eval_every == 0 or step == cfg.steps:
            acc = evaluate(model, eval_set, spec.kind)
        rows.append(LogRow(step, loss_val, acc, counter.total_flops))
    return TrainResult(rows=rows, model=model, final_accuracy=acc)


def train_mixture(
    model_kind: str,
    specs: dict[str, TaskSpec],
    cfg: TrainConfig,
    fusion_config: FusionConfig,
    decay: float = 0.99,
    floor: float = 0.1,
) -> TrainResult:
    """Multi-task training with loss-proportional batch composition.

    Per-task smoothed losses drive the per-step mixture; the weight
    trajectory is returned for the step,task,ema_loss,weight CSV.
    """
    cfg.validate()
    fusion_config.validate()
    kinds = sorted(specs)
    pools = {k: generate(specs[k], cfg.train_pool, cfg.seed + i) for i, k in enumerate(kinds)}
    eval_sets = {
        k: generate(specs[k], cfg.eval_samples, cfg.seed + 100 + i)
        for i, k in enumerate(kinds)
    }
    model = TaskModel(model_kind, specs, fusion_config, cfg.seed + 200)
    opt = Adam(
        _trainable(model, cfg),
        lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
    )
    mix = TaskMixState(kinds, decay=decay, floor=floor)
    rng = seeded_rng(cfg.seed + 300)
    counter = OpCounter()
    rows: list[LogRow] = []
    weight_rows: list[tuple[int, str, float, float]] = []
    acc = float(np.mean([evaluate(model, eval_sets[k], k) for k in kinds]))
    for step in range(1, cfg.steps + 1):
        counts = mix.sample_batch_composition(cfg.batch_size, int(rng.integers(2**31)))
        opt.zero_grad()
        step_loss = 0.0
        with counter:
            losses = []
            for k, count in zip(kinds, counts):
                if count == 0:
                    continue
                batch = [pools[k][i] for i in rng.integers(0, len(pools[k]), count)]
                task_loss = model.batch_loss(batch, k)
                losses.append((k, count, task_loss))
        total = None
        for k, count, task_loss in losses:
            value = task_loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(step)
            mix.update_loss(k, value)
            step_loss += value * count / cfg.batch_size
            piece = mul_const(task_loss, count / cfg.batch_size)
            total = piece if total is None else add(total, piece)
        if total is not None:
            total.backward()
            opt.step()
        weights = mix.compute_weights()
        for k, w in zip(kinds, weights):
            weight_rows.append((step, k, mix.ema_losses[k], float(w)))
        if step % cfg.eval_every == 0 or step == cfg.steps:
            acc = float(np.mean([evaluate(model, eval_sets[k], k) for k in kinds]))
        rows.append(LogRow(step, step_loss, acc, counter.total_flops))
    return TrainResult(rows=rows, model=model, final_accuracy=acc, weight_rows=weight_rows)


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def train_log_csv(rows: list[LogRow]) -> str:
    out = io.StringIO()
    out.write("step,loss,eval_acc,cum_flops\n")
    for r in rows:
        out.write(f"{r.step},{r.loss!r},{r.eval_acc!r},{r.cum_flops}\n")
    return out.getvalue()


def write_train_log(path, rows: list[LogRow]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(train_log_csv(rows))


def dump_dataset(path, samples: list[SyntheticSample]) -> None:
    """Store a sample list in the shared flat-binary tensor format."""
    entries: dict[str, np.ndarray] = {}
    for i, s in enumerate(samples):
        entries[f"sample{i:06d}.image"] = s.image
        entries[f"sample{i:06d}.question"] = s.question.astype(np.float64)
        entries[f"sample{i:06d}.answer"] = np.array([float(s.answer)])
    checkpoint.save_tensors(path, entries)


def load_dataset(path) -> list[SyntheticSample]:
    entries = checkpoint.load_tensors(path)
    count = len(entries) // 3
    samples = []
    for i in range(count):
        samples.append(
            SyntheticSample(
                image=entries[f"sample{i:06d}.image"],
                question=entries[f"sample{i:06d}.question"].astype(np.int64),
                answer=int(entries[f"sample{i:06d}.answer"][0]),
            )
        )
    return samples
