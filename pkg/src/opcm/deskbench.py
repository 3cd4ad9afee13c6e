"""Desk-scale continual-merging benchmark.

Tasks are Gaussian class clusters seen through a task-specific rotation.
A two-layer tanh trunk is shared; each task reads it through its own frozen
linear head. Experts are fine-tuned trunks, and the mergers only ever see
trunk checkpoints. Everything is plain full-batch gradient descent driven by
Philox streams, so a given configuration reproduces bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .baselines import default_lambda
from .estimators import make_merger
from .eval import AccuracyMatrix, avg_accuracy, backward_transfer
from .exceptions import BadDims
from .tensorstore import Checkpoint, ParamKind, task_vector
from ._validation import check_fraction, check_positive_int

TRUNK_KINDS = {
    "W1": ParamKind.LINEAR_WEIGHT,
    "W2": ParamKind.LINEAR_WEIGHT,
    "b1": ParamKind.OTHER,
    "b2": ParamKind.OTHER,
}

# stream ids keep the Philox keys of different uses apart
_TASK, _TRAIN, _TEST, _INIT = 1, 2, 3, 4


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


@dataclass(frozen=True, eq=False)
class SyntheticTask:
    seed: int
    input_dim: int
    n_classes: int
    class_means: np.ndarray
    rotation: np.ndarray
    noise_sigma: float = 0.3

    def sample(self, n: int, stream: int, step: int = 0):
        """Balanced-ish labelled batch drawn from the given Philox stream."""
        rng = _rng(self.seed, stream, step)
        y = np.arange(n) % self.n_classes
        rng.shuffle(y)
        noise = rng.standard_normal((n, self.input_dim)) * self.noise_sigma
        x = (self.class_means[y] + noise) @ self.rotation.T
        return x, y

    def test_set(self, n: int):
        return self.sample(n, _TEST)


@dataclass(frozen=True, eq=False)
class TaskHead:
    H: np.ndarray


def gen_task(seed: int, d: int = 16, C: int = 4, h: int = 32, noise_sigma: float = 0.3):
    """Deterministic task plus its frozen head."""
    if d < 2 or C < 2 or h < 2:
        raise BadDims(f"need d >= 2, C >= 2 and h >= 2, got d={d}, C={C}, h={h}")
    rng = _rng(seed, _TASK)
    means = rng.standard_normal((C, d))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    rotation = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    H = rng.standard_normal((C, h)) * (3.0 / math.sqrt(h))
    for a in (means, rotation, H):
        a.flags.writeable = False
    task = SyntheticTask(int(seed), d, C, means, rotation, float(noise_sigma))
    return task, TaskHead(H)


def init_trunk(seed: int, d: int = 16, h: int = 32) -> Checkpoint:
    rng = _rng(seed, _INIT)
    params = {
        "W1": rng.standard_normal((h, d)) / math.sqrt(d),
        "b1": np.zeros(h),
        "W2": rng.standard_normal((h, h)) / math.sqrt(h),
        "b2": np.zeros(h),
    }
    return Checkpoint(params, TRUNK_KINDS, copy=False)


def forward(trunk, x):
    a1 = np.tanh(x @ trunk["W1"].T + trunk["b1"])
    z = np.tanh(a1 @ trunk["W2"].T + trunk["b2"])
    return a1, z


def _loss_grads(trunk, head: TaskHead, x, y):
    """Mean softmax cross-entropy through a frozen head and its trunk gradients."""
    a1, z = forward(trunk, x)
    logits = z @ head.H.T
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    n = x.shape[0]
    loss = -float(np.mean(np.log(p[np.arange(n), y] + 1e-300)))
    g_logits = p
    g_logits[np.arange(n), y] -= 1.0
    g_logits /= n
    g_z = g_logits @ head.H * (1.0 - z * z)
    g_a1 = g_z @ trunk["W2"] * (1.0 - a1 * a1)
    grads = {
        "W2": g_z.T @ a1,
        "b2": g_z.sum(axis=0),
        "W1": g_a1.T @ x,
        "b1": g_a1.sum(axis=0),
    }
    return loss, grads


def _descend(trunk: Checkpoint, batches, steps: int, lr: float) -> Checkpoint:
    params = {n: np.array(a) for n, a in trunk.items()}
    for step in range(steps):
        total = {n: np.zeros_like(a) for n, a in params.items()}
        for task, head, x, y in batches(step):
            _, grads = _loss_grads(params, head, x, y)
            for n in total:
                total[n] += grads[n]
        for n in params:
            params[n] -= lr * total[n]
    return Checkpoint(params, TRUNK_KINDS, trunk.metadata, copy=False)


def pretrain(
    seed: int,
    d: int,
    h: int,
    tasks: Sequence,
    steps: int = 500,
    lr: float = 0.05,
    batch: int = 64,
) -> Checkpoint:
    """Train a seeded trunk on a balanced mixture of ``(task, head)`` pairs.

    The summed per-task mean losses are minimised, so each task has equal
    weight regardless of how many there are.
    """
    if len(tasks) == 0:
        raise ValueError("pretrain needs at least one task")
    trunk = init_trunk(seed, d, h)

    def batches(step):
        for task, head in tasks:
            x, y = task.sample(batch, _TRAIN, step)
            yield task, head, x, y

    # averaging across tasks keeps the step size independent of len(tasks)
    return _descend(trunk, batches, steps, lr / len(tasks))


def finetune(
    theta0: Checkpoint,
    task: SyntheticTask,
    head: TaskHead,
    steps: int = 400,
    lr: float = 0.05,
    batch: int = 64,
) -> Checkpoint:
    """Gradient descent on one task through its frozen head; only the trunk moves."""
    if steps < 0:
        raise ValueError("steps must be >= 0")

    def batches(step):
        # offset keeps fine-tuning batches disjoint from the pretraining stream
        x, y = task.sample(batch, _TRAIN, 1_000_003 + step)
        yield task, head, x, y

    return _descend(theta0, batches, steps, lr)


def predict(trunk, head: TaskHead, x) -> np.ndarray:
    _, z = forward(trunk, x)
    return np.argmax(z @ head.H.T, axis=1)


def evaluate_accuracy(trunk, task: SyntheticTask, head: TaskHead, n_test: int = 512) -> float:
    if n_test < 1:
        raise ValueError("n_test must be >= 1")
    x, y = task.test_set(n_test)
    return float(np.mean(predict(trunk, head, x) == y))


# --------------------------------------------------------------------------
# Benchmark runner


@dataclass
class BenchConfig:
    n_tasks: int = 8
    n_seeds: int = 5
    n_orders: int = 10
    methods: tuple = ("opcm", "swa", "ta", "ties")
    alpha: float = 0.5
    scaling: str = "adaptive"
    lambda_scale: Optional[float] = None
    trim_fraction: float = 0.2
    input_dim: int = 16
    n_classes: int = 4
    hidden: int = 32
    noise_sigma: float = 0.3
    pretrain_steps: int = 500
    finetune_steps: int = 400
    lr: float = 0.05
    batch: int = 64
    n_test: int = 512
    base_seed: int = 0

    def validate(self) -> "BenchConfig":
        check_positive_int(self.n_tasks, "n_tasks", 2)
        check_positive_int(self.n_seeds, "n_seeds")
        check_positive_int(self.n_orders, "n_orders")
        check_fraction(self.alpha, "alpha")
        unknown = set(self.methods) - {"opcm", "swa", "ta", "ties"}
        if unknown or not self.methods:
            raise ValueError(f"unknown or empty methods: {sorted(unknown)}")
        return self

    def merger_params(self, method: str, n_tasks: Optional[int] = None) -> dict:
        lam = self.lambda_scale
        if lam is None:
            lam = default_lambda(n_tasks if n_tasks is not None else self.n_tasks)
        if method == "opcm":
            return {"alpha": self.alpha, "scaling": self.scaling}
        if method == "ta":
            return {"lambda_scale": lam}
        if method == "ties":
            return {"lambda_scale": lam, "trim_fraction": self.trim_fraction}
        return {}


@dataclass
class RunResult:
    seed: int
    method: str
    order_index: int
    order: list
    matrix: AccuracyMatrix
    acc: float
    bwt: float
    lambdas: list = field(default_factory=list)
    max_orthogonality_ratio: float = 0.0


@dataclass
class BenchReport:
    config: BenchConfig
    runs: list
    individual_acc: dict
    pretrained_acc: dict

    def per_method(self) -> dict:
        out = {}
        for method in self.config.methods:
            rows = [r for r in self.runs if r.method == method]
            accs = np.array([r.acc for r in rows])
            bwts = np.array([r.bwt for r in rows])
            entry = {
                "acc_mean": float(accs.mean()),
                "acc_std": float(accs.std()),
                "bwt_mean": float(bwts.mean()),
                "bwt_std": float(bwts.std()),
                "n_runs": len(rows),
            }
            if method == "opcm":
                traj = np.array([r.lambdas for r in rows])
                entry["lambda_traj"] = [float(v) for v in traj.mean(axis=0)]
                entry["max_orthogonality_ratio"] = float(max(r.max_orthogonality_ratio for r in rows))
            out[method] = entry
        return out

    def matrix_filename(self, run: RunResult) -> str:
        return f"acc_seed{run.seed}_{run.method}_order{run.order_index}.csv"

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "per_method": self.per_method(),
            "individual_acc_mean": float(np.mean([v for accs in self.individual_acc.values() for v in accs])),
            "pretrained_acc_mean": float(np.mean([v for accs in self.pretrained_acc.values() for v in accs])),
            "runs": [
                {
                    "seed": r.seed,
                    "method": r.method,
                    "order_index": r.order_index,
                    "order": r.order,
                    "acc": r.acc,
                    "bwt": r.bwt,
                    "lambdas": r.lambdas,
                    "matrix": self.matrix_filename(r),
                }
                for r in self.runs
            ],
        }

    def to_json(self) -> str:
        doc = self.to_dict()
        doc["config"]["methods"] = list(doc["config"]["methods"])
        return json.dumps(doc, sort_keys=True, indent=2)


def _task_orders(seed: int, n_tasks: int, n_orders: int) -> list:
    rng = _rng(seed, 99)
    return [[int(i) for i in rng.permutation(n_tasks)] for _ in range(n_orders)]


def build_experts(cfg: BenchConfig, seed: int):
    """Tasks, heads, pretrained trunk and fine-tuned experts for one seed.

    The trunk is pretrained on its own pool of tasks (same generator, other
    seeds), so it starts near chance on the benchmark tasks.
    """
    def make(task_seed):
        return gen_task(task_seed, cfg.input_dim, cfg.n_classes, cfg.hidden, cfg.noise_sigma)

    pairs = [make(seed * 1000 + j) for j in range(cfg.n_tasks)]
    pool = [make(seed * 1000 + 500 + j) for j in range(cfg.n_tasks)]
    theta0 = pretrain(seed, cfg.input_dim, cfg.hidden, pool, cfg.pretrain_steps, cfg.lr, cfg.batch)
    experts = [finetune(theta0, t, hd, cfg.finetune_steps, cfg.lr, cfg.batch) for t, hd in pairs]
    return pairs, theta0, experts


def run_sequence(cfg: BenchConfig, method: str, theta0, experts, pairs, order) -> tuple:
    """Merge ``experts`` in ``order``, evaluating every step on every task."""
    T = len(order)
    matrix = AccuracyMatrix.empty(T, [f"task{j + 1}" for j in order])
    merger = make_merger(method, **cfg.merger_params(method, T))
    for step, task_idx in enumerate(order):
        merger.partial_fit(experts[task_idx], theta0)
        merged = merger.merged_
        for col, j in enumerate(order):
            task, head = pairs[j]
            matrix[step, col] = evaluate_accuracy(merged, task, head, cfg.n_test)
    return matrix, merger


def run_benchmark(cfg: BenchConfig = BenchConfig()) -> BenchReport:
    cfg.validate()
    runs = []
    individual, pretrained = {}, {}
    for s in range(cfg.n_seeds):
        seed = cfg.base_seed + s
        pairs, theta0, experts = build_experts(cfg, seed)
        individual[seed] = [
            evaluate_accuracy(e, t, hd, cfg.n_test) for e, (t, hd) in zip(experts, pairs)
        ]
        pretrained[seed] = [evaluate_accuracy(theta0, t, hd, cfg.n_test) for t, hd in pairs]
        orders = _task_orders(seed, cfg.n_tasks, cfg.n_orders)
        for method in cfg.methods:
            for k, order in enumerate(orders):
                matrix, merger = run_sequence(cfg, method, theta0, experts, pairs, order)
                result = RunResult(
                    seed, method, k, order, matrix, avg_accuracy(matrix), backward_transfer(matrix)
                )
                if method == "opcm":
                    result.lambdas = [rec.lambda_ for rec in merger.log_]
                    result.max_orthogonality_ratio = max(rec.orthogonality_ratio for rec in merger.log_)
                runs.append(result)
    return BenchReport(cfg, runs, individual, pretrained)


def orthogonal_block_experts(n_experts: int, block: int = 3, norm: float = 1.0, seed: int = 0):
    """Experts whose task vectors live on disjoint blocks of one ``OTHER`` parameter.

    Their deltas are mutually orthogonal, have equal norm, and pass through
    the merger unprojected.
    """
    rng = _rng(seed, 7)
    size = n_experts * block
    theta0 = Checkpoint({"p": rng.standard_normal(size)}, {"p": ParamKind.OTHER})
    experts = []
    for i in range(n_experts):
        v = np.zeros(size)
        chunk = rng.standard_normal(block)
        v[i * block:(i + 1) * block] = norm * chunk / np.linalg.norm(chunk)
        experts.append(Checkpoint({"p": theta0["p"] + v}, {"p": ParamKind.OTHER}))
    return theta0, experts


def task_vectors(theta0, experts) -> list:
    return [task_vector(e, theta0) for e in experts]
