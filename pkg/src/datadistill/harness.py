"""Experiment orchestration: configs, runs, held-out evaluation, artifacts.

A run is fully described by a JSON config; every run writes a resolved
config snapshot, a run log with the initialization draw indices (so
held-out separation is auditable), the distilled-data file, PGM images,
and a CSV evaluation report.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from . import data, distillation, models, objectives
from .data import LabeledDataset
from .distillation import DistillConfig, DistilledData
from .errors import DistillError, NumericError
from .models import FixedSeed, ParamVector, PretrainedPool, RandomHe, RandomXavier


@dataclass
class ExperimentConfig:
    model: dict
    init: dict
    data: dict
    distill: dict = field(default_factory=dict)
    objective: dict = field(default_factory=lambda: {"kind": "cross_entropy"})
    holdout_models: int = 20
    out_dir: str = "runs/out"
    seed: int = 0

    @staticmethod
    def from_json(path) -> "ExperimentConfig":
        with open(path) as f:
            raw = json.load(f)
        return ExperimentConfig(**raw)

    def resolved(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EvalReport:
    run_id: str
    accuracies: List[float]
    mean: float
    std: float
    fingerprint: str
    extra: Optional[List[dict]] = None  # attack metrics rows, if any

    @staticmethod
    def from_accuracies(run_id, accs, fingerprint, extra=None) -> "EvalReport":
        arr = np.asarray(accs, dtype=np.float64)
        # population std, per the report-integrity contract
        return EvalReport(run_id, [float(a) for a in arr],
                          float(arr.mean()), float(arr.std()), fingerprint, extra)

    def write_csv(self, path) -> None:
        poisoned = self.extra is not None
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            header = ["run_id", "model_index", "accuracy"]
            if poisoned:
                header += ["attack_success", "other_accuracy", "relabeled_accuracy"]
            w.writerow(header)
            for i, acc in enumerate(self.accuracies):
                row = [self.run_id, i, f"{acc:.10f}"]
                if poisoned:
                    m = self.extra[i]
                    row += [f"{m['attack_success']:.10f}", f"{m['other_accuracy']:.10f}",
                            f"{m['relabeled_accuracy']:.10f}"]
                w.writerow(row)


# ---------------------------------------------------------------------------
# config materialization
# ---------------------------------------------------------------------------


def build_model(cfg: dict):
    kind = cfg["kind"]
    if kind == "linear_regressor":
        return models.LinearRegressor(cfg["in_dim"])
    if kind == "softmax_linear":
        return models.SoftmaxLinear(cfg["in_dim"], cfg["num_classes"])
    if kind == "mlp":
        return models.MLP(cfg["in_dim"], cfg["hidden"], cfg["num_classes"])
    if kind == "convnet":
        return models.ConvNet(cfg["side"], cfg.get("channels1", 8), cfg.get("channels2", 16),
                              cfg.get("kernel", 5), cfg.get("num_classes", 10))
    raise DistillError(f"unknown model kind {kind!r}")


def build_init(cfg: dict, model):
    kind = cfg["kind"]
    if kind == "fixed_seed":
        return FixedSeed(cfg["seed"])
    if kind == "xavier":
        return RandomXavier(cfg.get("base_seed", 0))
    if kind == "he":
        return RandomHe(cfg.get("base_seed", 0))
    if kind == "pool":
        pool = models.load_pool(cfg["path"], model)
        return pool
    raise DistillError(f"unknown init kind {kind!r}")


def load_datasets(cfg: dict):
    """Returns (train, test); test may be None."""
    kind = cfg["kind"]
    if kind != "idx":
        raise DistillError(f"unknown data kind {kind!r}")
    train = data.load_idx(cfg["images"], cfg["labels"])
    test = None
    if cfg.get("test_images"):
        test = data.load_idx(cfg["test_images"], cfg["test_labels"])
    factor = cfg.get("downscale", 1)
    if factor != 1:
        train = data.downscale(train, factor)
        if test is not None:
            test = data.downscale(test, factor)
    if cfg.get("per_class"):
        train = data.subsample(train, cfg["per_class"], cfg.get("subsample_seed", 0))
    return train, test


def build_objective(cfg: dict):
    kind = cfg.get("kind", "cross_entropy")
    if kind == "cross_entropy":
        return objectives.CrossEntropy()
    if kind == "quadratic":
        return objectives.QuadraticMSE()
    if kind == "poison":
        return objectives.Poison(cfg["attacked"], cfg["target"])
    raise DistillError(f"unknown objective kind {kind!r}")


def build_distill_config(cfg: dict, seed: int) -> DistillConfig:
    dc = DistillConfig(seed=seed)
    for k, v in cfg.items():
        if not hasattr(dc, k):
            raise DistillError(f"unknown distill option {k!r}")
        setattr(dc, k, v)
    dc.validate()
    return dc


# ---------------------------------------------------------------------------
# evaluation pools with held-out separation
# ---------------------------------------------------------------------------


def holdout_pool(init, model, train_draws: int, count: int):
    """Initializations never sampled during training.

    Random regimes continue the draw-index stream past the training
    range; a fixed seed has a single member; a pretrained pool reserves
    its trailing members (the harness never lets training touch them).
    """
    if isinstance(init, FixedSeed):
        return [models.sample_init(init, model, 0)], [0]
    if isinstance(init, PretrainedPool):
        raise DistillError("pretrained pools manage held-out members explicitly")
    indices = list(range(train_draws, train_draws + count))
    return [models.sample_init(init, model, i) for i in indices], indices


def evaluate_distilled(model, pool: List[ParamVector], distilled: DistilledData,
                       testset: LabeledDataset) -> List[float]:
    return [
        models.evaluate(model, distillation.apply_distilled(model, t0, distilled), testset)
        for t0 in pool
    ]


# ---------------------------------------------------------------------------
# run entry points
# ---------------------------------------------------------------------------


def _prepare_out(config: ExperimentConfig) -> str:
    os.makedirs(config.out_dir, exist_ok=True)
    with open(os.path.join(config.out_dir, "config.resolved.json"), "w") as f:
        json.dump(config.resolved(), f, indent=2, sort_keys=True)
    return config.out_dir


def run_distill(config: ExperimentConfig) -> dict:
    """Distill, evaluate on a fresh held-out pool, write all artifacts."""
    out = _prepare_out(config)
    model = build_model(config.model)
    init = build_init(config.init, model)
    objective = build_objective(config.objective)
    train, test = load_datasets(config.data)
    evalset = test if test is not None else train
    dc = build_distill_config(config.distill, config.seed)

    artifacts = {"out_dir": out}
    log = {"train_draw_indices": [0, dc.iterations * dc.init_samples]}
    try:
        distilled = distillation.distill(model, init, train, objective, dc)
    except NumericError as e:
        log["error"] = str(e)
        if e.snapshot is not None:
            distillation.save_distilled(os.path.join(out, "distilled.partial.ddxd"), e.snapshot)
        with open(os.path.join(out, "run_log.json"), "w") as f:
            json.dump(log, f, indent=2)
        raise

    ddxd = os.path.join(out, "distilled.ddxd")
    distillation.save_distilled(ddxd, distilled)
    artifacts["distilled"] = ddxd
    artifacts["images"] = distillation.export_pgm(distilled, os.path.join(out, "images"))

    count = 1 if isinstance(init, FixedSeed) else config.holdout_models
    pool, indices = holdout_pool(init, model, dc.iterations * dc.init_samples, count)
    log["eval_draw_indices"] = indices
    accs = evaluate_distilled(model, pool, distilled, evalset)
    report = EvalReport.from_accuracies("distill", accs, config.fingerprint())
    report_path = os.path.join(out, "eval.csv")
    report.write_csv(report_path)
    artifacts["report"] = report_path
    artifacts["eval_report"] = report
    with open(os.path.join(out, "run_log.json"), "w") as f:
        json.dump(log, f, indent=2)
    return artifacts


def run_eval(distilled_path, config: ExperimentConfig) -> EvalReport:
    """Deterministic re-evaluation of a distilled-data file."""
    model = build_model(config.model)
    init = build_init(config.init, model)
    objective = build_objective(config.objective)
    _, test = load_datasets(config.data)
    train, _ = load_datasets(config.data)
    evalset = test if test is not None else train
    distilled = distillation.load_distilled(distilled_path)
    expected = [models.expected_in_dim(model)]
    for x, _y in distilled.steps:
        if x.shape[1] != expected[0]:
            from .errors import LayoutMismatchError

            raise LayoutMismatchError(
                f"distilled width {x.shape[1]} does not match model input {expected[0]}"
            )
    dc = build_distill_config(config.distill, config.seed)
    if isinstance(init, PretrainedPool):
        pool = init.members[-config.holdout_models:]
    else:
        count = 1 if isinstance(init, FixedSeed) else config.holdout_models
        pool, _ = holdout_pool(init, model, dc.iterations * dc.init_samples, count)
    if isinstance(objective, objectives.Poison):
        rows, accs = [], []
        for t0 in pool:
            trained = distillation.apply_distilled(model, t0, distilled)
            rows.append(objectives.attack_metrics(model, trained, evalset,
                                                  objective.attacked, objective.target))
            accs.append(models.evaluate(model, trained, evalset))
        return EvalReport.from_accuracies("eval", accs, config.fingerprint(), extra=rows)
    accs = evaluate_distilled(model, pool, distilled, evalset)
    return EvalReport.from_accuracies("eval", accs, config.fingerprint())


def pretrain_pool(config: ExperimentConfig, count: int, lr: float = 0.1,
                  epochs: int = 10, path: Optional[str] = None) -> str:
    """Train ``count`` models to convergence with distinct seeds; save DDPV."""
    out = _prepare_out(config)
    model = build_model(config.model)
    train, _ = load_datasets(config.data)
    members = []
    for i in range(count):
        theta0 = models.sample_init(RandomXavier(config.seed), model, i)
        members.append(models.train_plain(model, theta0, train, lr=lr, epochs=epochs,
                                          seed=config.seed + i))
    path = path or os.path.join(out, "pool.ddpv")
    models.save_pool(path, members)
    return path


def run_poison(config: ExperimentConfig) -> dict:
    """Distill a one-step poison batch on a pretrained pool; evaluate attack
    metrics on held-out members only."""
    out = _prepare_out(config)
    model = build_model(config.model)
    objective = build_objective(config.objective)
    if not isinstance(objective, objectives.Poison):
        raise DistillError("run_poison needs a poison objective")
    full_pool = build_init(config.init, model)
    if not isinstance(full_pool, PretrainedPool):
        raise DistillError("run_poison needs a pretrained pool init")
    holdout = config.holdout_models
    if holdout >= len(full_pool.members):
        raise DistillError("holdout_models must leave at least one training member")
    train_pool = PretrainedPool(full_pool.members[:-holdout])
    eval_members = full_pool.members[-holdout:]
    train, test = load_datasets(config.data)
    evalset = test if test is not None else train

    dc = build_distill_config(config.distill, config.seed)
    dc.steps = 1  # deployment is a single GD step
    dc.epochs = 1
    distilled = distillation.distill(model, train_pool, train, objective, dc)
    ddxd = os.path.join(out, "poison.ddxd")
    distillation.save_distilled(ddxd, distilled)

    rows, accs = [], []
    for t0 in eval_members:
        trained = distillation.apply_distilled(model, t0, distilled)
        rows.append(objectives.attack_metrics(model, trained, evalset,
                                              objective.attacked, objective.target))
        accs.append(models.evaluate(model, trained, evalset))
    report = EvalReport.from_accuracies("poison", accs, config.fingerprint(), extra=rows)
    report_path = os.path.join(out, "poison_eval.csv")
    report.write_csv(report_path)
    with open(os.path.join(out, "run_log.json"), "w") as f:
        json.dump({"train_pool_members": [0, len(train_pool.members)],
                   "eval_pool_members": [len(train_pool.members), len(full_pool.members)]},
                  f, indent=2)
    return {"out_dir": out, "distilled": ddxd, "report": report_path,
            "eval_report": report}
