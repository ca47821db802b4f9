"""Executable gradient-obfuscation diagnostics.

Five characteristic checks (one-step vs iterative, black-box vs white-box,
unbounded attacks, random sampling, distortion monotonicity) plus the
EoT-gap criterion, aggregated into a machine-readable report.  Passing the
five-item checklist and being flagged by the EoT criterion are reported
independently and never collapsed into one verdict.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict

import numpy as np

from .attacks import AttackConfig, evaluate_attack, clean_accuracy
from .models import build_model
from .rng import derive_rng
from .training import TrainConfig, train

SCHEMA_VERSION = 1


@dataclass
class ChecklistConfig:
    epsilon: float = 8 / 255
    num_steps: int = 10
    restarts: int = 5
    eot_samples: int = 25
    step_size: float | None = None           # default: 2.5 * epsilon / num_steps
    epsilon_grid: tuple | None = None        # default: (eps/2, eps, 2eps, 4eps) capped at 1
    random_samples: int = 1000               # random points per PGD-failed example
    slack: float = 0.02                      # accuracy-point tolerance on comparisons
    eot_gap_threshold: float = 0.05
    substitute_seed: int = 1
    substitute_epochs: int = 10
    unbounded_steps: int = 100
    unbounded_step_size: float = 0.05
    master_seed: int = 0
    limit: int | None = None                 # evaluate at most this many test examples
    n_workers: int = 1

    def __post_init__(self):
        if self.slack < 0:
            raise ValueError("slack must be >= 0")
        if self.step_size is None:
            self.step_size = 2.5 * self.epsilon / self.num_steps
        if self.epsilon_grid is None:
            grid = []
            for e in (self.epsilon / 2, self.epsilon, 2 * self.epsilon, 4 * self.epsilon):
                e = min(e, 1.0)
                if not grid or e > grid[-1]:
                    grid.append(e)
            self.epsilon_grid = tuple(grid)
        if len(self.epsilon_grid) >= 2 and any(
                b <= a for a, b in zip(self.epsilon_grid, self.epsilon_grid[1:])):
            raise ValueError("epsilon_grid must be strictly increasing")

    def pgd_config(self, epsilon=None, eot=0, **kw):
        return AttackConfig(epsilon=self.epsilon if epsilon is None else epsilon,
                            step_size=kw.pop("step_size", self.step_size),
                            num_steps=kw.pop("num_steps", self.num_steps),
                            restarts=kw.pop("restarts", self.restarts),
                            eot_samples=eot, random_init=True,
                            master_seed=self.master_seed, **kw)


# ---------------------------------------------------------------------------
# pure decision rules (thresholds recorded in the report)

def observe_one_step(s_fgsm, s_pgd, slack):
    return s_fgsm > s_pgd + slack


def observe_blackbox(s_bb, s_wb, slack):
    return s_bb > s_wb + slack


def observe_unbounded(success_rate, slack):
    return success_rate < 1.0 - slack


def observe_random_sampling(fraction, slack):
    return fraction > slack


def observe_distortion(rates, slack):
    return any(b < a - slack for a, b in zip(rates, rates[1:]))


def eot_flagged(a_plain, a_eot, threshold):
    return (a_plain - a_eot) > threshold


# ---------------------------------------------------------------------------
# sub-checks

def _eval_set(dataset, cfg):
    n = len(dataset.test_x) if cfg.limit is None else min(cfg.limit, len(dataset.test_x))
    return dataset.test_x[:n], dataset.test_y[:n]


def check_one_step_vs_iterative(model, dataset, cfg: ChecklistConfig):
    X, y = _eval_set(dataset, cfg)
    fgsm_cfg = AttackConfig(epsilon=cfg.epsilon, step_size=max(cfg.epsilon, 1e-12),
                            num_steps=1, restarts=cfg.restarts, random_init=False,
                            master_seed=cfg.master_seed)
    acc_f, _ = evaluate_attack(model, X, y, fgsm_cfg, n_workers=cfg.n_workers)
    acc_p, pgd_outcomes = evaluate_attack(model, X, y, cfg.pgd_config(),
                                          n_workers=cfg.n_workers)
    s_fgsm, s_pgd = 1.0 - acc_f, 1.0 - acc_p
    return {
        "observed": observe_one_step(s_fgsm, s_pgd, cfg.slack),
        "metrics": {"fgsm_success": s_fgsm, "pgd_success": s_pgd},
        "thresholds": {"slack": cfg.slack},
    }, pgd_outcomes


def check_blackbox_vs_whitebox(model, dataset, cfg: ChecklistConfig,
                               pgd_outcomes=None):
    X, y = _eval_set(dataset, cfg)
    meta = model.meta
    substitute = build_model(meta["arch"], "none", "layerwise",
                             tuple(meta["input_shape"]), meta["classes"],
                             init_seed=cfg.substitute_seed)
    tcfg = TrainConfig(epochs=cfg.substitute_epochs, adversarial=cfg.epsilon > 0,
                       train_epsilon=cfg.epsilon, seed=cfg.substitute_seed)
    train(substitute, dataset, tcfg)

    pcfg = cfg.pgd_config()
    if pgd_outcomes is None:
        acc_wb, pgd_outcomes = evaluate_attack(model, X, y, pcfg,
                                               n_workers=cfg.n_workers)
    _, sub_outcomes = evaluate_attack(substitute, X, y, pcfg, n_workers=cfg.n_workers)

    transfer = 0
    stochastic = getattr(model, "is_stochastic", False)
    for i, out in enumerate(sub_outcomes):
        rng = derive_rng(cfg.master_seed, i, "verdict") if stochastic else None
        pred = model.predict(out.x_adv[None], rng=rng)[0]
        transfer += int(pred != int(y[i]))
    s_bb = transfer / len(X)
    s_wb = sum(o.success for o in pgd_outcomes) / len(X)
    return {
        "observed": observe_blackbox(s_bb, s_wb, cfg.slack),
        "metrics": {"blackbox_success": s_bb, "whitebox_success": s_wb},
        "thresholds": {"slack": cfg.slack},
    }


def check_unbounded(model, dataset, cfg: ChecklistConfig):
    X, y = _eval_set(dataset, cfg)
    ucfg = AttackConfig(epsilon=1.0, step_size=cfg.unbounded_step_size,
                        num_steps=max(cfg.unbounded_steps, 100), restarts=1,
                        random_init=True, master_seed=cfg.master_seed)
    acc, _ = evaluate_attack(model, X, y, ucfg, n_workers=cfg.n_workers)
    success = 1.0 - acc
    return {
        "observed": observe_unbounded(success, cfg.slack),
        "metrics": {"unbounded_success": success},
        "thresholds": {"slack": cfg.slack, "epsilon": 1.0,
                       "steps": max(cfg.unbounded_steps, 100),
                       "step_size": cfg.unbounded_step_size},
    }


def random_point_misclassifies(model, x, label, epsilon, n_points, rng,
                               chunk=128):
    """True if any of n_points uniform draws in the epsilon box misclassifies.

    Points are evaluated in chunks; each chunk shares one stochastic forward.
    """
    x = np.asarray(x, dtype=np.float32)
    done = 0
    stochastic = getattr(model, "is_stochastic", False)
    while done < n_points:
        m = min(chunk, n_points - done)
        u = rng.uniform(-epsilon, epsilon, (m,) + x.shape)
        pts = np.clip(x[None] + u, 0.0, 1.0)
        preds = model.predict(pts, rng=rng if stochastic else None)
        if np.any(preds != int(label)):
            return True
        done += m
    return False


def check_random_sampling(model, dataset, cfg: ChecklistConfig, pgd_outcomes=None):
    X, y = _eval_set(dataset, cfg)
    if pgd_outcomes is None:
        _, pgd_outcomes = evaluate_attack(model, X, y, cfg.pgd_config(),
                                          n_workers=cfg.n_workers)
    failed = [i for i, o in enumerate(pgd_outcomes) if not o.success]
    if not failed:
        return {"observed": False,
                "metrics": {"fraction": 0.0, "pgd_failed": 0, "vacuous": True},
                "thresholds": {"slack": cfg.slack, "samples": cfg.random_samples}}
    hits = 0
    for i in failed:
        rng = derive_rng(cfg.master_seed, i, "random_sampling")
        hits += int(random_point_misclassifies(
            model, X[i], y[i], cfg.epsilon, cfg.random_samples, rng))
    fraction = hits / len(failed)
    return {
        "observed": observe_random_sampling(fraction, cfg.slack),
        "metrics": {"fraction": fraction, "pgd_failed": len(failed),
                    "vacuous": False},
        "thresholds": {"slack": cfg.slack, "samples": cfg.random_samples},
    }


def check_distortion_monotonicity(model, dataset, cfg: ChecklistConfig):
    X, y = _eval_set(dataset, cfg)
    rates = []
    for eps in cfg.epsilon_grid:
        # scale the step with the radius so every grid point gets an attack
        # of the same relative strength
        step = cfg.step_size * (eps / cfg.epsilon)
        acc, _ = evaluate_attack(model, X, y,
                                 cfg.pgd_config(epsilon=eps, step_size=step),
                                 n_workers=cfg.n_workers)
        rates.append(1.0 - acc)
    return {
        "observed": observe_distortion(rates, cfg.slack),
        "metrics": {"epsilon_grid": list(cfg.epsilon_grid),
                    "success_rates": rates},
        "thresholds": {"slack": cfg.slack},
    }


def check_eot_criterion(model, dataset, cfg: ChecklistConfig, pgd_outcomes=None):
    X, y = _eval_set(dataset, cfg)
    if cfg.eot_samples < 2:
        raise ValueError("eot_samples must be >= 2 for the EoT criterion")
    if pgd_outcomes is not None:
        a_plain = 1.0 - sum(o.success for o in pgd_outcomes) / len(X)
    else:
        a_plain, _ = evaluate_attack(model, X, y, cfg.pgd_config(),
                                     n_workers=cfg.n_workers)
    a_eot, _ = evaluate_attack(model, X, y, cfg.pgd_config(eot=cfg.eot_samples),
                               n_workers=cfg.n_workers)
    gap = a_plain - a_eot
    return {
        "plain_pgd_acc": a_plain,
        "eot_pgd_acc": a_eot,
        "gap": gap,
        "flagged": eot_flagged(a_plain, a_eot, cfg.eot_gap_threshold),
        "thresholds": {"eot_gap_threshold": cfg.eot_gap_threshold,
                       "eot_samples": cfg.eot_samples},
    }


def params_hash(model) -> str:
    h = hashlib.sha256()
    for name in sorted(getattr(model, "params", {})):
        h.update(name.encode())
        h.update(model.params[name].data.astype("<f4", copy=False).tobytes())
    return h.hexdigest()


def run_checklist(model, dataset, cfg: ChecklistConfig) -> dict:
    """All five characteristic checks plus the EoT criterion, one report.

    A failing sub-check is recorded as errored, never silently dropped.  The
    checklist verdict and the EoT flag are independent fields by design.
    """
    report = {"schema_version": SCHEMA_VERSION}
    pgd_outcomes = None
    try:
        record, pgd_outcomes = check_one_step_vs_iterative(model, dataset, cfg)
        report["characteristic_1"] = record
    except Exception as e:  # noqa: BLE001 - report, don't raise
        report["characteristic_1"] = {"errored": str(e), "observed": None}

    runners = [
        ("characteristic_2", lambda: check_blackbox_vs_whitebox(
            model, dataset, cfg, pgd_outcomes)),
        ("characteristic_3", lambda: check_unbounded(model, dataset, cfg)),
        ("characteristic_4", lambda: check_random_sampling(
            model, dataset, cfg, pgd_outcomes)),
        ("characteristic_5", lambda: check_distortion_monotonicity(
            model, dataset, cfg)),
    ]
    for key, fn in runners:
        try:
            report[key] = fn()
        except Exception as e:  # noqa: BLE001
            report[key] = {"errored": str(e), "observed": None}

    try:
        report["eot_criterion"] = check_eot_criterion(model, dataset, cfg,
                                                      pgd_outcomes)
    except Exception as e:  # noqa: BLE001
        report["eot_criterion"] = {"errored": str(e), "flagged": None}

    chars = [report[f"characteristic_{i}"] for i in range(1, 6)]
    passes = all(c.get("observed") is False for c in chars)
    flagged = report["eot_criterion"].get("flagged")
    report["verdict"] = {
        "passes_checklist": passes,
        "obfuscation_flagged_by_eot": bool(flagged),
    }
    X, _ = _eval_set(dataset, cfg)
    report["config"] = asdict(cfg) if hasattr(cfg, "__dataclass_fields__") else dict(cfg)
    report["config"]["epsilon_grid"] = list(cfg.epsilon_grid)
    # thread count never changes results; keep reports byte-identical across it
    report["config"].pop("n_workers", None)
    report["provenance"] = {
        "master_seed": cfg.master_seed,
        "checkpoint_hash": params_hash(model),
        "n_examples": len(X),
        "clean_accuracy": clean_accuracy(model, X, dataset.test_y[:len(X)],
                                         cfg.master_seed),
    }
    return report
