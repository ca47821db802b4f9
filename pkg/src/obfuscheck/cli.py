"""Command-line entry points: train, attack, checklist, reproduce.

Exit codes: 0 success, 1 runtime/data error, 2 usage error.  All reports
embed the fully materialized configuration and the seed, and every output
file is written atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile

import numpy as np

from .attacks import AttackConfig, clean_accuracy, evaluate_attack
from .checklist import ChecklistConfig, run_checklist
from .checkpoint import load_checkpoint, save_checkpoint
from .data import generate_synthetic, load_idx
from .models import build_model
from .training import TrainConfig, default_train_step, train

REPORT_SCHEMA_VERSION = 1

PNI_FLAG = {"none": "none", "w": "pni-w", "a-a": "pni-a-a"}
GRAN_FLAG = {"layer": "layerwise", "channel": "channelwise", "element": "elementwise"}


def parse_fraction(text):
    """Accept '2/255' style literals as well as plain floats."""
    text = str(text).strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def read_config_file(path):
    """Flat UTF-8 key-value config: 'key = value' lines, '#' comments."""
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, val = line.split("=", 1)
            values[key.strip().replace("-", "_")] = val.strip()
    return values


def atomic_write(path, payload: str):
    dirname = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# argument plumbing

def build_parser():
    p = argparse.ArgumentParser(prog="obfuscheck",
                                description="Noise-injection defenses vs. "
                                            "gradient-obfuscation diagnostics.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--epsilon", type=parse_fraction, default=None,
                        help="L-inf radius; accepts fractions like 2/255")
        sp.add_argument("--step", type=parse_fraction, default=None)
        sp.add_argument("--steps", type=int, default=10)
        sp.add_argument("--restarts", type=int, default=5)
        sp.add_argument("--eot", type=int, default=25)
        sp.add_argument("--limit", type=int, default=None,
                        help="evaluate at most N test examples")
        sp.add_argument("--workers", type=int, default=1,
                        help="evaluation threads; results do not depend on it")
        sp.add_argument("--classes", type=int, default=10)
        sp.add_argument("--per-class", type=int, default=200)
        sp.add_argument("--difficulty", type=float, default=0.4)
        sp.add_argument("--contrast", type=float, default=0.3,
                        help="prototype contrast of the synthetic dataset")
        sp.add_argument("--idx-images", default=None)
        sp.add_argument("--idx-labels", default=None)

    t = sub.add_parser("train", help="train a model and save a checkpoint")
    common(t)
    t.add_argument("--arch", choices=["mlp", "cnn"], default="cnn")
    t.add_argument("--pni", choices=sorted(PNI_FLAG), default="none")
    t.add_argument("--granularity", choices=sorted(GRAN_FLAG), default="layer")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--warmup-epochs", type=int, default=5)
    t.add_argument("--adversarial", action="store_true")
    t.add_argument("--alpha-init", type=float, default=0.25,
                   help="initial noise scale on PNI attachments")
    t.add_argument("--alpha-lr-scale", type=float, default=1.0,
                   help="learning-rate multiplier for alpha (0 freezes it)")

    a = sub.add_parser("attack", help="evaluate robustness of a checkpoint")
    common(a)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--alpha-override", type=float, default=None)

    c = sub.add_parser("checklist", help="gradient-obfuscation checklist")
    common(c)
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--alpha-override", type=float, default=None)

    r = sub.add_parser("reproduce", help="full train/attack/checklist pipeline")
    common(r)
    r.add_argument("--arch", choices=["mlp", "cnn"], default="cnn")
    r.add_argument("--epochs", type=int, default=30)
    r.add_argument("--batch-size", type=int, default=64)
    r.add_argument("--lr", type=float, default=0.05)
    r.add_argument("--warmup-epochs", type=int, default=5)
    r.add_argument("--models", default="baseline,pni-w:layer",
                   help="comma list: baseline, pni-w:GRAN, pni-a-a:GRAN")
    r.add_argument("--skip-checklist", action="store_true")
    r.add_argument("--alpha-init", type=float, default=0.25,
                   help="initial noise scale on PNI attachments")
    r.add_argument("--alpha-lr-scale", type=float, default=1.0,
                   help="learning-rate multiplier for alpha (0 freezes it)")
    return p


def apply_config_file(args):
    if not getattr(args, "config", None):
        return
    values = read_config_file(args.config)
    casts = {"seed": int, "steps": int, "restarts": int, "eot": int,
             "limit": int, "classes": int, "per_class": int, "epochs": int,
             "batch_size": int, "epsilon": parse_fraction,
             "step": parse_fraction, "lr": float, "difficulty": float,
             "contrast": float, "warmup_epochs": int,
             "alpha_override": float, "alpha_init": float,
             "alpha_lr_scale": float,
             "adversarial": lambda s: s.lower() == "true"}
    # command-line flags override file values: only fill defaults
    defaults = {a.dest: a.default for a in _all_actions()}
    for key, raw in values.items():
        if not hasattr(args, key):
            raise ValueError(f"unknown config key {key!r}")
        if getattr(args, key) == defaults.get(key):
            setattr(args, key, casts.get(key, str)(raw))


def _all_actions():
    acts = []
    parser = build_parser()
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            acts.extend(sp._actions)
    return acts


def make_dataset(args):
    if args.idx_images or args.idx_labels:
        if not (args.idx_images and args.idx_labels):
            raise ValueError("--idx-images and --idx-labels must be given together")
        return load_idx(args.idx_images, args.idx_labels)
    return generate_synthetic(classes=args.classes, per_class=args.per_class,
                              shape=(1, 16, 16), difficulty=args.difficulty,
                              seed=args.seed, contrast=args.contrast)


def materialized_config(args):
    # "workers" is an execution detail that never changes results, so it is
    # kept out of reports to keep them byte-identical across thread counts
    cfg = {k: v for k, v in vars(args).items()
           if k not in ("command", "config", "workers")}
    return cfg


# ---------------------------------------------------------------------------
# commands

def _train_one(args, dataset, pni, granularity, seed, tag):
    model = build_model(args.arch, pni, granularity,
                        input_shape=dataset.input_shape,
                        classes=dataset.class_count, init_seed=seed,
                        alpha_init=getattr(args, "alpha_init", 0.25))
    eps = args.epsilon if args.epsilon is not None else 8 / 255
    adversarial = getattr(args, "adversarial", True)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       learning_rate=args.lr, adversarial=adversarial,
                       train_epsilon=eps if adversarial else 0.0,
                       warmup_epochs=getattr(args, "warmup_epochs", 5),
                       alpha_lr_scale=getattr(args, "alpha_lr_scale", 1.0),
                       seed=seed)
    log = train(model, dataset, tcfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, f"{tag}.ckpt")
    training_meta = {"seed": seed, "epochs": args.epochs,
                     "adversarial": adversarial,
                     "train_epsilon": tcfg.train_epsilon,
                     "train_step_size": tcfg.train_step_size}
    save_checkpoint(model, ckpt, training_meta=training_meta)
    log.write_csv(os.path.join(args.out, f"{tag}_train_log.csv"))
    return model, ckpt, training_meta


def cmd_train(args):
    dataset = make_dataset(args)
    pni = PNI_FLAG[args.pni]
    granularity = GRAN_FLAG[args.granularity]
    tag = "model"
    _, ckpt, meta = _train_one(args, dataset, pni, granularity, args.seed, tag)
    print(f"checkpoint written: {ckpt} "
          f"(adversarial={meta['adversarial']} eps={meta['train_epsilon']:.6f} "
          f"step={meta['train_step_size'] if meta['train_step_size'] else 0:.6f})")
    return 0


def _attack_columns(model, X, y, eps, args, alpha_override=None):
    """Clean accuracy plus the four attack columns."""
    seed = args.seed
    if alpha_override is not None:
        model = _override_model(model, alpha_override)
    fgsm_cfg = AttackConfig(epsilon=eps, step_size=max(eps, 1e-12), num_steps=1,
                            restarts=args.restarts, random_init=False,
                            master_seed=seed)
    pgd_cfg = AttackConfig(epsilon=eps,
                           step_size=args.step or 2.5 * eps / args.steps,
                           num_steps=args.steps, restarts=args.restarts,
                           random_init=True, master_seed=seed)
    workers = getattr(args, "workers", 1)
    cols = {"clean": clean_accuracy(model, X, y, seed)}
    cols["fgsm"], fgsm_out = evaluate_attack(model, X, y, fgsm_cfg,
                                             n_workers=workers)
    cols["fgsm_eot"], _ = evaluate_attack(
        model, X, y, AttackConfig(**{**fgsm_cfg.__dict__, "eot_samples": args.eot}),
        n_workers=workers)
    cols["pgd"], pgd_out = evaluate_attack(model, X, y, pgd_cfg,
                                           n_workers=workers)
    cols["pgd_eot"], _ = evaluate_attack(
        model, X, y, AttackConfig(**{**pgd_cfg.__dict__, "eot_samples": args.eot}),
        n_workers=workers)
    return cols, {"fgsm": fgsm_out, "pgd": pgd_out}


class _OverrideModel:
    """Proxy that pins the inference-time noise scale multiplier."""

    def __init__(self, model, scale):
        self._model = model
        self._scale = scale

    @property
    def is_stochastic(self):
        return self._model.is_stochastic and self._scale != 0

    def clone(self):
        return _OverrideModel(self._model.clone(), self._scale)

    def logits(self, x, rng=None):
        return self._model.logits(x, rng=rng, alpha_scale=self._scale)

    def predict(self, x, rng=None):
        return self._model.predict(x, rng=rng, alpha_scale=self._scale)

    def loss_and_grad(self, x, label, rng=None):
        return self._model.loss_and_grad(x, label, rng=rng,
                                         alpha_scale=self._scale)

    @property
    def params(self):
        return self._model.params

    @property
    def meta(self):
        return self._model.meta


def _override_model(model, scale):
    if scale is None:
        return model
    if scale < 0:
        raise ValueError("--alpha-override must be >= 0")
    return _OverrideModel(model, scale)


def cmd_attack(args):
    model, header = load_checkpoint(args.checkpoint)
    dataset = make_dataset(args)
    eps = args.epsilon
    if eps is None:
        # default: evaluate at the training epsilon
        eps = header.get("training", {}).get("train_epsilon") or 8 / 255
    X = dataset.test_x if args.limit is None else dataset.test_x[:args.limit]
    y = dataset.test_y[:len(X)]
    cols, outcomes = _attack_columns(model, X, y, eps, args,
                                     alpha_override=args.alpha_override)
    os.makedirs(args.out, exist_ok=True)
    report = {"schema_version": REPORT_SCHEMA_VERSION,
              "epsilon": eps, "seed": args.seed,
              "config": materialized_config(args),
              "checkpoint": os.path.abspath(args.checkpoint),
              "clean_accuracy": cols["clean"],
              "robust_accuracy": {k: cols[k] for k in
                                  ("fgsm", "fgsm_eot", "pgd", "pgd_eot")}}
    write_json(os.path.join(args.out, "attack_report.json"), report)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["example", "label", "fgsm_success", "fgsm_loss",
                "pgd_success", "pgd_loss", "pgd_restart"])
    for i in range(len(X)):
        f, g = outcomes["fgsm"][i], outcomes["pgd"][i]
        w.writerow([i, int(y[i]), int(f.success), f"{f.final_loss:.6f}",
                    int(g.success), f"{g.final_loss:.6f}", g.chosen_restart])
    atomic_write(os.path.join(args.out, "attack_outcomes.csv"), buf.getvalue())
    print(f"clean={cols['clean']:.4f} fgsm={cols['fgsm']:.4f} "
          f"fgsm_eot={cols['fgsm_eot']:.4f} pgd={cols['pgd']:.4f} "
          f"pgd_eot={cols['pgd_eot']:.4f}")
    return 0


def cmd_checklist(args):
    model, header = load_checkpoint(args.checkpoint)
    model = _override_model(model, args.alpha_override)
    dataset = make_dataset(args)
    eps = args.epsilon
    if eps is None:
        eps = header.get("training", {}).get("train_epsilon") or 8 / 255
    ccfg = ChecklistConfig(epsilon=eps, num_steps=args.steps,
                           restarts=args.restarts, eot_samples=args.eot,
                           step_size=args.step, master_seed=args.seed,
                           limit=args.limit,
                           n_workers=getattr(args, "workers", 1))
    report = run_checklist(model, dataset, ccfg)
    report["checkpoint"] = os.path.abspath(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    write_json(os.path.join(args.out, "checklist_report.json"), report)
    verdict = report["verdict"]
    summary = summarize_checklist(report)
    atomic_write(os.path.join(args.out, "checklist_summary.txt"), summary)
    print(f"passes_checklist={str(verdict['passes_checklist']).lower()} "
          f"eot_flagged={str(verdict['obfuscation_flagged_by_eot']).lower()}")
    return 0


def summarize_checklist(report) -> str:
    lines = ["gradient obfuscation checklist", "=" * 31]
    names = {
        1: "one-step attacks beat iterative ones",
        2: "black-box attacks beat white-box ones",
        3: "unbounded attacks stay below 100% success",
        4: "random sampling finds adversarial examples",
        5: "more distortion does not mean more success",
    }
    for i in range(1, 6):
        rec = report[f"characteristic_{i}"]
        if rec.get("errored"):
            status = f"ERRORED ({rec['errored']})"
        else:
            status = "observed" if rec["observed"] else "not observed"
        lines.append(f"  {i}. {names[i]}: {status}")
    eot = report["eot_criterion"]
    if eot.get("errored"):
        lines.append(f"  EoT criterion: ERRORED ({eot['errored']})")
    else:
        lines.append(f"  EoT criterion: plain_pgd={eot['plain_pgd_acc']:.4f} "
                     f"eot_pgd={eot['eot_pgd_acc']:.4f} gap={eot['gap']:.4f} "
                     f"flagged={str(eot['flagged']).lower()}")
    v = report["verdict"]
    lines.append(f"passes_checklist={str(v['passes_checklist']).lower()} "
                 f"eot_flagged={str(v['obfuscation_flagged_by_eot']).lower()}")
    return "\n".join(lines) + "\n"


def parse_model_list(text):
    specs = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if item == "baseline":
            specs.append(("baseline", "none", "layerwise"))
            continue
        if ":" in item:
            pni, gran = item.split(":", 1)
        else:
            pni, gran = item, "layer"
        if pni not in ("pni-w", "pni-a-a") or gran not in GRAN_FLAG:
            raise ValueError(f"bad model spec {item!r}")
        specs.append((f"{pni}-{gran}", pni, GRAN_FLAG[gran]))
    if not specs:
        raise ValueError("--models must name at least one model")
    return specs


def cmd_reproduce(args):
    dataset = make_dataset(args)
    eps = args.epsilon if args.epsilon is not None else 8 / 255
    args.epsilon = eps
    args.adversarial = True
    specs = parse_model_list(args.models)
    os.makedirs(args.out, exist_ok=True)

    rows = []
    checklists = {}
    for tag, pni, gran in specs:
        model, ckpt, _ = _train_one(args, dataset, pni, gran, args.seed, tag)
        X = dataset.test_x if args.limit is None else dataset.test_x[:args.limit]
        y = dataset.test_y[:len(X)]
        cols, _ = _attack_columns(model, X, y, eps, args)
        rows.append((tag, cols))
        if not args.skip_checklist:
            ccfg = ChecklistConfig(epsilon=eps, num_steps=args.steps,
                                   restarts=args.restarts, eot_samples=args.eot,
                                   step_size=args.step, master_seed=args.seed,
                                   limit=args.limit)
            rep = run_checklist(model, dataset, ccfg)
            checklists[tag] = rep
            write_json(os.path.join(args.out, f"{tag}_checklist.json"), rep)

    baseline = next((cols for tag, cols in rows if tag == "baseline"), None)
    buf = io.StringIO()
    w = csv.writer(buf)
    header = ["model", "clean", "fgsm", "fgsm_eot", "pgd", "pgd_eot"]
    if baseline is not None:
        header += ["d_clean", "d_fgsm", "d_fgsm_eot", "d_pgd", "d_pgd_eot"]
    w.writerow(header)
    keys = ("clean", "fgsm", "fgsm_eot", "pgd", "pgd_eot")
    for tag, cols in rows:
        row = [tag] + [f"{cols[k]:.4f}" for k in keys]
        if baseline is not None:
            row += [f"{cols[k] - baseline[k]:+.4f}" for k in keys]
        w.writerow(row)
    atomic_write(os.path.join(args.out, "table.csv"), buf.getvalue())

    summary = {"schema_version": REPORT_SCHEMA_VERSION, "seed": args.seed,
               "epsilon": eps, "config": materialized_config(args),
               "rows": [{"model": tag, **cols} for tag, cols in rows],
               "checklist_verdicts": {tag: rep["verdict"]
                                      for tag, rep in checklists.items()}}
    write_json(os.path.join(args.out, "reproduce_report.json"), summary)
    for tag, cols in rows:
        print(f"{tag}: clean={cols['clean']:.4f} pgd={cols['pgd']:.4f} "
              f"pgd_eot={cols['pgd_eot']:.4f}")
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else 2
    try:
        apply_config_file(args)
        handler = {"train": cmd_train, "attack": cmd_attack,
                   "checklist": cmd_checklist, "reproduce": cmd_reproduce}
        return handler[args.command](args)
    except (ValueError, OSError, RuntimeError, ArithmeticError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
