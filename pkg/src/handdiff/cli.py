"""Command line for synthesising data, training, evaluating and sweeping models.

Every config key is also accepted as ``--key value``; values from ``--config``
files are applied first and flags override them.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from handdiff import diffusion as dif
from handdiff import evaluation as ev
from handdiff import synthetic as syn
from handdiff.config import FIELDS, ConfigError, UnknownKeyError, make_config, parse_config_text
from handdiff.optim import CheckpointError

# keys that may change at inference time without retraining
INFERENCE_KEYS = {"timesteps", "hypotheses", "use_mh", "seed", "batch"}


class UsageError(Exception):
    pass


def _split_overrides(extra):
    """``--key value`` / ``--key=value`` pairs left over by argparse."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {tok}")
            value = extra[i + 1]
            i += 2
        key = key.replace("-", "_")
        if key not in FIELDS:
            raise UnknownKeyError(key)
        out[key] = value
    return out


def _overrides(args, extra):
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_text(Path(args.config).read_text()))
    values.update(_split_overrides(extra))
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return values


def _build_config(args, extra):
    values = _overrides(args, extra)
    return make_config(values.pop("profile", "fast"), **values)


def _load_model(args, extra):
    from handdiff.training import Model

    values = _overrides(args, extra)
    model = Model.load(args.model)
    fixed = sorted(set(values) - INFERENCE_KEYS)
    changed = [k for k in fixed if str(values[k]) != str(getattr(model.cfg, k))]
    if changed:
        raise ConfigError(f"cannot change {', '.join(changed)} of a trained model")
    model.cfg = model.cfg.replace(**{k: values[k] for k in values if k in INFERENCE_KEYS}).validate()
    return model


def _load_data(path, cfg):
    return syn.read_dataset(path, n_points=cfg.n_points, seed=cfg.seed)


# ------------------------------------------------------------------ commands


def cmd_synth(args, extra):
    cfg = _build_config(args, extra)
    model = syn.HandModel(cfg.joints)
    res = (cfg.render_size, cfg.render_size)
    samples = syn.generate_dataset(cfg.seed, args.count, model, resolution=res,
                                   n_points=cfg.n_points, occluder=cfg.occluder)
    syn.write_dataset(samples, args.out)
    print(f"wrote {len(samples)} frames to {args.out}")


def cmd_train(args, extra):
    from handdiff.training import train

    cfg = _build_config(args, extra)
    samples = _load_data(args.data, cfg)
    if samples[0].joints_mm.shape[0] != cfg.joints:
        raise ConfigError(f"dataset has {samples[0].joints_mm.shape[0]} joints, config says {cfg.joints}")
    model, history = train(samples, cfg, cfg.seed, log=print)
    out = Path(args.out)
    model.save(out)
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(history, 1):
            w.writerow([i, repr(loss)])
    print(f"saved model to {out}")


def cmd_infer(args, extra):
    model = _load_model(args, extra)
    samples = _load_data(args.data, model.cfg)
    pred = ev.predict(model, samples, seed=model.cfg.seed)
    ev.write_predictions_csv(pred, args.out, [s.frame_id for s in samples])
    print(f"wrote predictions for {len(samples)} frames to {args.out}")


def cmd_eval(args, extra):
    model = _load_model(args, extra)
    samples = _load_data(args.data, model.cfg)
    report, pred = ev.evaluate(model, samples, seed=model.cfg.seed)
    ev.write_metrics_csv(report, args.out)
    if args.predictions:
        ev.write_predictions_csv(pred, args.predictions, [s.frame_id for s in samples])
    print(f"mean joint error {report.mean_error:.3f} mm over {len(samples)} frames "
          f"(T'={model.cfg.timesteps}, H={model.cfg.hypotheses if model.cfg.use_mh else 1})")


def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise UsageError("value list is empty")
    return values


def cmd_sweep(args, extra):
    model = _load_model(args, extra)
    samples = _load_data(args.data, model.cfg)
    rows = ev.sweep(model, samples, args.axis, _int_list(args.values), seed=model.cfg.seed)
    ev.write_sweep_csv(args.axis, rows, args.out)
    for v, e in rows:
        print(f"{args.axis}={v}: {e:.3f} mm")


def cmd_ablate(args, extra):
    cfg = _build_config(args, extra)
    train_samples = _load_data(args.data, cfg)
    test_samples = _load_data(args.test, cfg)
    rows = args.rows.split(",") if args.rows else None
    reports = ev.ablate(train_samples, test_samples, cfg, cfg.seed, rows, log=print)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config", "mean_error_mm"])
        for name, rep in reports.items():
            w.writerow([name, repr(rep.mean_error)])


def cmd_schedule_dump(args, extra):
    if extra:
        _split_overrides(extra)  # unknown keys still exit 2
        raise UsageError(f"schedule-dump takes only --kind, --T and --out, got {' '.join(extra)}")
    s = dif.build_schedule(args.kind, args.T)
    if args.out:
        dif.write_schedule_csv(s, args.out)
    else:
        dif.write_schedule_csv(s, sys.stdout)


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="handdiff", description=__doc__.splitlines()[0], allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text, config=True):
        sp = sub.add_parser(name, help=help_text, allow_abbrev=False)
        if config:
            sp.add_argument("--config", help="key = value config file")
        sp.set_defaults(fn=fn)
        return sp

    sp = command("synth", cmd_synth, "render a synthetic dataset")
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)

    sp = command("train", cmd_train, "train a model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)

    for name, fn, help_text in (("infer", cmd_infer, "write pose predictions"),
                                ("eval", cmd_eval, "score a model on a dataset")):
        sp = command(name, fn, help_text)
        sp.add_argument("--model", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True)
        if name == "eval":
            sp.add_argument("--predictions", help="also dump predictions to this CSV")

    sp = command("sweep", cmd_sweep, "error versus timesteps or hypotheses")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--axis", choices=["timesteps", "hypotheses"], required=True)
    sp.add_argument("--values", required=True, help="comma-separated integers")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = command("ablate", cmd_ablate, "train and score component combinations")
    sp.add_argument("--data", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--rows", help=f"comma-separated subset of {','.join(ev.ABLATION_ROWS)}")
    sp.add_argument("--out", required=True)

    sp = command("schedule-dump", cmd_schedule_dump, "print the variance schedule", config=False)
    sp.add_argument("--kind", default="cosine", choices=list(dif.SCHEDULE_KINDS))
    sp.add_argument("--T", type=int, default=500)
    sp.add_argument("--out")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        args.fn(args, extra)
    except UnknownKeyError as exc:
        print(f"error: unknown config key {exc.key!r}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, ValueError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
