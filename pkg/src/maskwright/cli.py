"""Command-line interface.

Subcommands: gen-task, train-base, train-explainer, explain, eval,
gradcheck. Exit codes: 0 success, 1 usage error, 2 runtime error. The
MASKWRIGHT_SEED environment variable supplies the default seed when
neither a flag nor a config file sets one.

``train-base`` writes the model plus a ``<model>.meta.json`` sidecar
recording the task wiring (split point, explainer dimensions, broadcast);
``train-explainer`` reads that sidecar and writes its own next to the
explainer model, so ``explain`` and ``eval`` can reassemble the masked
model from files alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .architectures import TaskWiring, assemble_masked_model, wiring_for_task
from .errors import ConfigError, MaskwrightError
from .evaluation import evaluate_masked_model
from .masking import BroadcastSpec, MaskedModel, build_explainer, split_model
from .objectives import RegularizerConfig
from .serialization import (
    export_metrics,
    export_pgm,
    export_token_summary,
    export_token_weights,
    load_model,
    save_model,
)
from .tasks import (
    TaskSpec,
    alphabet_chars,
    generate,
    load_dataset,
    save_dataset,
    split_dataset,
    token_names,
)
from .training import TrainConfig, train_base, train_explainer

DEFAULT_SEED_ENV = "MASKWRIGHT_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1; runtime problems exit 2
    def error(self, message):
        raise UsageError(message)


def _default_seed() -> int:
    raw = os.environ.get(DEFAULT_SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"{DEFAULT_SEED_ENV} must be an integer, got {raw!r}") from e


def parse_reg(text: str) -> RegularizerConfig:
    """Parse 'l1=...,l2=...,entropy=...,entropy_kind=...' into a config."""
    kwargs = {}
    if text:
        for part in text.split(","):
            if "=" not in part:
                raise ConfigError(f"bad --reg fragment {part!r}")
            k, v = part.split("=", 1)
            k = k.strip()
            if k in ("l1", "l2", "entropy"):
                kwargs[f"{k}_coeff"] = float(v)
            elif k == "entropy_kind":
                kwargs["entropy_kind"] = v.strip()
            else:
                raise ConfigError(f"unknown --reg key {k!r}")
    return RegularizerConfig(**kwargs)


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return data


def _merged_train_config(args, file_cfg: dict) -> TrainConfig:
    """defaults <- config file <- explicit flags."""

    def pick(flag_value, key, fallback):
        if flag_value is not None:
            return flag_value
        if key in file_cfg:
            return file_cfg[key]
        return fallback

    seed = pick(args.seed, "seed", None)
    if seed is None:
        seed = _default_seed()
    reg = parse_reg(args.reg) if getattr(args, "reg", None) else None
    if reg is None and "reg" in file_cfg:
        reg = RegularizerConfig(**file_cfg["reg"])
    return TrainConfig(
        epochs=int(pick(args.epochs, "epochs", 10)),
        batch_size=int(pick(args.batch_size, "batch_size", 32)),
        seed=int(seed),
        lr=pick(args.lr, "lr", None),
        optimizer=pick(args.optimizer, "optimizer", "adam"),
        eval_every=int(pick(args.eval_every, "eval_every", 1)),
        reg=reg if reg is not None else RegularizerConfig(),
    )


def _split_fragments(text: str) -> list[str]:
    """Split on commas that sit outside brackets, so lists survive."""
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch in "[(":
            depth += 1
        elif ch in ")]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if cur:
        parts.append("".join(cur))
    return parts


def _arch_overrides(args, file_cfg: dict) -> dict:
    arch = dict(file_cfg.get("arch", {}))
    for frag in _split_fragments(args.arch) if getattr(args, "arch", None) else []:
        if "=" not in frag:
            raise ConfigError(f"bad --arch fragment {frag!r}")
        k, v = frag.split("=", 1)
        try:
            arch[k.strip()] = json.loads(v)
        except json.JSONDecodeError:
            arch[k.strip()] = v.strip()
    # conv_channels may arrive as a list from json
    if "conv_channels" in arch and isinstance(arch["conv_channels"], list):
        arch["conv_channels"] = tuple(arch["conv_channels"])
    return arch


def _dataset_dir(root, split: str) -> Path:
    p = Path(root)
    if (p / split).is_dir():
        return p / split
    return p


def _wiring_meta(wiring: TaskWiring, task: str) -> dict:
    return {
        "task": task,
        "split_index": wiring.split_index,
        "variant": wiring.variant,
        "mask_point": wiring.mask_point,
        "broadcast": {
            "mask_shape": list(wiring.broadcast.mask_shape),
            "input_shape": list(wiring.broadcast.input_shape),
            "broadcast_axis": wiring.broadcast.broadcast_axis,
        },
        "explainer_dims": {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in wiring.explainer_dims.items()
        },
    }


def _meta_path(model_path) -> Path:
    return Path(str(model_path) + ".meta.json")


def _write_meta(model_path, meta: dict):
    _meta_path(model_path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _read_meta(model_path) -> dict:
    p = _meta_path(model_path)
    if not p.is_file():
        raise ConfigError(f"missing sidecar {p}; it is written by train-base")
    return json.loads(p.read_text())


def _assemble_from_files(base_path, explainer_path) -> MaskedModel:
    base = load_model(base_path, mode="infer")
    meta = _read_meta(base_path)
    explainer = load_model(explainer_path, mode="infer")
    b = meta["broadcast"]
    return MaskedModel(
        split=split_model(base, int(meta["split_index"])),
        explainer=explainer,
        broadcast=BroadcastSpec(
            tuple(b["mask_shape"]), tuple(b["input_shape"]), b["broadcast_axis"]
        ),
        mask_point=meta["mask_point"],
    )


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_task(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    kwargs = dict(kind=args.task, n_examples=args.n, seed=seed)
    if args.noise is not None:
        kwargs["noise"] = args.noise
    for key in ("image_size", "classes", "seq_len", "vocab", "alphabet"):
        v = getattr(args, key)
        if v is not None:
            kwargs[key] = v
    spec = TaskSpec(**kwargs)
    ds = generate(spec)
    train, test = split_dataset(ds, args.train_frac)
    out = Path(args.out)
    save_dataset(out / "train", train)
    save_dataset(out / "test", test)
    print(f"wrote {len(train)} train / {len(test)} test examples to {out}")
    return 0


def cmd_train_base(args) -> int:
    file_cfg = _load_config(args.config)
    data = load_dataset(_dataset_dir(args.data, "train"))
    cfg = _merged_train_config(args, file_cfg)
    wiring = wiring_for_task(data.task, data.params, seed=cfg.seed, **_arch_overrides(args, file_cfg))
    log = train_base(wiring.base, data, cfg)
    save_model(args.out, wiring.base)
    _write_meta(args.out, _wiring_meta(wiring, data.task))
    _emit_log(log, args.log)
    print(f"final train metric: {log.last_metric():.6f}")
    print(f"saved base model to {args.out}")
    return 0


def cmd_train_explainer(args) -> int:
    file_cfg = _load_config(args.config)
    data = load_dataset(_dataset_dir(args.data, "train"))
    cfg = _merged_train_config(args, file_cfg)
    base = load_model(args.base, mode="infer")
    meta = _read_meta(args.base)
    b = meta["broadcast"]
    dims = dict(meta["explainer_dims"])
    for k, v in dims.items():
        if isinstance(v, list):
            dims[k] = tuple(v)
    explainer = build_explainer(meta["variant"], seed=cfg.seed, **dims)
    mm = MaskedModel(
        split=split_model(base, int(meta["split_index"])),
        explainer=explainer,
        broadcast=BroadcastSpec(
            tuple(b["mask_shape"]), tuple(b["input_shape"]), b["broadcast_axis"]
        ),
        mask_point=meta["mask_point"],
    )
    log = train_explainer(mm, data, cfg)
    save_model(args.out, mm.explainer)
    expl_meta = dict(meta)
    expl_meta["base_model"] = str(args.base)
    expl_meta["reg"] = {
        "l1_coeff": cfg.reg.l1_coeff,
        "l2_coeff": cfg.reg.l2_coeff,
        "entropy_coeff": cfg.reg.entropy_coeff,
        "entropy_kind": cfg.reg.entropy_kind,
    }
    _write_meta(args.out, expl_meta)
    _emit_log(log, args.log)
    print(f"final masked metric: {log.last_metric():.6f}")
    print(f"saved explainer to {args.out}")
    return 0


def cmd_explain(args) -> int:
    data = load_dataset(_dataset_dir(args.data, "test"))
    mm = _assemble_from_files(args.base, args.explainer)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = min(args.n, len(data))
    from .evaluation import collect_masks

    masks = collect_masks(mm, data.inputs[:n])
    if data.task == "planted_patch":
        for i in range(n):
            export_pgm(masks[i], out / f"mask_{i:03d}.pgm")
    else:
        if data.task == "keyword_seq":
            names = token_names(int(data.params.get("vocab", int(data.inputs.max()) + 1)))
        else:
            names = list(alphabet_chars(int(data.params.get("alphabet", int(data.inputs.max()) + 1))))
        classification = data.is_classification
        for i in range(n):
            toks = [names[t] for t in data.inputs[i]]
            label = int(data.targets[i]) if classification else None
            export_token_weights(toks, masks[i], out / f"tokens_{i:03d}.tsv", label=label)
        if classification:
            all_masks = collect_masks(mm, data.inputs)
            lists = [[names[t] for t in row] for row in data.inputs]
            export_token_summary(lists, all_masks, data.targets, out / "summary.tsv")
    print(f"wrote explanations for {n} examples to {out}")
    return 0


def cmd_eval(args) -> int:
    data = load_dataset(_dataset_dir(args.data, "test"))
    mm = _assemble_from_files(args.base, args.explainer)
    report = evaluate_masked_model(mm, data, k=args.k)
    export_metrics(report, args.out)
    print(report.to_json(), end="")
    print(f"wrote metrics to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    seed = args.seed if args.seed is not None else _default_seed()
    results = run_suite(seed=seed, instances=args.instances)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} gradient checks failed", file=sys.stderr)
        return 2
    print(f"all {len(results)} gradient checks passed")
    return 0


def _emit_log(log, path):
    if path:
        Path(path).write_text(log.text())
    else:
        for line in log.lines():
            print(line)


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> _Parser:
    p = _Parser(prog="maskwright", description="Explanation masks for frozen networks")
    p.add_argument("--version", action="version", version=f"maskwright {__version__}")
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("gen-task", parents=[], help="generate a synthetic dataset")
    g.add_argument("--task", required=True, choices=["planted_patch", "keyword_seq", "char_count"])
    g.add_argument("--n", type=int, required=True, help="total examples (split train/test)")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--noise", type=float, default=None)
    g.add_argument("--train-frac", type=float, default=0.8)
    g.add_argument("--image-size", dest="image_size", type=int, default=None)
    g.add_argument("--classes", type=int, default=None)
    g.add_argument("--seq-len", dest="seq_len", type=int, default=None)
    g.add_argument("--vocab", type=int, default=None)
    g.add_argument("--alphabet", type=int, default=None)
    g.set_defaults(fn=cmd_gen_task)

    def add_train_flags(sp):
        sp.add_argument("--config", default=None, help="JSON config; flags override it")
        sp.add_argument("--epochs", type=int, default=None)
        sp.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        sp.add_argument("--lr", type=float, default=None)
        sp.add_argument("--optimizer", choices=["adam", "sgd"], default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--eval-every", dest="eval_every", type=int, default=None)
        sp.add_argument("--log", default=None, help="write the training log here instead of stdout")

    tb = sub.add_parser("train-base", help="train a base network on a dataset")
    tb.add_argument("--data", required=True)
    tb.add_argument("--out", required=True)
    tb.add_argument("--arch", default=None, help="comma-separated k=v architecture overrides")
    add_train_flags(tb)
    tb.set_defaults(fn=cmd_train_base, reg=None)

    te = sub.add_parser("train-explainer", help="train an explanation network against a frozen base")
    te.add_argument("--data", required=True)
    te.add_argument("--base", required=True)
    te.add_argument("--out", required=True)
    te.add_argument("--reg", default=None, help="l1=..,l2=..,entropy=..,entropy_kind=..")
    add_train_flags(te)
    te.set_defaults(fn=cmd_train_explainer)

    ex = sub.add_parser("explain", help="export masks for test examples")
    ex.add_argument("--data", required=True)
    ex.add_argument("--base", required=True)
    ex.add_argument("--explainer", required=True)
    ex.add_argument("--out", required=True)
    ex.add_argument("--n", type=int, default=8)
    ex.set_defaults(fn=cmd_explain)

    ev = sub.add_parser("eval", help="evaluate a masked model and export metrics JSON")
    ev.add_argument("--data", required=True)
    ev.add_argument("--base", required=True)
    ev.add_argument("--explainer", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--k", type=int, default=3)
    ev.set_defaults(fn=cmd_eval)

    gc = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=None)
    gc.add_argument("--instances", type=int, default=20)
    gc.set_defaults(fn=cmd_gradcheck)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_usage(sys.stderr)
            print("maskwright: a subcommand is required", file=sys.stderr)
            return 1
        return args.fn(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"maskwright: {e}", file=sys.stderr)
        return 1
    except (MaskwrightError, OSError, IndexError) as e:
        print(f"maskwright: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
