"""Command-line entry point: gen / train / eval / g2p / verify.

Configuration is an INI-style file with [synth], [model], [loss], [train]
and [eval] sections; command-line flags override file values and the
effective configuration is echoed so any run can be reproduced from it.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .linguistics import (
    default_inventory,
    default_lexicon,
    load_inventory,
    load_lexicon,
    text_to_labels,
)
from .losses import LossConfig
from .metrics import write_eval_report
from .model import ALL_ACTIVATIONS, CHAR_OFFSET, ActivationConfig, Model, \
    ModelConfig
from .synth import SynthConfig, generate_corpus, make_lexicon, read_manifest, \
    viseme_frequencies, write_manifest
from .training import TrainConfig, TrainState, evaluate, train
from .verify import run_all

__all__ = ["main"]

_CONFIG_SECTIONS = {
    "synth": SynthConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "model": ModelConfig,
}

# model fields normally derived from the data, allowed to be absent
_MODEL_DERIVED = ("char_vocab", "input_dim", "max_frames", "max_decode_len")

_EVAL_KEYS = {"decode": str, "beam_width": int, "activations": str}

_GEN_KEYS = {"lexicon": str, "homophone_pairs": int}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _coerce(value: str, py_type):
    if py_type is bool:
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {value!r}")
    if py_type is int:
        return int(value)
    if py_type is float:
        return float(value)
    if py_type is tuple:
        return tuple(int(x) for x in value.split(","))
    return value


_TYPES_BY_NAME = {"int": int, "float": float, "bool": bool, "tuple": tuple,
                  "str": str}


def _field_type(f):
    if isinstance(f.type, type):
        return f.type
    typ = _TYPES_BY_NAME.get(str(f.type))
    if typ is not None:
        return typ
    default = f.default if f.default is not dataclasses.MISSING else None
    return type(default) if default is not None else None


def _section_values(parser_obj, section, cls):
    """Typed values of one INI section validated against a config class."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    if not parser_obj.has_section(section):
        return out
    for key, raw in parser_obj.items(section):
        if key not in fields:
            raise UsageError(f"unknown config key [{section}] {key}")
        typ = _field_type(fields[key])
        if typ is None:
            raise UsageError(
                f"config key [{section}] {key} belongs in its own section"
            )
        out[key] = _coerce(raw, typ)
    return out


def _load_config(path):
    cp = configparser.ConfigParser()
    if path:
        if not Path(path).exists():
            raise UsageError(f"config file not found: {path}")
        cp.read(path, encoding="utf-8")
        for section in cp.sections():
            if section not in (*_CONFIG_SECTIONS, "eval", "gen"):
                raise UsageError(f"unknown config section [{section}]")
    return cp


def _extra_section(cp, section, schema):
    out = {}
    if cp.has_section(section):
        for key, raw in cp.items(section):
            if key not in schema:
                raise UsageError(f"unknown config key [{section}] {key}")
            out[key] = _coerce(raw, schema[key])
    return out


def _effective_ini(sections: dict) -> str:
    lines = []
    for name, values in sections.items():
        if not values:
            continue
        lines.append(f"[{name}]")
        for k, v in values.items():
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


def _echo(args, text):
    if not args.quiet:
        print(text)


def _write_effective(args, sections):
    text = _effective_ini(sections)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "effective_config.ini").write_text(text, encoding="utf-8")
    _echo(args, text)
    return text


def _dc_dict(obj):
    d = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            continue
        d[f.name] = v
    return d


# ----------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    cp = _load_config(args.config)
    synth_kw = _section_values(cp, "synth", SynthConfig)
    gen_kw = _extra_section(cp, "gen", _GEN_KEYS)
    if args.seed is not None:
        synth_kw["seed"] = args.seed
    scfg = SynthConfig(**synth_kw)
    if not args.out:
        raise UsageError("gen requires --out for the manifest directory")

    inv = default_inventory()
    source = gen_kw.get("lexicon", "synthetic")
    if source == "synthetic":
        lexicon = make_lexicon(
            inv, scfg.char_vocab_size,
            seed=scfg.codebook_seed if scfg.codebook_seed is not None
            else scfg.seed,
            num_homophone_pairs=gen_kw.get("homophone_pairs", 3),
        )
    elif source == "bundled":
        lexicon = default_lexicon(inv)
    else:
        lexicon = load_lexicon(source, inv)

    _write_effective(args, {"synth": _dc_dict(scfg), "gen": gen_kw})
    corpus = generate_corpus(scfg, inv, lexicon)
    write_manifest(args.out, corpus, inv, lexicon)
    _echo(args, f"wrote {len(corpus)} utterances to {args.out}")
    return 0


def _model_config_from_data(cp, corpus, lexicon):
    kw = _section_values(cp, "model", ModelConfig)
    max_T = max(u.num_frames() for u in corpus)
    max_L = max(len(u.labels.chars) for u in corpus)
    kw.setdefault("char_vocab", len(lexicon) + CHAR_OFFSET)
    kw.setdefault("input_dim", corpus[0].features.shape[1])
    kw.setdefault("max_frames", max_T + 8)
    kw.setdefault("max_decode_len", max_L + 2)
    return ModelConfig(**kw)


def cmd_train(args):
    cp = _load_config(args.config)
    if not args.data:
        raise UsageError("train requires --data with a manifest directory")
    if not args.out:
        raise UsageError("train requires --out for the run directory")
    corpus, inv, lexicon = read_manifest(args.data)
    if lexicon is None:
        raise UsageError(f"manifest {args.data} has no lexicon")

    train_kw = _section_values(cp, "train", TrainConfig)
    loss_kw = _section_values(cp, "loss", LossConfig)
    if args.seed is not None:
        train_kw["seed"] = args.seed
    if args.disable_align:
        train_kw["disable_align"] = True
    if args.disable_branches:
        train_kw["disable_branches"] = True
    tcfg = TrainConfig(loss=LossConfig(**loss_kw), **train_kw)
    mcfg = _model_config_from_data(cp, corpus, lexicon)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_effective(args, {
        "train": _dc_dict(tcfg),
        "loss": _dc_dict(tcfg.loss),
        "model": _dc_dict(mcfg),
    })
    log_path = out / "metrics.jsonl"
    if log_path.exists() and not args.resume:
        log_path.unlink()
    state = train(tcfg, corpus, inv, mcfg,
                  log_path=log_path,
                  checkpoint_dir=out / "checkpoints",
                  resume=args.resume)
    state.save(out / "final.npz")
    _echo(args, f"trained {state.step} steps; state in {out / 'final.npz'}")
    return 0


def cmd_eval(args):
    cp = _load_config(args.config)
    if not args.checkpoint or not args.data:
        raise UsageError("eval requires --checkpoint and --data")
    if not args.out:
        raise UsageError("eval requires --out for the report directory")
    eval_kw = _extra_section(cp, "eval", _EVAL_KEYS)
    corpus, inv, lexicon = read_manifest(args.data)

    names = args.activate or \
        [a.strip() for a in eval_kw.get("activations", "").split(";") if a] or \
        [a.name for a in ALL_ACTIVATIONS]
    activations = [ActivationConfig.from_name(n) for n in names]

    try:
        state = TrainState.load(args.checkpoint)
        model = state.model
    except Exception:
        model = Model.load(args.checkpoint)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_effective(args, {"eval": {**eval_kw,
                                     "activations": ";".join(names)}})

    results = evaluate(model, corpus, activations, lexicon=lexicon,
                       decode=eval_kw.get("decode", "ctc_greedy"),
                       beam_width=eval_kw.get("beam_width", 8))
    records = [r for res in results for r in res["records"]]
    summaries = [res["summary"] for res in results]
    write_eval_report(out / "report.jsonl", records,
                      {"configs": summaries})
    timings = {res["summary"]["activation"]: res["wall_clock_s"]
               for res in results}
    (out / "timings.json").write_text(json.dumps(timings, indent=2),
                                      encoding="utf-8")
    for s in summaries:
        _echo(args, f"{s['activation']:>6}: corpus CER {s['corpus_cer']:.4f} "
                    f"median {s['median_cer']:.4f} "
                    f"params {s['active_params']} "
                    f"wall {timings[s['activation']]:.3f}s")
    return 0


def cmd_g2p(args):
    inv = load_inventory(args.inventory) if args.inventory else \
        default_inventory()
    lexicon = load_lexicon(args.lexicon, inv) if args.lexicon else \
        default_lexicon(inv)

    if args.file:
        text_lines = Path(args.file).read_text(encoding="utf-8").splitlines()
    elif args.text is not None:
        text_lines = [args.text]
    else:
        raise UsageError("g2p needs TEXT or --file")

    if args.stats:
        counts = np.zeros(inv.num_visemes)
        for line in text_lines:
            labels = text_to_labels(line.strip(), lexicon, inv)
            for v in labels.visemes:
                counts[v] += 1
        total = counts.sum()
        print("Viseme\tFrequency\tIPA")
        for vid in range(inv.num_visemes):
            syms = ",".join(inv.phonemes[i] for i in inv.phonemes_of_viseme(vid))
            freq = "N/A" if vid == 0 else \
                f"{100.0 * counts[vid] / total:.2f}%" if total else "0.00%"
            print(f"{vid}\t{freq}\t{syms}")
        return 0

    for line in text_lines:
        line = line.strip()
        if not line:
            continue
        labels = text_to_labels(line, lexicon, inv)
        print("chars:    " + " ".join(line))
        print("phonemes: " + " ".join(inv.phonemes[p] for p in labels.phonemes))
        print("visemes:  " + " ".join(str(v) for v in labels.visemes))
    return 0


def cmd_verify(args):
    results = run_all(fast=args.fast)
    ok = all(r["passed"] for r in results)
    if args.json:
        print(json.dumps({"passed": ok, "suites": results}, indent=2))
    else:
        for r in results:
            status = "PASS" if r["passed"] else "FAIL"
            detail = {k: v for k, v in r.items() if k not in ("suite", "passed")}
            print(f"{status} {r['suite']}: {detail}")
    return 0 if ok else 2


# ----------------------------------------------------------------------


def _build_parser():
    p = _Parser(prog="vsrkit",
                description="cascade-free multitask sequence recognition "
                            "toolkit")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", help="generate a synthetic corpus manifest")

    t = sub.add_parser("train", help="train on a manifest")
    t.add_argument("--data", help="manifest directory")
    t.add_argument("--disable-align", action="store_true",
                   help="ablation: drop the alignment loss")
    t.add_argument("--disable-branches", action="store_true",
                   help="ablation: single-stage model without branches")
    t.add_argument("--resume", help="continue from a saved training state")

    e = sub.add_parser("eval", help="evaluate a checkpoint per activation")
    e.add_argument("--checkpoint", help="training state or model file")
    e.add_argument("--data", help="manifest directory")
    e.add_argument("--activate", action="append",
                   choices=["f", "f+p", "f+v", "f+p+v"],
                   help="activation config (repeatable)")

    g = sub.add_parser("g2p", help="character to phoneme/viseme conversion")
    g.add_argument("text", nargs="?", default=None)
    g.add_argument("--file", help="read text lines from a file")
    g.add_argument("--stats", action="store_true",
                   help="print a viseme frequency table")
    g.add_argument("--inventory", help="inventory file override")
    g.add_argument("--lexicon", help="lexicon file override")

    v = sub.add_parser("verify", help="run the oracle suites")
    v.add_argument("--json", action="store_true")
    v.add_argument("--fast", action="store_true",
                   help="smaller instance counts")
    return p


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "g2p": cmd_g2p,
    "verify": cmd_verify,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"vsrkit: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"vsrkit: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
