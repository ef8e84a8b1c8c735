"""``copd`` command line: prepare, train, evaluate, recommend, verify, export-embeddings, synth."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import datasets as D
from . import synthgen
from .checkpoint import (CheckpointFormatError, DimensionMismatchError, checkpoint_meta,
                         load_checkpoint, save_checkpoint)
from .evaluation import evaluate, export_embeddings, inference_embeddings, write_results
from .graph import build_all_graphs
from .training import TrainConfig, TrainingDivergedError, train, write_metric_log

log = logging.getLogger("copd")

EXIT_FAILURE, EXIT_MISSING, EXIT_NAN, EXIT_CHECKPOINT, EXIT_UNKNOWN_USER = 1, 2, 3, 4, 5

BUNDLED = "bundled"
FIXTURE_DIR = Path(__file__).parent / "data" / "synthetic"
PATH_KEYS = ("raw_a", "raw_b", "prepared_dir", "checkpoint", "output_dir", "task")
CONFIG_NAME = "config.txt"


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    raw_a: str | None = None
    raw_b: str | None = None
    prepared_dir: str | None = None
    checkpoint: str | None = None
    output_dir: str | None = None
    task: str = "copd"

    def items(self):
        for k in TrainConfig.field_names():
            yield k, getattr(self.train, k)
        for k in PATH_KEYS:
            yield k, getattr(self, k)

    def dump(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# effective configuration\n")
            for k, v in self.items():
                if v is not None:
                    fh.write(f"{k} = {v}\n")


_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _convert(key, text):
    kind = _TYPES.get(key, "str")
    if kind in (bool, "bool"):
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{key}: expected a boolean, got {text!r}")
        return low in ("true", "1", "yes")
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text.strip()


def read_config_file(path):
    """Parse flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    known = set(TrainConfig.field_names()) | set(PATH_KEYS)
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = _convert(key, value)
    return out


def resolve_config(args, file_values=None):
    """Flags beat config-file values, which beat ``COPD_SEED``, which beats defaults."""
    values = {}
    env_seed = os.environ.get("COPD_SEED")
    if env_seed is not None:
        values["seed"] = int(env_seed)
    values.update(file_values or {})
    for key in TrainConfig.field_names() + list(PATH_KEYS):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    train_kw = {k: v for k, v in values.items() if k in _TYPES}
    path_kw = {k: str(v) for k, v in values.items() if k in PATH_KEYS}
    return RunConfig(train=TrainConfig(**train_kw), **path_kw)


def _require(path, what):
    if path is None:
        raise CliError(f"missing required {what}", EXIT_MISSING)
    if path == BUNDLED and what == "prepared dir":
        return FIXTURE_DIR
    if not Path(path).exists():
        raise CliError(f"{what} not found: {path}", EXIT_MISSING)
    return Path(path)


def _load_dataset(prepared):
    path = _require(prepared, "prepared dir")
    if not (path / "meta.json").exists():
        raise CliError(f"not a prepared dataset directory: {path}", EXIT_MISSING)
    return D.load_prepared(path)


def _load_params(ckpt, dataset=None):
    path = _require(ckpt, "checkpoint")
    try:
        meta = checkpoint_meta(path)
        params = load_checkpoint(path)
    except (CheckpointFormatError, DimensionMismatchError) as exc:
        raise CliError(f"{path}: {exc}", EXIT_CHECKPOINT) from exc
    if dataset is not None:
        want = (dataset.n_users, dataset.n_items_a, dataset.n_items_b)
        got = (params.n_users, params.n_items_a, params.n_items_b)
        if want != got:
            raise CliError(f"{path}: checkpoint tables {got} do not match dataset {want}",
                           EXIT_CHECKPOINT)
    return params, meta


# ---------------------------------------------------------------------------
# commands


def format_stats(rows):
    lines = [f"{'domain':<8}{'users':>8}{'items':>8}{'interactions':>14}{'density':>10}"]
    for r in rows:
        lines.append(f"{r['domain']:<8}{r['users']:>8}{r['items']:>8}{r['interactions']:>14}"
                     f"{r['density_pct']:>9.3f}%")
    return "\n".join(lines)


def cmd_prepare(args):
    raw_a = _require(args.raw_a, "raw_a file")
    raw_b = _require(args.raw_b, "raw_b file")
    seed = _seed(args)
    ds = D.build_dual_domain(D.load_interactions(raw_a), D.load_interactions(raw_b),
                             args.min_user_inter, args.min_item_inter)
    ds = D.leave_one_out_split(ds, seed)
    D.save_prepared(ds, args.out_dir, {"seed": seed, "min_user_inter": args.min_user_inter,
                                       "min_item_inter": args.min_item_inter})
    print(format_stats(ds.stats()))
    return 0


def _seed(args):
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(os.environ.get("COPD_SEED", 0))


def cmd_train(args):
    file_values = read_config_file(_require(args.config, "config file")) if args.config else {}
    cfg = resolve_config(args, file_values)
    ds = _load_dataset(cfg.prepared_dir)
    if cfg.output_dir is None:
        raise CliError("missing required --output-dir", EXIT_MISSING)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / CONFIG_NAME)
    graphs = build_all_graphs(ds)
    try:
        result = train(ds, graphs, cfg.train)
    except TrainingDivergedError as exc:
        save_checkpoint(exc.last_good, out / "last_good.ckpt", cfg.train.L)
        raise CliError(f"training diverged: {exc}; last good parameters in "
                       f"{out / 'last_good.ckpt'}", EXIT_NAN) from exc
    save_checkpoint(result.params, out / "final.ckpt", cfg.train.L)
    save_checkpoint(result.best_params, out / "best.ckpt", cfg.train.L)
    write_metric_log(result.metric_log, out / "metrics.csv")
    print(f"best epoch {result.best_epoch} (mean HR@{cfg.train.top_k} {result.best_hr:.4f}); "
          f"outputs in {out}")
    return 0


def _training_config_near(ckpt):
    """Seed and sampling settings saved next to a checkpoint by ``train``, if any."""
    path = Path(ckpt).parent / CONFIG_NAME
    if not path.exists():
        return {}
    try:
        return read_config_file(path)
    except ValueError:
        return {}


def cmd_evaluate(args):
    ds = _load_dataset(args.prepared_dir)
    params, meta = _load_params(args.checkpoint, ds)
    saved = _training_config_near(args.checkpoint)
    seed = args.seed if args.seed is not None else saved.get("seed", _seed(args))
    negs = args.eval_negatives or saved.get("eval_negatives", 999)
    cfg = TrainConfig(d=params.d, L=int(meta["L"]), seed=seed, top_k=args.k, eval_negatives=negs)
    graphs = build_all_graphs(ds)
    state = inference_embeddings(params, graphs, cfg.L)
    results = [evaluate(params, ds, dom, cfg, graphs, state=state, workers=args.workers)
               for dom in D.DOMAINS]
    for r in results:
        print(json.dumps(r.to_json(args.task, seed, str(args.checkpoint))))
    if args.output:
        write_results(results, args.output, args.task, seed, str(args.checkpoint))
    return 0


def recommend(state, dataset, user, n):
    """Top-``n`` unseen items per domain as ``{domain: [(item_index, score), ...]}``."""
    out = {}
    for dom in D.DOMAINS:
        scores = state.item(dom).values @ state.user(dom).values[user]
        seen = dataset.user_items(dom)[user]
        unseen = np.setdiff1d(np.arange(dataset.n_items(dom)), seen)
        order = np.lexsort((unseen, -scores[unseen]))[:n]
        out[dom] = [(int(unseen[k]), float(scores[unseen[k]])) for k in order]
    return out


def cmd_recommend(args):
    ds = _load_dataset(args.prepared_dir)
    try:
        user = ds.user_map.index(args.user)
    except ValueError:
        raise CliError(f"unknown user {args.user!r}", EXIT_UNKNOWN_USER) from None
    params, meta = _load_params(args.checkpoint, ds)
    state = inference_embeddings(params, build_all_graphs(ds), int(meta["L"]))
    for dom, recs in recommend(state, ds, user, args.n).items():
        for item, score in recs:
            print(f"{dom}\t{ds.item_map(dom)[item]}\t{score:.6f}")
    return 0


def cmd_verify(args):
    from . import verify
    results = verify.run_all()
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CliError("failing checks: " + ", ".join(failed), EXIT_FAILURE)
    return 0


def cmd_export(args):
    ds = _load_dataset(args.prepared_dir)
    params, meta = _load_params(args.checkpoint, ds)
    export_embeddings(params, build_all_graphs(ds), int(meta["L"]), args.output)
    return 0


def cmd_synth(args):
    spec = synthgen.SynthSpec(n_users=args.n_users, n_items_a=args.n_items_a,
                              n_items_b=args.n_items_b, n_groups=args.n_groups,
                              interactions_per_user_per_domain=args.interactions,
                              conformity_fraction=args.conformity_fraction,
                              popularity_exponent=args.popularity_exponent, seed=_seed(args))
    try:
        raw_a, raw_b = synthgen.generate(spec)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_FAILURE) from exc
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    D.write_interactions(out / "raw_a.tsv", raw_a)
    D.write_interactions(out / "raw_b.tsv", raw_b)
    print(f"wrote {len(raw_a)} + {len(raw_b)} interactions to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p):
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in (bool, "bool"):
            p.add_argument(flag, dest=f.name, type=lambda s: _convert("popularity_weighting", s),
                           default=None, metavar="BOOL")
        else:
            kind = {"int": int, "float": float}.get(f.type, f.type)
            p.add_argument(flag, dest=f.name, type=kind, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="copd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="filter, reindex and split two raw logs")
    p.add_argument("--raw-a", required=True)
    p.add_argument("--raw-b", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--min-user-inter", type=int, default=5)
    p.add_argument("--min-item-inter", type=int, default=10)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train CoPD on a prepared dataset")
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--prepared-dir", dest="prepared_dir",
                   help=f"prepared dataset directory, or '{BUNDLED}' for the packaged fixture")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--task", default=None)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="HR@K / NDCG@K of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prepared-dir", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-negatives", type=int)
    p.add_argument("--output")
    p.add_argument("--task", default="copd")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recommend", help="top-n unseen items for one user")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prepared-dir", required=True)
    p.add_argument("--user", required=True, help="external user id")
    p.add_argument("--n", type=int, default=10)
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("verify", help="run gradient, oracle and unit-value checks")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export-embeddings", help="write user embeddings as labelled TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prepared-dir", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("synth", help="generate a synthetic dual-domain raw log")
    p.add_argument("--out-dir", required=True)
    defaults = synthgen.SynthSpec()
    p.add_argument("--n-users", type=int, default=defaults.n_users)
    p.add_argument("--n-items-a", type=int, default=defaults.n_items_a)
    p.add_argument("--n-items-b", type=int, default=defaults.n_items_b)
    p.add_argument("--n-groups", type=int, default=defaults.n_groups)
    p.add_argument("--interactions", type=int,
                   default=defaults.interactions_per_user_per_domain)
    p.add_argument("--conformity-fraction", type=float, default=defaults.conformity_fraction)
    p.add_argument("--popularity-exponent", type=float, default=defaults.popularity_exponent)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"copd: error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"copd: error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_MISSING
    except (D.EmptyDatasetError, D.DatasetParseError, ValueError) as exc:
        print(f"copd: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
