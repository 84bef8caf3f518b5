"""Command-line surface: pretrain, continue, sample, verify, eval.

Runs are described by a JSON config (registry, domain stream, model,
per-step task settings, output directory); flags override config values.
Every command is deterministic given its config and seeds, and exits
with 0 on success, 1 on verification failure, 2 on validation errors.
"""

import argparse
import csv
import importlib.resources as resources
import io
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import metrics as mt
from . import training as tr
from .checkpoint import Checkpoint, FormatError, count_params, load_generator
from .imageio import read_pgm, write_pgm, write_ppm
from .labels import LabelRegistry, ValidationError, load_mapping_file
from .network import ModelConfig
from .scenes import builtin_spec, generate_scene, load_spec, make_dataset

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_VALIDATION = 2

_TASK_KEYS = {"iterations", "batch_size", "lr", "seed", "subset_size"}
_DATA_KEYS = {"size", "seed", "eval_size", "specs"}
_TOP_KEYS = {"registry", "domains", "out_dir", "model", "data", "tasks"}


@dataclass
class RunConfig:
    registry: LabelRegistry
    domains: list
    out_dir: str
    model: ModelConfig
    data_size: int
    data_seed: int
    eval_size: int
    spec_paths: dict
    tasks: list  # raw per-step dicts


def _reject_unknown(doc, known, where):
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(f"unknown keys in {where}: {sorted(unknown)}")


def load_run_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from None
    _reject_unknown(doc, _TOP_KEYS, "config")
    for key in ("registry", "domains", "out_dir", "tasks"):
        if key not in doc:
            raise ValidationError(f"config is missing required key {key!r}")

    registry_path = doc["registry"]
    if registry_path.startswith("builtin:"):
        name = registry_path.split(":", 1)[1]
        res = resources.files("contscene") / "data" / f"{name}.csv"
        if not res.is_file():
            raise ValidationError(f"no built-in registry named {name!r}")
        registry = load_mapping_file(str(res))
    else:
        if not os.path.exists(registry_path):
            raise ValidationError(f"registry file not found: {registry_path}")
        registry = load_mapping_file(registry_path)

    domains = list(doc["domains"])
    if tuple(domains) != registry.domains[:len(domains)] or not domains:
        raise ValidationError(
            f"domains {domains} must be a non-empty prefix of the registry "
            f"stream {list(registry.domains)}")

    tasks = list(doc["tasks"])
    if len(tasks) != len(domains):
        raise ValidationError(
            f"need one task per domain: {len(domains)} domains, {len(tasks)} tasks")
    for i, task in enumerate(tasks):
        _reject_unknown(task, _TASK_KEYS, f"tasks[{i}]")

    data = doc.get("data", {})
    _reject_unknown(data, _DATA_KEYS, "data")
    model_doc = doc.get("model", {})
    return RunConfig(
        registry=registry,
        domains=domains,
        out_dir=doc["out_dir"],
        model=ModelConfig.from_dict(model_doc),
        data_size=int(data.get("size", 200)),
        data_seed=int(data.get("seed", 1234)),
        eval_size=int(data.get("eval_size", 64)),
        spec_paths=dict(data.get("specs", {})),
        tasks=tasks,
    )


def domain_spec(cfg, domain):
    if domain in cfg.spec_paths:
        return load_spec(cfg.spec_paths[domain])
    return builtin_spec(domain)


def domain_dataset(cfg, step):
    domain = cfg.domains[step]
    return make_dataset(domain_spec(cfg, domain), cfg.data_size,
                        cfg.data_seed + step * 10007)


def build_task(cfg, step, args):
    raw = dict(cfg.tasks[step])
    for key in _TASK_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            raw[key] = flag
    raw.setdefault("iterations", 2000)
    raw.setdefault("seed", 0)
    if raw.get("subset_size", None) is not None:
        raw["subset_size"] = int(raw["subset_size"])
    return tr.DomainTask(domain=cfg.domains[step], step=step,
                         iterations=int(raw["iterations"]),
                         batch_size=int(raw.get("batch_size", 2)),
                         lr=float(raw.get("lr", 2e-4)),
                         seed=int(raw["seed"]),
                         subset_size=raw.get("subset_size"))


def ckpt_path(cfg, step):
    return os.path.join(cfg.out_dir, f"step{step}.csg0")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pretrain(args):
    cfg = load_run_config(args.config)
    os.makedirs(cfg.out_dir, exist_ok=True)
    task = build_task(cfg, 0, args)
    dataset = domain_dataset(cfg, 0)
    log = os.path.join(cfg.out_dir, "train_step0.jsonl")
    ckpt, history = tr.pretrain(cfg.model, cfg.registry, dataset, task, log_path=log)
    path = ckpt_path(cfg, 0)
    ckpt.save(path)
    print(f"wrote {path}")
    for name, digest in sorted(ckpt.digests().items()):
        print(f"  {name}: {digest:016x}")
    if history:
        print(f"final loss_g {history[-1]['loss_g']:.3f} "
              f"loss_d {history[-1]['loss_d']:.3f}")
    return EXIT_OK


def cmd_continue(args):
    cfg = load_run_config(args.config)
    step = args.step
    if not 1 <= step < len(cfg.domains):
        raise ValidationError(
            f"--step must be in 1..{len(cfg.domains) - 1} for this config, got {step}")
    prev = ckpt_path(cfg, step - 1)
    if not os.path.exists(prev):
        raise ValidationError(f"missing checkpoint for step {step - 1}: {prev}")
    ckpt = Checkpoint.load(prev)
    task = build_task(cfg, step, args)
    dataset = domain_dataset(cfg, step)
    log = os.path.join(cfg.out_dir, f"train_step{step}.jsonl")
    new_ckpt, _ = tr.continue_domain(ckpt, task, dataset, log_path=log)
    path = ckpt_path(cfg, step)
    new_ckpt.save(path)
    new, total = count_params(new_ckpt, step)
    print(f"wrote {path}")
    print(f"step {step} ({task.domain}): new params {new}  total params {total}  "
          f"ratio {new / total:.4f}")
    return EXIT_OK


def cmd_sample(args):
    ckpt = Checkpoint.load(args.ckpt)
    gen = load_generator(ckpt)
    registry = gen.registry
    step = registry.step_of_domain(args.domain)
    if step > ckpt.next_step - 1:
        raise ValidationError(
            f"domain {args.domain!r} is step {step}, checkpoint holds steps "
            f"0..{ckpt.next_step - 1}")
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.RandomState(args.seed)
    masks = _mask_source(args, gen)
    for i in range(args.n):
        smap = masks(i)
        z = rng.standard_normal(gen.config.z_dim)
        image = gen.generate(z, smap, args.domain)
        write_ppm(os.path.join(args.out, f"sample_{i:03d}.ppm"), image)
        write_pgm(os.path.join(args.out, f"mask_{i:03d}.pgm"), smap)
    print(f"wrote {args.n} samples to {args.out}")
    return EXIT_OK


def _mask_source(args, gen):
    source = args.mask_source
    if os.path.isdir(source):
        files = sorted(f for f in os.listdir(source) if f.endswith(".pgm"))
        if len(files) < args.n:
            raise ValidationError(
                f"mask directory {source} has {len(files)} .pgm files, need {args.n}")
        return lambda i: read_pgm(os.path.join(source, files[i]))
    spec = load_spec(source) if source.endswith(".json") else builtin_spec(source)
    return lambda i: generate_scene(spec, args.seed * 100003 + i).mask


def cmd_verify(args):
    before = Checkpoint.load(args.before)
    after = Checkpoint.load(args.after)
    registry = before.registry()
    gen_cfg = before.config()
    domains = list(registry.domains[:before.next_step])
    probes = tr.make_probes(domains, args.n_probes, args.seed,
                            lambda d: builtin_spec(d), gen_cfg.z_dim,
                            (gen_cfg.image_h, gen_cfg.image_w))
    report = tr.verify_zero_forgetting(before, after, probes)
    text = report.to_json()
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK if report.passed else EXIT_VERIFY_FAILED


def cmd_eval(args):
    ckpt = Checkpoint.load(args.ckpt)
    gen = load_generator(ckpt)
    registry = gen.registry
    domain = args.domain
    step = registry.step_of_domain(domain)
    if step > ckpt.next_step - 1:
        raise ValidationError(
            f"domain {domain!r} is step {step}, checkpoint holds steps "
            f"0..{ckpt.next_step - 1}")
    spec = builtin_spec(domain) if args.spec is None else load_spec(args.spec)
    rows = []
    rows.extend(_eval_generator(gen, domain, step, spec, args, run_id=args.run_id,
                                params=count_params(ckpt, step)))
    if args.compare == "scratch":
        if args.config is None:
            raise ValidationError("--compare scratch needs --config for the budget")
        cfg = load_run_config(args.config)
        task = build_task(cfg, step, args)
        scratch_task = tr.DomainTask(domain=domain, step=0,
                                     iterations=task.iterations,
                                     batch_size=task.batch_size, lr=task.lr,
                                     seed=task.seed, subset_size=task.subset_size)
        collapsed = registry.collapsed(domain, step)
        dataset = make_dataset(spec, cfg.data_size, cfg.data_seed + step * 10007)
        scratch_ckpt, _ = tr.pretrain(cfg.model, collapsed, dataset, scratch_task)
        scratch_gen = load_generator(scratch_ckpt)
        rows.extend(_eval_generator(scratch_gen, domain, 0, spec, args,
                                    run_id=args.run_id + "-scratch",
                                    params=count_params(scratch_ckpt, 0)))
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["run_id", "step", "metric", "value"])
    writer.writerows(rows)
    text = out.getvalue()
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    print(text, end="")
    return EXIT_OK


def _eval_generator(gen, domain, step, spec, args, run_id, params):
    extractor = mt.FeatureExtractor()
    real = make_dataset(spec, args.n, args.seed + 555_001)
    real_summary = mt.dataset_summary(real, extractor)
    gen_summary = mt.generated_summary(gen, domain, spec, args.n, args.seed, extractor)
    fid = mt.proxy_fid(real_summary, gen_summary)
    n_classes = gen.registry.c_total(step)
    seg_train = make_dataset(spec, args.seg_train_size, args.seed + 77_003)
    seg = mt.train_segmenter(seg_train, n_classes, gen.config,
                             iterations=args.segmenter_iters, seed=args.seed)
    gt_miou = mt.gan_test(gen, domain, seg, spec, n_probes=min(args.n, 32),
                          seed=args.seed + 13)
    new, total = params
    return [
        [run_id, step, "proxy_fid", f"{fid:.6f}"],
        [run_id, step, "gan_test_miou", f"{gt_miou:.6f}"],
        [run_id, step, "new_params", new],
        [run_id, step, "total_params", total],
    ]


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="contscene",
        description="Continual semantic scene synthesis on procedural domains.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the first domain from scratch")
    p.add_argument("--config", required=True, help="run config JSON")
    _add_task_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("continue", help="extend a checkpoint with one domain")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--step", type=int, required=True, help="continual step index (>=1)")
    _add_task_flags(p)
    p.set_defaults(func=cmd_continue)

    p = sub.add_parser("sample", help="generate images from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--domain", required=True, help="domain whose style to use")
    p.add_argument("--mask-source", required=True,
                   help="domain name, spec JSON, or directory of .pgm masks")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory for .ppm/.pgm files")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("verify", help="bit-exact zero-forgetting check")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--n-probes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="also write the JSON report here")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("eval", help="image/layout metrics and parameter counts")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--n", type=int, default=64, help="images per summary")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--run-id", default="run")
    p.add_argument("--spec", help="scene spec JSON (default: built-in domain)")
    p.add_argument("--seg-train-size", type=int, default=80)
    p.add_argument("--segmenter-iters", type=int, default=3000)
    p.add_argument("--compare", choices=["scratch"],
                   help="also train and score a from-scratch baseline")
    p.add_argument("--config", help="run config JSON (for --compare budgets)")
    p.add_argument("--out", help="write the CSV here as well as stdout")
    _add_task_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def _add_task_flags(p):
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--subset-size", dest="subset_size", type=int)
    if "--seed" not in {a.option_strings[0] for a in p._actions if a.option_strings}:
        p.add_argument("--seed", type=int)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FormatError, LookupError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
