"""Command-line pipeline: gen-data, train, deconfound, analyze, evaluate, report.

Every stage writes into ``--out-dir`` and records its resolved configuration
and output checksums in ``manifest.json``.  Option precedence is command-line
flag, then the ``CC_SEED`` environment variable (seed only), then the JSON
file given by ``--config``, then the built-in default.
"""

from __future__ import annotations

import argparse
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import attribution as attr
from . import causal
from . import deconfound as dc
from . import metrics as mt
from . import synthdata
from .model import HEAD_PARAMS, ConceptModel, ModelConfig, TrainConfig, TrainingDiverged, train
from .serialization import dumps, read_json, sha256_file, sha256_text, write_json
from .vocabulary import ConceptVocabulary

log = logging.getLogger("causal_concepts")

DEFAULTS = {
    "seed": 42,
    "samples": 2000,
    "concepts": 18,
    "dim": 64,
    "noise": 0.1,
    "correlated": False,
    "train_fraction": 0.92,
    "epochs": 0,  # 0 = auto, see auto_epochs
    "batch_size": 32,
    "lr": 5e-5,
    "alpha": 1.0,
    "beta": 1.0,
    "grl_lambda": 1.0,
    "no_dynamic_routing": False,
    "no_adversarial": False,
    "no_deconfounding": False,
    "iterations": 1,
    "finetune_epochs": 1,
    "finetune_lr": 0.1,
    "methods": list(attr.METHODS),
    "steps": 128,
    "shap_samples": 16,
    "limit": 0,
}

STAGES = ("gen-data", "train", "deconfound", "analyze", "evaluate", "report")


class StageError(RuntimeError):
    """A stage cannot run; the message says what to do instead."""


# -- configuration ------------------------------------------------------------------


def resolve(args: argparse.Namespace, keys: Sequence[str]) -> dict:
    file_cfg = {}
    if getattr(args, "config", None):
        file_cfg = {k.replace("-", "_"): v for k, v in read_json(args.config).items()}
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise StageError(f"unknown keys in {args.config}: {sorted(unknown)}")
    out = {}
    for key in keys:
        flag = getattr(args, key, None)
        if flag not in (None, False):
            out[key] = flag
        elif key == "seed" and os.environ.get("CC_SEED"):
            out[key] = int(os.environ["CC_SEED"])
        elif key in file_cfg:
            out[key] = file_cfg[key]
        else:
            out[key] = DEFAULTS[key]
    return out


MIN_STEPS = 1200


def auto_epochs(n_samples: int, batch_size: int) -> int:
    """At least 20 epochs and at least ``MIN_STEPS`` optimizer steps."""
    batches = -(-n_samples // batch_size)
    return max(20, -(-MIN_STEPS // batches))


def ablation_name(cfg: dict) -> str:
    names = [
        name
        for key, name in (
            ("no_dynamic_routing", "no-dynamic-routing"),
            ("no_adversarial", "no-adversarial"),
            ("no_deconfounding", "no-deconfounding"),
        )
        if cfg.get(key)
    ]
    return "+".join(names) if names else "full"


# -- manifest -----------------------------------------------------------------------


class Run:
    """An output directory plus its manifest."""

    def __init__(self, out_dir: str | Path):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.dir / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = read_json(self.manifest_path)
        else:
            self.manifest = {"format": "causal-concepts-run", "stages": {}}

    def path(self, name: str) -> Path:
        return self.dir / name

    def stage(self, name: str) -> dict:
        return self.manifest["stages"].get(name, {})

    def config(self, stage: str) -> dict:
        return self.stage(stage).get("config", {})

    def require(self, stage: str, *files: str) -> None:
        missing = [f for f in files if not self.path(f).exists()]
        if stage not in self.manifest["stages"] or missing:
            what = ", ".join(missing) if missing else f"the {stage} stage record"
            raise StageError(
                f"{self.dir}: missing {what}; run `causal-concepts {stage} --out-dir {self.dir}` first"
            )

    def record(self, stage: str, config: dict, outputs: Sequence[str]) -> None:
        for name in outputs:
            if not self.path(name).exists():
                raise StageError(f"{stage}: expected output {name} was not written")
        self.manifest["stages"][stage] = {
            "config": config,
            "config_sha256": sha256_text(dumps(config)),
            "outputs": {name: sha256_file(self.path(name)) for name in sorted(outputs)},
        }
        self.manifest["versions"] = {
            "causal_concepts": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        }
        self.manifest["seed"] = config.get("seed", self.manifest.get("seed"))
        write_json(self.manifest_path, self.manifest)

    def validate(self) -> None:
        """Check every recorded output still matches its checksum."""
        for stage, entry in self.manifest["stages"].items():
            for name, digest in entry["outputs"].items():
                p = self.path(name)
                if not p.exists() or sha256_file(p) != digest:
                    raise StageError(f"{stage}: output {name} is missing or changed")


# -- stages -------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    cfg = resolve(args, ["seed", "samples", "concepts", "dim", "noise", "correlated", "train_fraction"])
    run = Run(args.out_dir)
    gen = synthdata.GeneratorConfig(
        n_concepts=cfg["concepts"],
        dim=cfg["dim"],
        samples=cfg["samples"],
        noise=cfg["noise"],
        correlated=bool(cfg["correlated"]),
        seed=cfg["seed"],
    )
    data = synthdata.generate(gen)
    tr, te = synthdata.split(data.samples, cfg["train_fraction"], cfg["seed"])
    synthdata.save(data.samples, run.path("dataset.jsonl"))
    synthdata.save(tr, run.path("train.jsonl"))
    synthdata.save(te, run.path("test.jsonl"))
    data.vocabulary.save(run.path("vocabulary.json"))
    write_json(run.path("generator.json"), gen.to_json())
    cfg["vocab_size"] = gen.vocab_size
    run.record("gen-data", cfg, ["dataset.jsonl", "train.jsonl", "test.jsonl", "vocabulary.json", "generator.json"])
    log.info("wrote %d train / %d test samples", len(tr), len(te))


def _load_split(run: Run, name: str, vocab: ConceptVocabulary):
    return synthdata.load(run.path(f"{name}.jsonl"), vocab)


def cmd_train(args) -> None:
    run = Run(args.out_dir)
    run.require("gen-data", "train.jsonl", "vocabulary.json")
    cfg = resolve(
        args,
        ["seed", "epochs", "batch_size", "lr", "alpha", "beta", "grl_lambda",
         "no_dynamic_routing", "no_adversarial", "no_deconfounding"],
    )
    if cfg["no_adversarial"]:
        cfg["alpha"] = cfg["beta"] = 0.0
    vocab = ConceptVocabulary.load(run.path("vocabulary.json"))
    samples = _load_split(run, "train", vocab)
    if not cfg["epochs"]:
        cfg["epochs"] = auto_epochs(len(samples), cfg["batch_size"])
    model = ConceptModel(
        ModelConfig(
            vocab_size=run.config("gen-data")["vocab_size"],
            n_concepts=vocab.size,
            dim=vocab.dim,
            dynamic_routing=not cfg["no_dynamic_routing"],
            grl_lambda=cfg["grl_lambda"],
            seed=cfg["seed"],
        )
    )
    tcfg = TrainConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["alpha"], cfg["beta"], cfg["seed"])
    result = train(samples, model, vocab, tcfg)
    model.save(run.path("model.json"))
    write_json(run.path("train_log.json"), {"loss": result.loss_curve, "accuracy": result.accuracy_curve})
    cfg["ablation"] = ablation_name(cfg)
    run.record("train", cfg, ["model.json", "train_log.json"])
    if getattr(args, "deconfound", False) and not cfg["no_deconfounding"]:
        cmd_deconfound(args)


def cmd_deconfound(args) -> None:
    run = Run(args.out_dir)
    run.require("train", "model.json")
    if run.config("train").get("no_deconfounding"):
        raise StageError("this run was trained with --no-deconfounding; the deconfound stage is disabled")
    cfg = resolve(args, ["seed", "iterations", "finetune_epochs", "finetune_lr"])
    vocab = ConceptVocabulary.load(run.path("vocabulary.json"))
    samples = _load_split(run, "train", vocab)
    model = ConceptModel.load(run.path("model.json"))
    result = dc.deconfound(model, vocab, samples, cfg["iterations"])
    result.vocabulary.save(run.path("vocabulary_dc.json"))
    tuned = model.copy()
    if cfg["finetune_epochs"] > 0:
        tcfg = TrainConfig(
            epochs=cfg["finetune_epochs"],
            lr=cfg["finetune_lr"],
            alpha=0.0,
            beta=0.0,
            seed=cfg["seed"],
            trainable=HEAD_PARAMS,
        )
        train(samples, tuned, result.vocabulary, tcfg)
    tuned.save(run.path("model_dc.json"))
    test = _load_split(run, "test", vocab)
    report = result.report()
    report["test_residual"] = dc.reconstruction_residual(
        result.reconstructors[-1].weight, model, result.vocabulary, test
    )
    write_json(run.path("deconfound_report.json"), report)
    run.record("deconfound", cfg, ["vocabulary_dc.json", "model_dc.json", "deconfound_report.json"])


def _causal_setup(run: Run, no_deconfounding: bool):
    vocab = ConceptVocabulary.load(run.path("vocabulary.json"))
    if no_deconfounding or run.config("train").get("no_deconfounding"):
        return ConceptModel.load(run.path("model.json")), vocab
    run.require("deconfound", "model_dc.json", "vocabulary_dc.json")
    return ConceptModel.load(run.path("model_dc.json")), ConceptVocabulary.load(run.path("vocabulary_dc.json"))


def cmd_analyze(args) -> None:
    run = Run(args.out_dir)
    run.require("train", "model.json")
    cfg = resolve(args, ["seed", "methods", "steps", "shap_samples", "limit", "no_deconfounding"])
    unknown = set(cfg["methods"]) - set(attr.METHODS)
    if unknown:
        raise StageError(f"unknown attribution methods: {sorted(unknown)}")
    vocab = ConceptVocabulary.load(run.path("vocabulary.json"))
    test = _load_split(run, "test", vocab)
    if cfg["limit"]:
        test = test[: cfg["limit"]]
    model, cvocab = _causal_setup(run, cfg["no_deconfounding"])
    outputs = []

    rankings = causal.causal_rankings(test, model, cvocab)
    causal.write_rankings(run.path("rankings_causal.jsonl"), rankings)
    outputs.append("rankings_causal.jsonl")

    trace = model.run(test, cvocab)
    write_json(
        run.path("traces.json"),
        {
            "sample_ids": [s.id for s in test],
            "m_hat": trace.m_hat.data,
            "y_hat": trace.probs.data.argmax(axis=1),
            "label": [s.label for s in test],
            "gold": [list(s.gold_concepts) if s.label == 1 else [] for s in test],
        },
    )
    outputs.append("traces.json")

    # input attributions use the trained model and the un-projected vocabulary
    base = ConceptModel.load(run.path("model.json"))
    for method in cfg["methods"]:
        conf = attr.AttributionConfig.for_method(
            method, steps=cfg["steps"], samples=cfg["shap_samples"], seed=cfg["seed"]
        )
        results = [attr.attribute(base, vocab, s, conf) for s in test]
        causal.write_rankings(run.path(f"rankings_{method}.jsonl"), [a.ranking() for a in results])
        attr.write_attributions(run.path(f"attributions_{method}.jsonl"), results)
        outputs += [f"rankings_{method}.jsonl", f"attributions_{method}.jsonl"]
        log.info("attributed %d samples with %s", len(test), method)

    profiles = {"without_deconfounding": causal.mean_rite_profile(test, base, vocab)}
    if run.path("model_dc.json").exists() and not cfg["no_deconfounding"]:
        profiles["with_deconfounding"] = causal.mean_rite_profile(test, model, cvocab)
    write_json(
        run.path("mean_rite.json"),
        {
            "concepts": list(vocab.names),
            **{k: {"mean": p.mean, "std": p.std, "dispersion": p.dispersion} for k, p in profiles.items()},
        },
    )
    outputs.append("mean_rite.json")
    run.record("analyze", cfg, outputs)


def cmd_evaluate(args) -> None:
    run = Run(args.out_dir)
    run.require("analyze", "rankings_causal.jsonl", "traces.json")
    methods = run.config("analyze")["methods"]
    for m in methods:
        run.require("analyze", f"rankings_{m}.jsonl")
    vocab = ConceptVocabulary.load(run.path("vocabulary.json"))
    traces = read_json(run.path("traces.json"))
    m_hat = np.array(traces["m_hat"])
    y_hat = np.array(traces["y_hat"])
    gold = traces["gold"]
    ablation = run.config("train").get("ablation", "full")
    if run.config("analyze").get("no_deconfounding") and "no-deconfounding" not in ablation:
        ablation = "no-deconfounding" if ablation == "full" else ablation + "+no-deconfounding"
    seed = run.config("analyze").get("seed", 42)
    if len(np.unique(y_hat)) < 2:
        raise StageError(
            "the model predicts a single class on the evaluation set, so no simulator "
            "can be fit; train longer (--epochs) or use more samples"
        )
    causal_rk = causal.read_rankings(run.path("rankings_causal.jsonl"))
    report = mt.MetricsReport()
    for method in ["causal", *methods]:
        rk = causal_rk if method == "causal" else causal.read_rankings(run.path(f"rankings_{method}.jsonl"))
        report.rows.append(
            mt.evaluate_method(method, ablation, rk, causal_rk, vocab, m_hat, y_hat, gold, seed)
        )
    labels = np.array(traces["label"])
    report.extra = {
        "test_f1": mt.f1_macro(labels, y_hat),
        "test_accuracy": float((labels == y_hat).mean()),
        "random_r_at_5": mt.random_recall_at_k(vocab.size, 5),
        "evaluated_samples": len(labels),
    }
    report.save_json(run.path("metrics.json"))
    report.write_flat_csv(run.path("metrics.csv"))
    report.write_table1(run.path("table1.csv"), ablation)
    run.record("evaluate", {"seed": seed, "ablation": ablation}, ["metrics.json", "metrics.csv", "table1.csv"])


def _plot_mean_rite(path: Path, names, profiles: dict) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "causal-concepts"
    fig, ax = plt.subplots(figsize=(9, 3.5))
    x = np.arange(len(names))
    width = 0.8 / max(len(profiles), 1)
    for j, (label, mean) in enumerate(profiles.items()):
        ax.bar(x + (j - (len(profiles) - 1) / 2) * width, mean, width, label=label.replace("_", " "))
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("mean RITE")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_report(args) -> None:
    run = Run(args.out_dir)
    run.require("analyze", "mean_rite.json")
    run.require("evaluate", "metrics.json")
    rite = read_json(run.path("mean_rite.json"))
    names = rite["concepts"]
    profiles = {k: np.array(v["mean"]) for k, v in rite.items() if k != "concepts"}
    with open(run.path("mean_rite.csv"), "w", encoding="utf-8", newline="\n") as fh:
        keys = list(profiles)
        fh.write(",".join(["concept", *keys]) + "\n")
        for i, name in enumerate(names):
            fh.write(",".join([name, *[format(profiles[k][i], ".6f") for k in keys]]) + "\n")
    _plot_mean_rite(run.path("mean_rite.svg"), names, profiles)

    merged = mt.MetricsReport()
    for d in [run.dir, *[Path(p) for p in (args.runs or [])]]:
        other = mt.MetricsReport.from_json(read_json(Path(d) / "metrics.json"))
        merged.rows += [r for r in other.rows if (r.method, r.ablation) not in {(x.method, x.ablation) for x in merged.rows}]
    merged.write_table2(run.path("table2.csv"))
    merged.write_flat_csv(run.path("report_metrics.csv"))
    run.record(
        "report",
        {"runs": [Path(p).name for p in (args.runs or [])]},
        ["mean_rite.csv", "mean_rite.svg", "table2.csv", "report_metrics.csv"],
    )


def cmd_all(args) -> None:
    cmd_gen_data(args)
    cmd_train(args)
    cfg = resolve(args, ["no_deconfounding"])
    if not cfg["no_deconfounding"]:
        cmd_deconfound(args)
    cmd_analyze(args)
    cmd_evaluate(args)
    cmd_report(args)


# -- parser -------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out-dir", required=True, help="run directory holding all artifacts")
    p.add_argument("--config", help="JSON file of option defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _gen_opts(p):
    p.add_argument("--samples", type=int)
    p.add_argument("--concepts", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--correlated", action="store_true", help="mix correlated concept pairs")
    p.add_argument("--train-fraction", type=float)


def _train_opts(p):
    p.add_argument("--epochs", type=int, help="0 picks enough epochs for %d optimizer steps" % MIN_STEPS)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float, help="weight of the latent adversary")
    p.add_argument("--beta", type=float, help="weight of the content adversary")
    p.add_argument("--grl-lambda", type=float)
    p.add_argument("--no-dynamic-routing", action="store_true")
    p.add_argument("--no-adversarial", action="store_true")
    p.add_argument("--no-deconfounding", action="store_true")


def _dc_opts(p):
    p.add_argument("--iterations", type=int)
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--finetune-lr", type=float, help="Adam step for the head-only fine-tune")


def _analyze_opts(p, with_ablation=True):
    p.add_argument("--methods", nargs="+", choices=attr.METHODS)
    p.add_argument("--steps", type=int, help="integrated-gradients quadrature nodes")
    p.add_argument("--shap-samples", type=int)
    p.add_argument("--limit", type=int, help="analyze only the first N test samples")
    if with_ablation:
        p.add_argument("--no-deconfounding", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="causal-concepts", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset and vocabulary")
    _common(p)
    _gen_opts(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the concept model")
    _common(p)
    _train_opts(p)
    _dc_opts(p)
    p.add_argument("--deconfound", action="store_true", help="run the deconfound stage afterwards")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("deconfound", help="project the vocabulary and fine-tune the head")
    _common(p)
    _dc_opts(p)
    p.set_defaults(func=cmd_deconfound)

    p = sub.add_parser("analyze", help="causal and attribution rankings on the test split")
    _common(p)
    _analyze_opts(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("evaluate", help="metrics and table-shaped CSVs")
    _common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="mean-RITE figure and ablation table")
    _common(p)
    p.add_argument("--runs", nargs="*", help="other run directories to merge into the ablation table")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("all", help="run every stage in order")
    _common(p)
    _gen_opts(p)
    _train_opts(p)
    _dc_opts(p)
    _analyze_opts(p, with_ablation=False)
    p.add_argument("--runs", nargs="*", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_all)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
        Run(args.out_dir).validate()
    except (StageError, synthdata.DatasetFormatError, TrainingDiverged, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
