"""Stage runner for the full experiment, with hash-checked provenance.

Every stage writes its artifacts under the output directory and then a
manifest in ``manifests/<stage>.json`` holding the config hash, the master
seed and sha256 digests of everything it read and wrote. A stage refuses to
start when a dependency's manifest is missing or its recorded outputs no
longer match the files on disk.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Callable

from . import metrics
from .asr import AsrHyper, AsrModel, Vocab, decode, greedy_ctc_decode, train_asr
from .config import ConfigError, config_hash, derive_seed, dumps, lambda_for
from .distill import DistillConfig, TeacherPipeline, train_student
from .ensemble import FUSION_KINDS, TeacherOutputs, WeightingStrategy, apply_strategy
from .mapping import MesdHyper, MesdModel, mapping_accuracy, shuffled_pair_chance, train_mesd
from .synth import FamilyConfig, generate_corpus, generate_family, read_manifest, write_manifest

logger = logging.getLogger(__name__)

STAGES = ("gen-data", "train-asr", "train-mapping", "eval-mapping", "fuse-teachers", "distill", "eval-asr", "report")
DEPENDS = {
    "gen-data": (),
    "train-asr": ("gen-data",),
    "train-mapping": ("gen-data", "train-asr"),
    "eval-mapping": ("gen-data", "train-asr", "train-mapping"),
    "fuse-teachers": ("gen-data", "train-asr", "train-mapping", "eval-mapping"),
    "distill": ("gen-data", "train-asr", "train-mapping", "eval-mapping"),
    "eval-asr": ("gen-data", "train-asr", "distill"),
    "report": ("eval-mapping", "fuse-teachers", "eval-asr"),
}
REPORTS = ("reports/mapping_accuracy.csv", "reports/fusion_cer.csv", "reports/student_cer.csv")


class DependencyError(RuntimeError):
    pass


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def output_dir(cfg: dict) -> Path:
    return Path(os.environ.get("MUST_OUT") or cfg["output_dir"])


class Run:
    """One configured experiment rooted at an output directory."""

    def __init__(self, cfg: dict, force: bool = False):
        self.cfg = cfg
        self.force = force
        self.root = output_dir(cfg)
        self.hash = config_hash(cfg)
        self.languages: list[str] = cfg["corpus"]["languages"]
        self.targets: list[str] = cfg["corpus"]["targets"]

    # ------------------------------------------------------------ bookkeeping

    def path(self, rel: str) -> Path:
        return self.root / rel

    def manifest_path(self, stage: str) -> Path:
        return self.path(f"manifests/{stage}.json")

    def read_stage_manifest(self, stage: str) -> dict | None:
        p = self.manifest_path(stage)
        if not p.exists():
            return None
        return json.loads(p.read_text(encoding="utf-8"))

    def _verify_outputs(self, manifest: dict) -> str | None:
        """First recorded output that is missing or changed, else None."""
        for rel, digest in manifest["outputs"].items():
            p = self.path(rel)
            if not p.exists() or sha256_file(p) != digest:
                return rel
        return None

    def _inputs(self, stage: str) -> dict[str, str]:
        inputs = {}
        for dep in DEPENDS[stage]:
            m = self.read_stage_manifest(dep)
            if m is None:
                raise DependencyError(f"stage {stage} needs the artifacts of {dep}; run '{dep}' first")
            if m["config_hash"] != self.hash and not self.force:
                raise ConfigError(f"{dep} artifacts were produced under a different config; rerun it or pass --force")
            bad = self._verify_outputs(m)
            if bad is not None:
                raise DependencyError(f"{bad} no longer matches what {dep} produced; rerun '{dep}'")
            inputs.update(m["outputs"])
        return inputs

    def run_stage(self, stage: str) -> bool:
        """Run one stage; returns False when it was already up to date."""
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
        inputs = self._inputs(stage)
        previous = self.read_stage_manifest(stage)
        if previous is not None and not self.force:
            if previous["config_hash"] != self.hash:
                raise ConfigError(f"{stage} artifacts in {self.root} come from a different config; pass --force to replace them")
            if previous["inputs"] == inputs and self._verify_outputs(previous) is None:
                logger.info("%s: up to date", stage)
                return False
        logger.info("%s: running", stage)
        self.root.mkdir(parents=True, exist_ok=True)
        self.path("config.json").write_text(dumps(self.cfg), encoding="utf-8")
        outputs = STAGE_FUNCS[stage](self)
        manifest = {
            "stage": stage,
            "config_hash": self.hash,
            "seed": self.cfg["seed"],
            "inputs": inputs,
            "outputs": {rel: sha256_file(self.path(rel)) for rel in sorted(outputs)},
        }
        self.manifest_path(stage).parent.mkdir(parents=True, exist_ok=True)
        self.manifest_path(stage).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return True

    # ------------------------------------------------------------ artifact access

    def seed(self, stage: str, language: str = "") -> int:
        return derive_seed(self.cfg["seed"], stage, language)

    def utterances(self, language: str, split: str):
        return read_manifest(self.path(f"data/{language}/{split}.tsv")).utterances()

    def vocab(self, language: str) -> Vocab:
        family = json.loads(self.path("data/family.json").read_text(encoding="utf-8"))
        return Vocab(tuple(family[language]["characters"]))

    def asr(self, kind: str, language: str) -> AsrModel:
        return AsrModel.load(self.path(f"models/{kind}/{language}.ckpt"))

    def sources(self, target: str) -> list[str]:
        return [lang for lang in self.languages if lang != target]

    def pipelines(self, target: str) -> list[TeacherPipeline]:
        mapping = MesdModel.load(self.path(f"models/mapping/{target}.ckpt"))
        return [TeacherPipeline(self.asr("asr", s), mapping, s, target) for s in self.sources(target)]

    def strategy(self, kind: str, target: str) -> WeightingStrategy:
        tau = self.cfg["training"]["tau"]
        if kind == "ftw":
            return WeightingStrategy("ftw", tau, tuple(self.cfg["ftw_weights"][target]))
        if kind == "st":
            acc = self.read_json("results/mapping_accuracy.json")[target]
            return WeightingStrategy("st", tau, accuracies={s: acc[s]["accuracy"] for s in acc})
        return WeightingStrategy(kind, tau)

    def asr_hyper(self, epochs: int, seed: int) -> AsrHyper:
        t, m = self.cfg["training"], self.cfg["model"]
        return AsrHyper(t["alpha"], epochs, t["lr"], m["hidden"], m["embed"], t["batch_size"], t["clip"], seed)

    def write_json(self, rel: str, obj) -> str:
        self.path(rel).parent.mkdir(parents=True, exist_ok=True)
        self.path(rel).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return rel

    def read_json(self, rel: str):
        return json.loads(self.path(rel).read_text(encoding="utf-8"))

    def rel(self, p: str | os.PathLike) -> str:
        return Path(p).relative_to(self.root).as_posix()


# ------------------------------------------------------------------ stages


def _gen_data(run: Run) -> list[str]:
    c = run.cfg["corpus"]
    n = len(run.languages)
    family = generate_family(
        FamilyConfig(
            run.languages, c["overlap"], [c["inventory"]] * n, c["feat_dim"], run.seed("gen-data"),
            c["noise_std"], tuple(c["duration_range"]), layout=c["layout"],
        )
    )
    outputs = [run.write_json("data/family.json", {s.language_id: {"characters": s.characters} for s in family})]
    n_low = max(2, int(round(c["low_resource_fraction"] * c["train"])))
    for spec in family:
        lang = spec.language_id
        directory = run.path(f"data/{lang}")
        for split in ("train", "dev", "eval"):
            corpus = generate_corpus(spec, c[split], run.seed("gen-data", f"{lang}/{split}"), tuple(c["length_range"]), f"{lang}-{split}")
            manifest = write_manifest(corpus, directory, split)
            outputs.append(f"data/{lang}/{split}.tsv")
            outputs.extend(run.rel(directory / e.path) for e in manifest.entries)
            if split == "train" and lang in run.targets:
                write_manifest(corpus[:n_low], directory, "train_low")
                outputs.append(f"data/{lang}/train_low.tsv")
    return outputs


def _save(run: Run, model, rel: str) -> list[str]:
    run.path(rel).parent.mkdir(parents=True, exist_ok=True)
    model.save(run.path(rel))
    return [rel, rel + ".json"]


def _train_asr(run: Run) -> list[str]:
    t = run.cfg["training"]
    outputs = []
    # a full-data model is only needed where a language teaches some target
    teachers = [lang for lang in run.languages if any(lang in run.sources(t) for t in run.targets)]
    for lang in teachers:
        model = train_asr(run.utterances(lang, "train"), run.vocab(lang), run.asr_hyper(t["epochs"], run.seed("train-asr", lang)))
        outputs += _save(run, model, f"models/asr/{lang}.ckpt")
    for lang in run.targets:
        hyper = run.asr_hyper(t["low_resource_epochs"], run.seed("train-mono", lang))
        outputs += _save(run, train_asr(run.utterances(lang, "train_low"), run.vocab(lang), hyper), f"models/mono/{lang}.ckpt")
    return outputs


def _train_mapping(run: Run) -> list[str]:
    t = run.cfg["training"]
    outputs = []
    for target in run.targets:
        hyper = MesdHyper(
            t["mapping_epochs"], t["lr"], run.cfg["model"]["mapping_hidden"], t["batch_size"], t["clip"],
            t["rank_weighting"], run.seed("train-mapping", target),
        )
        sources = [run.asr("asr", s) for s in run.sources(target)]
        model = train_mesd(run.asr("mono", target), sources, run.utterances(target, "train_low"), hyper)
        outputs += _save(run, model, f"models/mapping/{target}.ckpt")
    return outputs


def _eval_mapping(run: Run) -> list[str]:
    table = {}
    for target in run.targets:
        mapping = MesdModel.load(run.path(f"models/mapping/{target}.ckpt"))
        mono = run.asr("mono", target)
        dev = run.utterances(target, "dev")
        table[target] = {}
        for source in run.sources(target):
            src = run.asr("asr", source)
            acc = mapping_accuracy(mapping, source, mono, src, dev)
            chance = shuffled_pair_chance(mapping, source, mono, src, dev, seed=run.seed("eval-mapping", target))
            table[target][source] = {
                "correct": acc.correctly_mapped_frames,
                "total": acc.total_frames,
                "accuracy": acc.ratio,
                "chance": chance,
            }
    return [run.write_json("results/mapping_accuracy.json", table)]


def _fuse_teachers(run: Run) -> list[str]:
    kinds = [k for k in run.cfg["strategies"] if k in FUSION_KINDS or k == "st"]
    table: dict[str, dict[str, float]] = {k: {} for k in kinds}
    for target in run.targets:
        utts = run.utterances(target, "eval")
        vocab = run.vocab(target)
        pipes = run.pipelines(target)
        labels = [p.soft_labels(utts) for p in pipes]
        refs = [u.transcript for u in utts]
        for kind in kinds:
            strategy = run.strategy(kind, target)
            hyps = []
            for n in range(len(utts)):
                outputs = TeacherOutputs(tuple((p.teacher_id, labels[i][n]) for i, p in enumerate(pipes)))
                hyps.append(greedy_ctc_decode(apply_strategy(outputs, strategy), vocab))
            table[kind][target] = metrics.cer(hyps, refs).cer
    return [run.write_json("results/fusion_cer.json", table)]


def _distill(run: Run) -> list[str]:
    t = run.cfg["training"]
    outputs = []
    for target in run.targets:
        utts = run.utterances(target, "train_low")
        vocab = run.vocab(target)
        for kind in run.cfg["strategies"]:
            pipes = run.pipelines(target)
            config = DistillConfig(
                lam=lambda_for(run.cfg, target),
                strategy=run.strategy(kind, target),
                # the baseline's seed, so the two runs differ only in the KD term
                hyper=run.asr_hyper(t["low_resource_epochs"], run.seed("train-mono", target)),
                cache=t["cache_soft_labels"],
            )
            log = f"logs/distill_{target}_{kind}.csv"
            run.path(log).parent.mkdir(parents=True, exist_ok=True)
            model = train_student(utts, vocab, pipes, config, log_path=run.path(log))
            outputs += _save(run, model, f"models/student/{target}/{kind}.ckpt") + [log]
            run.write_json(f"logs/teacher_calls_{target}_{kind}.json", {p.teacher_id: p.calls for p in pipes})
            outputs.append(f"logs/teacher_calls_{target}_{kind}.json")
    return outputs


def _eval_asr(run: Run) -> list[str]:
    t = run.cfg["training"]
    rows = ["mono", *run.cfg["strategies"]]
    table: dict[str, dict[str, float]] = {r: {} for r in rows}
    outputs = []
    for target in run.targets:
        utts = run.utterances(target, "eval")
        refs = [u.transcript for u in utts]
        for row in rows:
            model = run.asr("mono", target) if row == "mono" else AsrModel.load(run.path(f"models/student/{target}/{row}.ckpt"))
            hyps = [decode(model, u, t["gamma"], t["beam"]) for u in utts]
            table[row][target] = metrics.cer(hyps, refs).cer
            log = f"results/utterances/{target}_{row}.jsonl"
            run.path(log).parent.mkdir(parents=True, exist_ok=True)
            metrics.write_utterance_log(run.path(log), [u.utt_id for u in utts], hyps, refs)
            outputs.append(log)
    return outputs + [run.write_json("results/student_cer.json", table)]


def _cells(nested: dict) -> dict[tuple[str, str], float]:
    return {(r, c): v for r, cols in nested.items() for c, v in cols.items()}


def _report(run: Run) -> list[str]:
    run.path("reports").mkdir(parents=True, exist_ok=True)
    acc = run.read_json("results/mapping_accuracy.json")
    cells = {(s, tgt): row[s]["accuracy"] for tgt, row in acc.items() for s in row}
    metrics.emit_accuracy_table(run.path(REPORTS[0]), cells, run.languages)
    fusion = run.read_json("results/fusion_cer.json")
    kinds = [k for k in run.cfg["strategies"] if k in fusion]
    metrics.emit_report(run.path(REPORTS[1]), _cells(fusion), kinds, run.targets)
    student = run.read_json("results/student_cer.json")
    metrics.emit_report(run.path(REPORTS[2]), _cells(student), ["mono", *run.cfg["strategies"]], run.targets)
    return list(REPORTS)


STAGE_FUNCS: dict[str, Callable[[Run], list[str]]] = {
    "gen-data": _gen_data,
    "train-asr": _train_asr,
    "train-mapping": _train_mapping,
    "eval-mapping": _eval_mapping,
    "fuse-teachers": _fuse_teachers,
    "distill": _distill,
    "eval-asr": _eval_asr,
    "report": _report,
}


def run_stage(stage: str, cfg: dict, force: bool = False) -> bool:
    return Run(cfg, force).run_stage(stage)


def run_all(cfg: dict, force: bool = False) -> list[Path]:
    """Every stage in dependency order; returns the report paths."""
    run = Run(cfg, force)
    for stage in STAGES:
        run.run_stage(stage)
    return [run.path(r) for r in REPORTS]
