#!/usr/bin/env python3
"""Directional cross-lingual transfer experiment.

Nine synthetic languages (3 pretraining / 3 adapting / 3 other, disjoint
byte alphabets over a shared sentence grammar), a ~1M-parameter decoder, and
three arms per seed:

  Baseline — pretrain (no resets), then instruction-finetune.
  BA       — pretrain (no resets), adapt to the new languages, finetune.
  AFA      — pretrain with periodic embedding resets, adapt, finetune.

For each seed the script reports two direction checks on held-out
perplexity:

  (a) BA and AFA both beat Baseline on the adapting-language mean.
  (b) AFA degrades the other-language mean (relative to Baseline) no more
      than BA does.

Run:  python scripts/run_transfer_experiment.py --out runs/transfer
Quick smoke:  add --quick (tiny model and step counts; directions noisy).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

from resetlm.config import load_config
from resetlm.corpus import generate_synthetic_corpus, load_manifest
from resetlm.pipeline import cmd_adapt, cmd_compare, cmd_eval, cmd_finetune, cmd_pretrain

# 10-byte alphabets; adapting and other languages sit above ASCII so the chat
# template and instruction data (built from p0) never touch their bytes.
ALPHABETS = {
    "p0": 0x61, "p1": 0x41, "p2": 0x30,
    "a0": 0x80, "a1": 0x8B, "a2": 0x96,
    "o0": 0xA1, "o1": 0xAC, "o2": 0xB7,
}
CLASSES = {"p": "pretraining", "a": "adapting", "o": "other"}


@dataclass(frozen=True)
class ExperimentScale:
    """Defaults tuned so the reset-pretrained base stays competitive: the
    corpus gives ~8 epochs at 900 steps (memorization distorts every unseen-
    language number), and each post-reset window is long enough (300 steps,
    ~300k tokens) for the embedding table to re-learn before the run ends."""

    model_preset: str = "micro"
    n_docs: int = 384
    base_tokenizer: int = 360
    merge_budget: int = 100
    pretrain_steps: int = 900
    reset_interval: int = 300
    adapt_steps: int = 400
    finetune_epochs: float = 2.0
    batch_size: int = 8
    pretrain_lr: float = 2e-3
    adapt_lr: float = 1e-3
    finetune_lr: float = 3e-4
    n_chat: int = 64
    eval_blocks: int = 16


QUICK = ExperimentScale(
    model_preset="nano", n_docs=16, base_tokenizer=300, merge_budget=40,
    pretrain_steps=60, reset_interval=12, adapt_steps=30, finetune_epochs=1.0,
    batch_size=4, n_chat=16, eval_blocks=6,
)


def manifest_payload(seed: int, scale: ExperimentScale) -> dict:
    languages = []
    for offset, (lang, lo) in enumerate(sorted(ALPHABETS.items())):
        languages.append(
            {
                "lang_id": lang,
                "class": CLASSES[lang[0]],
                "n_docs": scale.n_docs,
                "synth": {
                    "alphabet_lo": lo,
                    "alphabet_hi": lo + 9,
                    "n_word_types": 60,
                    "mean_sentence_len": 8.0,
                    "sentences_per_doc": 8,
                    "zipf_alpha": 1.3,
                    "seed_offset": offset,
                },
            }
        )
    return {"version": 1, "seed": seed, "split": 0.2, "languages": languages}


def write_chat_data(path: Path, manifest_path: Path, scale: ExperimentScale) -> None:
    """Instruction records in the first pretraining language: the user turn is
    one sentence, the assistant turn is the sentence that followed it."""
    manifest = load_manifest(manifest_path)
    p0 = manifest.spec_of("p0")
    docs = generate_synthetic_corpus(p0, scale.n_docs, manifest.seed)
    sep = bytes([p0.synth.alphabet_hi]) * 2
    records = []
    for doc in docs:
        sentences = [s.decode("ascii") for s in doc.split(sep) if s]
        for a, b in zip(sentences, sentences[1:]):
            records.append({"system": "continue the text", "user": a, "assistant": b})
            if len(records) >= scale.n_chat:
                break
        if len(records) >= scale.n_chat:
            break
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")


def config_payload(seed: int, variant: str, out_dir: str, scale: ExperimentScale) -> dict:
    return {
        "version": 1,
        "manifest": "manifest.json",
        "out_dir": out_dir,
        "seed": seed,
        "variant": variant,
        "tokenizer": {"base_size": scale.base_tokenizer, "merge_budget": scale.merge_budget},
        "model": {"preset": scale.model_preset},
        "pretrain": {
            "peak_lr": scale.pretrain_lr,
            "total_steps": scale.pretrain_steps,
            "batch_size": scale.batch_size,
            "log_every": max(1, scale.pretrain_steps // 10),
            **(
                {"reset_interval": scale.reset_interval}
                if variant == "active_forgetting"
                else {}
            ),
        },
        "adapt": {
            "peak_lr": scale.adapt_lr,
            "total_steps": scale.adapt_steps,
            "batch_size": scale.batch_size,
            "log_every": max(1, scale.adapt_steps // 5),
        },
        "finetune": {
            "peak_lr": scale.finetune_lr,
            "epochs": scale.finetune_epochs,
            "batch_size": max(2, scale.batch_size // 2),
        },
        "eval": {
            "max_eval_blocks": scale.eval_blocks,
            "isotropy": {"min_contexts": 3, "max_types": 32, "sample_seed": 0},
            "translation": {"enabled": False},
        },
        "chat_data": "chat.jsonl",
    }


def run_seed(root: Path, seed: int, scale: ExperimentScale) -> dict:
    """All three arms for one seed; returns per-arm perplexity aggregates."""
    seed_dir = root / f"seed{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    (seed_dir / "manifest.json").write_text(json.dumps(manifest_payload(seed, scale)))
    write_chat_data(seed_dir / "chat.jsonl", seed_dir / "manifest.json", scale)

    configs = {}
    for variant, tag in [("baseline", "base"), ("active_forgetting", "af")]:
        cfg_path = seed_dir / f"config_{tag}.json"
        cfg_path.write_text(json.dumps(config_payload(seed, variant, f"run_{tag}", scale)))
        configs[tag] = load_config(cfg_path)

    t0 = time.time()
    base_ckpt = cmd_pretrain(configs["base"])
    af_ckpt = cmd_pretrain(configs["af"])
    ba_adapted = cmd_adapt(configs["base"], base_ckpt)
    afa_adapted = cmd_adapt(configs["af"], af_ckpt)
    arm_ckpts = {
        "Baseline": cmd_finetune(configs["base"], base_ckpt),
        "BA": cmd_finetune(configs["base"], ba_adapted),
        "AFA": cmd_finetune(configs["af"], afa_adapted),
    }
    report_paths = {}
    aggregates = {}
    for arm, ckpt in arm_ckpts.items():
        cfg = configs["af" if arm == "AFA" else "base"]
        report_path = seed_dir / f"report_{arm}.json"
        report = cmd_eval(cfg, ckpt, report_path)
        report_paths[arm] = report_path
        aggregates[arm] = report.aggregates["perplexity"]
    cmd_compare(list(report_paths.values()), seed_dir / "compare")
    elapsed = time.time() - t0

    base_mu = aggregates["Baseline"]
    check_a = (
        aggregates["BA"]["mu_adapting"] < base_mu["mu_adapting"]
        and aggregates["AFA"]["mu_adapting"] < base_mu["mu_adapting"]
    )
    degradation_ba = aggregates["BA"]["mu_other"] - base_mu["mu_other"]
    degradation_afa = aggregates["AFA"]["mu_other"] - base_mu["mu_other"]
    check_b = degradation_afa <= degradation_ba
    return {
        "seed": seed,
        "elapsed_s": round(elapsed, 1),
        "perplexity": aggregates,
        "check_a_adapting_improves": check_a,
        "check_b_other_degradation": check_b,
        "degradation_ba": degradation_ba,
        "degradation_afa": degradation_afa,
    }


def run_experiment(root: Path, seeds: list[int], scale: ExperimentScale) -> dict:
    results = [run_seed(root, s, scale) for s in seeds]
    summary = {
        "seeds": seeds,
        "check_a_passes": sum(r["check_a_adapting_improves"] for r in results),
        "check_b_passes": sum(r["check_b_other_degradation"] for r in results),
        "results": results,
    }
    (root / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def format_summary(summary: dict) -> str:
    lines = []
    for r in summary["results"]:
        lines.append(f"seed {r['seed']} ({r['elapsed_s']}s):")
        for arm in ("Baseline", "BA", "AFA"):
            mu = r["perplexity"][arm]
            lines.append(
                f"  {arm:9s} ppl mu_pretraining={mu['mu_pretraining']:.2f} "
                f"mu_adapting={mu['mu_adapting']:.3g} mu_other={mu['mu_other']:.3g} "
                f"mu_overall={mu['mu_overall']:.3g}"
            )
        lines.append(
            f"  (a) adapting improves over Baseline: "
            f"{'PASS' if r['check_a_adapting_improves'] else 'FAIL'}"
        )
        lines.append(
            f"  (b) AFA other-degradation <= BA's:   "
            f"{'PASS' if r['check_b_other_degradation'] else 'FAIL'} "
            f"(AFA {r['degradation_afa']:+.3g} vs BA {r['degradation_ba']:+.3g})"
        )
    n = len(summary["results"])
    lines.append(f"(a) passed in {summary['check_a_passes']}/{n} seeds")
    lines.append(f"(b) passed in {summary['check_b_passes']}/{n} seeds")
    return "\n".join(lines)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/transfer", help="output directory")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--quick", action="store_true", help="smoke-test scale")
    args = ap.parse_args(argv)
    scale = QUICK if args.quick else ExperimentScale()
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    summary = run_experiment(root, args.seeds, scale)
    print(format_summary(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
