"""End-to-end orchestration of the three experiment arms.

Arm semantics: Baseline = finetune(M_base); BA = finetune(adapt(M_base
pretrained without resets)); AFA = finetune(adapt(M_base pretrained with
resets)). Each stage writes a checkpoint (plus the tokenizer it used, hash
linked) and a JSONL training log into the run directory. Stage order is
enforced via the provenance recorded in each checkpoint.
"""

from __future__ import annotations

import dataclasses
import json
from contextlib import contextmanager
from pathlib import Path

from . import corpus as corpus_mod
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import PipelineConfig
from .corpus import BlockStream, CorpusManifest, pack_blocks, split_documents
from .errors import ConfigError, DataError, NumericError, PipelineError
from .evaluation import (
    EvalReport,
    METRICS,
    MU_FIELDS,
    isotropy_self_similarity,
    perplexity,
    translate_eval,
)
from .model import expand_vocab, init_model
from .rng import derive_seed
from .tokenizer import (
    EOS_ID,
    TokenizerModel,
    encode,
    load_tokenizer,
    merge_vocabularies,
    save_tokenizer,
    tokenizer_hash,
    train_bpe,
)
from .training import ChatExample, TrainState, format_chat_example, run_stage

LOWER_IS_BETTER = {"perplexity": True, "isotropy": True, "bleu": False}


@contextmanager
def run_lock(out_dir: Path):
    """One pipeline stage at a time per output directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = lock.open("x")
    except FileExistsError:
        raise PipelineError(
            f"another stage appears to be running in {out_dir} (found {lock}); "
            "remove the lock file if that run is dead"
        ) from None
    try:
        fd.close()
        yield
    finally:
        lock.unlink(missing_ok=True)


def tokenizer_path_for(ckpt_path: Path) -> Path:
    return ckpt_path.with_suffix(".tokenizer.txt")


def _write_log(out_dir: Path, stage: str, logs) -> Path:
    path = out_dir / f"{stage}_log.jsonl"
    with path.open("a", encoding="utf-8") as f:
        for rec in logs:
            f.write(json.dumps(rec.as_dict(), sort_keys=True) + "\n")
    return path


def _save_stage(
    out_dir: Path,
    name: str,
    state: TrainState,
    tok: TokenizerModel,
    variant: str,
    provenance: list[str],
    schedule,
) -> Path:
    ckpt_path = out_dir / f"{name}.ckpt"
    echo = dataclasses.asdict(schedule)
    ckpt = Checkpoint(
        config=state.model.config,
        stage=state.stage,
        step=state.step,
        reset_count=state.reset_count,
        variant=variant,
        provenance=provenance,
        schedule_echo=echo,
        tokenizer_hash=tokenizer_hash(tok),
        model=state.model,
        opt=state.opt,
    )
    save_checkpoint(ckpt, ckpt_path)
    save_tokenizer(tok, tokenizer_path_for(ckpt_path))
    return ckpt_path


def _load_stage(ckpt_path: Path) -> tuple[Checkpoint, TokenizerModel]:
    tok_path = tokenizer_path_for(ckpt_path)
    if not tok_path.exists():
        raise PipelineError(f"tokenizer file missing next to checkpoint: {tok_path}")
    tok = load_tokenizer(tok_path)
    ckpt = load_checkpoint(ckpt_path, expected_tokenizer_hash=tokenizer_hash(tok))
    return ckpt, tok


def _diagnostic_guard(out_dir: Path, state: TrainState, tok, variant, provenance, schedule):
    """Context helper: on divergence, save a diagnostic checkpoint, re-raise."""

    @contextmanager
    def guard():
        try:
            yield
        except NumericError:
            _save_stage(out_dir, "diagnostic", state, tok, variant, provenance, schedule)
            raise

    return guard()


def _train_blocks(
    manifest: CorpusManifest, lang_class: str, tok: TokenizerModel, block_size: int
) -> BlockStream:
    docs = []
    for spec in manifest.languages_of_class(lang_class):
        train, _ = split_documents(manifest.documents[spec.lang_id], manifest.split)
        docs.extend(train)
    if not docs:
        raise DataError(f"no training documents of class {lang_class!r}")
    token_docs = [encode(tok, d.text) for d in docs]
    blocks = pack_blocks(token_docs, block_size, EOS_ID)
    if len(blocks) == 0:
        raise DataError(
            f"class {lang_class!r} yields no full blocks at block_size {block_size}; "
            "add documents or shrink block_size"
        )
    return blocks


def arm_name(ckpt: Checkpoint) -> str:
    """Baseline / BA / AFA for finetuned models, a provenance tag otherwise."""
    if "finetune" in ckpt.provenance:
        if "adapt" in ckpt.provenance:
            return "AFA" if ckpt.variant == "active_forgetting" else "BA"
        # Instruction-tuning a reset-pretrained base without adaptation is not
        # one of the standard arms; keep it distinguishable.
        return "Baseline" if ckpt.variant == "baseline" else "Baseline-AF"
    return f"{ckpt.variant}:{'+'.join(ckpt.provenance) or 'init'}"


# ---------------------------------------------------------------------------
# Stage commands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(cfg: PipelineConfig) -> Path:
    cfg.validate()
    manifest = corpus_mod.materialize(corpus_mod.load_manifest(cfg.manifest_path))
    out = cfg.out_path / "corpus"
    for lang_id, docs in manifest.documents.items():
        lang_dir = out / lang_id
        lang_dir.mkdir(parents=True, exist_ok=True)
        for doc in docs:
            (lang_dir / (doc.doc_id.split(":", 1)[1].replace("/", "_") + ".txt")).write_bytes(
                doc.text
            )
    summary = {
        lang: {"docs": len(docs), "bytes": sum(len(d.text) for d in docs)}
        for lang, docs in manifest.documents.items()
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out


def cmd_pretrain(cfg: PipelineConfig) -> Path:
    cfg.validate()
    out_dir = cfg.out_path
    with run_lock(out_dir):
        manifest = corpus_mod.materialize(corpus_mod.load_manifest(cfg.manifest_path))
        pretrain_docs = []
        for spec in manifest.languages_of_class("pretraining"):
            train, _ = split_documents(manifest.documents[spec.lang_id], manifest.split)
            pretrain_docs.extend(d.text for d in train)
        if not pretrain_docs:
            raise DataError("no pretraining-class documents in manifest")
        tok = train_bpe(pretrain_docs, cfg.base_tokenizer_size)

        model_cfg = cfg.model_config(vocab_size=tok.size)
        model = init_model(model_cfg, derive_seed(cfg.seed, "model-init"))
        blocks = _train_blocks(manifest, "pretraining", tok, model_cfg.block_size)

        schedule = cfg.pretrain_schedule()
        state = TrainState.fresh(model)
        provenance = ["pretrain"]
        with _diagnostic_guard(out_dir, state, tok, cfg.variant, provenance, schedule):
            state, logs = run_stage("pretrain", state, blocks, schedule)
        _write_log(out_dir, "pretrain", logs)
        return _save_stage(out_dir, "base", state, tok, cfg.variant, provenance, schedule)


def cmd_adapt(cfg: PipelineConfig, base_ckpt: str | Path) -> Path:
    cfg.validate()
    out_dir = cfg.out_path
    with run_lock(out_dir):
        ckpt, base_tok = _load_stage(Path(base_ckpt))
        if ckpt.stage != "pretrain":
            raise PipelineError(
                f"adapt requires a pretrain checkpoint, got stage {ckpt.stage!r}"
            )
        manifest = corpus_mod.materialize(corpus_mod.load_manifest(cfg.manifest_path))
        adapt_docs = []
        for spec in manifest.languages_of_class("adapting"):
            train, _ = split_documents(manifest.documents[spec.lang_id], manifest.split)
            adapt_docs.extend(d.text for d in train)
        if not adapt_docs:
            raise DataError("no adapting-class documents in manifest")

        new_tok = train_bpe(adapt_docs, 256 + len(base_tok.special_tokens) + cfg.merge_budget)
        merged_tok, new_ids = merge_vocabularies(base_tok, new_tok)

        model = expand_vocab(ckpt.model, merged_tok.size, derive_seed(cfg.seed, "expand"))
        blocks = _train_blocks(manifest, "adapting", merged_tok, model.config.block_size)

        schedule = cfg.adapt_schedule(base_vocab_size=base_tok.size)
        state = TrainState.fresh(model)
        state.reset_count = ckpt.reset_count
        provenance = ckpt.provenance + ["adapt"]
        with _diagnostic_guard(out_dir, state, merged_tok, ckpt.variant, provenance, schedule):
            state, logs = run_stage("adapt", state, blocks, schedule)
        _write_log(out_dir, "adapt", logs)
        return _save_stage(out_dir, "adapted", state, merged_tok, ckpt.variant, provenance, schedule)


def load_chat_dataset(path: Path) -> list[ChatExample]:
    if not path.exists():
        raise ConfigError(f"chat dataset not found: {path}")
    examples = []
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ex = ChatExample(
                    system=rec["system"], user=rec["user"], assistant=rec["assistant"]
                )
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: malformed chat record ({e})") from e
            if not ex.assistant:
                raise DataError(f"{path}:{lineno}: training example has empty assistant turn")
            examples.append(ex)
    if not examples:
        raise DataError(f"{path}: no chat examples")
    return examples


def cmd_finetune(cfg: PipelineConfig, ckpt_path: str | Path) -> Path:
    cfg.validate(require_chat_data=True)
    out_dir = cfg.out_path
    with run_lock(out_dir):
        ckpt, tok = _load_stage(Path(ckpt_path))
        if ckpt.stage not in ("pretrain", "adapt"):
            raise PipelineError(
                f"finetune requires a pretrain or adapt checkpoint, got {ckpt.stage!r}"
            )
        examples = load_chat_dataset(cfg.resolve(cfg.chat_data))
        block = ckpt.model.config.block_size
        formatted = []
        for ex in examples:
            ids, mask = format_chat_example(tok, ex)
            formatted.append((ids[:block], mask[:block]))  # truncate overlong examples

        schedule = cfg.finetune_schedule(n_examples=len(formatted))
        model = ckpt.model
        state = TrainState.fresh(model)
        state.reset_count = ckpt.reset_count
        provenance = ckpt.provenance + ["finetune"]
        if schedule.total_steps > 0:
            with _diagnostic_guard(out_dir, state, tok, ckpt.variant, provenance, schedule):
                state, logs = run_stage("finetune", state, formatted, schedule)
            _write_log(out_dir, "finetune", logs)
        else:
            state.stage = "finetune"
        # name after the input so arms sharing a directory never collide
        name = f"finetuned_{Path(ckpt_path).stem}"
        return _save_stage(out_dir, name, state, tok, ckpt.variant, provenance, schedule)


def _language_val_blocks(
    manifest: CorpusManifest, tok: TokenizerModel, block_size: int, max_blocks: int
) -> tuple[dict[str, BlockStream], list[str]]:
    streams: dict[str, BlockStream] = {}
    missing: list[str] = []
    for spec in manifest.languages:
        _, val = split_documents(manifest.documents[spec.lang_id], manifest.split)
        token_docs = [encode(tok, d.text) for d in val]
        stream = pack_blocks(token_docs, block_size, EOS_ID)
        if len(stream) == 0:
            missing.append(spec.lang_id)
        else:
            stream.blocks = stream.blocks[:max_blocks]
            streams[spec.lang_id] = stream
    return streams, missing


def _load_pairs_file(path: Path) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'source<TAB>target'")
        pairs.append((parts[0], parts[1]))
    return pairs


def _translation_pairs(
    cfg: PipelineConfig, manifest: CorpusManifest
) -> tuple[dict[str, list[tuple[str, str]]], dict[str, str], str]:
    """(pairs per target language, separator per synthetic language, source name)."""
    tcfg = cfg.eval.translation
    pairs: dict[str, list[tuple[str, str]]] = {}
    separators: dict[str, str] = {}
    for lang, fpath in tcfg.pairs_files.items():
        pairs[lang] = _load_pairs_file(cfg.resolve(fpath))
    if tcfg.source_lang:
        src_spec = manifest.spec_of(tcfg.source_lang)
        if src_spec.is_synthetic:
            for spec in manifest.languages:
                if spec.lang_id == tcfg.source_lang or not spec.is_synthetic:
                    continue
                if spec.lang_id in pairs:
                    continue
                raw = corpus_mod.make_parallel_pairs(
                    src_spec, spec, tcfg.n_pairs, manifest.seed
                )
                pairs[spec.lang_id] = [
                    (s.decode("utf-8", "replace"), t.decode("utf-8", "replace")) for s, t in raw
                ]
                separators[spec.lang_id] = chr(spec.synth.alphabet_hi)
            separators[tcfg.source_lang] = chr(src_spec.synth.alphabet_hi)
    return pairs, separators, (tcfg.source_lang or "English")


def cmd_eval(cfg: PipelineConfig, ckpt_path: str | Path, report_path: str | Path | None = None) -> EvalReport:
    cfg.validate()
    with run_lock(cfg.out_path):
        return _eval_inner(cfg, ckpt_path, report_path)


def _eval_inner(cfg: PipelineConfig, ckpt_path: str | Path, report_path: str | Path | None) -> EvalReport:
    ckpt, tok = _load_stage(Path(ckpt_path))
    manifest = corpus_mod.materialize(corpus_mod.load_manifest(cfg.manifest_path))
    model = ckpt.model
    model.eval()

    streams, missing = _language_val_blocks(
        manifest, tok, model.config.block_size, cfg.eval.max_eval_blocks
    )
    if missing:
        raise DataError(
            "no held-out evaluation blocks for declared languages: " + ", ".join(sorted(missing))
        )

    per_language: dict[str, dict[str, float | None]] = {}
    for lang, stream in streams.items():
        per_language[lang] = {
            "perplexity": perplexity(model, stream),
            "isotropy": isotropy_self_similarity(model, stream, cfg.eval.isotropy),
            "bleu": None,
        }

    tcfg = cfg.eval.translation
    if tcfg.enabled:
        pairs, separators, source = _translation_pairs(cfg, manifest)

        def splitter(lang: str, text: str) -> list[str]:
            sep = separators.get(lang)
            words = text.split(sep) if sep else text.split()
            return [w for w in words if w]

        bleu_by_lang = translate_eval(
            model,
            tok,
            pairs,
            n_shots=tcfg.n_shots,
            max_new_tokens=tcfg.max_new_tokens,
            source_lang=source,
            word_splitter=splitter,
            smooth_eps=tcfg.smooth_eps,
        )
        for lang, value in bleu_by_lang.items():
            if lang in per_language:
                per_language[lang]["bleu"] = value

    report = EvalReport(model_tag=arm_name(ckpt), step=ckpt.step, per_language=per_language)
    report.compute_aggregates(manifest.class_map())
    if report_path is None:
        report_path = cfg.out_path / f"report_{Path(ckpt_path).stem}.json"
    report_path = Path(report_path)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report.save(report_path)
    report_path.with_suffix(".tsv").write_text(report.to_table(), encoding="utf-8")
    return report


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------


def compare_reports(reports: list[EvalReport]) -> dict:
    """Side-by-side class means with a best-arm flag per column."""
    if len(reports) < 2:
        raise ConfigError("compare needs at least 2 reports")
    lang_sets = [set(r.per_language) for r in reports]
    for i, ls in enumerate(lang_sets[1:], start=1):
        if ls != lang_sets[0]:
            diff = sorted(ls.symmetric_difference(lang_sets[0]))
            raise ConfigError(
                f"report {reports[i].model_tag!r} evaluates a different language set; "
                f"symmetric difference: {diff}"
            )
    columns = [(metric, mu) for metric in METRICS for mu in MU_FIELDS]
    rows = []
    for r in reports:
        rows.append(
            {
                "arm": r.model_tag,
                "values": {
                    f"{metric}.{mu}": (r.aggregates.get(metric) or {}).get(mu)
                    for metric, mu in columns
                },
            }
        )
    best: dict[str, list[str]] = {}
    for metric, mu in columns:
        key = f"{metric}.{mu}"
        present = [(row["arm"], row["values"][key]) for row in rows if row["values"][key] is not None]
        if not present:
            best[key] = []
            continue
        pick = min if LOWER_IS_BETTER[metric] else max
        target = pick(v for _, v in present)
        best[key] = [arm for arm, v in present if v == target]
    return {"columns": [f"{m}.{mu}" for m, mu in columns], "rows": rows, "best": best}


def comparison_table(cmp: dict) -> str:
    header = "arm\t" + "\t".join(cmp["columns"])
    lines = [header]
    for row in cmp["rows"]:
        cells = []
        for col in cmp["columns"]:
            v = row["values"][col]
            cell = "n/a" if v is None else f"{v:.6g}"
            if row["arm"] in cmp["best"].get(col, []):
                cell += "*"
            cells.append(cell)
        lines.append(row["arm"] + "\t" + "\t".join(cells))
    return "\n".join(lines) + "\n"


def comparison_charts(cmp: dict, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    arms = [row["arm"] for row in cmp["rows"]]
    for metric in METRICS:
        mus = [f"{metric}.{mu}" for mu in MU_FIELDS]
        if all(row["values"][c] is None for row in cmp["rows"] for c in mus):
            continue
        fig, ax = plt.subplots(figsize=(7, 4))
        width = 0.8 / len(arms)
        for i, row in enumerate(cmp["rows"]):
            xs = [j + i * width for j in range(len(mus))]
            ys = [row["values"][c] if row["values"][c] is not None else 0.0 for c in mus]
            ax.bar(xs, ys, width=width, label=row["arm"])
        ax.set_xticks([j + 0.4 - width / 2 for j in range(len(mus))])
        ax.set_xticklabels([mu.replace("mu_", "μ ") for mu in MU_FIELDS])
        direction = "lower is better" if LOWER_IS_BETTER[metric] else "higher is better"
        ax.set_title(f"{metric} by language class ({direction})")
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"compare_{metric}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def cmd_compare(report_paths: list[str | Path], out_dir: Path) -> dict:
    reports = [EvalReport.load(p) for p in report_paths]
    cmp = compare_reports(reports)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "compare.tsv").write_text(comparison_table(cmp), encoding="utf-8")
    (out_dir / "compare.json").write_text(json.dumps(cmp, indent=2, sort_keys=True) + "\n")
    comparison_charts(cmp, out_dir)
    return cmp
