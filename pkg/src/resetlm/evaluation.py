"""Per-language metrics and class aggregation.

Three metrics: held-out perplexity, isotropy (mean pairwise cosine
self-similarity of a token type's contextual embeddings, averaged over
types; lower means better-dispersed representations), and corpus BLEU for
few-shot translation. Per-language values roll up into class means over the
{pretraining, adapting, other} partition plus an overall mean. The report
stores raw values only; which direction is "better" is the comparison
command's business.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .corpus import BlockStream
from .errors import ConfigError, DataError
from .model import TransformerLM, generate_greedy, sequence_nll
from .rng import numpy_generator
from .tokenizer import EOS_ID, IM_END_ID, TokenizerModel, decode
from .training import ChatExample, format_chat_example

REPORT_VERSION = 1
METRICS = ("perplexity", "isotropy", "bleu")

TRANSLATION_SYSTEM_PROMPT = (
    "You are a large language model trained to solve multiple NLP tasks accurately. "
    "For any given NLP task, you must produce an output that is factually correct "
    "and succinct."
)


# ---------------------------------------------------------------------------
# Perplexity
# ---------------------------------------------------------------------------


@torch.no_grad()
def perplexity(model: TransformerLM, blocks: BlockStream, batch_size: int = 8) -> float:
    """exp of the token-mean NLL over all next-token targets in the blocks."""
    if len(blocks) == 0:
        raise DataError("no evaluation blocks")
    total = torch.zeros((), dtype=torch.float64)
    count = 0
    data = torch.from_numpy(blocks.blocks)
    for start in range(0, len(blocks), batch_size):
        ids = data[start : start + batch_size]
        mask = torch.ones_like(ids, dtype=torch.bool)
        nll, n = sequence_nll(model, ids, mask)
        total += nll
        count += n
    return float(torch.exp(total / count))


# ---------------------------------------------------------------------------
# Isotropy / self-similarity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IsotropyConfig:
    min_contexts: int = 3
    max_types: int = 64
    sample_seed: int = 0

    def validate(self) -> None:
        if self.min_contexts < 2:
            raise ConfigError("min_contexts must be >= 2")
        if self.max_types < 1:
            raise ConfigError("max_types must be >= 1")


def self_similarity(vectors: torch.Tensor) -> float:
    """Mean pairwise cosine similarity of n >= 2 vectors.

    Uses sum(pairwise cos) = |sum of unit vectors|^2 - n, so cost is linear
    in the number of contexts.
    """
    n = vectors.shape[0]
    if n < 2:
        raise DataError("self-similarity needs at least 2 context vectors")
    unit = torch.nn.functional.normalize(vectors.double(), dim=-1)
    total = unit.sum(dim=0)
    pair_sum = float(total @ total) - n
    return pair_sum / (n * (n - 1))


@torch.no_grad()
def isotropy_self_similarity(
    model: TransformerLM, blocks: BlockStream, cfg: IsotropyConfig, batch_size: int = 8
) -> float:
    """Mean self-similarity over sampled token types with enough contexts.

    Contextual embeddings are the final-layer hidden states (post final norm,
    pre LM head). Lower is better.
    """
    cfg.validate()
    if len(blocks) == 0:
        raise DataError("no blocks for isotropy")
    by_type: dict[int, list[torch.Tensor]] = defaultdict(list)
    data = torch.from_numpy(blocks.blocks)
    for start in range(0, len(blocks), batch_size):
        ids = data[start : start + batch_size]
        _, hidden = model(ids)
        for b in range(ids.shape[0]):
            for t in range(ids.shape[1]):
                by_type[int(ids[b, t])].append(hidden[b, t])
    qualifying = sorted(tok for tok, vs in by_type.items() if len(vs) >= cfg.min_contexts)
    if not qualifying:
        raise DataError(
            f"no token type occurs in >= {cfg.min_contexts} contexts"
        )
    if len(qualifying) > cfg.max_types:
        rng = numpy_generator(cfg.sample_seed, "isotropy-types")
        qualifying = sorted(rng.choice(qualifying, size=cfg.max_types, replace=False).tolist())
    sims = [self_similarity(torch.stack(by_type[tok])) for tok in qualifying]
    return sum(sims) / len(sims)


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def _words(seq) -> list:
    return seq.split() if isinstance(seq, str) else list(seq)


def _ngrams(words: list, n: int) -> Counter:
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def modified_ngram_counts(hypotheses, references, n: int) -> tuple[int, int]:
    """(clipped matching n-grams, total hypothesis n-grams) over the corpus."""
    clipped = 0
    total = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = _words(hyp), _words(ref)
        h_counts = _ngrams(h, n)
        r_counts = _ngrams(r, n)
        total += sum(h_counts.values())
        clipped += sum(min(c, r_counts[g]) for g, c in h_counts.items())
    return clipped, total


def bleu(hypotheses, references, max_n: int = 4, smooth_eps: float = 0.0) -> float:
    """Corpus BLEU: brevity penalty times the geometric mean of clipped
    modified n-gram precisions for n = 1..max_n (uniform weights).

    Inputs are whitespace-split when given as strings, or used as-is when
    pre-split. One reference per hypothesis. With smooth_eps = 0 (the
    default, matching the original definition) any zero precision gives
    BLEU 0; a small epsilon keeps tiny corpora comparable.
    """
    if len(hypotheses) != len(references):
        raise DataError(
            f"hypothesis/reference count mismatch: {len(hypotheses)} vs {len(references)}"
        )
    if not hypotheses:
        raise DataError("empty corpus for BLEU")
    hyp_len = sum(len(_words(h)) for h in hypotheses)
    ref_len = sum(len(_words(r)) for r in references)
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        clipped, total = modified_ngram_counts(hypotheses, references, n)
        if smooth_eps > 0.0:
            p = (clipped + smooth_eps) / (total + smooth_eps)
        elif clipped == 0 or total == 0:
            return 0.0
        else:
            p = clipped / total
        log_sum += math.log(p) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_sum)


# ---------------------------------------------------------------------------
# Few-shot translation
# ---------------------------------------------------------------------------


def _ordinal(n: int) -> str:
    if 10 <= n % 100 <= 13:
        return f"{n}th"
    return f"{n}{ {1: 'st', 2: 'nd', 3: 'rd'}.get(n % 10, 'th') }"


def translation_prompt(
    target_lang: str,
    exemplars: list[tuple[str, str]],
    query_src: str,
    source_lang: str = "English",
) -> str:
    """User-turn text of the few-shot translation prompt."""
    n = len(exemplars)
    if n > 0:
        head = (
            f"The task is to translate the given sentence in {source_lang} to "
            f"language {target_lang}. There are {n} examples provided below. "
            f"Produce the translation of the {_ordinal(n + 1)} sentence:"
        )
    else:
        head = (
            f"The task is to translate the given sentence in {source_lang} to "
            f"language {target_lang}. Produce the translation of the following sentence:"
        )
    lines = [head, ""]
    for src, tgt in exemplars:
        lines.append(f"{source_lang}: {src}")
        lines.append(f"{target_lang}: {tgt}")
        lines.append("")
    lines.append(f"{source_lang}: {query_src}")
    lines.append(f"{target_lang}:")
    return "\n".join(lines)


def _default_generate(model, prompt_ids, max_new_tokens, eos_id):
    return generate_greedy(model, prompt_ids, max_new_tokens, eos_id)


def translate_eval(
    model: TransformerLM,
    tok: TokenizerModel,
    pairs_by_lang: dict[str, list[tuple[str, str]]],
    n_shots: int = 4,
    max_new_tokens: int = 64,
    source_lang: str = "English",
    word_splitter=None,
    smooth_eps: float = 0.0,
    generate_fn=_default_generate,
) -> dict[str, float]:
    """Few-shot translation BLEU per target language.

    The first n_shots pairs of each language serve as exemplars, the rest as
    queries. word_splitter(lang, text) -> list of words controls scoring
    granularity (defaults to whitespace). generate_fn is injectable so the
    harness can be checked without a trained model.
    """
    results: dict[str, float] = {}
    for lang, pairs in pairs_by_lang.items():
        if len(pairs) < n_shots + 1:
            raise DataError(
                f"language {lang!r}: need at least {n_shots + 1} parallel pairs, "
                f"got {len(pairs)}"
            )
        exemplars = pairs[:n_shots]
        queries = pairs[n_shots:]
        hyps: list[list[str]] = []
        refs: list[list[str]] = []
        for src, ref in queries:
            user = translation_prompt(lang, exemplars, src, source_lang)
            ex = ChatExample(system=TRANSLATION_SYSTEM_PROMPT, user=user, assistant="")
            prompt_ids, _ = format_chat_example(tok, ex)
            prompt_ids = prompt_ids[-model.config.block_size :]
            out_ids = generate_fn(model, prompt_ids, max_new_tokens, EOS_ID)
            out_ids = [i for i in out_ids if i not in (EOS_ID, IM_END_ID)]
            text = decode(tok, out_ids).decode("utf-8", errors="replace").strip()
            split = word_splitter(lang, text) if word_splitter else text.split()
            hyps.append(split)
            refs.append(word_splitter(lang, ref) if word_splitter else ref.split())
        results[lang] = bleu(hyps, refs, smooth_eps=smooth_eps)
    return results


# ---------------------------------------------------------------------------
# Class aggregation and the report
# ---------------------------------------------------------------------------

MU_FIELDS = ("mu_pretraining", "mu_adapting", "mu_other", "mu_overall")


def aggregate_by_class(
    values: dict[str, float], class_map: dict[str, str]
) -> dict[str, float | None]:
    """Arithmetic class means plus the overall mean across all languages."""
    buckets: dict[str, list[float]] = {"pretraining": [], "adapting": [], "other": []}
    everything: list[float] = []
    for lang, value in values.items():
        if lang not in class_map:
            raise ConfigError(f"language {lang!r} has no class assignment")
        buckets[class_map[lang]].append(value)
        everything.append(value)
    if not everything:
        raise DataError("no per-language values to aggregate")

    def mean(xs: list[float]) -> float | None:
        return sum(xs) / len(xs) if xs else None

    return {
        "mu_pretraining": mean(buckets["pretraining"]),
        "mu_adapting": mean(buckets["adapting"]),
        "mu_other": mean(buckets["other"]),
        "mu_overall": mean(everything),
    }


@dataclass
class EvalReport:
    model_tag: str
    step: int
    per_language: dict[str, dict[str, float | None]]  # lang -> metric -> value
    aggregates: dict[str, dict[str, float | None]] = field(default_factory=dict)

    def compute_aggregates(self, class_map: dict[str, str]) -> None:
        self.aggregates = {}
        for metric in METRICS:
            values = {
                lang: m[metric]
                for lang, m in self.per_language.items()
                if m.get(metric) is not None
            }
            if values:
                self.aggregates[metric] = aggregate_by_class(values, class_map)

    def to_json(self) -> str:
        payload = {
            "version": REPORT_VERSION,
            "model_tag": self.model_tag,
            "step": self.step,
            "per_language": self.per_language,
            "aggregates": self.aggregates,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        payload = json.loads(text)
        if payload.get("version") != REPORT_VERSION:
            raise ConfigError(f"unsupported report version {payload.get('version')}")
        return cls(
            model_tag=payload["model_tag"],
            step=payload["step"],
            per_language=payload["per_language"],
            aggregates=payload.get("aggregates", {}),
        )

    def to_table(self) -> str:
        """Tab-separated per-language rows plus aggregate rows."""
        lines = ["lang\t" + "\t".join(METRICS)]
        for lang in sorted(self.per_language):
            metrics = self.per_language[lang]
            cells = [_fmt(metrics.get(m)) for m in METRICS]
            lines.append(lang + "\t" + "\t".join(cells))
        for mu in MU_FIELDS:
            cells = [_fmt(self.aggregates.get(m, {}).get(mu)) for m in METRICS]
            lines.append(mu + "\t" + "\t".join(cells))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"report not found: {p}")
        return cls.from_json(p.read_text(encoding="utf-8"))


def _fmt(v: float | None) -> str:
    return "n/a" if v is None else f"{v:.6g}"
