"""Pipeline configuration: one JSON file drives all stages.

Sections mirror the stages: corpus manifest path, tokenizer sizes, model
preset, per-stage schedules, eval settings, experiment variant, output
directory, global seed. Validation collects every problem before failing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .evaluation import IsotropyConfig
from .model import ModelConfig, preset_config
from .rng import derive_seed
from .tokenizer import BASE_VOCAB_SIZE
from .training import NO_FREEZE, FreezeSpec, TrainingSchedule, adaptation_freeze

CONFIG_VERSION = 1
VARIANTS = ("baseline", "active_forgetting")


@dataclass
class StageParams:
    peak_lr: float = 3e-4
    total_steps: int = 0
    epochs: float = 0.0  # finetune only; converted to steps against the dataset
    warmup_frac: float = 0.1
    batch_size: int = 16
    weight_decay: float = 0.0
    reset_interval: int | None = None
    grad_clip: float | None = None
    log_every: int = 50


@dataclass
class TranslationEvalConfig:
    enabled: bool = False
    n_shots: int = 4
    n_pairs: int = 12
    source_lang: str = ""
    max_new_tokens: int = 48
    smooth_eps: float = 0.0
    pairs_files: dict[str, str] = field(default_factory=dict)  # lang -> TSV path


@dataclass
class EvalSettings:
    isotropy: IsotropyConfig = field(default_factory=IsotropyConfig)
    translation: TranslationEvalConfig = field(default_factory=TranslationEvalConfig)
    max_eval_blocks: int = 64


@dataclass
class PipelineConfig:
    manifest: str
    out_dir: str
    seed: int = 0
    variant: str = "baseline"
    base_tokenizer_size: int = 512
    merge_budget: int = 256
    model_preset: str = "nano"
    model_overrides: dict = field(default_factory=dict)
    pretrain: StageParams = field(default_factory=lambda: StageParams(total_steps=2000, reset_interval=None))
    adapt: StageParams = field(default_factory=lambda: StageParams(total_steps=600))
    finetune: StageParams = field(default_factory=lambda: StageParams(peak_lr=1e-4, epochs=2.0, batch_size=8))
    eval: EvalSettings = field(default_factory=EvalSettings)
    chat_data: str | None = None
    base_dir: Path = field(default_factory=Path)

    # -- path helpers ------------------------------------------------------
    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def manifest_path(self) -> Path:
        return self.resolve(self.manifest)

    @property
    def out_path(self) -> Path:
        return self.resolve(self.out_dir)

    # -- validation --------------------------------------------------------
    def validate(self, require_chat_data: bool = False) -> None:
        problems = []
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "baseline" and self.pretrain.reset_interval is not None:
            problems.append("variant=baseline requires pretrain.reset_interval to be absent")
        if self.variant == "active_forgetting" and self.pretrain.reset_interval is None:
            problems.append("variant=active_forgetting requires pretrain.reset_interval")
        if self.base_tokenizer_size < BASE_VOCAB_SIZE:
            problems.append(
                f"base_tokenizer_size must be >= {BASE_VOCAB_SIZE}, got {self.base_tokenizer_size}"
            )
        if self.merge_budget < 0:
            problems.append("merge_budget must be >= 0")
        if not self.manifest_path.exists():
            problems.append(f"manifest path does not exist: {self.manifest_path}")
        if require_chat_data:
            if self.chat_data is None:
                problems.append("finetune requires chat_data")
            elif not self.resolve(self.chat_data).exists():
                problems.append(f"chat_data path does not exist: {self.resolve(self.chat_data)}")
        for lang, p in self.eval.translation.pairs_files.items():
            if not self.resolve(p).exists():
                problems.append(f"translation pairs file for {lang!r} missing: {self.resolve(p)}")
        if problems:
            raise ConfigError("; ".join(problems))

    # -- derived objects ----------------------------------------------------
    def model_config(self, vocab_size: int) -> ModelConfig:
        return preset_config(self.model_preset, vocab_size, **self.model_overrides)

    def _schedule(self, params: StageParams, stage: str, total_steps: int,
                  freeze: FreezeSpec = NO_FREEZE, reset_interval: int | None = None) -> TrainingSchedule:
        sched = TrainingSchedule(
            peak_lr=params.peak_lr,
            total_steps=total_steps,
            warmup_frac=params.warmup_frac,
            batch_size=params.batch_size,
            weight_decay=params.weight_decay,
            reset_interval=reset_interval,
            freeze=freeze,
            seed=derive_seed(self.seed, stage),
            grad_clip=params.grad_clip,
            log_every=params.log_every,
        )
        sched.validate()
        return sched

    def pretrain_schedule(self) -> TrainingSchedule:
        reset = self.pretrain.reset_interval if self.variant == "active_forgetting" else None
        return self._schedule(self.pretrain, "pretrain", self.pretrain.total_steps,
                              reset_interval=reset)

    def adapt_schedule(self, base_vocab_size: int) -> TrainingSchedule:
        return self._schedule(self.adapt, "adapt", self.adapt.total_steps,
                              freeze=adaptation_freeze(base_vocab_size))

    def finetune_schedule(self, n_examples: int) -> TrainingSchedule:
        steps = int(math.ceil(self.finetune.epochs * math.ceil(n_examples / self.finetune.batch_size)))
        return self._schedule(self.finetune, "finetune", steps)


def _stage_params(payload: dict) -> StageParams:
    known = set(StageParams.__dataclass_fields__)
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown schedule keys: {sorted(unknown)}")
    return StageParams(**payload)


def load_config(path: str | Path) -> PipelineConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        payload = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {p} is not valid JSON: {e}") from e
    if payload.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {payload.get('version')}")
    eval_payload = payload.get("eval", {})
    translation = TranslationEvalConfig(**eval_payload.get("translation", {}))
    isotropy = IsotropyConfig(**eval_payload.get("isotropy", {}))
    cfg = PipelineConfig(
        manifest=payload["manifest"],
        out_dir=payload.get("out_dir", "runs/default"),
        seed=payload.get("seed", 0),
        variant=payload.get("variant", "baseline"),
        base_tokenizer_size=payload.get("tokenizer", {}).get("base_size", 512),
        merge_budget=payload.get("tokenizer", {}).get("merge_budget", 256),
        model_preset=payload.get("model", {}).get("preset", "nano"),
        model_overrides={k: v for k, v in payload.get("model", {}).items() if k != "preset"},
        pretrain=_stage_params(payload.get("pretrain", {"total_steps": 2000})),
        adapt=_stage_params(payload.get("adapt", {"total_steps": 600})),
        finetune=_stage_params(payload.get("finetune", {"peak_lr": 1e-4, "epochs": 2.0, "batch_size": 8})),
        eval=EvalSettings(
            isotropy=isotropy,
            translation=translation,
            max_eval_blocks=eval_payload.get("max_eval_blocks", 64),
        ),
        chat_data=payload.get("chat_data"),
        base_dir=p.parent.resolve(),
    )
    return cfg
