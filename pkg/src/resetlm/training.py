"""Optimizer, schedule, embedding resets, freeze masks, and the stage runner.

Three stages share one step loop:

  pretrain  — full model trains; with a reset interval k the token-embedding
              table is re-randomized after every k-th optimizer step (never
              after the final one) and its Adam moments are zeroed.
  adapt     — trunk and base-vocabulary embedding rows frozen; new embedding
              rows and the (replaced) LM head train on adapting-language text.
  finetune  — all parameters train on chat-formatted examples, loss masked to
              assistant tokens.

Every random draw is a pure function of (schedule.seed, tag, counter), so a
run is reproducible bit-exactly and a checkpoint needs only counters, not
opaque RNG blobs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigError, DataError, NumericError
from .model import EMBEDDING_NAME, HEAD_NAME, TransformerLM, draw_matrix, sequence_nll
from .rng import numpy_generator
from .tokenizer import IM_END_ID, IM_START_ID, PAD_ID, SPECIAL_TOKENS, TokenizerModel, encode
from .corpus import BlockStream

STAGES = ("pretrain", "adapt", "finetune")

# Paper-scale hyperparameters (pretraining / instruction finetuning); the
# desk-scale defaults used by the pipeline live in config.py.
PAPER_PRETRAIN = dict(
    peak_lr=1e-4, total_steps=150_000, warmup_frac=0.10,
    batch_size=128, weight_decay=0.0, reset_interval=10_000, block_size=4096,
)
PAPER_FINETUNE = dict(peak_lr=1e-6, epochs=5, batch_size=16, warmup_frac=0.10, weight_decay=0.0)


@dataclass(frozen=True)
class FreezeSpec:
    trunk_frozen: bool = False
    frozen_embedding_rows: tuple[int, ...] = ()
    head_frozen: bool = False

    @property
    def any_frozen(self) -> bool:
        return self.trunk_frozen or self.head_frozen or bool(self.frozen_embedding_rows)


NO_FREEZE = FreezeSpec()


@dataclass(frozen=True)
class TrainingSchedule:
    peak_lr: float
    total_steps: int
    warmup_frac: float = 0.1
    batch_size: int = 16
    weight_decay: float = 0.0
    reset_interval: int | None = None  # k; None disables resets
    # the source text is silent on whether resets also replace the LM head or
    # keep the embedding's optimizer moments; defaults follow our reading
    reset_head: bool = False
    reset_optimizer: bool = True
    freeze: FreezeSpec = NO_FREEZE
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grad_clip: float | None = None
    log_every: int = 50

    def validate(self) -> None:
        problems = []
        if self.peak_lr < 0:
            problems.append("peak_lr must be >= 0")
        if self.total_steps < 0:
            problems.append("total_steps must be >= 0")
        if not (0.0 <= self.warmup_frac < 1.0):
            problems.append("warmup_frac must be in [0, 1)")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.reset_interval is not None and self.reset_interval < 1:
            problems.append("reset_interval must be >= 1 when present")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            problems.append("betas must be in [0, 1)")
        if self.epsilon <= 0:
            problems.append("epsilon must be positive")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_frac * self.total_steps)


def lr_at(schedule: TrainingSchedule, step: int) -> float:
    """Linear warmup 0 -> peak, then cosine decay peak -> 0."""
    total = schedule.total_steps
    if total == 0:
        return 0.0
    step = min(max(step, 0), total)
    w = schedule.warmup_steps
    if step <= w and w > 0:
        return schedule.peak_lr * step / w
    progress = (step - w) / (total - w) if total > w else 1.0
    return schedule.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    t: int = 0

    @classmethod
    def fresh(cls, model: TransformerLM) -> "OptimizerState":
        return cls(
            m={n: torch.zeros_like(p) for n, p in model.named_parameters()},
            v={n: torch.zeros_like(p) for n, p in model.named_parameters()},
        )


def _frozen_row_index(freeze: FreezeSpec, device) -> torch.Tensor:
    return torch.tensor(sorted(freeze.frozen_embedding_rows), dtype=torch.long, device=device)


def apply_freeze_mask(grads: dict[str, torch.Tensor], freeze: FreezeSpec) -> dict[str, torch.Tensor]:
    """Zero the gradients of parameters the freeze spec covers (in place)."""
    for name, g in grads.items():
        if g is None:
            continue
        if name == EMBEDDING_NAME:
            if freeze.frozen_embedding_rows:
                g[_frozen_row_index(freeze, g.device)] = 0.0
        elif name == HEAD_NAME:
            if freeze.head_frozen:
                g.zero_()
        elif freeze.trunk_frozen:
            g.zero_()
    return grads


def _decay_allowed(name: str, freeze: FreezeSpec) -> bool:
    if name == HEAD_NAME:
        return not freeze.head_frozen
    if name == EMBEDDING_NAME:
        return True  # handled per-row below
    return not freeze.trunk_frozen


def adamw_step(
    model: TransformerLM,
    grads: dict[str, torch.Tensor],
    opt: OptimizerState,
    lr: float,
    schedule: TrainingSchedule,
) -> tuple[TransformerLM, OptimizerState]:
    """One decoupled-weight-decay Adam step with bias correction.

    Decay never touches entries covered by the freeze spec, so frozen
    parameters stay bit-identical even with weight_decay > 0.
    """
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
    opt.t += 1
    b1, b2, eps, wd = schedule.beta1, schedule.beta2, schedule.epsilon, schedule.weight_decay
    bias1 = 1.0 - b1**opt.t
    bias2 = 1.0 - b2**opt.t
    with torch.no_grad():
        for name, p in model.named_parameters():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m, v = opt.m[name], opt.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            update = (m / bias1) / ((v / bias2).sqrt() + eps)
            p.add_(update, alpha=-lr)
            if wd != 0.0 and _decay_allowed(name, schedule.freeze):
                if name == EMBEDDING_NAME and schedule.freeze.frozen_embedding_rows:
                    decay = p * (-lr * wd)
                    decay[_frozen_row_index(schedule.freeze, p.device)] = 0.0
                    p.add_(decay)
                else:
                    p.mul_(1.0 - lr * wd)
    return model, opt


def should_reset(schedule: TrainingSchedule, step: int) -> bool:
    """True iff an embedding reset follows completed step `step` (1-based).

    No reset after the final step of the run.
    """
    k = schedule.reset_interval
    return k is not None and step % k == 0 and step < schedule.total_steps


def active_forget_reset(
    model: TransformerLM,
    opt: OptimizerState,
    seed: int,
    reset_count: int,
    reset_head: bool = False,
    reset_optimizer: bool = True,
) -> int:
    """Re-randomize the token-embedding table; zero its Adam moments.

    The draw is seeded by (seed, reset_count), so any reset can be reproduced
    independently. Returns the incremented reset count. Trunk, head, and
    their optimizer state are untouched unless reset_head is set.
    """
    emb = model.token_embedding
    fresh = draw_matrix(
        tuple(emb.shape), model.config.init_std, seed, "reset", reset_count, dtype=emb.dtype
    )
    with torch.no_grad():
        emb.copy_(fresh)
        if reset_head:
            head = model.lm_head
            head.copy_(draw_matrix(tuple(head.shape), model.config.init_std,
                                   seed, "reset-head", reset_count, dtype=head.dtype))
    if reset_optimizer:
        opt.m[EMBEDDING_NAME].zero_()
        opt.v[EMBEDDING_NAME].zero_()
        if reset_head:
            opt.m[HEAD_NAME].zero_()
            opt.v[HEAD_NAME].zero_()
    return reset_count + 1


def regenerate_reset_embedding(
    shape: tuple[int, int], init_std: float, seed: int, reset_count: int
) -> torch.Tensor:
    """The independent regeneration oracle for a reset draw."""
    return draw_matrix(shape, init_std, seed, "reset", reset_count)


# ---------------------------------------------------------------------------
# Chat formatting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChatExample:
    system: str
    user: str
    assistant: str = ""


def render_chat(ex: ChatExample) -> str:
    text = (
        f"<|im_start|>system\n{ex.system}<|im_end|>\n"
        f"<|im_start|>user\n{ex.user}<|im_end|>\n"
        f"<|im_start|>assistant\n"
    )
    if ex.assistant:
        text += f"{ex.assistant}<|im_end|>"
    return text


def format_chat_example(tok: TokenizerModel, ex: ChatExample) -> tuple[list[int], list[bool]]:
    """Token IDs plus a target mask that is true only on assistant-content
    tokens and the closing marker. decode(ids) reproduces render_chat(ex)."""
    if tuple(tok.special_tokens) != SPECIAL_TOKENS:
        raise ConfigError(
            f"tokenizer lacks the chat special tokens: has {tok.special_tokens}"
        )
    ids: list[int] = []
    mask: list[bool] = []

    def emit(piece_ids: list[int], target: bool) -> None:
        ids.extend(piece_ids)
        mask.extend([target] * len(piece_ids))

    emit([IM_START_ID], False)
    emit(encode(tok, f"system\n{ex.system}"), False)
    emit([IM_END_ID], False)
    emit(encode(tok, "\n"), False)
    emit([IM_START_ID], False)
    emit(encode(tok, f"user\n{ex.user}"), False)
    emit([IM_END_ID], False)
    emit(encode(tok, "\n"), False)
    emit([IM_START_ID], False)
    emit(encode(tok, "assistant\n"), False)
    if ex.assistant:
        emit(encode(tok, ex.assistant), True)
        emit([IM_END_ID], True)
    return ids, mask


# ---------------------------------------------------------------------------
# Batch sampling (stateless: a pure function of seed and step)
# ---------------------------------------------------------------------------


def sample_block_batch(
    stream: BlockStream, batch_size: int, seed: int, step: int
) -> tuple[torch.Tensor, torch.Tensor]:
    if len(stream) == 0:
        raise DataError("empty block stream")
    rng = numpy_generator(seed, "batch", step)
    idx = rng.integers(0, len(stream), size=batch_size)
    ids = torch.from_numpy(stream.blocks[idx])
    return ids, torch.ones_like(ids, dtype=torch.bool)


def sample_chat_batch(
    examples: list[tuple[list[int], list[bool]]],
    batch_size: int,
    seed: int,
    step: int,
    pad_id: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    if not examples:
        raise DataError("empty chat dataset")
    rng = numpy_generator(seed, "batch", step)
    idx = rng.integers(0, len(examples), size=batch_size)
    chosen = [examples[i] for i in idx]
    width = max(len(ids) for ids, _ in chosen)
    ids = torch.full((len(chosen), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(chosen), width), dtype=torch.bool)
    for row, (ex_ids, ex_mask) in enumerate(chosen):
        ids[row, : len(ex_ids)] = torch.tensor(ex_ids, dtype=torch.long)
        mask[row, : len(ex_mask)] = torch.tensor(ex_mask, dtype=torch.bool)
    return ids, mask


# ---------------------------------------------------------------------------
# Stage runner
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    model: TransformerLM
    opt: OptimizerState
    step: int = 0
    reset_count: int = 0
    stage: str = "init"

    @classmethod
    def fresh(cls, model: TransformerLM) -> "TrainState":
        return cls(model=model, opt=OptimizerState.fresh(model))


@dataclass
class LogRecord:
    stage: str
    step: int
    lr: float
    loss: float
    reset_count: int

    def as_dict(self) -> dict:
        return dict(stage=self.stage, step=self.step, lr=self.lr,
                    loss=self.loss, reset_count=self.reset_count)


def run_stage(
    stage: str,
    state: TrainState,
    data,
    schedule: TrainingSchedule,
    step_callback=None,
) -> tuple[TrainState, list[LogRecord]]:
    """Run optimizer steps state.step+1 .. schedule.total_steps.

    data: a BlockStream for pretrain/adapt, or a list of (ids, target_mask)
    chat examples for finetune. Resets only ever fire in the pretrain stage.
    """
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    schedule.validate()
    if stage != "pretrain" and schedule.reset_interval is not None:
        raise ConfigError(f"reset_interval is only valid for pretrain, not {stage}")
    model = state.model
    logs: list[LogRecord] = []

    for step in range(state.step + 1, schedule.total_steps + 1):
        if stage == "finetune":
            ids, mask = sample_chat_batch(data, schedule.batch_size, schedule.seed, step, PAD_ID)
        else:
            ids, mask = sample_block_batch(data, schedule.batch_size, schedule.seed, step)
        total_nll, count = sequence_nll(model, ids, mask)
        loss = total_nll / count
        loss_val = float(loss.detach())
        if not math.isfinite(loss_val):
            state.step = step
            raise NumericError(f"{stage}: non-finite loss at step {step}")
        model.zero_grad(set_to_none=True)
        loss.backward()
        grads = {name: p.grad for name, p in model.named_parameters()}
        apply_freeze_mask(grads, schedule.freeze)
        if schedule.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(model.parameters(), schedule.grad_clip)
        lr = lr_at(schedule, step)
        adamw_step(model, grads, state.opt, lr, schedule)
        model.zero_grad(set_to_none=True)
        if stage == "pretrain" and should_reset(schedule, step):
            state.reset_count = active_forget_reset(
                model, state.opt, schedule.seed, state.reset_count,
                reset_head=schedule.reset_head,
                reset_optimizer=schedule.reset_optimizer,
            )
        state.step = step
        if step % schedule.log_every == 0 or step == schedule.total_steps:
            logs.append(LogRecord(stage, step, lr, loss_val, state.reset_count))
        if step_callback is not None:
            step_callback(state, step)

    state.stage = stage
    return state, logs


def adaptation_freeze(base_vocab_size: int) -> FreezeSpec:
    """Freeze for the adapt stage: trunk and base embedding rows held fixed,
    new rows and the replaced head trainable."""
    return FreezeSpec(
        trunk_frozen=True,
        frozen_embedding_rows=tuple(range(base_vocab_size)),
        head_frozen=False,
    )


def expected_reset_steps(schedule: TrainingSchedule) -> list[int]:
    """Enumeration of the steps after which a reset fires."""
    return [s for s in range(1, schedule.total_steps + 1) if should_reset(schedule, s)]
