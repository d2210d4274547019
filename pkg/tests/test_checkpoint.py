import pytest
import torch

from resetlm.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from resetlm.errors import IntegrityError
from resetlm.model import ModelConfig, init_model
from resetlm.training import OptimizerState

CFG = ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16, vocab_size=30, block_size=8)


def make_checkpoint(seed=0, with_opt=True):
    model = init_model(CFG, seed=seed)
    opt = OptimizerState.fresh(model) if with_opt else None
    if opt is not None:
        opt.t = 17
        opt.m["lm_head"].fill_(0.25)
        opt.v["lm_head"].fill_(0.5)
    return Checkpoint(
        config=CFG,
        stage="pretrain",
        step=42,
        reset_count=3,
        variant="active_forgetting",
        provenance=["pretrain"],
        schedule_echo={"peak_lr": 3e-4, "total_steps": 100},
        tokenizer_hash="ab" * 32,
        model=model,
        opt=opt,
    )


class TestRoundTrip:
    def test_save_load_save_byte_identical(self, tmp_path):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        ckpt = make_checkpoint()
        save_checkpoint(ckpt, p1)
        loaded = load_checkpoint(p1)
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_parameters_bit_exact(self, tmp_path):
        ckpt = make_checkpoint(seed=5)
        save_checkpoint(ckpt, tmp_path / "c.ckpt")
        loaded = load_checkpoint(tmp_path / "c.ckpt")
        for (n1, p1), (n2, p2) in zip(
            sorted(ckpt.model.named_parameters()), sorted(loaded.model.named_parameters())
        ):
            assert n1 == n2
            assert torch.equal(p1.detach(), p2.detach()), n1

    def test_optimizer_and_counters_restored(self, tmp_path):
        ckpt = make_checkpoint()
        save_checkpoint(ckpt, tmp_path / "c.ckpt")
        loaded = load_checkpoint(tmp_path / "c.ckpt")
        assert loaded.step == 42
        assert loaded.reset_count == 3
        assert loaded.variant == "active_forgetting"
        assert loaded.provenance == ["pretrain"]
        assert loaded.opt.t == 17
        assert torch.equal(loaded.opt.m["lm_head"], ckpt.opt.m["lm_head"])
        assert torch.equal(loaded.opt.v["lm_head"], ckpt.opt.v["lm_head"])
        assert loaded.schedule_echo == ckpt.schedule_echo

    def test_optimizer_payload_optional(self, tmp_path):
        ckpt = make_checkpoint()
        save_checkpoint(ckpt, tmp_path / "lean.ckpt", include_optimizer=False)
        save_checkpoint(ckpt, tmp_path / "full.ckpt")
        assert (tmp_path / "lean.ckpt").stat().st_size < (tmp_path / "full.ckpt").stat().st_size
        loaded = load_checkpoint(tmp_path / "lean.ckpt")
        assert loaded.opt is None


class TestIntegrity:
    def test_single_byte_corruption_detected(self, tmp_path):
        p = tmp_path / "c.ckpt"
        save_checkpoint(make_checkpoint(), p)
        raw = bytearray(p.read_bytes())
        flip = len(raw) - 40 - 1  # inside the tensor payload, before the digest
        raw[flip] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(IntegrityError, match="offset"):
            load_checkpoint(p)

    def test_truncation_detected(self, tmp_path):
        p = tmp_path / "c.ckpt"
        save_checkpoint(make_checkpoint(), p)
        raw = p.read_bytes()
        p.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(IntegrityError):
            load_checkpoint(p)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "c.ckpt"
        p.write_bytes(b"NOTACKPT" + b"\x00" * 100)
        with pytest.raises(IntegrityError, match="magic"):
            load_checkpoint(p)

    def test_unknown_major_version_rejected(self, tmp_path):
        p = tmp_path / "c.ckpt"
        save_checkpoint(make_checkpoint(), p)
        raw = bytearray(p.read_bytes())
        raw[8] = 99  # bump the little-endian major version
        p.write_bytes(bytes(raw))
        with pytest.raises(IntegrityError, match="major version"):
            load_checkpoint(p)

    def test_tokenizer_hash_mismatch(self, tmp_path):
        p = tmp_path / "c.ckpt"
        save_checkpoint(make_checkpoint(), p)
        with pytest.raises(IntegrityError, match="tokenizer hash"):
            load_checkpoint(p, expected_tokenizer_hash="cd" * 32)

    def test_matching_hash_accepted(self, tmp_path):
        p = tmp_path / "c.ckpt"
        save_checkpoint(make_checkpoint(), p)
        load_checkpoint(p, expected_tokenizer_hash="ab" * 32)


class TestTrainStateBridge:
    def test_train_state_reconstruction(self, tmp_path):
        p = tmp_path / "c.ckpt"
        save_checkpoint(make_checkpoint(), p)
        state = load_checkpoint(p).train_state()
        assert state.step == 42
        assert state.reset_count == 3
        assert state.opt.t == 17

    def test_without_optimizer_gets_fresh_state(self, tmp_path):
        p = tmp_path / "c.ckpt"
        save_checkpoint(make_checkpoint(), p, include_optimizer=False)
        state = load_checkpoint(p).train_state()
        assert state.opt.t == 0
        assert torch.all(state.opt.m["lm_head"] == 0)
