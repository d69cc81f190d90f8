import numpy as np
import pytest

from rectiflow.data import ToyMelConfig
from rectiflow.errors import CheckpointError, ConfigError
from rectiflow.flow import TrainConfig
from rectiflow.fusion import FusionConfig, FusionEncoder
from rectiflow.persistence import (
    load_checkpoint,
    parse_config_file,
    save_checkpoint,
    toy_mel_descriptor,
    toy_mel_from_descriptor,
    train_config_from_file,
)
from rectiflow.vectorfield import Adam, VectorFieldModel


def _model(seed=0, cond_dim=0):
    return VectorFieldModel(
        dim=2, hidden=(6, 5), time_embed_dim=4, cond_dim=cond_dim,
        rng=np.random.default_rng(seed), zero_init_output=False,
    )


class TestCheckpointRoundTrip:
    def test_parameters_bitwise_equal(self, tmp_path):
        m = _model()
        m.rectification_round = 2
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path)
        loaded = load_checkpoint(path)
        assert loaded.model.rectification_round == 2
        for (na, pa), (nb, pb) in zip(m.parameters(), loaded.model.parameters()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)

    def test_two_saves_byte_identical(self, tmp_path):
        m = _model()
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        cfg = TrainConfig(dim=2, batch_size=8, steps=3, lr=1e-3, seed=1, hidden=(6, 5), time_embed_dim=4)
        save_checkpoint(m, p1, train_config=cfg)
        save_checkpoint(m, p2, train_config=cfg)
        assert p1.read_bytes() == p2.read_bytes()

    def test_optimizer_state_round_trip(self, tmp_path):
        m = _model()
        opt = Adam(m.parameters(), lr=1e-3)
        m.zero_grad()
        for _, p in m.parameters():
            p.grad = np.random.default_rng(3).standard_normal(p.data.shape)
        opt.step()
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path, optimizer=opt)
        loaded = load_checkpoint(path)
        assert loaded.meta["optimizer"] == "adam"
        assert loaded.meta["optimizer.step_count"] == "1"
        for name, _ in m.parameters():
            assert np.array_equal(loaded.optimizer_state[f"adam.{name}.m"], opt.m[name])
            assert np.array_equal(loaded.optimizer_state[f"adam.{name}.v"], opt.v[name])

    def test_fusion_round_trip(self, tmp_path):
        fcfg = FusionConfig(d_model=8, n_heads=2, n_self_attn_iters=3, codebook_size=16, cond_dim=4)
        fusion = FusionEncoder(fcfg, np.random.default_rng(5))
        m = _model(cond_dim=4)
        path = tmp_path / "c.ckpt"
        save_checkpoint(m, path, fusion=fusion)
        loaded = load_checkpoint(path)
        assert loaded.fusion is not None
        assert loaded.fusion.config == fcfg
        for (na, pa), (nb, pb) in zip(fusion.parameters(), loaded.fusion.parameters()):
            assert na == nb and np.array_equal(pa.data, pb.data)
        assert np.array_equal(loaded.fusion.codebook, fusion.codebook)

    def test_train_config_recoverable_without_original_file(self, tmp_path):
        m = _model()
        cfg = TrainConfig(dim=2, batch_size=16, steps=12, lr=2.5e-3, beta1=0.85,
                          seed=9, hidden=(6, 5), time_embed_dim=4)
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path, train_config=cfg)
        assert load_checkpoint(path).train_config() == cfg

    def test_toy_mel_descriptor_round_trip(self, tmp_path):
        tm = ToyMelConfig(n_speakers=3, bands=12, envelope_coefs=3, noise=0.02, d_model=8, seed=99)
        m = _model(cond_dim=4)
        fusion = FusionEncoder(FusionConfig(d_model=8, n_heads=2, cond_dim=4), np.random.default_rng(0))
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path, fusion=fusion, data_descriptor=toy_mel_descriptor(tm))
        loaded = load_checkpoint(path)
        assert toy_mel_from_descriptor(loaded.data_descriptor()) == tm


class TestCheckpointCorruption:
    def _saved(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(_model(), path)
        return path

    def test_wrong_magic_rejected_before_tensors(self, tmp_path):
        path = self._saved(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError) as err:
            load_checkpoint(path)
        assert "magic" in str(err.value)

    def test_version_mismatch_rejected(self, tmp_path):
        path = self._saved(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError) as err:
            load_checkpoint(path)
        assert "version" in str(err.value)

    def test_truncated_file_names_failing_section(self, tmp_path):
        path = self._saved(tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 40])
        with pytest.raises(CheckpointError) as err:
            load_checkpoint(path)
        assert "truncated" in str(err.value)

    def test_shape_inconsistency_rejected(self, tmp_path):
        # Rewrite the metadata to claim a different hidden width.
        path = tmp_path / "m.ckpt"
        save_checkpoint(_model(), path)
        raw = path.read_bytes()
        patched = raw.replace(b"hidden=6,5\n", b"hidden=6,9\n")
        assert patched != raw
        (tmp_path / "bad.ckpt").write_bytes(patched)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.ckpt")


class TestConfigFiles:
    def _write(self, tmp_path, text):
        path = tmp_path / "run.cfg"
        path.write_text(text)
        return path

    def test_parse_with_comments_and_spacing(self, tmp_path):
        path = self._write(
            tmp_path,
            "# comment line\ndim = 2\nsteps=100  # trailing comment\nbatch_size = 64\nlr = 1e-3\n\n",
        )
        values = parse_config_file(path)
        assert values == {"dim": "2", "steps": "100", "batch_size": "64", "lr": "1e-3"}

    def test_unknown_key_rejected_with_line_number(self, tmp_path):
        path = self._write(tmp_path, "dim = 2\nsteps = 1\nbatch_size = 4\nlr = 1e-3\nbogus = 3\n")
        with pytest.raises(ConfigError) as err:
            parse_config_file(path)
        assert ":5:" in str(err.value) and "bogus" in str(err.value)

    def test_missing_required_key_named(self, tmp_path):
        path = self._write(tmp_path, "dim = 2\nsteps = 1\nbatch_size = 4\n")
        with pytest.raises(ConfigError) as err:
            parse_config_file(path)
        assert "lr" in str(err.value)

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = self._write(tmp_path, "dim = 2\nnot a pair\n")
        with pytest.raises(ConfigError) as err:
            parse_config_file(path)
        assert ":2:" in str(err.value)

    def test_duplicate_key_rejected(self, tmp_path):
        path = self._write(tmp_path, "dim = 2\ndim = 3\nsteps=1\nbatch_size=2\nlr=1e-3\n")
        with pytest.raises(ConfigError) as err:
            parse_config_file(path)
        assert "duplicate" in str(err.value)

    def test_train_config_construction_and_seed_override(self, tmp_path):
        path = self._write(
            tmp_path,
            "dim = 2\nsteps = 10\nbatch_size = 4\nlr = 1e-3\nseed = 5\nhidden = 8,8\ntime_embed_dim = 4\n",
        )
        cfg = train_config_from_file(path)
        assert cfg.seed == 5 and cfg.hidden == (8, 8)
        assert train_config_from_file(path, seed_override=42).seed == 42
