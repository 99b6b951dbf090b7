import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marlframes.checkpoint import (
    BadCheckpointMagic, CheckpointError, ConfigDigestMismatch, decode_checkpoint, encode_checkpoint,
    load_checkpoint, save_checkpoint,
)
from marlframes.config import ConfigError, ExperimentConfig, load_config, parse_config
from marlframes.sampler import ModelDims, ModelParameters


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert (cfg.F, cfg.N_train, cfg.N_test, cfg.T_max, cfg.gamma, cfg.lambda1, cfg.lambda2,
                cfg.H, cfg.lr, cfg.K, cfg.clip_norm) == (120, 5, 25, 10, 0.9, 1.0, 1.0, 1024, 1e-4, 1, 5.0)

    def test_parse(self):
        cfg = parse_config("# comment\nF = 60   # trailing\nH=64\ngamma = 0.5\naux_step_cls = true\n")
        assert (cfg.F, cfg.H, cfg.gamma, cfg.aux_step_cls) == (60, 64, 0.5, True)

    def test_unknown_key_names_key_and_line(self):
        with pytest.raises(ConfigError, match=r"<config>:2: unknown key 'bogus'"):
            parse_config("F = 10\nbogus = 1\n")

    def test_duplicate_and_syntax(self):
        with pytest.raises(ConfigError, match=":2"):
            parse_config("F = 10\nF = 11\n")
        with pytest.raises(ConfigError, match=":1"):
            parse_config("just words\n")
        with pytest.raises(ConfigError, match=":1: bad value for F"):
            parse_config("F = ten\n")

    @pytest.mark.parametrize("line", ["gamma = 0", "gamma = 1.5", "T_max = 0", "M = -1", "delta = 0",
                                      "K = 0", "lr = 0"])
    def test_ranges(self, line):
        with pytest.raises(ConfigError):
            parse_config(line)

    def test_env_override(self):
        cfg = parse_config("F = 10\n", env={"MFS_F": "20", "MFS_lr": "0.5", "OTHER": "x"})
        assert cfg.F == 20 and cfg.lr == 0.5
        with pytest.raises(ConfigError, match="MFS_NOPE"):
            parse_config("", env={"MFS_NOPE": "1"})

    def test_load_config_uses_environment(self, tmp_path, monkeypatch):
        path = tmp_path / "c.cfg"
        path.write_text("H = 32\n")
        monkeypatch.setenv("MFS_H", "16")
        assert load_config(path).H == 16
        assert load_config(path, use_env=False).H == 32

    def test_roundtrip_defaults(self):
        cfg = ExperimentConfig()
        assert parse_config(cfg.serialize()) == cfg

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 500), st.floats(0.01, 1.0), st.floats(1e-6, 1.0), st.booleans(),
           st.text("abc/_.-", max_size=10), st.integers(0, 5))
    def test_roundtrip_property(self, F, gamma, lr, aux, path, M):
        cfg = ExperimentConfig(F=F, gamma=gamma, lr=lr, aux_step_cls=aux, train_path=path, M=M)
        again = parse_config(cfg.serialize())
        assert again == cfg
        assert again.serialize() == cfg.serialize()

    def test_digest_changes_with_values(self):
        assert ExperimentConfig().digest() != ExperimentConfig(seed=1).digest()
        assert len(ExperimentConfig().digest()) == 32


def params_and_cfg(M=1):
    cfg = ExperimentConfig(d_o=6, H=8, M=M, seed=4)
    return ModelParameters.init(ModelDims(D=4, d_o=6, H=8, C=3, M=M), 4), cfg


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, tmp_path):
        params, cfg = params_and_cfg()
        save_checkpoint(tmp_path / "a.mckp", params, cfg)
        back, cfg2 = load_checkpoint(tmp_path / "a.mckp")
        assert cfg2 == cfg and back.dims == params.dims
        for k, v in params.values.items():
            assert v.tobytes() == back.values[k].tobytes()

    def test_layout(self):
        params, cfg = params_and_cfg(M=0)
        data = encode_checkpoint(params, cfg)
        text = cfg.serialize().encode()
        assert data[:4] == b"MCKP" and data[4:8] == (1).to_bytes(4, "little")
        assert data[8:40] == cfg.digest()
        assert int.from_bytes(data[40:44], "little") == len(text)
        n_values = sum(v.size for v in params.values.values())
        name_bytes = sum(len(n) for n in params.values)
        assert len(data) == 44 + len(text) + 4 + len(params.values) * 12 + name_bytes + 8 * n_values

    def test_bad_magic(self):
        params, cfg = params_and_cfg()
        with pytest.raises(BadCheckpointMagic):
            decode_checkpoint(b"NOPE" + encode_checkpoint(params, cfg)[4:])

    def test_digest_mismatch(self):
        params, cfg = params_and_cfg()
        data = bytearray(encode_checkpoint(params, cfg))
        data[10] ^= 0xFF
        with pytest.raises(ConfigDigestMismatch):
            decode_checkpoint(bytes(data))
        with pytest.raises(ConfigDigestMismatch):
            decode_checkpoint(encode_checkpoint(params, cfg), expected_digest=b"\0" * 32)
        decode_checkpoint(encode_checkpoint(params, cfg), expected_digest=cfg.digest())

    def test_truncated_and_trailing(self):
        params, cfg = params_and_cfg()
        data = encode_checkpoint(params, cfg)
        with pytest.raises(CheckpointError, match="truncated"):
            decode_checkpoint(data[:-3])
        with pytest.raises(CheckpointError, match="trailing"):
            decode_checkpoint(data + b"\0")

    def test_deterministic_bytes(self):
        params, cfg = params_and_cfg()
        assert encode_checkpoint(params, cfg) == encode_checkpoint(params.copy(), cfg)

    def test_m0_model(self):
        params, cfg = params_and_cfg(M=0)
        back, _ = decode_checkpoint(encode_checkpoint(params, cfg))
        assert back.dims.M == 0
        assert np.array_equal(back.values["gru.w_z"], params.values["gru.w_z"])
