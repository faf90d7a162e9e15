import numpy as np
import pytest

from csikit import autodiff as ad
from csikit.autodiff import Tensor
from csikit.conformer import (
    VALID_CRS,
    CheckpointError,
    ConformerConfig,
    CsiConformer,
    ablation_config,
    decode_checkpoint,
    encode_checkpoint,
    flops_breakdown,
    fit_input_gain,
    flops_count,
    load_model,
    param_count,
    save_model,
)
from csikit.layers import zero_biases

TOY = ConformerConfig(n_layers=1, d_model=8, seq_len=2, n_heads=2, ff_expansion=4,
                      conv_kernel=3, dropout_rate=0.0, cr=4, seed=1)
SMALL = ConformerConfig(n_layers=1, d_model=16, seq_len=40, n_heads=2, ff_expansion=2,
                        conv_kernel=31, dropout_rate=0.0, cr=8, seed=2)


def model_gradient_check(model, x, rng, h=1e-6):
    """Analytic vs central-difference gradients for every parameter of ``model``."""
    w = Tensor(rng.normal(size=model(x).shape))
    model.zero_grad()
    ad.backward(ad.sum_(model(x) * w))
    analytic, numeric = {}, {}
    for name, p in model.named_parameters():
        work = p.data.copy()

        def f():
            p.assign(work)
            with ad.no_grad():
                return ad.sum_(model(x) * w).item()

        numeric[name] = ad.numerical_grad(f, work, h)
        p.assign(work)
        analytic[name] = p.grad.copy()
    return analytic, numeric


class TestConfig:
    def test_defaults(self):
        cfg = ConformerConfig()
        assert (cfg.n_layers, cfg.d_model, cfg.seq_len, cfg.n_heads, cfg.conv_kernel) == (4, 64, 32, 8, 31)
        assert cfg.flat_dim == 2048 and cfg.head_dim == 8

    @pytest.mark.parametrize("cr,length", [(4, 512), (8, 256), (16, 128), (32, 64), (64, 32)])
    def test_codeword_lengths(self, cr, length):
        assert ConformerConfig(cr=cr).codeword_len == length

    @pytest.mark.parametrize("kw", [dict(cr=3), dict(n_heads=3), dict(conv_kernel=4), dict(dropout_rate=1.0)])
    def test_rejects(self, kw):
        with pytest.raises(ad.ConfigError):
            ConformerConfig(**kw)

    def test_input_gain_positive(self):
        with pytest.raises(ad.ConfigError):
            ConformerConfig(input_gain=0.0)

    def test_fit_input_gain(self):
        data = 0.5 + np.array([[0.1, -0.1], [0.1, -0.1]])
        assert np.isclose(fit_input_gain(data), 10.0, rtol=1e-14)
        with pytest.raises(ad.ConfigError):
            fit_input_gain(np.full((2, 2), 0.5))

    def test_decoder_undoes_input_affine(self, rng):
        cfg = ConformerConfig(n_layers=0, input_gain=7.0)
        m = CsiConformer(cfg).eval()
        zero_biases(m)
        # decoder output for a zero codeword is the centre, whatever the gain
        np.testing.assert_array_equal(m.decode(np.zeros(cfg.codeword_len)).data, 0.5)

    def test_from_dict_unknown_key(self):
        with pytest.raises(ad.ConfigError):
            ConformerConfig.from_dict({"d_model": 64, "depth": 4})

    def test_ablations(self):
        assert ablation_config("baseline") == ConformerConfig()
        assert not ablation_config("none_conv").conv_module_enabled
        c2 = ablation_config("conformer2")
        assert (c2.n_layers, c2.ff_expansion) == (3, 6)
        with pytest.raises(ad.ConfigError):
            ablation_config("bogus")


class TestShapes:
    @pytest.fixture
    def x(self):
        return np.random.default_rng(0).uniform(0, 1, (2, 32, 64))

    @pytest.mark.parametrize("cr", VALID_CRS)
    def test_round_trip_shape(self, cr, x):
        m = CsiConformer(ConformerConfig(cr=cr, n_layers=1)).eval()
        cw = m.encode(x)
        assert cw.shape == (2, 2048 // cr)
        assert m.decode(cw).shape == (2, 32, 64)

    def test_unbatched(self, x):
        m = CsiConformer(ConformerConfig(n_layers=1)).eval()
        assert m.encode(x[0]).shape == (512,)

    def test_wrong_input(self):
        m = CsiConformer(ConformerConfig(n_layers=1))
        with pytest.raises(ad.DimensionError):
            m.encode(np.zeros((32, 63)))
        with pytest.raises(ad.DimensionError):
            m.decode(np.zeros(511))

    def test_eval_decode_deterministic(self, x):
        m = CsiConformer(ConformerConfig(n_layers=1)).eval()
        cw = m.encode(x).data
        np.testing.assert_array_equal(m.decode(cw).data, m.decode(cw).data)

    def test_dropout_active_in_training(self, x):
        m = CsiConformer(ConformerConfig(n_layers=1)).train()
        assert not np.array_equal(m(x).data, m(x).data)


class TestLayerProperties:
    @pytest.fixture
    def layer(self):
        return CsiConformer(SMALL).eval().encoder_layers[0]

    @pytest.mark.parametrize("final_norm", [False, True])
    def test_zero_bias_zero_codeword(self, final_norm):
        m = CsiConformer(ConformerConfig(n_layers=2, input_center=0.0, final_norm=final_norm)).eval()
        zero_biases(m)
        assert not np.any(m.encode(np.zeros((32, 64))).data)

    def test_centre_maps_to_zero_codeword(self):
        m = CsiConformer(ConformerConfig(n_layers=2, input_gain=40.0)).eval()
        zero_biases(m)
        assert not np.any(m.encode(np.full((32, 64), 0.5)).data)

    def test_zeroed_branches_give_identity(self, layer, rng):
        for p in layer.parameters():
            p.assign(np.zeros_like(p.data))
        x = rng.normal(size=(40, 16))
        np.testing.assert_array_equal(layer(Tensor(x)).data, x)

    def test_zeroed_branches_reduce_to_layer_norm(self, rng):
        layer = CsiConformer(SMALL.replace(final_norm=True)).eval().encoder_layers[0]
        for name, p in layer.named_parameters():
            if not name.startswith("final_norm"):
                p.assign(np.zeros_like(p.data))
        x = rng.normal(size=(40, 16))
        expected = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + SMALL.ln_eps)
        np.testing.assert_allclose(layer(Tensor(x)).data, expected, rtol=1e-12, atol=1e-12)

    def test_mhsa_permutation_equivariant(self, layer, rng):
        x = rng.normal(size=(3, 40, 16))
        perm = rng.permutation(40)
        out = layer.mhsa(Tensor(x)).data
        out_perm = layer.mhsa(Tensor(x[:, perm])).data
        # only float summation order differs between the two evaluations
        np.testing.assert_allclose(out_perm, out[:, perm], rtol=0, atol=1e-13)

    def test_conv_receptive_field(self, layer, rng):
        x = rng.normal(size=(40, 16))
        base = layer.conv(Tensor(x)).data
        bumped = x.copy()
        bumped[20] += rng.normal(size=16)  # a constant shift would vanish in the layer norm
        changed = np.abs(layer.conv(Tensor(bumped)).data - base).max(axis=1) > 0
        np.testing.assert_array_equal(np.flatnonzero(changed), np.arange(5, 36))

    def test_conv_disabled(self, rng):
        layer = CsiConformer(ablation_config("none_conv", SMALL)).encoder_layers[0]
        assert layer.conv is None
        with pytest.raises(ad.UsageError):
            layer.conv_module(Tensor(rng.normal(size=(40, 16))))
        assert layer(Tensor(rng.normal(size=(40, 16)))).shape == (40, 16)


class TestGradients:
    @pytest.mark.parametrize("variant", ["baseline", "none_conv"])
    def test_every_parameter_receives_gradient(self, variant, rng):
        m = CsiConformer(ablation_config(variant, ConformerConfig(n_layers=2, dropout_rate=0.0)))
        out = m(rng.uniform(0, 1, (2, 32, 64)))
        ad.backward(ad.sum_(ad.square(out - Tensor(rng.uniform(0, 1, out.shape)))))
        dead = [n for n, p in m.named_parameters() if not np.linalg.norm(p.grad) > 0]
        assert dead == []

    @pytest.mark.parametrize("variant,final_norm", [("baseline", False), ("none_conv", False), ("baseline", True)])
    def test_whole_model_finite_differences(self, variant, final_norm, rng):
        m = CsiConformer(ablation_config(variant, TOY.replace(final_norm=final_norm, input_gain=3.0))).eval()
        x = Tensor(rng.normal(size=(3, 2, 8)))
        analytic, numeric = model_gradient_check(m, x, rng)
        a = np.concatenate([g.ravel() for g in analytic.values()])
        n = np.concatenate([g.ravel() for g in numeric.values()])
        assert ad.rel_error(a, n) < 1e-4
        for name in analytic:
            # the key bias cancels in the softmax, so its true gradient is exactly zero
            if max(np.linalg.norm(analytic[name]), np.linalg.norm(numeric[name])) > 1e-8:
                assert ad.rel_error(analytic[name], numeric[name]) < 1e-4, name

    def test_key_bias_gradient_is_zero(self, rng):
        m = CsiConformer(TOY).eval()
        ad.backward(ad.sum_(ad.square(m(rng.normal(size=(2, 2, 8))))))
        assert np.abs(m.encoder_layers[0].mhsa.key.bias.grad).max() < 1e-12


class TestCounts:
    def test_param_count_full_model(self):
        assert param_count(CsiConformer(ConformerConfig())) == 2_883_584
        # the optional closing norms add 2 * 64 parameters to each of the 8 layers
        assert param_count(CsiConformer(ConformerConfig(final_norm=True))) == 2_884_608

    def test_fc_pair(self):
        rows = [r for r in flops_breakdown(ConformerConfig(cr=4)) if r[1] == "fc"]
        assert sum(r[2] for r in rows) == 2_097_152

    def test_totals(self):
        full = [flops_count(ConformerConfig(cr=cr)) for cr in VALID_CRS]
        assert full == [27_770_880, 26_722_304, 26_198_016, 25_935_872, 25_804_800]
        no_attn = [flops_count(ConformerConfig(cr=cr), exclude=("attention_proj", "attention_product"))
                   for cr in VALID_CRS]
        assert no_attn == [22_528_000, 21_479_424, 20_955_136, 20_692_992, 20_561_920]

    def test_breakdown_sums_to_total(self):
        cfg = ConformerConfig(cr=16)
        assert sum(r[2] for r in flops_breakdown(cfg)) == flops_count(cfg)

    def test_none_conv_is_cheaper(self):
        cfg = ConformerConfig(cr=16)
        assert flops_count(ablation_config("none_conv", cfg)) < flops_count(cfg)

    def test_depthwise_count_by_hand(self):
        rows = dict((r[0], r[2]) for r in flops_breakdown(ConformerConfig()))
        assert rows["encoder_layers.0.conv.depthwise"] == 32 * 64 * 31


class TestCheckpoint:
    def test_byte_exact_round_trip(self, tmp_path):
        m = CsiConformer(ConformerConfig(n_layers=1, cr=16, seed=4))
        save_model(tmp_path / "a.ckpt", m, extra={"note": "x"})
        m2, meta, rest = load_model(tmp_path / "a.ckpt")
        assert meta["note"] == "x" and rest == {}
        assert m2.cfg == m.cfg
        save_model(tmp_path / "b.ckpt", m2, extra={"note": "x"})
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_outputs_identical_after_reload(self, tmp_path, rng):
        m = CsiConformer(ConformerConfig(n_layers=1, seed=4)).eval()
        save_model(tmp_path / "a.ckpt", m)
        m2 = load_model(tmp_path / "a.ckpt")[0].eval()
        x = rng.uniform(0, 1, (32, 64))
        np.testing.assert_array_equal(m(x).data, m2(x).data)

    def test_extra_params_kept(self, tmp_path):
        m = CsiConformer(ConformerConfig(n_layers=0))
        save_model(tmp_path / "a.ckpt", m, extra_params={"quantizer.table": np.eye(2)})
        _, _, rest = load_model(tmp_path / "a.ckpt")
        np.testing.assert_array_equal(rest["quantizer.table"], np.eye(2))

    def test_layout(self):
        raw = encode_checkpoint({"a": 1}, {"w": np.array([[1.0, 2.0]])})
        assert raw[:4] == b"CSCM"
        assert raw[4:6] == (1).to_bytes(2, "little")
        assert raw[-16:] == np.array([1.0, 2.0], dtype="<f8").tobytes()

    @pytest.mark.parametrize("mutate", [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + b"\x09\x00" + b[6:],
        lambda b: b[:-3],
        lambda b: b + b"\x00",
    ])
    def test_corrupt(self, mutate):
        raw = encode_checkpoint({"a": 1}, {"w": np.arange(6.0).reshape(2, 3)})
        with pytest.raises(CheckpointError):
            decode_checkpoint(mutate(raw))


@pytest.fixture
def rng():
    return np.random.default_rng(17)
