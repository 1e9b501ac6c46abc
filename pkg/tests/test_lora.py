"""Tests for low-rank adapters."""

import numpy as np
import pytest

from molx import tensor as T
from molx.data import CorpusSpec, build_pretrain_dataset, synth_corpus
from molx.lora import LoraConfig, LoraLinear, attach_lora, lora_parameter_count, merge_lora
from molx.model import DecoderLM, ModelConfig, MolXLM, collate_examples
from molx.nn import ForwardContext, Initializer, Linear, ParameterStore
from molx.tensor import Tensor

CFG = ModelConfig()
EXAMPLES = build_pretrain_dataset(synth_corpus(CorpusSpec(20, seed=2)), seed=0)[:4]


def _randomize_b(module, seed=0):
    rng = np.random.default_rng(seed)
    for name, p in ParameterStore.of(module).items():
        if name.endswith("lora_b"):
            p.data[...] = rng.standard_normal(p.shape).astype(p.data.dtype) * 0.05


class TestLoraLinear:
    def test_zero_init_is_identity(self):
        base = Linear(Initializer(0, "l"), 16, 8)
        x = Tensor(np.random.default_rng(1).standard_normal((5, 16)).astype(np.float32))
        wrapped = LoraLinear(base, Initializer(0, "l"), LoraConfig(rank=4), 0)
        assert wrapped(x).data.tobytes() == base(x).data.tobytes()

    def test_closed_form_delta(self):
        base = Linear(Initializer(0, "l"), 6, 5)
        cfg = LoraConfig(rank=2, alpha=4.0)
        layer = LoraLinear(base, Initializer(0, "l"), cfg, 0)
        _randomize_b(layer)
        x = np.random.default_rng(2).standard_normal((3, 6))
        with T.default_dtype(np.float64):
            ParameterStore.of(layer).astype(np.float64)
            out = layer(Tensor(x)).data
        w = base.weight.data + 2.0 * layer.lora_b.data @ layer.lora_a.data
        np.testing.assert_allclose(out, x @ w.T + base.bias.data, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("rank", [0, 5, 9])
    def test_rank_bounds(self, rank):
        with pytest.raises(ValueError):
            LoraLinear(Linear(Initializer(0, "l"), 5, 8), Initializer(0, "l"), LoraConfig(rank=rank), 0)

    def test_dropout_only_in_training(self):
        base = Linear(Initializer(0, "l"), 16, 16)
        layer = LoraLinear(base, Initializer(0, "l"), LoraConfig(rank=4, dropout=0.5), 0)
        _randomize_b(layer)
        x = Tensor(np.ones((2, 16), dtype=np.float32))
        a, b = layer(x).data, layer(x).data
        assert a.tobytes() == b.tobytes()
        c = layer(x, ForwardContext.training(0, 0)).data
        assert not np.array_equal(a, c)


class TestAttach:
    def test_targets_and_names(self):
        dec = DecoderLM(Initializer(0, "decoder"), CFG)
        assert attach_lora(dec, LoraConfig()) == 6 * CFG.dec_layers
        names = list(ParameterStore.of(dec))
        assert "decoder.blocks.0.attn.q_proj.lora_a" in names
        assert "decoder.blocks.1.mlp.down_proj.lora_b" in names

    def test_parameter_count_closed_form(self):
        dec = DecoderLM(Initializer(0, "decoder"), CFG)
        before = ParameterStore.of(dec).count()
        attach_lora(dec, LoraConfig(rank=8))
        added = ParameterStore.of(dec).count() - before
        d, m = CFG.d_model, CFG.dec_mlp
        shapes = [(d, d)] * 4 + [(m, d), (d, m)]
        assert added == lora_parameter_count(shapes * CFG.dec_layers, 8)
        assert added == CFG.dec_layers * 8 * (4 * 2 * d + 2 * (d + m))

    def test_whole_model_identity(self):
        model = MolXLM(CFG, seed=4)
        batch = collate_examples(EXAMPLES, CFG)
        before = model.logits(batch).data
        attach_lora(model.decoder, LoraConfig())
        assert model.logits(batch).data.tobytes() == before.tobytes()

    def test_merge_matches_adapted_forward(self):
        dec = DecoderLM(Initializer(0, "decoder"), CFG)
        attach_lora(dec, LoraConfig())
        _randomize_b(dec, 3)
        ids = np.random.default_rng(0).integers(3, 90, size=(4, 12))
        adapted = dec(ids).data
        assert merge_lora(dec) == 12
        assert not any(".lora_" in n for n in ParameterStore.of(dec))
        np.testing.assert_allclose(dec(ids).data, adapted, atol=1e-5)
