import numpy as np
import pytest

from limo import autodiff as ad
from limo.autodiff import Rng, Tensor
from limo.errors import ConfigurationError, ContractError, DimensionError
from limo.model import (
    LinearHead,
    LoraAdapter,
    TowerConfig,
    build_model,
    encode_classes,
    encode_images,
    load_checkpoint,
    lora_forward,
    save_checkpoint,
)
from limo.tasks import GeneratorSpec, generate_task

CFG = TowerConfig()


@pytest.fixture(scope="module")
def task():
    return generate_task(GeneratorSpec(K=5, samples_per_class=4, class_correlation=0.5), Rng(3))


def _trainable_count(model):
    return len(model.trainable())


class TestBuild:
    def test_trainable_counts(self, task):
        assert _trainable_count(build_model(CFG, "lora")) == 2 * 3 * CFG.num_blocks * 2
        assert _trainable_count(build_model(CFG, "lora", freeze_text=True)) == 2 * 3 * CFG.num_blocks
        assert [k for k, _ in build_model(CFG, "lvp").trainable()] == ["vision.proj"]
        assert [k for k, _ in build_model(CFG, "prompt", class_tokens=task.class_tokens).trainable()] \
            == ["text.prompt_context"]
        assert _trainable_count(build_model(CFG, "frozen")) == 0

    def test_backbone_shared_across_strategies(self, task):
        a = build_model(CFG, "frozen").snapshot()
        b = build_model(CFG, "lora", rng=Rng(99)).snapshot()
        for k, v in a.items():
            np.testing.assert_array_equal(v, b[k])

    def test_unknown_strategy(self):
        with pytest.raises(ConfigurationError):
            build_model(CFG, "finetune")

    def test_prompt_needs_tokens(self):
        with pytest.raises(ConfigurationError):
            build_model(CFG, "prompt")

    def test_bad_config(self):
        with pytest.raises(ConfigurationError):
            TowerConfig(hidden_dim=0)


class TestLora:
    def _setup(self, gamma=None, randomize_b=True):
        rng = Rng(5)
        W = Tensor(rng.normal((6, 4)))
        ada = LoraAdapter.create("w", W, 2, rng.fork("a"), gamma=gamma, dropout_p=0.0)
        if randomize_b:
            ada.B.data = rng.fork("b").normal(ada.B.shape)
        h = Tensor(rng.fork("h").normal((3, 4)))
        return h, W, ada

    def test_dense_materialisation(self):
        h, W, ada = self._setup()
        dense = W.data + ada.gamma * ada.B.data @ ada.A.data
        out = lora_forward(h, W, ada).data
        np.testing.assert_allclose(out, h.data @ dense.T, atol=1e-12)

    def test_zero_b_is_identity(self):
        h, W, ada = self._setup(randomize_b=False)
        np.testing.assert_array_equal(lora_forward(h, W, ada).data, lora_forward(h, W).data)

    def test_zero_gamma_is_identity(self):
        h, W, ada = self._setup(gamma=0.0)
        np.testing.assert_array_equal(lora_forward(h, W, ada).data, (h @ ad.transpose(W)).data)

    def test_default_gamma(self):
        _, _, ada = self._setup()
        assert ada.gamma == 0.5

    def test_init(self):
        W = Tensor(np.zeros((64, 200)))
        ada = LoraAdapter.create("w", W, 4, Rng(0))
        np.testing.assert_array_equal(ada.B.data, 0.0)
        assert abs(ada.A.data.std() - np.sqrt(2 / 200)) < 0.01

    @pytest.mark.parametrize("rank", [0, 4, 6])
    def test_rank_bounds(self, rank):
        with pytest.raises(ConfigurationError):
            LoraAdapter.create("w", Tensor(np.zeros((6, 4))), rank, Rng(0))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            lora_forward(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 4))))

    def test_dropout_only_in_training(self):
        h, W, ada = self._setup()
        ada.dropout_p = 0.5
        ev = lora_forward(h, W, ada).data
        tr = lora_forward(h, W, ada, training=True, rng=Rng(1)).data
        assert not np.array_equal(ev, tr)
        with pytest.raises(ContractError):
            lora_forward(h, W, ada, training=True)


class TestEncoders:
    def test_unit_norm_and_shapes(self, task):
        m = build_model(CFG, "frozen")
        img = encode_images(m, task.inputs)
        cls = encode_classes(m, task.class_tokens)
        assert img.shape == (task.num_samples, CFG.embed_dim)
        assert cls.shape == (task.K, CFG.embed_dim)
        for t in (img, cls):
            np.testing.assert_allclose(np.linalg.norm(t.data, axis=1), 1.0, atol=1e-9)

    def test_fresh_lora_matches_frozen(self, task):
        f = build_model(CFG, "frozen")
        l = build_model(CFG, "lora").train(Rng(0))
        np.testing.assert_array_equal(l.encode_images(task.inputs).data, f.encode_images(task.inputs).data)
        np.testing.assert_array_equal(l.encode_classes(task.class_tokens).data,
                                      f.encode_classes(task.class_tokens).data)

    def test_fresh_prompt_matches_frozen(self, task):
        f = build_model(CFG, "frozen")
        p = build_model(CFG, "prompt", class_tokens=task.class_tokens)
        np.testing.assert_array_equal(p.encode_classes().data, f.encode_classes(task.class_tokens).data)

    def test_prompt_perturbation_is_local(self, task):
        p = build_model(CFG, "prompt", class_tokens=task.class_tokens)
        before = p.encode_classes().data
        p.prompts.context.data[2] += 0.3
        after = p.encode_classes().data
        changed = np.flatnonzero(np.abs(after - before).max(axis=1) > 0)
        assert changed.tolist() == [2]

    def test_bad_input_width(self):
        with pytest.raises(DimensionError):
            build_model(CFG, "frozen").encode_images(np.ones((2, 3)))

    def test_single_class_rejected(self, task):
        with pytest.raises(ConfigurationError):
            build_model(CFG, "frozen").encode_classes(task.class_tokens[:1])

    def test_gradients_reach_adapters(self, task):
        m = build_model(CFG, "lora")
        for _, t in m.trainable():
            if t.name.endswith("lora_B"):
                t.data = Rng(1).normal(t.shape, 0.1)
        img = m.encode_images(task.inputs)
        cls = m.encode_classes(task.class_tokens)
        ad.sum(ad.mul(ad.matmul(img, ad.transpose(cls)), Tensor(Rng(2).normal((img.shape[0], 5))))).backward()
        for name, t in m.trainable():
            assert np.abs(t.grad).sum() > 0, name


class TestLinearHead:
    def test_identity_start(self, task):
        emb = task.class_tokens
        head = LinearHead(emb, "lvp")
        np.testing.assert_allclose(head.encode_images(emb).data, emb, atol=1e-12)
        assert [k for k, _ in head.trainable()] == ["vision.proj"]
        assert LinearHead(emb, "frozen").trainable() == []

    def test_rejects_lora(self, task):
        with pytest.raises(ConfigurationError):
            LinearHead(task.class_tokens, "lora")


class TestCheckpoint:
    @pytest.mark.parametrize("strategy", ["lora", "lvp", "prompt", "frozen"])
    def test_roundtrip(self, tmp_path, task, strategy):
        m = build_model(CFG, strategy, class_tokens=task.class_tokens, rank=3)
        for _, t in m.trainable():
            t.data = t.data + Rng(4).normal(t.shape, 0.05)
        path = tmp_path / "m.npz"
        save_checkpoint(m, path)
        back = load_checkpoint(path)
        assert back.strategy == strategy
        assert back.trainable_mask == m.trainable_mask
        for k, v in m.snapshot().items():
            np.testing.assert_array_equal(back.snapshot()[k], v)
        if strategy == "lora":
            assert {a.rank for a in back.adapters.values()} == {3}
