import numpy as np
import pytest

from limo.autodiff import Rng
from limo.errors import ConfigurationError, EpisodeError, FormatError
from limo.tasks import (
    HEADER,
    GeneratorSpec,
    generate_task,
    import_embeddings,
    read_container,
    split_episode,
    write_container,
)


def _means(task):
    return np.stack([task.inputs[task.labels == k].mean(axis=0) for k in range(task.K)])


class TestGenerator:
    def test_determinism(self):
        spec = GeneratorSpec(seed=4)
        a, b = generate_task(spec), generate_task(spec)
        assert a.inputs.tobytes() == b.inputs.tobytes()
        assert a.class_tokens.tobytes() == b.class_tokens.tobytes()
        assert not np.array_equal(a.inputs, generate_task(GeneratorSpec(seed=5)).inputs)

    def test_shapes_and_norms(self):
        t = generate_task(GeneratorSpec(K=3, input_dim=8, samples_per_class=7))
        assert t.inputs.shape == (21, 8) and t.class_tokens.shape == (3, 8)
        np.testing.assert_array_equal(np.bincount(t.labels), [7, 7, 7])
        np.testing.assert_allclose(np.linalg.norm(t.inputs, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(t.class_tokens, axis=1), 1.0, atol=1e-12)

    def test_near_orthogonal_means(self):
        # class means come out of the generator as the (unit) centres it
        # perturbs; with huge concentration the per-class average recovers them
        hits = 0
        for i in range(1000):
            t = generate_task(GeneratorSpec(K=2, input_dim=512, samples_per_class=2,
                                            concentration=1e6, seed=i))
            m = _means(t)
            m /= np.linalg.norm(m, axis=1, keepdims=True)
            hits += abs(m[0] @ m[1]) <= 0.2
        assert hits / 1000 >= 0.99

    @pytest.mark.parametrize("corr", [0.0, 0.7])
    def test_label_fidelity(self, corr):
        t = generate_task(GeneratorSpec(K=10, samples_per_class=250, concentration=10,
                                        class_correlation=corr, seed=1))
        assert t.num_samples >= 2000
        pred = np.argmax(t.inputs @ _means(t).T, axis=1)
        assert (pred == t.labels).mean() >= 0.95

    def test_huge_concentration_separates(self):
        t = generate_task(GeneratorSpec(K=5, concentration=1e5, class_correlation=0.5))
        assert (np.argmax(t.inputs @ t.class_tokens.T, axis=1) == t.labels).all()

    @pytest.mark.parametrize("kw", [dict(K=1), dict(concentration=0.0), dict(class_correlation=1.0),
                                    dict(samples_per_class=1)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            generate_task(GeneratorSpec(**kw))


class TestEpisodes:
    def test_legal_exhaustive(self):
        t = generate_task(GeneratorSpec(K=4, samples_per_class=9))
        for seed in range(30):
            for shots in (1, 2, 4):
                ep = split_episode(t, shots, 9 - shots, Rng(seed))
                assert not set(ep.support) & set(ep.query)
                np.testing.assert_array_equal(np.bincount(t.labels[ep.support], minlength=4), shots)
                np.testing.assert_array_equal(t.labels[ep.support], ep.support_labels)
                assert len(ep.query) == 4 * (9 - shots)

    def test_reference_sizes(self):
        ep = split_episode(generate_task(GeneratorSpec()), 4, 25, Rng(0))
        assert len(ep.support) == 40 and len(ep.query) == 250
        assert ep.support_onehot.shape == (40, 10)

    def test_minimal(self):
        t = generate_task(GeneratorSpec(K=2, samples_per_class=2))
        ep = split_episode(t, 1, 1, Rng(0))
        assert len(ep.support) == 2 and len(ep.query) == 2
        assert not set(ep.support) & set(ep.query)

    def test_same_seed_same_split(self):
        t = generate_task(GeneratorSpec())
        a, b = split_episode(t, 4, 25, Rng(9)), split_episode(t, 4, 25, Rng(9))
        np.testing.assert_array_equal(a.support, b.support)
        np.testing.assert_array_equal(a.query, b.query)

    def test_insufficient(self):
        with pytest.raises(EpisodeError):
            split_episode(generate_task(GeneratorSpec(samples_per_class=5)), 4, 2, Rng(0))


def _container(tmp_path, n=12, d=4, k=3, seed=0):
    rng = np.random.default_rng(seed)
    img = rng.standard_normal((n, d)).astype(np.float32)
    img /= np.linalg.norm(img, axis=1, keepdims=True)
    cls = rng.standard_normal((k, d)).astype(np.float32)
    cls /= np.linalg.norm(cls, axis=1, keepdims=True)
    labels = np.arange(n) % k
    path = tmp_path / "emb.bin"
    write_container(path, img, cls, labels)
    return path, img, cls, labels


class TestContainer:
    def test_roundtrip_bit_exact(self, tmp_path):
        path, img, cls, labels = _container(tmp_path)
        a, b, c = read_container(path)
        assert a.dtype == np.float64
        assert a.astype(np.float32).tobytes() == img.tobytes()
        assert b.astype(np.float32).tobytes() == cls.tobytes()
        np.testing.assert_array_equal(c, labels)

    def test_header_layout(self, tmp_path):
        path, *_ = _container(tmp_path)
        raw = path.read_bytes()
        assert raw[:8] == b"LIMOEMB1"
        assert HEADER.unpack_from(raw)[1:] == (1, 12, 4, 3)
        assert len(raw) == 24 + 4 * (12 * 4 + 3 * 4 + 12)

    def test_import_gives_unit_rows(self, tmp_path):
        path, *_ = _container(tmp_path)
        t = import_embeddings(path)
        assert t.mode == "precomputed" and t.K == 3
        np.testing.assert_allclose(np.linalg.norm(t.embeddings, axis=1), 1.0, atol=1e-12)

    def test_truncated(self, tmp_path):
        path, *_ = _container(tmp_path)
        raw = path.read_bytes()
        for cut in (5, 30, len(raw) - 1):
            path.write_bytes(raw[:cut])
            with pytest.raises(FormatError):
                import_embeddings(path)

    def test_trailing_bytes(self, tmp_path):
        path, *_ = _container(tmp_path)
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(FormatError):
            read_container(path)

    def test_bad_magic_offset(self, tmp_path):
        path, *_ = _container(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[0:1] = b"X"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError) as e:
            read_container(path)
        assert e.value.offset == 0

    def test_bad_version(self, tmp_path):
        path, *_ = _container(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[8] = 2
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError) as e:
            read_container(path)
        assert e.value.offset == 8

    def test_label_equal_to_k(self, tmp_path):
        path, img, cls, labels = _container(tmp_path)
        labels = labels.copy()
        labels[5] = 3
        write_container(path, img, cls, labels)
        with pytest.raises(FormatError, match="label") as e:
            import_embeddings(path)
        assert e.value.offset == 24 + 4 * (12 * 4 + 3 * 4) + 4 * 5

    def test_norm_deviation(self, tmp_path):
        path, img, cls, labels = _container(tmp_path)
        img = img.copy()
        img[2] *= 1.01
        write_container(path, img, cls, labels)
        with pytest.raises(FormatError, match="norm"):
            import_embeddings(path)
        img[2] = img[2] / 1.01 * (1 + 5e-4)
        write_container(path, img, cls, labels)
        assert np.abs(np.linalg.norm(import_embeddings(path).embeddings, axis=1) - 1).max() <= 1e-12

    def test_non_finite(self, tmp_path):
        path, img, cls, labels = _container(tmp_path)
        img = img.copy()
        img[1, 0] = np.nan
        write_container(path, img, cls, labels)
        with pytest.raises(FormatError, match="non-finite"):
            read_container(path)

    def test_missing_class(self, tmp_path):
        path, img, cls, labels = _container(tmp_path)
        write_container(path, img, cls, np.zeros_like(labels))
        with pytest.raises(FormatError, match="no samples"):
            import_embeddings(path)
