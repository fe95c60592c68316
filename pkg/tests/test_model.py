import numpy as np
import pytest

from diffctr import autodiff as ad
from diffctr import model as md
from diffctr.data import feature_schema
from diffctr.errors import CheckpointError, DataError, ShapeError
from diffctr.optim import adam_step
from diffctr.rng import stream


def tiny_schema(vocabs=(4, 3, 5)):
    return feature_schema(list(vocabs))


def make_model(blocks=2, heads=2, d=8, seed=0, vocabs=(4, 3, 5), tied=False):
    cfg = md.ModelConfig(embed_dim=d, blocks=blocks, heads=heads, ffn_width=16,
                         temperature=0.1, tied_embeddings=tied)
    return md.Model.init(cfg, tiny_schema(vocabs), seed)


def random_tokens(model, rng, n=6, allow_mask=True):
    cols = []
    for f in model.schema:
        hi = f.vocab_size + (1 if allow_mask else 0)
        cols.append(rng.integers(0, hi, size=n))
    return np.stack(cols, axis=1)


def test_zero_blocks_is_identity_network():
    model = make_model(blocks=0)
    rng = stream(1, "t")
    tokens = random_tokens(model, rng)
    out = md.encode(model, tokens).data
    for j, f in enumerate(model.schema):
        table = model.params.get_data(f"embed/input/{f.name}")
        pos = model.params.get_data("embed/field_pos")[j]
        np.testing.assert_array_equal(out[:, j, :], table[tokens[:, j]] + pos)


def test_position_permutation_equivariance():
    model = make_model(blocks=2)
    rng = stream(2, "t")
    tokens = random_tokens(model, rng)
    order = (2, 0, 3, 1)
    base = md.encode(model, tokens).data
    permuted = md.encode(model, tokens, order=order).data
    for j, f in enumerate(order):
        np.testing.assert_allclose(permuted[:, j, :], base[:, f, :], atol=1e-12)


def test_encode_deterministic():
    model = make_model()
    tokens = random_tokens(model, stream(3, "t"))
    a = md.encode(model, tokens).data
    b = md.encode(model, tokens).data
    np.testing.assert_array_equal(a, b)


def test_encode_rejects_out_of_range_token():
    model = make_model()
    tokens = random_tokens(model, stream(4, "t"))
    tokens[0, 0] = model.schema[0].vocab_size + 1  # beyond the mask id
    with pytest.raises(ShapeError):
        md.encode(model, tokens)


def test_field_logits_parallel_and_orthogonal():
    model = make_model(blocks=0, d=4)
    context = ad.const(np.array([[2.0, 0.0, 0.0, 0.0]]))
    rows = np.zeros((3, 4))
    rows[0] = [5.0, 0, 0, 0]   # parallel
    rows[1] = [0, 1.0, 0, 0]   # orthogonal
    rows[2] = [-1.0, 0, 0, 0]  # antiparallel
    model.params.set_data("embed/target/f1", rows)
    logits = md.field_logits(model, 1, context, np.array([0, 1, 2])).data
    np.testing.assert_allclose(logits, [[10.0, 0.0, -10.0]], atol=1e-12)


def test_field_logits_softmax_example():
    cfg = md.ModelConfig(embed_dim=4, blocks=0, heads=1, ffn_width=4, temperature=0.2)
    model = md.Model.init(cfg, tiny_schema(), seed=0)
    context = ad.const(np.array([[1.0, 0.0, 0.0, 0.0]]))
    rows = np.zeros((4, 4))  # f0 has vocab 4; only the first two rows matter here
    rows[0] = [0.9, np.sqrt(1 - 0.81), 0, 0]
    rows[1] = [0.1, np.sqrt(1 - 0.01), 0, 0]
    rows[2] = [0, 0, 1, 0]
    rows[3] = [0, 0, 0, 1]
    model.params.set_data("embed/target/f0", rows)
    logits = md.field_logits(model, 0, context, np.array([0, 1]))
    probs = ad.softmax(logits, axis=1).data[0]
    np.testing.assert_allclose(probs, [0.98201379, 0.01798621], atol=1e-7)


def test_field_logits_rejects_empty_candidates():
    model = make_model()
    context = ad.const(np.zeros((1, 8)))
    with pytest.raises(DataError):
        md.field_logits(model, 0, context, np.array([], dtype=np.int64))


class TestCtrScore:
    def build(self, label_rows, temperature=0.2):
        cfg = md.ModelConfig(embed_dim=4, blocks=0, heads=1, ffn_width=4,
                             temperature=temperature)
        model = md.Model.init(cfg, tiny_schema(), seed=1)
        pos = np.zeros((4, 4))
        model.params.set_data("embed/field_pos", pos)
        label_input = model.params.get_data("embed/input/label").copy()
        label_input[2] = [1.0, 0.0, 0.0, 0.0]  # mask row becomes the probe direction
        model.params.set_data("embed/input/label", label_input)
        model.params.set_data("embed/target/label", np.asarray(label_rows, dtype=float))
        return model

    def test_equal_logits_give_half(self):
        model = self.build([[0.5, 0.5, 0, 0], [0.5, 0.5, 0, 0]])
        tokens = np.array([[0, 0, 0, 0], [1, 2, 3, 1]])
        np.testing.assert_allclose(md.ctr_score(model, tokens), [0.5, 0.5], atol=1e-12)

    def test_logit_gap_of_two(self):
        rows = [[0.5, np.sqrt(1 - 0.25), 0, 0], [0.9, np.sqrt(1 - 0.81), 0, 0]]
        model = self.build(rows)  # cos 0.5 vs 0.9, temperature 0.2 -> gap 2.0
        score = md.ctr_score(model, np.array([[0, 0, 0, 0]]))
        np.testing.assert_allclose(score, [1 / (1 + np.exp(-2.0))], atol=1e-10)

    def test_label_token_in_input_is_ignored(self):
        model = make_model(blocks=2)
        tokens = random_tokens(model, stream(5, "t"), allow_mask=False)
        flipped = tokens.copy()
        flipped[:, -1] = 1 - flipped[:, -1]
        np.testing.assert_array_equal(md.ctr_score(model, tokens), md.ctr_score(model, flipped))

    def test_masked_feature_rejected(self):
        model = make_model()
        tokens = random_tokens(model, stream(6, "t"), allow_mask=False)
        tokens[0, 1] = model.schema[1].vocab_size
        with pytest.raises(DataError, match="f1"):
            md.ctr_score(model, tokens)

    def test_scores_strictly_inside_unit_interval(self):
        model = make_model(blocks=1)
        tokens = random_tokens(model, stream(7, "t"), n=32, allow_mask=False)
        s = md.ctr_score(model, tokens)
        assert np.all(s > 0) and np.all(s < 1)


def test_mask_row_receives_gradient_when_masked():
    model = make_model(blocks=1, d=8)
    tokens = random_tokens(model, stream(8, "t"), n=4, allow_mask=False)
    tokens[:, 0] = model.schema[0].vocab_size  # mask field 0 everywhere

    def fn(params, _):
        ctx = ad.take_position(md.encode(model, tokens), 0)
        logits = md.full_vocab_logits(model, 0, ctx)
        return ad.tmean(ad.logsumexp(logits, axis=1))

    _, grads = ad.forward_backward(fn, model.params)
    mask_row_grad = grads["embed/input/f0"][model.schema[0].vocab_size]
    assert np.any(mask_row_grad != 0)


def test_grad_check_through_encode_and_logits():
    model = make_model(blocks=1, heads=2, d=4, vocabs=(3, 3))
    rng = stream(9, "t")
    tokens = random_tokens(model, rng, n=3)

    def fn(params, _):
        ctx = ad.take_position(md.encode(model, tokens), 1)
        logits = md.full_vocab_logits(model, 1, ctx)
        # cross-entropy head against fixed target tokens
        target = np.array([0, 2, 1])
        onehot = np.zeros((3, 3))
        onehot[np.arange(3), target] = 1.0
        return -ad.tmean(ad.tsum(ad.mul(ad.log_softmax(logits, axis=1), ad.const(onehot)), axis=1))

    reports = ad.grad_check(fn, model.params, h=1e-5, tol=1e-5)
    assert all(r.passed for r in reports), [(r.name, r.max_rel_error) for r in reports if not r.passed]


def test_tied_embeddings_share_table():
    model = make_model(tied=True)
    assert "embed/target/f0" not in model.params.names()
    ctx = ad.const(np.zeros((1, 8)) + 0.3)
    logits = md.field_logits(model, 0, ctx, np.array([0, 1]))
    assert logits.data.shape == (1, 2)


class TestCheckpoint:
    def test_full_round_trip_bit_identical(self, tmp_path):
        model = make_model(seed=13)
        path = str(tmp_path / "m.dgct")
        md.save_checkpoint(model, path, meta={"seed": 13, "step": 7})
        again = md.load_checkpoint(path, "full", model.cfg, model.schema, seed=99)
        for name in model.params.names():
            np.testing.assert_array_equal(model.params.get_data(name), again.params.get_data(name))

    def test_embeddings_only(self, tmp_path):
        model = make_model(seed=13)
        path = str(tmp_path / "m.dgct")
        md.save_checkpoint(model, path)
        part = md.load_checkpoint(path, "embeddings-only", model.cfg, model.schema, seed=99)
        np.testing.assert_array_equal(
            part.params.get_data("embed/input/f0"), model.params.get_data("embed/input/f0")
        )
        assert not np.array_equal(
            part.params.get_data("net/b0/h0/wq"), model.params.get_data("net/b0/h0/wq")
        )

    def test_scoring_network_only(self, tmp_path):
        model = make_model(seed=13)
        path = str(tmp_path / "m.dgct")
        md.save_checkpoint(model, path)
        part = md.load_checkpoint(path, "scoring-network-only", model.cfg, model.schema, seed=99)
        np.testing.assert_array_equal(
            part.params.get_data("net/b1/ffn_w1"), model.params.get_data("net/b1/ffn_w1")
        )
        assert not np.array_equal(
            part.params.get_data("embed/input/f0"), model.params.get_data("embed/input/f0")
        )

    def test_corrupt_byte_detected(self, tmp_path):
        model = make_model()
        path = tmp_path / "m.dgct"
        md.save_checkpoint(model, str(path))
        blob = bytearray(path.read_bytes())
        blob[len(blob) - 40] ^= 0xFF  # inside the payload
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            md.load_checkpoint(str(path), "full", model.cfg, model.schema, seed=0)

    def test_truncated_file_detected(self, tmp_path):
        model = make_model()
        path = tmp_path / "m.dgct"
        md.save_checkpoint(model, str(path))
        path.write_bytes(path.read_bytes()[:40])
        with pytest.raises(CheckpointError):
            md.load_checkpoint(str(path), "full", model.cfg, model.schema, seed=0)

    def test_fingerprint_mismatch_full_mode(self, tmp_path):
        model = make_model(vocabs=(4, 3, 5))
        path = str(tmp_path / "m.dgct")
        md.save_checkpoint(model, path)
        other_schema = tiny_schema((4, 3, 9))
        with pytest.raises(CheckpointError, match="fingerprint"):
            md.load_checkpoint(path, "full", model.cfg, other_schema, seed=0)

    def test_scoring_transfer_across_vocabularies(self, tmp_path):
        model = make_model(vocabs=(4, 3, 5))
        path = str(tmp_path / "m.dgct")
        md.save_checkpoint(model, path)
        other_schema = tiny_schema((6, 2, 8))
        part = md.load_checkpoint(path, "scoring-network-only", model.cfg, other_schema, seed=1)
        np.testing.assert_array_equal(
            part.params.get_data("net/out_proj"), model.params.get_data("net/out_proj")
        )

    def test_unknown_mode(self, tmp_path):
        model = make_model()
        path = str(tmp_path / "m.dgct")
        md.save_checkpoint(model, path)
        with pytest.raises(CheckpointError, match="mode"):
            md.load_checkpoint(path, "partial", model.cfg, model.schema, seed=0)


def test_training_updates_all_parameter_groups():
    model = make_model(blocks=1, d=8)
    rng = stream(10, "t")
    tokens = random_tokens(model, rng, n=8, allow_mask=False)
    tokens[:, 0] = model.schema[0].vocab_size
    before = {n: model.params.get_data(n).copy() for n in model.params.names()}

    def fn(params, _):
        ctx = ad.take_position(md.encode(model, tokens), 0)
        logits = md.full_vocab_logits(model, 0, ctx)
        onehot = np.zeros((8, model.schema[0].vocab_size))
        onehot[np.arange(8), tokens[:, 1] % model.schema[0].vocab_size] = 1.0
        return -ad.tmean(ad.tsum(ad.mul(ad.log_softmax(logits, axis=1), ad.const(onehot)), axis=1))

    _, grads = ad.forward_backward(fn, model.params)
    adam_step(model.params, grads, lr=1e-2)
    moved = [n for n in before if not np.array_equal(before[n], model.params.get_data(n))]
    assert "embed/input/f0" in moved and "net/b0/h0/wq" in moved
