import numpy as np
import pytest

from egt import tensor as T
from egt.errors import ConfigError, ContractError, ShapeError
from egt.model import NUM_EXITS, PAPER_CHANNELS, ModelConfig, load_checkpoint, model_new, save_checkpoint
from egt.tensor import Tensor

from helpers import TINY_CHANNELS, tiny_model


def expected_param_count(channels, in_ch=3, classes=9):
    total, c_in = 0, in_ch
    for c in channels:
        total += c * c_in * 9 + c  # 3x3 conv + bias
        total += 2 * c  # bn gamma, beta
        total += c + 1  # 1x1 attention conv
        total += classes * c + classes  # head
        c_in = c
    return total


def test_default_architecture():
    cfg = ModelConfig()
    assert cfg.channels == PAPER_CHANNELS == (64, 128, 256, 512, 512)
    assert cfg.image_size == 64 and cfg.num_classes == 9


def test_default_parameter_count():
    with T.precision("float32"):
        m = model_new(ModelConfig(), seed=0)
    assert m.parameter_count() == expected_param_count(PAPER_CHANNELS) == 3_928_498


def test_parameter_names():
    names = list(tiny_model().named_parameters())
    assert names[:4] == ["block1.conv.weight", "block1.conv.bias", "block1.bn.gamma", "block1.bn.beta"]
    assert "attn5.weight" in names and "head5.bias" in names
    assert len(names) == 8 * NUM_EXITS


def test_init_is_seed_deterministic():
    a, b, c = tiny_model(3), tiny_model(3), tiny_model(4)
    for (n, p), q, r in zip(a.named_parameters().items(), b.parameters(), c.parameters()):
        assert p.data.tobytes() == q.data.tobytes(), n
    assert any(p.data.tobytes() != r.data.tobytes() for p, r in zip(a.parameters(), c.parameters()))


@pytest.mark.parametrize("image,dims", [(32, [16, 8, 4, 2, 2]), (64, [32, 16, 8, 4, 4]), (48, [24, 12, 6, 3, 3])])
def test_attention_map_sizes(image, dims):
    m = tiny_model(image=image)
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 3, image, image)))
    bundle = m.forward(x)
    assert [a.shape[2] for a in bundle.attention] == dims
    assert all(a.shape == (2, 1, d, d) for a, d in zip(bundle.attention, dims))
    assert all(lg.shape == (2, 9) for lg in bundle.logits)
    assert m.config.spatial_sizes() == dims


def test_attention_in_unit_interval():
    m = tiny_model(1)
    bundle = m.forward(Tensor(np.random.default_rng(1).uniform(size=(3, 3, 32, 32))))
    for a in bundle.attention:
        assert a.data.min() > 0 and a.data.max() < 1


def test_forward_until_matches_full_forward_bitwise():
    m = tiny_model(2)
    x = Tensor(np.random.default_rng(2).uniform(size=(2, 3, 32, 32)))
    full = m.forward(x, "eval")
    for i in range(1, NUM_EXITS + 1):
        logits, a, _ = m.forward_until(x, i)
        assert logits.data.tobytes() == full.logits[i - 1].data.tobytes()
        assert a.data.tobytes() == full.attention[i - 1].data.tobytes()


def test_forward_until_cost_strictly_increasing():
    m = tiny_model()
    x = Tensor(np.zeros((1, 3, 32, 32)))
    costs = [m.forward_until(x, i)[2] for i in range(1, NUM_EXITS + 1)]
    assert all(b > a for a, b in zip(costs, costs[1:]))


def test_forward_until_cost_formula():
    # block 1 at 32px, 4 channels: 4*3*9*32*32 conv MACs; exit 1 on a 16x16 map: 2*4*256 + 4*9
    m = tiny_model()
    _, _, macs = m.forward_until(Tensor(np.zeros((1, 3, 32, 32))), 1)
    assert macs == 4 * 3 * 9 * 32 * 32 + 2 * 4 * 256 + 4 * 9


@pytest.mark.parametrize("bad", [0, 6, -1])
def test_forward_until_rejects_bad_index(bad):
    with pytest.raises(ContractError):
        tiny_model().forward_until(Tensor(np.zeros((1, 3, 32, 32))), bad)


def test_wrong_input_shape():
    with pytest.raises(ShapeError):
        tiny_model().forward(Tensor(np.zeros((1, 3, 16, 16))))


def test_eval_mode_is_batch_independent():
    m = tiny_model(5)
    x = np.random.default_rng(5).uniform(size=(4, 3, 32, 32))
    batched = m.forward(Tensor(x), "eval").logits[-1].data
    single = np.concatenate([m.forward(Tensor(x[i:i + 1]), "eval").logits[-1].data for i in range(4)])
    np.testing.assert_allclose(batched, single, atol=1e-12)


def test_train_mode_updates_running_stats_only_in_train():
    m = tiny_model()
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 3, 32, 32)))
    before = m.blocks[0].bn.running_mean.copy()
    m.forward(x, "eval")
    np.testing.assert_array_equal(m.blocks[0].bn.running_mean, before)
    m.forward(x, "train")
    assert not np.array_equal(m.blocks[0].bn.running_mean, before)


@pytest.mark.parametrize("kw,key", [({"image_size": 16}, "image"), ({"num_classes": 1}, "classes"),
                                    ({"channels": (4, 4)}, "channels"), ({"final_pool": 0}, "final_pool")])
def test_config_validation(kw, key):
    with pytest.raises(ConfigError) as exc:
        ModelConfig(**kw)
    assert exc.value.key == key


def test_checkpoint_round_trip(tmp_path):
    with T.precision("float32"):
        m = model_new(ModelConfig(image_size=32, channels=TINY_CHANNELS, final_pool=2), seed=9)
        m.forward(Tensor(np.random.default_rng(0).uniform(size=(2, 3, 32, 32)).astype(np.float32)), "train")
        m.meta["alpha"] = 0.3
        path = tmp_path / "m.egtc"
        save_checkpoint(m, path)
        back = load_checkpoint(path)
    assert back.config == m.config
    assert back.meta == {"alpha": 0.3}
    for (n, p), q in zip(m.named_parameters().items(), back.parameters()):
        assert p.data.tobytes() == q.data.tobytes(), n
    for b1, b2 in zip(m.blocks, back.blocks):
        assert b1.bn.running_var.tobytes() == b2.bn.running_var.tobytes()
    save_checkpoint(back, tmp_path / "again.egtc")
    assert (tmp_path / "again.egtc").read_bytes() == path.read_bytes()


def test_load_non_checkpoint(tmp_path):
    from egt import container
    container.save(tmp_path / "x.egtc", {"foo": np.zeros(2, np.float32)})
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "x.egtc")
