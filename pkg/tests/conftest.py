import pytest

from diffctr import data as dd
from diffctr.experiments import Environment
from diffctr.losses import PretrainLossConfig
from diffctr.model import ModelConfig
from diffctr.schedule import build_schedule
from diffctr.train import RunConfig

TINY_CONFIG_TEXT = """
[run]
pretrain_epochs = 1
finetune_epochs = 1
pretrain_batch = 16
finetune_batch = 32
pretrain_lr = 0.003
finetune_lr = 0.003

[model]
embed_dim = 8
blocks = 1
heads = 2
ffn_width = 16

[schedule]
T = 50

[synthetic]
fields = 3
vocab = 6
clusters = 2
samples = 300
seed = 3
"""


@pytest.fixture
def tiny_config_path(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG_TEXT)
    return str(path)


def build_micro_env(samples=240, fields=3, vocab=6, seed=5, **run_kw):
    spec = dd.random_spec(num_fields=fields, vocab=vocab, clusters=2, samples=samples,
                          seed=seed, cross_scale=1.5, cross_density=0.2)
    ds, _ = dd.generate_synthetic(spec)
    tr, va, te = dd.split_indices(samples, seed)
    run = dict(pretrain_epochs=1, finetune_epochs=1, pretrain_batch=16,
               finetune_batch=32, pretrain_lr=3e-3, finetune_lr=3e-3)
    run.update(run_kw)
    return Environment(
        train=dd.subset(ds, tr, "train"),
        validation=dd.subset(ds, va, "validation"),
        test=dd.subset(ds, te, "test"),
        model_cfg=ModelConfig(embed_dim=8, blocks=1, heads=2, ffn_width=16, temperature=0.1),
        run_cfg=RunConfig(**run),
        schedule=build_schedule(fields, lo=0.0, hi=0.9, label_lo=0.2, horizon=50),
        loss_cfg=PretrainLossConfig(),
    )


@pytest.fixture
def micro_env():
    return build_micro_env()
