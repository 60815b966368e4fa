import pytest

from pace import config as C


def test_defaults_are_desk_scale():
    cfg = C.parse("")
    assert (cfg.num_classes, cfg.images_per_class, cfg.seed) == (4, 500, 42)
    assert (cfg.num_concepts, cfg.embed_dim, cfg.tau, cfg.pace_epochs) == (4, 8, 95.0, 40)
    assert (cfg.bb_epochs, cfg.bb_batch_size, cfg.bb_weight_decay) == (20, 64, 5e-5)
    assert (cfg.pace_batch_size, cfg.pace_weight_decay, cfg.rho) == (32, 0.1, 5)


def test_parse_values_and_comments():
    cfg = C.parse("# header\nnum_concepts = 10  # paper value\nembed_dim=32\n\n"
                  "onehot_target = yes\nce_form = plain\nworkdir = /tmp/x\n")
    assert cfg.num_concepts == 10 and cfg.embed_dim == 32
    assert cfg.onehot_target is True and cfg.ce_form == "plain"
    assert cfg.hyper().onehot_target and cfg.explainer_config().num_concepts == 10


def test_render_round_trips():
    cfg = C.parse("tau = 90\ngamma = 1000\neps = 1e-7\n")
    assert C.parse(C.render(cfg)) == cfg


@pytest.mark.parametrize("text, key", [
    ("bogus = 1", "bogus"),
    ("tau = 0", "tau"),
    ("tau = abc", "tau"),
    ("num_classes = 1", "num_classes"),
    ("ce_form = softmax", "ce_form"),
    ("pace_learning_rate = -1", "pace_learning_rate"),
    ("onehot_target = maybe", "onehot_target"),
    ("eps = nan", "eps"),
    ("rho = 2\nrho = 3", "rho"),
])
def test_errors_name_the_key(text, key):
    with pytest.raises(C.ConfigError, match=key):
        C.parse(text)


def test_malformed_line():
    with pytest.raises(C.ConfigError, match="line 2"):
        C.parse("tau = 90\njust words\n")


def test_missing_file(tmp_path):
    with pytest.raises(C.ConfigError):
        C.load(tmp_path / "nope.cfg")


def test_sub_seeds_are_named_distinct_and_stable():
    cfg = C.parse("seed = 5")
    seeds = {n: cfg.sub_seed(n) for n in C.SEED_NAMES}
    assert len(set(seeds.values())) == len(seeds)
    assert seeds == {n: C.parse("seed = 5").sub_seed(n) for n in C.SEED_NAMES}
    assert cfg.sub_seed("bb") != C.parse("seed = 6").sub_seed("bb")
    assert cfg.blackbox_config().seed == seeds["bb"]
    assert cfg.explainer_config().seed == seeds["pace"]
