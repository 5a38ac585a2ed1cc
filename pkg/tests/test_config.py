import pytest

from config import ConfigError, RunConfig, apply_setting, load_run_config, load_scene_spec, parse_config_text
from synth import CAR, ROAD, SKY, suite_scene

def test_defaults():
    cfg = load_run_config()
    assert cfg.train.steps == 2000 and cfg.decoder.seed_threshold == 0.5
    assert cfg.train.loss.variant == 'hierarchical' and cfg.misc.enable_console_colors

def test_parse_sections_and_top_keys():
    cfg = parse_config_text("""
seed_threshold = 0.6   # decoder, unambiguous
gamma = 4

[train]
steps = 50
init = "random"

[loss]
vq_style = no
support_margin = none

[thomson]
k = 7

[misc]
enable_console_colors = false
""")
    assert cfg.decoder.seed_threshold == 0.6
    assert cfg.train.loss.gamma == 4.0
    assert cfg.train.steps == 50 and cfg.train.init == 'random'
    assert cfg.train.loss.vq_style is False and cfg.train.loss.support_margin is None
    assert cfg.thomson.k == 7 and cfg.thomson.steps == 2000
    assert cfg.misc.enable_console_colors is False

def test_ambiguous_key_needs_a_section():
    with pytest.raises(ConfigError, match='ambiguous'):
        parse_config_text("steps = 10")
    cfg = RunConfig()
    apply_setting(cfg, 'thomson.steps', '10')
    assert cfg.thomson.steps == 10 and cfg.train.steps == 2000

@pytest.mark.parametrize('text', [
    "no_such_key = 1",
    "[decoder]\ngamma = 1",
    "[render]\nx = 1",
    "[decoder]\npool_size = three",
    "[loss]\nvq_style = maybe",
    "[train]\nloss = x",
    "[train\nsteps = 1",
])
def test_bad_config_text(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)

def test_overrides_apply_after_the_file(tmp_path):
    path = tmp_path / 'run.ini'
    path.write_text("[train]\nsteps = 30\nrng_seed = 2\n")
    cfg = load_run_config(str(path), ['train.steps=40', 'variant=split'])
    assert cfg.train.steps == 40 and cfg.train.rng_seed == 2
    assert cfg.train.loss.variant == 'split'

def test_load_run_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / 'missing.ini'))
    with pytest.raises(ConfigError, match='key=value'):
        load_run_config(None, ['steps'])
    with pytest.raises(ConfigError, match='seed_threshold'):
        load_run_config(None, ['seed_threshold=1.5'])

def test_scene_spec_file(tmp_path):
    path = tmp_path / 'scene.ini'
    path.write_text("""
[scene]
height = 20
width = 30
size_min = 0.1
size_max = 0.2
avoid_overlap = yes
rng_seed = 5

[bands]
0 = 0.4
2 = 0.6

[things]
3 = 1, 2, rectangle
""")
    spec = load_scene_spec(str(path))
    assert (spec.height, spec.width, spec.rng_seed) == (20, 30, 5)
    assert spec.bands == ((SKY, 0.4), (ROAD, 0.6))
    assert spec.things[0].class_id == CAR and spec.things[0].shape == 'rectangle'
    assert spec.avoid_overlap and spec.size_range == (0.1, 0.2)

def test_scene_spec_from_suite(tmp_path):
    path = tmp_path / 'scene.ini'
    path.write_text("[scene]\nsuite = tiny\nrng_seed = 9\n")
    spec = load_scene_spec(str(path))
    assert spec.rng_seed == 9 and spec.height == suite_scene('tiny').height

@pytest.mark.parametrize('text', [
    "[scene]\nheight = 5\nwidth = 5\n[bands]\n0 = 0.5\n",
    "[scene]\nheight = 5\nwidth = 5\n[bands]\n0 = 1\n[things]\n3 = 1\n",
    "[scene]\nheight = five\n",
])
def test_bad_scene_spec(tmp_path, text):
    path = tmp_path / 'scene.ini'
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_scene_spec(str(path))
    with pytest.raises(ConfigError):
        load_scene_spec(str(tmp_path / 'missing.ini'))
