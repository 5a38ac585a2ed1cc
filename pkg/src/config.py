from __future__ import annotations
import os
import configparser
import dataclasses
from dataclasses import dataclass, field, replace

from console import log
from core import HleError
from decoder import DecoderConfig
from embed_model import LossConfig
from synth import SceneSpec, ThingSpec, suite_scene
from thomson import ThomsonConfig
from trainer import TrainConfig

TOP_SECTION = '__top__'
SECTIONS = ('train', 'loss', 'decoder', 'thomson', 'misc')

class ConfigError(HleError):
    pass

@dataclass
class MiscConfig:
    enable_console_colors: bool = True

@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    thomson: ThomsonConfig = field(default_factory=ThomsonConfig)
    misc: MiscConfig = field(default_factory=MiscConfig)

    def section(self, name: str):
        """ the config object behind an ini section """
        if name == 'loss':
            return self.train.loss
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}], expected one of {list(SECTIONS)}")
        return getattr(self, name)

    def validate(self) -> list[str]:
        return self.train.validate() + self.decoder.validate() + self.thomson.validate()


class QuoteStrippingConfigParser(configparser.ConfigParser):
    def get(self, section, option, *, raw=False, vars=None, fallback=configparser._UNSET):
        val = configparser.ConfigParser.get(self, section, option, raw=raw, vars=vars, fallback=fallback)
        return val.strip().strip('"').strip('\'') if isinstance(val, str) else val

def _new_parser() -> QuoteStrippingConfigParser:
    return QuoteStrippingConfigParser(allow_no_value=False, interpolation=None,
                                      default_section='__defaults__', inline_comment_prefixes=('#',))

_BOOLEANS = configparser.ConfigParser.BOOLEAN_STATES

def _convert(value: str, kind: str, key: str):
    """ convert by the dataclass annotation (a string under postponed evaluation) """
    text = value.strip()
    try:
        if kind == 'bool':
            if text.lower() not in _BOOLEANS:
                raise ValueError(text)
            return _BOOLEANS[text.lower()]
        if kind == 'int':
            return int(text)
        if kind == 'float':
            return float(text)
        if kind == 'float | None':
            return None if text.lower() in ('', 'none') else float(text)
        if kind == 'str':
            return text
    except ValueError:
        raise ConfigError(f"'{key}': cannot read '{value}' as {kind}") from None
    raise ConfigError(f"'{key}' cannot be set from a config file")

def _settable(obj) -> dict[str, str]:
    return {f.name: f.type for f in dataclasses.fields(obj) if f.type in ('bool', 'int', 'float', 'float | None', 'str')}

def _owners(cfg: RunConfig, key: str) -> list[str]:
    return [name for name in SECTIONS if key in _settable(cfg.section(name))]

def apply_setting(cfg: RunConfig, key: str, value: str, section: str | None = None):
    """ `key` may be 'section.key'; a bare key must belong to exactly one section """
    if section is None and '.' in key:
        section, key = key.split('.', 1)
    key = key.strip()
    if section is None:
        owners = _owners(cfg, key)
        if not owners:
            raise ConfigError(f"unknown config key '{key}'")
        if len(owners) > 1:
            raise ConfigError(f"config key '{key}' is ambiguous, put it under one of {[f'[{o}]' for o in owners]}")
        section = owners[0]
    target = cfg.section(section)
    settable = _settable(target)
    if key not in settable:
        raise ConfigError(f"unknown config key '{key}' in [{section}]")
    setattr(target, key, _convert(value, settable[key], key))
    log.debug(f"config [{section}] {key} = {getattr(target, key)!r}")

def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    """ `key = value` lines, `#` comments; keys before any section header resolve by name """
    cfg = cfg or RunConfig()
    parser = _new_parser()
    try:
        parser.read_string(f"[{TOP_SECTION}]\n{text}")
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    for section in parser.sections():
        if section != TOP_SECTION and section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}], expected one of {list(SECTIONS)}")
        for key in parser[section]:
            apply_setting(cfg, key, parser.get(section, key), None if section == TOP_SECTION else section)
    return cfg

def load_run_config(path: str | None = None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file '{path}' not found")
        with open(path, encoding='utf-8') as f:
            parse_config_text(f.read(), cfg)
    for item in overrides or []:
        if '=' not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, value = item.split('=', 1)
        apply_setting(cfg, key, value)
    problems = cfg.validate()
    if problems:
        raise ConfigError('; '.join(problems))
    return cfg


# -------------------------------------------------------------
#  scene spec files

def load_scene_spec(path: str) -> SceneSpec:
    """
    [scene] height, width, size_min, size_max, avoid_overlap, rng_seed, max_attempts,
            or `suite = <name>` to start from a standard suite scene
    [bands] class_id = fraction   (top to bottom)
    [things] class_id = min_count, max_count, shape
    """
    if not os.path.exists(path):
        raise ConfigError(f"scene spec '{path}' not found")
    parser = _new_parser()
    try:
        parser.read(path, encoding='utf-8')
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    scene = parser['scene'] if parser.has_section('scene') else {}
    base = suite_scene(parser.get('scene', 'suite')) if 'suite' in scene else SceneSpec(0, 0, ())
    try:
        spec = replace(
            base,
            height=parser.getint('scene', 'height', fallback=base.height),
            width=parser.getint('scene', 'width', fallback=base.width),
            size_range=(parser.getfloat('scene', 'size_min', fallback=base.size_range[0]),
                        parser.getfloat('scene', 'size_max', fallback=base.size_range[1])),
            avoid_overlap=parser.getboolean('scene', 'avoid_overlap', fallback=base.avoid_overlap),
            rng_seed=parser.getint('scene', 'rng_seed', fallback=base.rng_seed),
            max_attempts=parser.getint('scene', 'max_attempts', fallback=base.max_attempts),
        )
        if parser.has_section('bands'):
            spec = replace(spec, bands=tuple((int(k), float(parser.get('bands', k))) for k in parser['bands']))
        if parser.has_section('things'):
            things = []
            for k in parser['things']:
                parts = [p.strip() for p in parser.get('things', k).split(',')]
                if len(parts) not in (2, 3):
                    raise ConfigError(f"{path}: thing '{k}' needs 'min_count, max_count[, shape]'")
                things.append(ThingSpec(int(k), int(parts[0]), int(parts[1]), parts[2] if len(parts) == 3 else 'disc'))
            spec = replace(spec, things=tuple(things))
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None
    problems = spec.validate()
    if problems:
        raise ConfigError(f"{path}: " + '; '.join(problems))
    return spec
