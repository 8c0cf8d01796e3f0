import pytest

from pertreason.config import Config, ConfigError


def test_defaults_and_typed_overrides():
    cfg = Config()
    assert cfg.get("engine", "history_cap") == 5
    cfg.override("engine.history_cap=0")
    cfg.override("oracle.context_boost = 0.35")
    cfg.override("evaluate.accepted_only=yes")
    assert cfg.get("engine", "history_cap") == 0
    assert cfg.get("oracle", "context_boost") == 0.35
    assert cfg.get("evaluate", "accepted_only") is True


@pytest.mark.parametrize("bad", ["engine.history_cap", "history_cap=3", "engine.nope=1", "nope.seed=1", "engine.history_cap=three", "ensemble.fourth_judge=maybe"])
def test_bad_overrides(bad):
    with pytest.raises(ConfigError):
        Config().override(bad)


def test_load_resolves_relative_paths(tmp_path):
    (tmp_path / "c.ini").write_text("[run]\nseed = 11\n[knowledge]\nsnapshot = data/edges.tsv\n")
    cfg = Config.load(tmp_path / "c.ini")
    assert cfg.get("run", "seed") == 11
    assert cfg.path("knowledge", "snapshot") == tmp_path / "data/edges.tsv"
    assert cfg.path("gateway", "script") is None


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        Config.load(tmp_path / "missing.ini")
    (tmp_path / "x.ini").write_text("[run]\nworkerz = 2\n")
    with pytest.raises(ConfigError):
        Config.load(tmp_path / "x.ini")
    (tmp_path / "y.ini").write_text("no section header\n")
    with pytest.raises(ConfigError):
        Config.load(tmp_path / "y.ini")


def test_hash_ignores_operational_and_paths():
    a, b = Config(), Config()
    base = a.hash()
    for dotted in ["run.workers=8", "gateway.max_in_flight=1", "gateway.timeout=5", "gateway.script=/x/y.json", "knowledge.snapshot=/elsewhere.tsv"]:
        b.override(dotted)
    assert b.hash() == base
    b.override("engine.history_cap=2")
    assert b.hash() != base
    c = Config()
    c.override("run.seed=1")
    assert c.hash() != base
