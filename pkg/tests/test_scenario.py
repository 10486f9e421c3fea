import pytest
from hypothesis import given, strategies as st

from osg.scenario import (
    CATALOG_IDS, ConcreteScenario, DimensionError, ParameterSpec, ScenarioParseError,
    ScenarioValidationError, builtin_catalog, catalog_entry, check_concrete, clamp_to_box,
    load_scenario, parse_scenario_config, serialize_scenario_config,
)

ONE_PARAM = """
id = "T"
map_template = "highway2"

[[parameter]]
name = "x"
lower = 0.0
upper = 10.0

[[actor]]
role = "ego"
route = "lane0"
behavior = "idm_ego"
"""


@pytest.fixture
def box10():
    return parse_scenario_config(ONE_PARAM)


def test_catalog_has_the_six_types():
    cat = builtin_catalog()
    assert [ls.id for ls in cat] == list(CATALOG_IDS)
    assert {ls.id for ls in cat} == {"FB", "CutIn1", "CutIn2", "OVTP", "NJLT", "NJRT"}


def test_cutin2_has_one_more_npc_than_cutin1():
    assert len(catalog_entry("CutIn2").npcs) == len(catalog_entry("CutIn1").npcs) + 1


@pytest.mark.parametrize("ls", builtin_catalog(), ids=lambda ls: ls.id)
def test_catalog_ranges_and_timing(ls):
    assert all(p.lower <= p.upper for p in ls.parameters)
    assert ls.horizon_s == 20.0 and ls.dt_s == 0.1 and ls.n_steps == 200
    assert sum(a.role == "ego" for a in ls.actors) == 1


@pytest.mark.parametrize("sid,dim", [("FB", 5), ("CutIn1", 6), ("CutIn2", 8),
                                     ("OVTP", 4), ("NJLT", 4), ("NJRT", 4)])
def test_catalog_dimensions(sid, dim):
    assert catalog_entry(sid).dim == dim


def test_catalog_bounds_table():
    fb = catalog_entry("FB")
    assert [(p.name, p.lower, p.upper) for p in fb.parameters] == [
        ("ego_init_speed", 10, 30), ("npc_init_gap", 10, 60), ("npc_init_speed", 10, 30),
        ("brake_trigger_time", 1, 8), ("brake_decel", 2, 9)]
    c2 = catalog_entry("CutIn2")
    assert c2.names[:6] == catalog_entry("CutIn1").names
    assert [(p.lower, p.upper) for p in c2.parameters[6:]] == [(-40, 0), (10, 30)]


def test_parse_cutin1_document():
    text = serialize_scenario_config(catalog_entry("CutIn1"))
    assert parse_scenario_config(text).dim == 6


def test_inverted_range_names_the_parameter():
    bad = ONE_PARAM.replace('name = "x"', 'name = "npc_speed"').replace(
        "lower = 0.0", "lower = 30.0")
    with pytest.raises(ScenarioValidationError, match="npc_speed"):
        parse_scenario_config(bad)


@pytest.mark.parametrize("text", ["", "   \n"])
def test_empty_document_is_a_parse_error(text):
    with pytest.raises(ScenarioParseError):
        parse_scenario_config(text)


def test_malformed_document_is_a_parse_error():
    with pytest.raises(ScenarioParseError):
        parse_scenario_config("id = [unclosed")


def test_validation_rejects_bad_structure():
    with pytest.raises(ScenarioValidationError, match="duplicate"):
        parse_scenario_config(ONE_PARAM + ONE_PARAM[ONE_PARAM.index("[[parameter]]"):
                                                    ONE_PARAM.index("[[actor]]")])
    with pytest.raises(ScenarioValidationError, match="route"):
        parse_scenario_config(ONE_PARAM.replace('"lane0"', '"lane7"'))
    with pytest.raises(ScenarioValidationError, match="integer"):
        parse_scenario_config("horizon_s = 1.05\n" + ONE_PARAM)
    with pytest.raises(ScenarioValidationError, match="ego"):
        parse_scenario_config(ONE_PARAM.replace('role = "ego"', 'role = "npc"'))


def test_parameter_spec_rejects_inverted_range():
    with pytest.raises(ScenarioValidationError):
        ParameterSpec("a", 2.0, 1.0)


@pytest.mark.parametrize("value,expected", [(12, 10), (5, 5), (-3, 0)])
def test_clamp_to_box(box10, value, expected):
    assert clamp_to_box(box10, [value]).values == (expected,)


def test_clamp_dimension_mismatch(box10):
    with pytest.raises(DimensionError):
        clamp_to_box(box10, [1.0, 2.0])


@given(st.lists(st.floats(-1e6, 1e6), min_size=6, max_size=6))
def test_clamp_is_idempotent_and_in_box(values):
    ls = catalog_entry("CutIn1")
    once = clamp_to_box(ls, values)
    assert clamp_to_box(ls, once.values) == once
    check_concrete(ls, once)


def test_check_concrete_rejects_out_of_box(box10):
    with pytest.raises(ScenarioValidationError):
        check_concrete(box10, ConcreteScenario("T", (11.0,)))
    with pytest.raises(DimensionError):
        check_concrete(box10, ConcreteScenario("T", (1.0, 2.0)))


@pytest.mark.parametrize("ls", builtin_catalog(), ids=lambda ls: ls.id)
def test_round_trip(ls):
    assert parse_scenario_config(serialize_scenario_config(ls)) == ls


def test_catalog_is_deterministic():
    a = [serialize_scenario_config(ls) for ls in builtin_catalog()]
    b = [serialize_scenario_config(ls) for ls in builtin_catalog()]
    assert a == b


def test_load_scenario_from_id_and_path(tmp_path):
    path = tmp_path / "t.toml"
    path.write_text(ONE_PARAM)
    assert load_scenario(str(path)).id == "T"
    assert load_scenario("NJRT").id == "NJRT"
    with pytest.raises(KeyError):
        catalog_entry("nope")
