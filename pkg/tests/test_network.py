import copy

import numpy as np
import pytest

from voltcontrol.errors import CaseError
from voltcontrol.network import BusKind, ShuntKind, build_admittance, case_hash, load_case, parse_case, serialize_case, validate


def test_reference_case_layout(reference_net):
    net = reference_net
    assert net.n_bus == 21
    assert len(net.branches) == 26
    assert len(net.generators) == 4
    assert len(net.shunts) == 5
    assert len(net.wind_parks) == 4
    assert net.slack_bus == 0
    assert [a.id for a in net.areas] == [1, 2]
    assert net.bus_by_name("B5").is_pilot
    assert net.area(2).pilot_bus == net.bus_by_name("B14").id
    assert net.generators_in_area(1) == [0, 1]
    assert net.generators_in_area(2) == [2, 3]
    assert {s.kind for s in net.shunts} == {ShuntKind.SVC, ShuntKind.STATCOM}
    assert validate(net) == []


def test_generator_label(reference_net):
    assert reference_net.generator_label(2) == "G3 (bus B12)"


def test_serialize_round_trip_keeps_hash(reference_net):
    again = parse_case(serialize_case(reference_net))
    assert again == reference_net
    assert case_hash(again) == case_hash(reference_net)


def test_hash_changes_with_data(two_bus_raw, case_from):
    raw = copy.deepcopy(two_bus_raw)
    a = case_from(raw)
    raw["loads"][0]["p_mw"] = 51.0
    b = case_from(raw)
    assert case_hash(a) != case_hash(b)


def test_syntax_error_reports_line():
    with pytest.raises(CaseError) as exc:
        parse_case('{\n  "buses": [\n  }')
    assert exc.value.line is not None
    assert str(exc.value).startswith("line ")


def test_unknown_key_rejected(two_bus_raw, case_from):
    two_bus_raw["buses"][0]["colour"] = "red"
    with pytest.raises(CaseError, match="unknown key"):
        case_from(two_bus_raw)


def test_missing_key_rejected(two_bus_raw, case_from):
    del two_bus_raw["branches"][0]["x"]
    with pytest.raises(CaseError, match="missing key"):
        case_from(two_bus_raw)


def test_unknown_bus_reference(two_bus_raw, case_from):
    two_bus_raw["loads"][0]["bus"] = 7
    with pytest.raises(CaseError, match="unknown bus 7"):
        case_from(two_bus_raw)


def test_missing_file_is_case_error(tmp_path):
    with pytest.raises(CaseError):
        load_case(tmp_path / "nope.case")


@pytest.mark.parametrize(
    "edit, message",
    [
        (lambda raw: raw["buses"][1].update(kind="slack"), "exactly one slack"),
        (lambda raw: raw["branches"][0].update(x=0.0), "reactance"),
        (lambda raw: raw["generators"][0].update(alpha=0.9), "alpha sum"),
        (lambda raw: raw["generators"][0].update(p0_mw=500.0), "p0 outside"),
        (lambda raw: raw["buses"][0].update(is_pilot=True), "multiple pilots"),
        (lambda raw: raw["buses"][1].update(v_min=1.2), "voltage bounds"),
    ],
)
def test_validation_violations(two_bus_raw, case_from, edit, message):
    edit(two_bus_raw)
    with pytest.raises(CaseError) as exc:
        case_from(two_bus_raw)
    assert any(message in v for v in exc.value.violations)


def test_unreachable_bus(two_bus_raw, case_from):
    two_bus_raw["buses"].append({"id": 2, "name": "B3", "base_kv": 132.0, "kind": "pq", "area": 1})
    two_bus_raw["areas"][0]["buses"].append(2)
    with pytest.raises(CaseError) as exc:
        case_from(two_bus_raw)
    assert "bus 2 unreachable from slack" in exc.value.violations


def test_generator_at_pq_bus(two_bus_raw, case_from):
    two_bus_raw["generators"][0]["bus"] = 1
    with pytest.raises(CaseError) as exc:
        case_from(two_bus_raw)
    assert any("located at PQ bus" in v for v in exc.value.violations)


def test_admittance_symmetric_without_taps(reference_net):
    adm = build_admittance(reference_net)
    assert adm.dimension == 21
    assert abs(adm.ybus - adm.ybus.T).max() < 1e-12
    # row sums equal the pi shunt legs
    row_sum = np.asarray(adm.ybus.sum(axis=1)).ravel()
    np.testing.assert_allclose(row_sum, adm.shunt, atol=1e-12)


def test_admittance_two_bus_values(two_bus_net):
    y = build_admittance(two_bus_net).ybus.toarray()
    np.testing.assert_allclose(y, np.array([[-10j, 10j], [10j, -10j]]), atol=1e-12)


def test_off_nominal_tap_breaks_symmetry_only_in_diagonal(two_bus_raw, case_from):
    two_bus_raw["branches"][0]["tap"] = 1.05
    y = build_admittance(case_from(two_bus_raw)).ybus.toarray()
    assert y[0, 1] == pytest.approx(y[1, 0])
    assert y[0, 0] == pytest.approx(-10j / 1.05**2)
    assert y[1, 1] == pytest.approx(-10j)


def test_bus_ids_by_kind(reference_net):
    assert reference_net.bus_ids(BusKind.PV).tolist() == [6, 11, 17]
