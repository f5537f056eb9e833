"""Contract layer: parsing, validation, round-trips, version routing."""

from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minerva import contracts
from minerva.contracts import (
    ActionType,
    BadEnumValue,
    BadFieldType,
    ContractSchema,
    DataSourceCredential,
    DuplicateSchema,
    EndpointKind,
    FieldSpec,
    MalformedDocument,
    MissingField,
    PredictRequest,
    PredictResponse,
    SchemaRegistry,
    TableRefSet,
    TrainRequest,
    UnsupportedVersion,
    parse_predict_request,
    parse_train_request,
    peek_version,
    serialize,
)
from tests.conftest import load_payload

STANDARD_TRAIN = load_payload("train_clv.json")
STANDARD_PREDICT = load_payload("predict_subjectline.json")


def predict_schemas(versions=(1,), app="subjectline"):
    registry = SchemaRegistry()
    for v in versions:
        registry.register(ContractSchema(app, EndpointKind.PREDICT_TEMPLATE, v))
    return registry.endpoint(app, EndpointKind.PREDICT_TEMPLATE)


class TestParseTrainRequest:
    def test_standard_document_parses_field_for_field(self):
        req = parse_train_request(STANDARD_TRAIN)
        assert req.account_id == 1234
        assert req.workflow_exec_id == 1
        assert req.workflow_task_id == "2"
        assert req.workflow_name == "CLV"
        assert req.model_name == "model1"
        assert req.action_type is ActionType.TRAIN
        assert req.model_input_payload == TableRefSet(("CLV_MODEL_INPUT",), ("DB1",))
        assert req.model_stored_table_name == TableRefSet(("ML_MODEL_STORED",), ("DB1",))
        assert req.model_predicted_table_name == TableRefSet(("CLV_MODEL_OUTPUT",), ("DB1",))
        assert req.server_name == "server"
        assert req.data_source == (
            DataSourceCredential("db_service2", "user2", "pwd2", "pwd2"),
        )
        assert req.sys_admin_db_url == "db_service1"
        assert req.sys_admin_db_user == "user1"
        assert req.sys_admin_encrypted_pwd == "pwd1"

    def test_action_type_predict_selects_batch_prediction(self):
        doc = json.loads(STANDARD_TRAIN)
        doc["actionType"] = "predict"
        req = parse_train_request(json.dumps(doc))
        assert req.action_type is ActionType.PREDICT

    def test_missing_model_name(self):
        doc = json.loads(STANDARD_TRAIN)
        del doc["modelName"]
        with pytest.raises(MissingField) as err:
            parse_train_request(json.dumps(doc))
        assert err.value.path == "modelName"
        assert err.value.code == "MissingField"

    def test_unknown_field_is_ignored_and_reported(self):
        doc = json.loads(STANDARD_TRAIN)
        doc["futureFlag"] = True
        seen = []
        req = parse_train_request(json.dumps(doc), on_unknown_field=seen.append)
        assert req == parse_train_request(STANDARD_TRAIN)
        assert seen == ["futureFlag"]

    def test_bad_action_type(self):
        doc = json.loads(STANDARD_TRAIN)
        doc["actionType"] = "evaluate"
        with pytest.raises(BadEnumValue) as err:
            parse_train_request(json.dumps(doc))
        assert err.value.path == "actionType"

    def test_negative_account_id(self):
        doc = json.loads(STANDARD_TRAIN)
        doc["accountId"] = -1
        with pytest.raises(BadFieldType):
            parse_train_request(json.dumps(doc))

    def test_boolean_is_not_an_integer(self):
        doc = json.loads(STANDARD_TRAIN)
        doc["accountId"] = True
        with pytest.raises(BadFieldType):
            parse_train_request(json.dumps(doc))

    def test_mismatched_table_ref_lengths(self):
        doc = json.loads(STANDARD_TRAIN)
        doc["modelInputPayload"] = {"tableNames": ["A", "B"], "dbNames": ["DB1"]}
        with pytest.raises(BadFieldType) as err:
            parse_train_request(json.dumps(doc))
        assert err.value.path == "modelInputPayload"

    def test_credential_missing_field(self):
        doc = json.loads(STANDARD_TRAIN)
        del doc["dataSource"][0]["dbPassword"]
        with pytest.raises(MissingField) as err:
            parse_train_request(json.dumps(doc))
        assert err.value.path == "dataSource[0].dbPassword"

    def test_not_json(self):
        with pytest.raises(MalformedDocument):
            parse_train_request(b"this is not a document")

    def test_not_utf8(self):
        with pytest.raises(MalformedDocument):
            parse_train_request(b"\xff\xfe{}")

    def test_root_must_be_object(self):
        with pytest.raises(MalformedDocument):
            parse_train_request(b"[1,2,3]")

    def test_secret_values_cover_all_credentials(self):
        req = parse_train_request(STANDARD_TRAIN)
        assert set(req.secret_values()) == {
            "db_service2", "user2", "pwd2", "db_service1", "user1", "pwd1",
        }


class TestParsePredictRequest:
    def test_standard_document(self):
        req = parse_predict_request(STANDARD_PREDICT, predict_schemas())
        assert req.version == "1"
        assert req.account_id == "2"
        assert req.data == {"subjectline": "50% off for new socks!"}
        assert req.model_storage == {"model": "abc"}
        assert req.callback_url is None

    def test_unsupported_version(self):
        doc = json.loads(STANDARD_PREDICT)
        doc["version"] = "99"
        with pytest.raises(UnsupportedVersion) as err:
            parse_predict_request(json.dumps(doc), predict_schemas(versions=(1,)))
        assert err.value.requested == 99
        assert err.value.supported == {1}

    def test_empty_data_value_is_the_apps_concern(self):
        doc = json.loads(STANDARD_PREDICT)
        doc["data"] = {"subjectline": ""}
        req = parse_predict_request(json.dumps(doc), predict_schemas())
        assert req.data == {"subjectline": ""}

    def test_data_passes_through_unmodified(self):
        doc = json.loads(STANDARD_PREDICT)
        doc["data"] = {"nested": {"deep": [1, 2, {"x": None}]}, "weird keys  ": "ok"}
        req = parse_predict_request(json.dumps(doc), predict_schemas())
        assert req.data == doc["data"]

    def test_version_must_be_positive_integer_string(self):
        for bad in ("0", "-3", "1.5", "one", 1):
            doc = json.loads(STANDARD_PREDICT)
            doc["version"] = bad
            with pytest.raises(BadFieldType):
                parse_predict_request(json.dumps(doc), predict_schemas())

    def test_model_storage_requires_model_key(self):
        doc = json.loads(STANDARD_PREDICT)
        doc["modelStorage"] = {"other": "x"}
        with pytest.raises(MissingField) as err:
            parse_predict_request(json.dumps(doc), predict_schemas())
        assert err.value.path == "modelStorage.model"

    def test_callback_url_must_be_absolute(self):
        doc = json.loads(STANDARD_PREDICT)
        doc["callbackUrl"] = "/relative/path"
        with pytest.raises(BadFieldType):
            parse_predict_request(json.dumps(doc), predict_schemas())
        doc["callbackUrl"] = "http://127.0.0.1:9/cb"
        req = parse_predict_request(json.dumps(doc), predict_schemas())
        assert req.callback_url == "http://127.0.0.1:9/cb"

    def test_peek_version(self):
        assert peek_version(STANDARD_PREDICT) == 1


class TestSchemaRegistry:
    def test_register_two_versions(self):
        registry = SchemaRegistry()
        registry.register(ContractSchema("subjectline", EndpointKind.PREDICT_TEMPLATE, 1))
        registry.register(ContractSchema("subjectline", EndpointKind.PREDICT_TEMPLATE, 2))
        assert registry.supported_versions("subjectline", EndpointKind.PREDICT_TEMPLATE) == {1, 2}

    def test_duplicate_registration(self):
        registry = SchemaRegistry()
        schema = ContractSchema("subjectline", EndpointKind.PREDICT_TEMPLATE, 1)
        registry.register(schema)
        with pytest.raises(DuplicateSchema):
            registry.register(schema)

    def test_version_routes_to_its_own_field_specs(self):
        # v2 demands an extra framework field; only v2 payloads hit that rule
        registry = SchemaRegistry()
        registry.register(ContractSchema("app", EndpointKind.PREDICT_TEMPLATE, 1))
        v2_specs = contracts.PREDICT_FIELD_SPECS + (FieldSpec("tenantRegion", True, "string"),)
        registry.register(ContractSchema("app", EndpointKind.PREDICT_TEMPLATE, 2, v2_specs))
        schemas = registry.endpoint("app", EndpointKind.PREDICT_TEMPLATE)

        base = json.loads(STANDARD_PREDICT)
        assert parse_predict_request(json.dumps(base), schemas).version == "1"

        v2 = dict(base, version="2")
        with pytest.raises(MissingField) as err:
            parse_predict_request(json.dumps(v2), schemas)
        assert err.value.path == "tenantRegion"
        v2["tenantRegion"] = "emea"
        assert parse_predict_request(json.dumps(v2), schemas).version == "2"


class TestSerialize:
    def test_train_round_trip_identity(self):
        req = parse_train_request(STANDARD_TRAIN)
        assert parse_train_request(serialize(req)) == req

    def test_predict_response_is_total(self):
        doc = json.loads(
            serialize(PredictResponse(version="1", account_id="2", result={}, model_version_used=1))
        )
        assert doc == {"version": "1", "accountId": "2", "result": {}, "modelVersionUsed": 1}

    def test_deterministic_bytes(self):
        req = parse_train_request(STANDARD_TRAIN)
        assert serialize(req) == serialize(parse_train_request(serialize(req)))


# -- property tests ----------------------------------------------------------

_names = st.text(
    alphabet="ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789_",
    min_size=1,
    max_size=12,
)
_opaque = st.text(max_size=24)


@st.composite
def table_ref_sets(draw):
    n = draw(st.integers(min_value=1, max_value=3))
    return TableRefSet(
        tuple(draw(st.lists(_names, min_size=n, max_size=n))),
        tuple(draw(st.lists(_names, min_size=n, max_size=n))),
    )


_credentials = st.builds(DataSourceCredential, _opaque, _opaque, _opaque, _opaque)

train_requests = st.builds(
    TrainRequest,
    account_id=st.integers(min_value=0, max_value=10**9),
    workflow_exec_id=st.integers(min_value=-(10**9), max_value=10**9),
    workflow_task_id=_opaque,
    workflow_name=_names,
    model_name=_names,
    action_type=st.sampled_from(ActionType),
    model_input_payload=table_ref_sets(),
    model_stored_table_name=table_ref_sets(),
    model_predicted_table_name=table_ref_sets(),
    server_name=_opaque,
    data_source=st.lists(_credentials, max_size=3).map(tuple),
    sys_admin_db_url=_opaque,
    sys_admin_db_user=_opaque,
    sys_admin_encrypted_pwd=_opaque,
)


@settings(max_examples=1000, deadline=None)
@given(train_requests)
def test_train_round_trip_is_lossless(req):
    assert parse_train_request(serialize(req)) == req


predict_requests = st.builds(
    PredictRequest,
    version=st.integers(min_value=1, max_value=9).map(str),
    account_id=_opaque,
    data=st.dictionaries(
        _opaque, st.one_of(st.none(), st.booleans(), st.integers(), _opaque), max_size=4
    ),
    model_storage=st.fixed_dictionaries({"model": _names}),
    callback_url=st.one_of(st.none(), st.just("http://127.0.0.1:1/cb")),
)


@settings(max_examples=300, deadline=None)
@given(predict_requests)
def test_predict_round_trip_is_lossless(req):
    schemas = predict_schemas(versions=range(1, 10), app="any")
    assert parse_predict_request(serialize(req), schemas) == req


@settings(max_examples=200, deadline=None)
@given(
    st.dictionaries(
        st.text(min_size=1, max_size=10).filter(
            lambda k: k not in {s.path for s in contracts.TRAIN_FIELD_SPECS}
        ),
        st.one_of(st.none(), st.booleans(), st.integers(), _opaque, st.lists(st.integers())),
        max_size=4,
    )
)
def test_unknown_fields_never_change_the_parse(extra):
    doc = json.loads(STANDARD_TRAIN)
    doc.update(extra)
    assert parse_train_request(json.dumps(doc)) == parse_train_request(STANDARD_TRAIN)
