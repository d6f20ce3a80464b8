import json

import numpy as np
import pytest

from model.autodiff import parameter
from utils.cache_manager import ArtifactCache, case_set_hash
from utils.checkpoint import RunManifest, load_parameters, parameter_hash, require_file, save_parameters
from utils.error_handler import (
    ClassifiedError, ConfigError, DataFormatError, DatasetIntegrityError, DimensionError, ErrorType,
    MissingArtifactError, StorageError,
)
from utils.file_utils import DirectoryLock, atomic_write, hash_json, read_json
from utils.logger import get_structured_logger, init_structured_logger


def _params():
    return {"w": parameter(np.array([[0.1, 1.0 / 3.0], [2.5e-17, -4.0]])), "b": parameter(np.array([np.pi]))}


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    params = _params()
    path = tmp_path / "params.json"
    digest = save_parameters(str(path), params, {"hidden_size": 2})
    target = {"w": parameter(np.zeros((2, 2))), "b": parameter(np.zeros(1))}
    meta = load_parameters(str(path), target)
    assert meta == {"hidden_size": 2}
    assert parameter_hash(target) == digest
    assert np.array_equal(target["w"].data, params["w"].data)


def test_checkpoint_shape_and_name_checks(tmp_path):
    path = tmp_path / "params.json"
    save_parameters(str(path), _params())
    with pytest.raises(DimensionError):
        load_parameters(str(path), {"w": parameter(np.zeros((3, 2))), "b": parameter(np.zeros(1))})
    with pytest.raises(DataFormatError):
        load_parameters(str(path), {"w": parameter(np.zeros((2, 2))), "extra": parameter(np.zeros(1))})
    with pytest.raises(MissingArtifactError) as info:
        load_parameters(str(tmp_path / "absent.json"), _params(), producer="train-base")
    assert info.value.producer == "train-base"


def test_checkpoint_rejects_foreign_json(tmp_path):
    path = tmp_path / "other.json"
    path.write_text(json.dumps({"format": "something-else"}), encoding="utf-8")
    with pytest.raises(DataFormatError):
        load_parameters(str(path), _params())


def test_parameter_hash_depends_on_values_and_names():
    a, b = _params(), _params()
    assert parameter_hash(a) == parameter_hash(b)
    b["w"].data[0, 0] += 1e-12
    assert parameter_hash(a) != parameter_hash(b)
    assert parameter_hash({"x": a["b"]}) != parameter_hash({"y": a["b"]})


def test_run_manifest_persists_phases(tmp_path):
    path = tmp_path / "manifest.json"
    manifest = RunManifest(str(path))
    manifest.mark_phase("train-base", 1.5, 12, {"seed": 101})
    manifest.record_parameters("base", "base.json", "abc")
    manifest.add_report("report.md")
    manifest.add_report("report.md")
    reloaded = RunManifest(str(path))
    assert reloaded.phase("train-base")["gradient_updates"] == 12
    assert reloaded.phase("train-base")["seed"] == 101
    assert reloaded.parameter_hash("base") == "abc"
    assert reloaded.get("reports") == ["report.md"]
    assert reloaded.phase("adapt-eval") is None


def test_run_manifest_survives_corrupt_file(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text("{broken", encoding="utf-8")
    manifest = RunManifest(str(path))
    assert manifest.get("phases") == {}


def test_require_file(tmp_path):
    with pytest.raises(MissingArtifactError) as info:
        require_file(tmp_path / "corpus", "gen-data")
    assert "gen-data" in str(info.value)
    (tmp_path / "x").write_text("1", encoding="utf-8")
    assert require_file(tmp_path / "x", "gen-data") == tmp_path / "x"


def test_artifact_cache_keys_on_snapshot_and_cases(tmp_path):
    cache = ArtifactCache(str(tmp_path / "cache"))
    cases = case_set_hash(["a", "b"])
    assert cases != case_set_hash(["b", "a"])
    assert cache.get("memory", "snap1", cases) is None
    cache.put("memory", "snap1", cases, {"entries": [1, 2]})
    assert cache.get("memory", "snap1", cases) == {"entries": [1, 2]}
    assert cache.get("memory", "snap2", cases) is None
    assert cache.get("gtm", "snap1", cases) is None
    assert cache.stats() == {"entries": 1, "hits": 1, "misses": 3}

    reopened = ArtifactCache(str(tmp_path / "cache"))
    assert reopened.get("memory", "snap1", cases) == {"entries": [1, 2]}
    assert reopened.invalidate("snap1") == 1
    assert reopened.get("memory", "snap1", cases) is None
    assert reopened.invalidate("snap1") == 0


def test_artifact_cache_drops_entries_without_file(tmp_path):
    cache = ArtifactCache(str(tmp_path))
    path = cache.put("index", "s", "c", {"items": []})
    path.unlink()
    assert cache.get("index", "s", "c") is None
    assert cache.stats()["entries"] == 0


def test_directory_lock_is_exclusive(tmp_path):
    with DirectoryLock(tmp_path):
        with pytest.raises(StorageError):
            DirectoryLock(tmp_path).acquire()
    with DirectoryLock(tmp_path):
        pass


def test_atomic_write_and_hash_json(tmp_path):
    path = tmp_path / "nested" / "file.json"
    atomic_write(b'{"a": 1}', path)
    assert read_json(path) == {"a": 1}
    assert not (tmp_path / "nested" / "file.json.tmp").exists()
    assert hash_json({"a": 1, "b": 2}) == hash_json({"b": 2, "a": 1})


def test_classified_errors_carry_their_type():
    err = DatasetIntegrityError("gold fails")
    assert isinstance(err, DataFormatError) and isinstance(err, ClassifiedError)
    assert err.error_type == ErrorType.DATA_ERROR
    assert str(err) == "[data_error] gold fails"
    assert ConfigError("x", original_error=ValueError("y")).to_dict()["original_error"] == "y"
    assert "run `main.py gen-data` first" in MissingArtifactError("no corpus", producer="gen-data").message


def test_structured_logger_writes_json_records(tmp_path):
    log = init_structured_logger("structcbr-test", str(tmp_path))
    try:
        assert get_structured_logger() is log
        log.info("phase done", {"phase": "train-base", "updates": 3})
        log.info("plain line")
    finally:
        log.close()
    records = [json.loads(line) for line in (tmp_path / "app.json.log").read_text(encoding="utf-8").splitlines()]
    assert len(records) == 1
    assert records[0]["phase"] == "train-base" and records[0]["level"] == "INFO"
    assert "plain line" in (tmp_path / "app.log").read_text(encoding="utf-8")
